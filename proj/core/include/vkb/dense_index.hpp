#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vkb/sparse.hpp"

namespace vkb {

enum class IndexMode : std::uint32_t {
  kExact = 0,      // brute-force scan of every vector
  kClustered = 1,  // inverted lists under k-means centroids, probe the best few
};

struct IndexConfig {
  IndexMode mode = IndexMode::kExact;
  std::int64_t n_clusters = 0;  // clustered mode only
  std::int64_t n_probe = 0;     // clusters scanned per query
  int kmeans_iters = 20;
  // Vectors used to fit the centroids; 0 means all.  Assignment always runs
  // over the full collection.
  std::int64_t train_sample = 0;
  std::uint64_t seed = 7;

  void check(std::int64_t n_vectors) const;
};

struct SearchStats {
  std::int64_t vectors_scanned = 0;
  std::int64_t clusters_probed = 0;
};

// Maximum-inner-product index over f32 vectors (one per mention).
//
// Clustered mode appends sqrt(max_norm^2 - |x|^2) to every vector before
// k-means, which equalizes norms so that inner-product neighbors coincide
// with small-angle neighbors and centroid routing stays meaningful for MIPS.
// Queries are scored against raw vectors (f64 accumulation), so reported
// scores are exact inner products regardless of mode; only the candidate set
// is approximate in clustered mode.
//
// Every tie (centroid routing, top-K scores) breaks toward the lower id, and
// scan order is fixed, so results are bit-reproducible.
class DenseMentionIndex {
 public:
  // `vectors` is row-major, n * dim entries.
  static DenseMentionIndex build(std::vector<float> vectors, std::int64_t dim,
                                 const IndexConfig& config);

  // Top-k inner products as a sparse vector over vector ids.  `query` is
  // f64; scores accumulate in f64.  In clustered mode only the probed lists
  // are scanned.  `stats`, when given, receives scan counters.
  SparseVector mips_topk(std::span<const double> query, std::int64_t k,
                         SearchStats* stats = nullptr) const;

  void save(const std::string& path) const;
  static DenseMentionIndex load(const std::string& path);

  std::int64_t size() const { return n_vectors_; }
  std::int64_t dim() const { return dim_; }
  IndexMode mode() const { return mode_; }
  std::int64_t n_clusters() const { return n_clusters_; }
  std::int64_t n_probe() const { return n_probe_; }
  std::span<const float> row(std::int64_t i) const {
    return {vectors_.data() + i * dim_, static_cast<std::size_t>(dim_)};
  }

  // Fingerprint of the encoder parameters the vectors were computed from.
  // 0 means "not recorded".  Training loops compare this against the live
  // parameters to catch silently stale indexes.
  std::uint64_t source_hash() const { return source_hash_; }
  void set_source_hash(std::uint64_t h) { source_hash_ = h; }

 private:
  void build_scan_copy();

  std::int64_t n_vectors_ = 0;
  std::int64_t dim_ = 0;
  IndexMode mode_ = IndexMode::kExact;
  std::int64_t n_clusters_ = 0;
  std::int64_t n_probe_ = 0;
  std::uint64_t source_hash_ = 0;
  std::vector<float> vectors_;       // n * dim, row-major
  std::vector<float> centroids_;     // n_clusters * (dim + 1); clustered only
  std::vector<std::int64_t> list_offsets_;  // n_clusters + 1
  std::vector<std::int64_t> list_members_;  // permutation of 0..n-1, ascending per list
  std::vector<float> scan_vectors_;  // list-major copy for contiguous probing
};

}  // namespace vkb
