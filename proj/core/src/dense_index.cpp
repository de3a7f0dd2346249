#include "vkb/dense_index.hpp"

#include <algorithm>
#include <cmath>

#include "vkb/util.hpp"

namespace vkb {

namespace {
constexpr std::uint32_t kIndexMagic = 0x4d494458;  // "MIDX"
constexpr std::uint32_t kIndexVersion = 1;

double dot_f32_f64(std::span<const float> x, std::span<const double> q) {
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += static_cast<double>(x[i]) * q[i];
  return acc;
}

// Bounded top-k accumulator ordered by (score desc, id asc).
class TopK {
 public:
  explicit TopK(std::int64_t k) : k_(static_cast<std::size_t>(k)) { heap_.reserve(k_); }

  void offer(std::int64_t id, double score) {
    if (heap_.size() < k_) {
      heap_.emplace_back(score, id);
      std::push_heap(heap_.begin(), heap_.end(), worse);
      return;
    }
    const auto& worst = heap_.front();
    if (score > worst.first || (score == worst.first && id < worst.second)) {
      std::pop_heap(heap_.begin(), heap_.end(), worse);
      heap_.back() = {score, id};
      std::push_heap(heap_.begin(), heap_.end(), worse);
    }
  }

  SparseVector finish(std::int64_t dim) {
    std::vector<std::pair<std::int64_t, double>> pairs;
    pairs.reserve(heap_.size());
    for (const auto& [score, id] : heap_) pairs.emplace_back(id, score);
    return SparseVector::from_pairs(dim, std::move(pairs));
  }

 private:
  // "a is worse than b": lower score, or equal score with higher id.  The
  // heap keeps the worst kept element at the front.
  static bool worse(const std::pair<double, std::int64_t>& a,
                    const std::pair<double, std::int64_t>& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  }

  std::size_t k_;
  std::vector<std::pair<double, std::int64_t>> heap_;
};

}  // namespace

void IndexConfig::check(std::int64_t n_vectors) const {
  if (mode == IndexMode::kExact) return;
  if (n_clusters < 1 || n_clusters > n_vectors)
    throw ConfigError("index: n_clusters must be in [1, n_vectors]");
  if (n_probe < 1 || n_probe > n_clusters)
    throw ConfigError("index: n_probe must be in [1, n_clusters]");
  if (kmeans_iters < 1) throw ConfigError("index: kmeans_iters must be >= 1");
  if (train_sample != 0 && train_sample < n_clusters)
    throw ConfigError("index: train_sample must be 0 or >= n_clusters");
}

DenseMentionIndex DenseMentionIndex::build(std::vector<float> vectors, std::int64_t dim,
                                           const IndexConfig& config) {
  if (dim <= 0) throw ContractError("index: dim must be positive");
  if (vectors.size() % static_cast<std::size_t>(dim) != 0)
    throw ContractError("index: vector buffer not a multiple of dim");
  DenseMentionIndex idx;
  idx.dim_ = dim;
  idx.n_vectors_ = static_cast<std::int64_t>(vectors.size()) / dim;
  idx.vectors_ = std::move(vectors);
  idx.mode_ = config.mode;
  config.check(idx.n_vectors_);
  if (config.mode == IndexMode::kExact) return idx;

  const std::int64_t n = idx.n_vectors_;
  const std::int64_t p = dim;
  const std::int64_t pa = p + 1;  // augmented dimensionality
  idx.n_clusters_ = config.n_clusters;
  idx.n_probe_ = config.n_probe;

  // Norm augmentation: all augmented vectors share the same norm.
  std::vector<float> norm_sq(static_cast<std::size_t>(n));
  double max_norm_sq = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t d = 0; d < p; ++d) {
      const double v = idx.vectors_[i * p + d];
      s += v * v;
    }
    norm_sq[i] = static_cast<float>(s);
    max_norm_sq = std::max(max_norm_sq, s);
  }
  auto augmented_coord = [&](std::int64_t i) -> float {
    const double rem = max_norm_sq - static_cast<double>(norm_sq[i]);
    return rem > 0.0 ? static_cast<float>(std::sqrt(rem)) : 0.0f;
  };

  // k-means on a sample (or everything), fixed iteration count.
  Rng rng(config.seed);
  std::vector<std::int64_t> train_ids;
  if (config.train_sample == 0 || config.train_sample >= n) {
    train_ids.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) train_ids[static_cast<std::size_t>(i)] = i;
  } else {
    train_ids = rng.sample_distinct(static_cast<std::size_t>(n),
                                    static_cast<std::size_t>(config.train_sample));
    std::sort(train_ids.begin(), train_ids.end());
  }

  const std::int64_t k = config.n_clusters;
  idx.centroids_.assign(static_cast<std::size_t>(k * pa), 0.0f);
  {
    std::vector<std::int64_t> picks =
        rng.sample_distinct(train_ids.size(), static_cast<std::size_t>(k));
    for (std::int64_t c = 0; c < k; ++c) {
      const std::int64_t src = train_ids[static_cast<std::size_t>(picks[c])];
      for (std::int64_t d = 0; d < p; ++d)
        idx.centroids_[c * pa + d] = idx.vectors_[src * p + d];
      idx.centroids_[c * pa + p] = augmented_coord(src);
    }
  }

  // Nearest centroid by squared L2 over augmented coords, computed as
  // ||c||^2/2 - x.c (the ||x||^2 term is constant per vector); ties go to the
  // lower cluster id (strict < keeps the first best).
  std::vector<double> centroid_half_norms(static_cast<std::size_t>(k));
  auto refresh_centroid_norms = [&] {
    for (std::int64_t c = 0; c < k; ++c) {
      const float* cent = idx.centroids_.data() + c * pa;
      double s = 0.0;
      for (std::int64_t d = 0; d < pa; ++d)
        s += static_cast<double>(cent[d]) * static_cast<double>(cent[d]);
      centroid_half_norms[static_cast<std::size_t>(c)] = 0.5 * s;
    }
  };
  refresh_centroid_norms();
  auto assign_one = [&](std::int64_t i) -> std::int64_t {
    const double aug = augmented_coord(i);
    const float* vec = idx.vectors_.data() + i * p;
    std::int64_t best = 0;
    double best_d = 0.0;
    for (std::int64_t c = 0; c < k; ++c) {
      const float* cent = idx.centroids_.data() + c * pa;
      double dot = 0.0;
      for (std::int64_t d = 0; d < p; ++d)
        dot += static_cast<double>(vec[d]) * static_cast<double>(cent[d]);
      dot += aug * static_cast<double>(cent[p]);
      const double dist = centroid_half_norms[static_cast<std::size_t>(c)] - dot;
      if (c == 0 || dist < best_d) {
        best = c;
        best_d = dist;
      }
    }
    return best;
  };

  std::vector<std::int64_t> assignment(train_ids.size());
  std::vector<double> sums(static_cast<std::size_t>(k * pa));
  std::vector<std::int64_t> counts(static_cast<std::size_t>(k));
  for (int iter = 0; iter < config.kmeans_iters; ++iter) {
    for (std::size_t t = 0; t < train_ids.size(); ++t) assignment[t] = assign_one(train_ids[t]);
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t t = 0; t < train_ids.size(); ++t) {
      const std::int64_t i = train_ids[t];
      const std::int64_t c = assignment[t];
      for (std::int64_t d = 0; d < p; ++d)
        sums[c * pa + d] += static_cast<double>(idx.vectors_[i * p + d]);
      sums[c * pa + p] += static_cast<double>(augmented_coord(i));
      ++counts[static_cast<std::size_t>(c)];
    }
    for (std::int64_t c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;  // keep stale centroid
      const double inv = 1.0 / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      for (std::int64_t d = 0; d < pa; ++d)
        idx.centroids_[c * pa + d] = static_cast<float>(sums[c * pa + d] * inv);
    }
    refresh_centroid_norms();
  }

  // Final assignment over the full collection -> inverted lists.
  std::vector<std::int64_t> full(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) full[static_cast<std::size_t>(i)] = assign_one(i);
  idx.list_offsets_.assign(static_cast<std::size_t>(k) + 1, 0);
  for (std::int64_t i = 0; i < n; ++i) ++idx.list_offsets_[full[i] + 1];
  for (std::int64_t c = 0; c < k; ++c) idx.list_offsets_[c + 1] += idx.list_offsets_[c];
  idx.list_members_.resize(static_cast<std::size_t>(n));
  std::vector<std::int64_t> cursor(idx.list_offsets_.begin(), idx.list_offsets_.end() - 1);
  for (std::int64_t i = 0; i < n; ++i) idx.list_members_[cursor[full[i]]++] = i;
  idx.build_scan_copy();
  return idx;
}

// List-major copy of the vectors so probing scans a contiguous range instead
// of gathering scattered rows.
void DenseMentionIndex::build_scan_copy() {
  if (mode_ != IndexMode::kClustered) return;
  scan_vectors_.resize(vectors_.size());
  for (std::size_t j = 0; j < list_members_.size(); ++j) {
    const float* src = vectors_.data() + list_members_[j] * dim_;
    std::copy(src, src + dim_, scan_vectors_.data() + static_cast<std::int64_t>(j) * dim_);
  }
}

SparseVector DenseMentionIndex::mips_topk(std::span<const double> query, std::int64_t k,
                                          SearchStats* stats) const {
  if (static_cast<std::int64_t>(query.size()) != dim_)
    throw ContractError("mips_topk: query dimension mismatch");
  if (k <= 0) throw ContractError("mips_topk: k must be positive");
  TopK top(k);

  if (mode_ == IndexMode::kExact) {
    for (std::int64_t i = 0; i < n_vectors_; ++i) top.offer(i, dot_f32_f64(row(i), query));
    if (stats) {
      stats->vectors_scanned += n_vectors_;
      stats->clusters_probed += 0;
    }
    return top.finish(n_vectors_);
  }

  // Rank centroids by inner product with the query (the augmented query
  // coordinate is 0, so the extra centroid coordinate does not contribute).
  std::vector<std::pair<double, std::int64_t>> ranked;
  ranked.reserve(static_cast<std::size_t>(n_clusters_));
  const std::int64_t pa = dim_ + 1;
  for (std::int64_t c = 0; c < n_clusters_; ++c) {
    std::span<const float> cent{centroids_.data() + c * pa, static_cast<std::size_t>(dim_)};
    ranked.emplace_back(dot_f32_f64(cent, query), c);
  }
  const std::int64_t probes = std::min(n_probe_, n_clusters_);
  std::partial_sort(ranked.begin(), ranked.begin() + probes, ranked.end(),
                    [](const auto& a, const auto& b) {
                      if (a.first != b.first) return a.first > b.first;
                      return a.second < b.second;
                    });

  std::int64_t scanned = 0;
  for (std::int64_t pi = 0; pi < probes; ++pi) {
    const std::int64_t c = ranked[static_cast<std::size_t>(pi)].second;
    for (std::int64_t j = list_offsets_[c]; j < list_offsets_[c + 1]; ++j) {
      std::span<const float> v{scan_vectors_.data() + j * dim_,
                               static_cast<std::size_t>(dim_)};
      top.offer(list_members_[static_cast<std::size_t>(j)], dot_f32_f64(v, query));
      ++scanned;
    }
  }
  if (stats) {
    stats->vectors_scanned += scanned;
    stats->clusters_probed += probes;
  }
  return top.finish(n_vectors_);
}

void DenseMentionIndex::save(const std::string& path) const {
  BinaryWriter w(path);
  w.write_u32(kIndexMagic);
  w.write_u32(kIndexVersion);
  w.write_u32(static_cast<std::uint32_t>(mode_));
  w.write_i64(n_vectors_);
  w.write_i64(dim_);
  w.write_u64(source_hash_);
  w.write_i64(n_clusters_);
  w.write_i64(n_probe_);
  w.write_vec(vectors_);
  if (mode_ == IndexMode::kClustered) {
    w.write_vec(centroids_);
    w.write_vec(list_offsets_);
    w.write_vec(list_members_);
  }
  w.close();
}

DenseMentionIndex DenseMentionIndex::load(const std::string& path) {
  BinaryReader r(path);
  expect_magic(r, kIndexMagic, kIndexVersion, "mention index");
  DenseMentionIndex idx;
  const std::uint32_t mode = r.read_u32();
  if (mode > 1) throw IoError("mention index: unknown mode in " + path);
  idx.mode_ = static_cast<IndexMode>(mode);
  idx.n_vectors_ = r.read_i64();
  idx.dim_ = r.read_i64();
  idx.source_hash_ = r.read_u64();
  idx.n_clusters_ = r.read_i64();
  idx.n_probe_ = r.read_i64();
  if (idx.n_vectors_ < 0 || idx.dim_ <= 0)
    throw IoError("mention index header corrupt: " + path);
  r.read_vec(idx.vectors_, static_cast<std::size_t>(idx.n_vectors_ * idx.dim_));
  if (idx.mode_ == IndexMode::kClustered) {
    r.read_vec(idx.centroids_, static_cast<std::size_t>(idx.n_clusters_ * (idx.dim_ + 1)));
    r.read_vec(idx.list_offsets_, static_cast<std::size_t>(idx.n_clusters_) + 1);
    r.read_vec(idx.list_members_, static_cast<std::size_t>(idx.n_vectors_));
    idx.build_scan_copy();
  }
  return idx;
}

}  // namespace vkb
