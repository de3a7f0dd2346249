#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "vkb/corpus.hpp"

namespace vkb {

// Dense tensor, f64 in memory.  Checkpoints store f32, so one save/load
// round trip quantizes parameters; all arithmetic stays f64.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  static Tensor zeros(std::vector<std::int64_t> shape);
  std::int64_t numel() const;
  std::int64_t rows() const { return shape.at(0); }
  std::int64_t cols() const { return shape.size() > 1 ? shape.at(1) : 1; }
  std::span<double> row(std::int64_t r) {
    return {data.data() + r * cols(), static_cast<std::size_t>(cols())};
  }
  std::span<const double> row(std::int64_t r) const {
    return {data.data() + r * cols(), static_cast<std::size_t>(cols())};
  }
};

// Sparse feature vector produced by the hashed featurizers: sorted unique
// indices with occurrence counts.
struct FeatureVec {
  std::int64_t dim = 0;
  std::vector<std::int64_t> indices;
  std::vector<double> counts;
  std::int64_t nnz() const { return static_cast<std::int64_t>(indices.size()); }
};

// The answer mixture combines distributions after 0, 1, and 2 hops.
inline constexpr int kMixComponents = 3;

struct EncoderConfig {
  // Hash buckets per feature block (power of two).  Mention features use 3
  // blocks (span, left context, right context); question features use
  // 1 + max_query_segments blocks (one global, one per comma segment).
  std::int64_t feature_dim = std::int64_t{1} << 13;
  std::int64_t p = 64;        // embedding width; first/second halves score span starts/ends
  int context_window = 8;     // tokens of context on each side of a span
  int max_hops = 3;           // number of per-hop question encoders
  std::int64_t word_buckets = std::int64_t{1} << 13;  // hashed word table rows
  int max_query_segments = 4;
  std::uint64_t hash_seed = 0xfea7a11ceULL;
  std::uint64_t init_seed = 42;

  std::int64_t mention_feature_dim() const { return 3 * feature_dim; }
  std::int64_t query_feature_dim() const {
    return (1 + static_cast<std::int64_t>(max_query_segments)) * feature_dim;
  }
  void check() const;
};

// All trainable tensors.
struct EncoderParams {
  Tensor mention_proj;              // [3*feature_dim, p]
  std::vector<Tensor> query_proj;   // max_hops tensors, [query_feature_dim, p]
  Tensor word_table;                // [word_buckets, p]
  Tensor mixer;                     // [query_feature_dim, kMixComponents]
  Tensor rescore_proj;              // [query_feature_dim, p]

  static EncoderParams init(const EncoderConfig& config);

  void save(const std::string& path, const EncoderConfig& config) const;
  // Loads and verifies the stored shapes against `config`.
  static EncoderParams load(const std::string& path, const EncoderConfig& config);

  // Fingerprint of the mention encoder (mention_proj in its f32 checkpoint
  // form, plus the feature-hash settings).  Stable across save/load; changes
  // whenever retraining would invalidate a mention index.
  std::uint64_t mention_fingerprint(const EncoderConfig& config) const;
};

// Gradient of one tensor, stored as the set of touched rows.  Logical shape
// mirrors the parameter tensor; untouched rows are zero.
struct SparseRowGrads {
  std::int64_t n_rows = 0;
  std::int64_t n_cols = 0;
  std::map<std::int64_t, std::vector<double>> rows;

  void init(std::int64_t n_rows_, std::int64_t n_cols_);
  std::vector<double>& row(std::int64_t r);
  void clear() { rows.clear(); }
  // Dense copy, for tests.
  std::vector<double> to_dense() const;
};

struct EncoderGrads {
  SparseRowGrads mention_proj;
  std::vector<SparseRowGrads> query_proj;
  SparseRowGrads word_table;
  SparseRowGrads mixer;
  SparseRowGrads rescore_proj;

  static EncoderGrads zeros_like(const EncoderParams& params);
  void clear();
};

// SGD with momentum over row-sparse gradients.
//
// Velocity rows are materialized only while they matter: every step decays
// all live rows (v <- momentum*v, plus the new gradient for touched rows)
// and applies w -= lr*v, then drops rows whose velocity has decayed below
// `purge_threshold` (max-norm).  With purge_threshold == 0 this is exactly
// dense SGD+momentum; the default purge bound changes each weight by less
// than lr*threshold/(1-momentum) in total, far below f32 checkpoint
// resolution.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum, double purge_threshold = 1e-12);

  void register_tensor(const std::string& name, Tensor* tensor);
  // Applies one update.  Gradient keys missing from the registry throw;
  // registered tensors missing from `grads` just decay.
  void step(const std::map<std::string, const SparseRowGrads*>& grads);

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  struct State {
    Tensor* tensor = nullptr;
    std::map<std::int64_t, std::vector<double>> velocity;
  };
  double lr_;
  double momentum_;
  double purge_threshold_;
  std::map<std::string, State> states_;
};

// Featurization + projection of mentions and questions, plus derived entity
// embeddings.  Owns the parameters; training code mutates them through
// params() and must call note_params_changed() so cached entity embeddings
// are refreshed.
class Encoders {
 public:
  Encoders(EncoderConfig config, EncoderParams params, const Corpus& corpus);

  const EncoderConfig& config() const { return config_; }
  const EncoderParams& params() const { return params_; }
  EncoderParams& params() { return params_; }
  void note_params_changed() { entity_matrix_dirty_ = true; }

  // --- featurizers -------------------------------------------------------
  // Mention features: hashed unigrams+bigrams of the span tokens, the
  // `context_window` tokens to the left, and to the right, each block salted
  // separately.
  FeatureVec featurize_mention(const Document& doc, const Mention& mention) const;
  // Question features: one globally salted block over all tokens plus one
  // block per comma-separated segment (salted by segment position, so "X ,
  // rel1 , rel2" and "X , rel2 , rel1" featurize differently).
  FeatureVec featurize_question(const std::string& text) const;

  // --- forward -----------------------------------------------------------
  std::vector<double> encode_mention(const FeatureVec& phi) const;
  // Per-hop question embedding (hop is 0-based, < max_hops).
  std::vector<double> encode_query(const FeatureVec& psi, int hop) const;
  // g = g_tilde + sum_e z_prev[e] * entity_embedding(e).
  std::vector<double> condition_query(std::span<const double> g_tilde,
                                      const SparseVector& z_prev) const;
  std::span<const double> entity_embedding(std::int64_t e) const;
  // Mixture head logits over hop counts 0..kMixComponents-1.
  std::vector<double> mix_logits(const FeatureVec& psi) const;
  // Entity rescoring embedding for hop-0 candidates.
  std::vector<double> rescore_query(const FeatureVec& psi) const;

  // Encodes every corpus mention, f32 row-major (index build input).
  std::vector<float> encode_all_mentions(const Corpus& corpus) const;

  // --- backward ----------------------------------------------------------
  // d(loss)/d(mention_proj) contribution from one mention: df is
  // d(loss)/d(f(m)).
  void grad_mention(const FeatureVec& phi, std::span<const double> df,
                    EncoderGrads& grads) const;
  void grad_query(const FeatureVec& psi, int hop, std::span<const double> dg,
                  EncoderGrads& grads) const;
  // Backward of condition_query for the entity-embedding term: routes dg
  // into the word table rows behind each entity in z_prev's support, and
  // (optionally) emits d(loss)/d(z_prev).
  void grad_condition(const SparseVector& z_prev, std::span<const double> dg,
                      EncoderGrads& grads, SparseVector* dz_prev) const;
  // d(loss)/d(entity_embedding(e)) -> word table rows.
  void grad_entity(std::int64_t e, std::span<const double> de, EncoderGrads& grads) const;
  void grad_mixer(const FeatureVec& psi, std::span<const double> dlogits,
                  EncoderGrads& grads) const;
  void grad_rescore(const FeatureVec& psi, std::span<const double> dg,
                    EncoderGrads& grads) const;

  std::uint64_t mention_fingerprint() const {
    return params_.mention_fingerprint(config_);
  }
  std::int64_t n_entities() const {
    return static_cast<std::int64_t>(entity_word_rows_.size());
  }

 private:
  void refresh_entity_matrix() const;
  void add_ngram_features(std::span<const std::string> tokens, std::int64_t block,
                          std::uint64_t salt,
                          std::map<std::int64_t, double>& counts) const;

  EncoderConfig config_;
  EncoderParams params_;
  std::vector<std::vector<std::int64_t>> entity_word_rows_;  // word rows per entity
  mutable std::vector<double> entity_matrix_;                // |E| * p, lazily refreshed
  mutable bool entity_matrix_dirty_ = true;
};

}  // namespace vkb
