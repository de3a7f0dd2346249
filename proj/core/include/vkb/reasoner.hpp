#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vkb/dense_index.hpp"
#include "vkb/encoders.hpp"
#include "vkb/sparse.hpp"

namespace vkb {

struct FollowConfig {
  std::int64_t k = 100;        // retrieval beam per hop
  double temperature = 4.0;    // entity softmax temperature
  enum class Aggregation { kMax, kSum };
  Aggregation aggregation = Aggregation::kMax;
  bool tfidf_filter = true;    // gate retrieved mentions by co-occurrence
  bool binarize_cooc = false;  // treat co-occurrence weights as 1.0

  void check() const;
};

// Everything one follow step computed, kept so the backward pass can replay
// it without re-retrieving.  The retrieval support (and A/B structure) is a
// constant of the step; gradients flow through scores, not selection.
struct HopTrace {
  int hop = 0;                  // 0-based encoder index
  FeatureVec psi;               // question features
  SparseVector z_prev;          // input entity distribution
  std::vector<double> g;        // conditioned query embedding
  SparseVector retrieved;       // mention id -> raw inner product, top-K
  double shift = 0.0;           // max retrieved score
  std::int64_t shift_mention = -1;  // lowest mention id attaining it
  SparseVector expansion;       // z_prev^T A (empty when filter disabled)
  SparseVector masked;          // expansion x exp(score - shift), the survivors
  SparseVector entity_scores;   // per-entity aggregate, pre-softmax
  // For max aggregation: the mention whose value each entity score took.
  std::vector<std::int64_t> argmax_mention;
  SparseVector z_out;           // softmax(entity_scores / temperature)
};

struct FollowResult {
  SparseVector z;
  HopTrace trace;
};

struct MultiHopResult {
  FeatureVec psi;                // question features (shared by all hops)
  std::vector<SparseVector> z;   // z[0] = input, z[t] = after hop t
  std::vector<HopTrace> traces;  // one per hop
};

// Variable-hop answer: mixture over "answer now", "answer after 1 hop",
// "answer after 2 hops".
struct MixtureTrace {
  FeatureVec psi;
  std::vector<double> logits;        // mixer head outputs
  std::vector<double> pi;            // softmax(logits)
  SparseVector z0;                   // seed distribution
  std::vector<double> rescore_q;     // question rescoring embedding
  SparseVector rescore_scores;       // q . E[e] over z0's support
  SparseVector z0_rescored;          // softmax of rescore_scores
  SparseVector z_star;
};

struct MixtureResult {
  MultiHopResult hops;  // the 2-hop chain
  MixtureTrace mix;
};

struct LossResult {
  double loss = 0.0;
  SparseVector dz;       // d(loss)/d(z) on z's support
  bool zero_mass = false;  // no answer had support; loss clipped, dz zeroed
};

// Multi-answer cross entropy: -ln sum_{a in answers} z[a].  When the answer
// mass is exactly zero the loss is clipped at -ln(1e-12) and the gradient
// zeroed (flagged), so a training loop can skip the example.
LossResult loss_and_grad(const SparseVector& z, std::span<const std::int64_t> answers);

// One ranked answer: entity id and probability.
struct RankedEntity {
  std::int64_t entity = 0;
  double score = 0.0;
};

struct QueryResult {
  SparseVector final;
  std::vector<SparseVector> hop_distributions;  // excludes the seed
  std::vector<RankedEntity> ranked;             // score desc, ties to lower id
  std::vector<double> mixture_weights;          // empty unless mixture ran
};

std::vector<RankedEntity> rank_entities(const SparseVector& z, std::int64_t limit = 0);

// Read-only reasoning engine over a frozen index and co-occurrence matrices.
// A is |E| x |M|, B is |M| x |E|.
class Reasoner {
 public:
  Reasoner(const DenseMentionIndex& index, const RaggedMatrix& cooc,
           const RaggedMatrix& coref, const Encoders& encoders);

  // One differentiable follow step:
  //   g        = encode_query(psi, hop) + sum_e z_prev[e] E[e]
  //   retrieved= top-K mention inner products against g
  //   rel_m    = exp(s_m - max s)            (over the retrieved set)
  //   masked   = (z_prev^T A) x rel          (or rel alone without filter)
  //   S_e      = max or sum of masked over entity e's mentions (via B)
  //   z_out    = softmax(S / temperature)    (over S's support)
  // Throws EmptyResultError when no retrieved mention survives the filter.
  FollowResult follow(const SparseVector& z_prev, const FeatureVec& psi, int hop,
                      const FollowConfig& config) const;

  // Chains `hops` follow steps from z0.
  MultiHopResult multi_hop(const std::string& question, const SparseVector& z0, int hops,
                           const FollowConfig& config) const;

  // Runs the 2-hop chain and mixes {rescored z0, z1, z2} with
  // question-dependent weights.
  MixtureResult mixture(const std::string& question, const SparseVector& z0,
                        const FollowConfig& config) const;

  // Backward through one follow step.  `upstream` is d(loss)/d(z_out) on
  // z_out's support.  Accumulates query-side parameter gradients and returns
  // d(loss)/d(z_prev) (expansion + conditioning paths) on z_prev's support.
  SparseVector follow_backward(const HopTrace& trace, const SparseVector& upstream,
                               const FollowConfig& config, EncoderGrads& grads) const;

  // Backward through a whole chain; dz_final is d(loss)/d(z[T]).
  void multi_hop_backward(const MultiHopResult& result, const SparseVector& dz_final,
                          const FollowConfig& config, EncoderGrads& grads) const;

  void mixture_backward(const MixtureResult& result, const SparseVector& dz_star,
                        const FollowConfig& config, EncoderGrads& grads) const;

  // Convenience inference entry point: multi-hop when `hops` >= 1, mixture
  // when `hops` == 0.
  QueryResult run(const std::string& question, const SparseVector& z0, int hops,
                  const FollowConfig& config) const;

  const DenseMentionIndex& index() const { return index_; }
  const Encoders& encoders() const { return encoders_; }

 private:
  const DenseMentionIndex& index_;
  const RaggedMatrix& cooc_;   // entity -> mention
  const RaggedMatrix& coref_;  // mention -> entity
  const Encoders& encoders_;
};

}  // namespace vkb
