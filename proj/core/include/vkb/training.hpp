#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vkb/corpus.hpp"
#include "vkb/dense_index.hpp"
#include "vkb/encoders.hpp"
#include "vkb/reasoner.hpp"
#include "vkb/sparse.hpp"
#include "vkb/util.hpp"

namespace vkb {

enum class ExampleLabel : int {
  kPositive = 0,
  kSharedEntityNeg = 1,   // same query, different passage mentioning the subject
  kSharedRelationNeg = 2,  // passage expressing the same relation between other entities
  kRandomNeg = 3,
};

// One slot-filling example: the query names (subject, relation, ?) and the
// passage either contains the tail (positive, with its span(s)) or verifiably
// does not (negatives).
struct SlotFillingExample {
  std::string query;  // "<subject surface> , <relation description> , ?"
  std::int64_t doc_id = -1;
  // Inclusive token spans of the tail's mentions in the passage; empty for
  // negatives.
  std::vector<std::pair<std::int64_t, std::int64_t>> answer_spans;
  ExampleLabel label = ExampleLabel::kPositive;
  std::int64_t subject = -1;
  std::int64_t relation = -1;
  // For negatives: index of the positive they were built for; -1 otherwise.
  std::int64_t positive_index = -1;
};

// A positive with the negatives that share its softmax normalizer.
struct PretrainGroup {
  SlotFillingExample positive;
  std::vector<SlotFillingExample> negatives;
};

struct TrainConfig {
  double lr = 0.1;
  double momentum = 0.9;
  int batch_size = 8;
  int epochs = 20;
  std::uint64_t seed = 1;

  // Pretraining: how many negatives accompany each positive, and the type mix
  // (counts allocated by largest remainder over the whole set).
  int negatives_per_positive = 3;
  double mix_shared_entity = 0.4;
  double mix_shared_relation = 0.4;
  double mix_random = 0.2;

  // End-to-end: fraction of questions held out, chosen by seeded hash of the
  // question text so the split is stable across runs.
  double dev_fraction = 0.1;
  // When true, trains/evaluates the variable-hop mixture head instead of a
  // fixed-length chain.
  bool use_mixture = false;

  void check() const;
};

// One line of the training log; serialized as a JSON object per line.
struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;    // mean training loss over the epoch
  double hits1 = 0.0;   // dev Hits@1 (0 when no dev evaluation ran)
  double hits5 = 0.0;   // dev Hits@5
  double wall_ms = 0.0;
};

std::string to_json_line(const EpochMetrics& m);

// --- distant supervision ----------------------------------------------------

// Emits one positive per (triple, passage) where the subject and tail are
// co-mentioned.  When any document carries a title entity, passages are
// restricted to the subject's own article.
std::vector<SlotFillingExample> generate_pretraining_data(const KnowledgeBase& kb,
                                                          const Corpus& corpus);

// Builds `count` negatives of one type, assigning slots to positives
// round-robin.  Every emitted negative's passage is verified to contain no
// correct tail for its query: no mention of a gold tail entity and no token
// subsequence equal to a gold tail's surface form or alias.  Positives whose
// slot cannot be filled are skipped with a note in `log`.
std::vector<SlotFillingExample> make_negatives(std::span<const SlotFillingExample> positives,
                                               const KnowledgeBase& kb, const Corpus& corpus,
                                               ExampleLabel type, std::int64_t count, Rng& rng,
                                               std::vector<std::string>* log = nullptr);

// Allocates per-type negative counts from the config ratios (largest
// remainder), builds them, and groups everything by positive.
std::vector<PretrainGroup> build_pretraining_groups(
    std::span<const SlotFillingExample> positives, const KnowledgeBase& kb,
    const Corpus& corpus, const TrainConfig& config, std::vector<std::string>* log = nullptr);

// True when the passage provably lacks every entity in `gold`: none of them
// is mentioned in the document, and no gold surface form or alias appears as
// a token subsequence.  The checker negatives must pass.
bool passage_excludes(const Corpus& corpus, std::int64_t doc_id,
                      std::span<const std::int64_t> gold);

// --- pretraining --------------------------------------------------------------

// Span-scoring loss for one group.  Candidates are the entity-linked mentions
// of the positive passage plus those of every negative passage; the first and
// second halves of f(m) and of g score span starts and ends, each normalized
// separately over all candidates.  The query embedding is the hop-0 question
// encoding plus the subject's entity embedding.  Loss is the sum of the two
// negative log gold masses.  Gradients flow to the mention projection and,
// through the subject embedding, the word table; the query projection stays
// fixed in this stage.  Returns nullopt when the group has no gold candidate.
std::optional<double> span_loss_and_grad(const PretrainGroup& group, const Corpus& corpus,
                                         const Encoders& encoders, EncoderGrads* grads);

// SGD+momentum over mention projection and word table.  Returns one metrics
// line per epoch (hits fields left 0).
std::vector<EpochMetrics> pretrain_mention_encoder(std::span<const PretrainGroup> groups,
                                                   const Corpus& corpus, Encoders& encoders,
                                                   const TrainConfig& config,
                                                   std::vector<std::string>* log = nullptr);

// Encodes every mention with the current parameters, builds the index, and
// stamps it with the mention-projection fingerprint so later training can
// detect a stale index.
DenseMentionIndex freeze_and_index(const Encoders& encoders, const Corpus& corpus,
                                   const IndexConfig& config);

// --- end-to-end ---------------------------------------------------------------

// Uniform distribution over the question's seed entities.
SparseVector initial_distribution(const MultiHopQuestion& q, std::int64_t n_entities);

// True when the question lands in the dev split for this seed.
bool in_dev_split(const std::string& text, const TrainConfig& config);

struct EvalResult {
  std::int64_t n = 0;
  double hits1 = 0.0;
  double hits5 = 0.0;
  std::int64_t empty_results = 0;        // questions with no surviving support
  std::int64_t sparsity_violations = 0;  // hops where nnz(z) exceeded K
  std::vector<std::vector<RankedEntity>> rankings;  // per question
};

// Runs inference on each question (chain of q.hops steps, or the mixture when
// `use_mixture`), checking nnz(z) <= K at every hop.  An empty result retries
// once at 4x K, then counts as a miss.
EvalResult evaluate_questions(std::span<const MultiHopQuestion> questions,
                              const Reasoner& reasoner, const FollowConfig& follow,
                              bool use_mixture);

// Hits@k over ranked predictions: fraction of questions with any gold entity
// in the top k.  Empty predictions count as misses.
double hits_at_k(std::span<const std::vector<RankedEntity>> predictions,
                 std::span<const std::vector<std::int64_t>> gold, int k);

// Passage-retrieval accuracy@k: fraction of queries whose required documents
// ALL appear in the top k of the ranked document list.
double retrieval_accuracy_at_k(std::span<const std::vector<std::int64_t>> ranked_docs,
                               std::span<const std::vector<std::int64_t>> required_docs,
                               int k);

struct TrainResult {
  std::vector<EpochMetrics> log;   // one entry per epoch
  std::int64_t skipped_empty = 0;  // examples skipped after the 4x K retry
  std::int64_t skipped_zero_mass = 0;
};

// Staged end-to-end training: the index (and the mention projection behind
// it) stays frozen — verified against the index fingerprint at every step —
// while the per-hop query projections, mixer, rescorer, and word table train
// on question cross-entropy.  Metric lines are appended to `metrics_out`
// (one JSON object per epoch) when provided.  `reasoner` must wrap
// `encoders`.
TrainResult train_end_to_end(std::span<const MultiHopQuestion> questions,
                             const Reasoner& reasoner, Encoders& encoders,
                             const FollowConfig& follow, const TrainConfig& config,
                             std::ostream* metrics_out = nullptr);

}  // namespace vkb
