#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <unordered_map>
#include <vector>

#include "vkb/corpus.hpp"

namespace vkb {

// Lookup structure over a knowledge base: out-edges grouped by
// (subject, relation), plus per-entity in-degrees.
class KbIndex {
 public:
  KbIndex(const KnowledgeBase& kb, std::int64_t n_entities);

  // Objects of triples (subject, relation, *), sorted ascending.
  std::span<const std::int64_t> objects(std::int64_t subject, std::int64_t relation) const;
  std::int64_t in_degree(std::int64_t entity) const { return in_degree_[entity]; }
  std::int64_t n_entities() const { return static_cast<std::int64_t>(in_degree_.size()); }

 private:
  std::vector<std::int64_t> objects_;                      // grouped, sorted within group
  std::unordered_map<std::uint64_t, std::pair<std::int64_t, std::int64_t>> spans_;
  std::vector<std::int64_t> in_degree_;
  std::int64_t n_relations_ = 0;
};

// One traversal step: the union of objects reachable from any frontier
// entity via `relation`.  When `max_in_degree` is set, candidates whose
// in-degree exceeds it are dropped (used for intermediate hops, where very
// popular entities would blow up the frontier).  Result sorted unique.
std::vector<std::int64_t> traverse_step(const KbIndex& index,
                                        std::span<const std::int64_t> frontier,
                                        std::int64_t relation,
                                        std::optional<std::int64_t> max_in_degree);

// Full chain from a single head entity through `relations`.  Intermediate
// frontiers are capped by in-degree; the final frontier is not.  Returns
// hops+1 entity sets starting with {head}.
std::vector<std::vector<std::int64_t>> traverse_chain(const KbIndex& index, std::int64_t head,
                                                      std::span<const std::int64_t> relations,
                                                      std::int64_t max_in_degree);

struct SyntheticConfig {
  std::int64_t n_entities = 2000;
  std::int64_t n_relations = 10;
  std::int64_t n_docs = 2000;       // one document per subject entity
  std::int64_t n_questions = 2000;  // hop counts cycle 1..max_hops
  int max_hops = 3;
  int min_out_degree = 1;   // triples per subject document, lower bound
  int max_out_degree = 3;   // and upper bound (inclusive)
  std::int64_t max_in_degree = 100;  // traversal cap for intermediate hops
  std::uint64_t seed = 1;

  void check() const;
};

struct SyntheticDataset {
  Corpus corpus;
  KnowledgeBase kb;
  std::vector<MultiHopQuestion> questions;
};

// Generates an entity-linked corpus, the knowledge base it verbalizes, and
// multi-hop questions whose answers are reachable by chain traversal.
//
// Construction: each of the first n_docs entities (in a seeded shuffled
// order) becomes the subject of one document with one sentence per sampled
// triple ("<subject> <relation description> <object> ."), with subject and
// object spans recorded as mentions.  Questions name a head entity and the
// relation descriptions of a chain, comma separated, and store the traversal
// frontiers as gold_chain.
//
// The same seed always produces byte-identical files.  Throws
// GenerationError when the requested shape cannot be satisfied (e.g. no
// answerable 3-hop chain exists after exhausting the retry budget).
SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config);

}  // namespace vkb
