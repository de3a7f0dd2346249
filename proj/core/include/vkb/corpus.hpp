#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vkb/sparse.hpp"

namespace vkb {

struct HashedTfidfModel;  // featurize.hpp

// A linked span inside a document.  start/end are token positions, end
// inclusive.
struct Mention {
  std::int64_t mention_id = 0;
  std::int64_t entity_id = 0;
  std::int64_t doc_id = 0;
  std::int64_t start = 0;
  std::int64_t end = 0;
};

struct Document {
  std::int64_t doc_id = 0;
  std::vector<std::string> tokens;
  std::optional<std::int64_t> title_entity;
};

struct Entity {
  std::int64_t entity_id = 0;
  std::string surface_form;
  std::vector<std::string> aliases;
};

// An entity-linked document collection.  All three id spaces are dense:
// documents[i].doc_id == i, entities[e].entity_id == e,
// mentions[m].mention_id == m.  Mentions are ordered by (doc, start, end).
struct Corpus {
  std::vector<Document> documents;
  std::vector<Entity> entities;
  std::vector<Mention> mentions;

  // Derived lookups, populated by finalize().
  std::vector<std::vector<std::int64_t>> mentions_by_doc;
  std::vector<std::int64_t> entity_mention_count;

  std::int64_t n_docs() const { return static_cast<std::int64_t>(documents.size()); }
  std::int64_t n_entities() const { return static_cast<std::int64_t>(entities.size()); }
  std::int64_t n_mentions() const { return static_cast<std::int64_t>(mentions.size()); }

  // Validates every invariant above (dense ids, spans in bounds, entity ids
  // resolvable, mention order) and rebuilds the derived lookups.  Throws
  // ValidationError on bad data.
  void finalize();
};

struct Triple {
  std::int64_t subject = 0;
  std::int64_t relation = 0;
  std::int64_t object = 0;
  auto operator<=>(const Triple&) const = default;
};

struct KnowledgeBase {
  std::vector<Triple> triples;
  std::vector<std::string> relation_descriptions;  // indexed by relation id

  std::int64_t n_relations() const {
    return static_cast<std::int64_t>(relation_descriptions.size());
  }
  // Checks relation/entity id ranges and rejects duplicate triples.
  void check(std::int64_t n_entities) const;
};

struct MultiHopQuestion {
  std::string text;
  int hops = 1;
  std::vector<std::int64_t> seed_entities;  // support of the initial distribution
  std::vector<std::int64_t> answers;        // sorted unique
  // Entity sets per step, gold_chain[0] == seed_entities and
  // gold_chain[hops] == answers.  Empty when not recorded.
  std::vector<std::vector<std::int64_t>> gold_chain;
};

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

// Reads a documents JSONL file and a lexicon JSONL file, validates them, and
// returns a finalized corpus.  Documents must appear with doc_id 0,1,2,...;
// same for lexicon entity ids.  Mention ids are assigned here.
Corpus ingest_corpus(const std::string& corpus_path, const std::string& lexicon_path);

void write_corpus(const Corpus& corpus, const std::string& corpus_path,
                  const std::string& lexicon_path);

// kb.tsv: "subject<TAB>relation<TAB>object" id triples.
// relations.tsv: "relation_id<TAB>description".
KnowledgeBase read_kb(const std::string& triples_path, const std::string& relations_path,
                      std::int64_t n_entities);
void write_kb(const KnowledgeBase& kb, const std::string& triples_path,
              const std::string& relations_path);

std::vector<MultiHopQuestion> read_questions(const std::string& path);
void write_questions(const std::vector<MultiHopQuestion>& questions, const std::string& path);

// ---------------------------------------------------------------------------
// Entity linking
// ---------------------------------------------------------------------------

// Exact-match linking of documents against a lexicon (surface forms and
// aliases, lowercased).  Scans left to right; at each position the longest
// matching span wins and the scan resumes after it, so matches never
// overlap.  A surface shared by several entities resolves to the lowest
// entity id.  Returned mentions are in (doc, start, end) order with dense
// fresh mention ids.
std::vector<Mention> link_mentions(const std::vector<Document>& documents,
                                   const std::vector<Entity>& lexicon);

enum class QuestionLinkMode {
  // One-hot on the matched entity whose corpus mention count is smallest
  // (rarest match is most informative); ties to lower entity id.
  kLeastFrequentExact,
  // Distribution over the entities whose surface forms score highest
  // against the question under the hashed TFIDF model; scores normalized
  // to sum 1.
  kTfidfTopK,
};

// Links a free-text question to an initial entity distribution.
// `model` is required for kTfidfTopK.  Throws LinkingError when nothing
// matches.
SparseVector link_question(const std::string& question, const Corpus& corpus,
                           QuestionLinkMode mode, const HashedTfidfModel* model = nullptr,
                           int top_n = 20);

}  // namespace vkb
