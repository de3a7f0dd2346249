#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "vkb/corpus.hpp"
#include "vkb/sparse.hpp"

namespace vkb {

struct TfidfConfig {
  // Number of hash buckets; must be a power of two so bucketing is a mask.
  std::int64_t n_buckets = std::int64_t{1} << 20;
  std::uint64_t hash_seed = 0x7f1d5eedULL;

  void check() const;
};

// Hashed unigram+bigram TFIDF model.  Terms are hashed into a fixed bucket
// space, so the model never stores a vocabulary; collisions are an accepted
// approximation.
struct HashedTfidfModel {
  std::int64_t n_buckets = 0;
  std::uint64_t hash_seed = 0;
  std::int64_t n_docs = 0;
  std::unordered_map<std::uint64_t, double> idf;  // observed buckets only

  // Smoothed inverse document frequency; buckets never seen at fit time get
  // the df=0 value.
  double idf_of(std::uint64_t bucket) const;

  void save(const std::string& path) const;
  static HashedTfidfModel load(const std::string& path);
};

// Accumulates hashed unigram+bigram counts for a token sequence into `counts`.
// Exposed so other featurizers can share the exact same term definition.
void add_ngram_counts(std::span<const std::string> tokens, std::uint64_t hash_seed,
                      std::int64_t n_buckets,
                      std::unordered_map<std::uint64_t, double>& counts);

// Learns bucket document frequencies over all corpus documents.
HashedTfidfModel fit_tfidf(const Corpus& corpus, const TfidfConfig& config);

// L2-normalized tf*idf vector of a document.  All mentions within one
// passage share this vector.
SparseVector passage_vector(const HashedTfidfModel& model, const Corpus& corpus,
                            std::int64_t doc_id);
SparseVector mention_passage_vector(const HashedTfidfModel& model, const Corpus& corpus,
                                    const Mention& mention);

// L2-normalized tf*idf vector of an entity's names: surface form plus
// aliases, each phrase featurized separately (no bigrams across phrase
// boundaries) and pooled.
SparseVector surface_vector(const HashedTfidfModel& model, const Entity& entity);

// L2-normalized tf*idf vector of arbitrary text (used for question linking).
SparseVector text_vector(const HashedTfidfModel& model, const std::string& text);

struct CoocConfig {
  double epsilon = 0.05;          // minimum entity/passage similarity kept
  std::int64_t mu = 50;           // max mentions retained per entity
  std::int64_t top_paragraphs = 50;  // max passages considered per entity
  bool binarize = false;          // store 1.0 instead of the raw similarity

  void check() const;
};

// Entity -> mention co-occurrence matrix, |E| x |M|.  Row e holds the
// mentions found in the passages most similar to entity e's names:
// passages are scored by surface/passage TFIDF similarity, those with score
// <= epsilon are dropped, the best `top_paragraphs` survive (ties to the
// lower doc id), and their mentions are kept up to `mu` per entity (ties to
// the lower mention id).  Values are the passage similarity, or 1.0 when
// binarized.
RaggedMatrix build_entity_mention_matrix(const HashedTfidfModel& model, const Corpus& corpus,
                                         const CoocConfig& config);

// Mention -> entity resolution matrix, |M| x |E|: row m has a single 1.0 at
// the entity the mention resolves to.
RaggedMatrix build_coref_matrix(const Corpus& corpus);

}  // namespace vkb
