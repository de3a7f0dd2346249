#include "vkb/featurize.hpp"

#include <algorithm>
#include <cmath>

#include "vkb/util.hpp"

namespace vkb {

namespace {
constexpr std::uint32_t kTfidfMagic = 0x54464446;  // "TFDF"
constexpr std::uint32_t kTfidfVersion = 1;

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

SparseVector counts_to_vector(const HashedTfidfModel& model,
                              const std::unordered_map<std::uint64_t, double>& counts) {
  std::vector<std::pair<std::int64_t, double>> pairs;
  pairs.reserve(counts.size());
  for (const auto& [bucket, tf] : counts)
    pairs.emplace_back(static_cast<std::int64_t>(bucket), tf * model.idf_of(bucket));
  SparseVector v = SparseVector::from_pairs(model.n_buckets, std::move(pairs));
  double norm_sq = 0.0;
  for (double x : v.values) norm_sq += x * x;
  if (norm_sq > 0.0) {
    double inv = 1.0 / std::sqrt(norm_sq);
    for (double& x : v.values) x *= inv;
  }
  return v;
}
}  // namespace

void TfidfConfig::check() const {
  if (!is_power_of_two(n_buckets))
    throw ConfigError("tfidf n_buckets must be a power of two");
}

void CoocConfig::check() const {
  if (epsilon < 0.0) throw ConfigError("cooc epsilon must be >= 0");
  if (mu < 1) throw ConfigError("cooc mu must be >= 1");
  if (top_paragraphs < 1) throw ConfigError("cooc top_paragraphs must be >= 1");
}

double HashedTfidfModel::idf_of(std::uint64_t bucket) const {
  auto it = idf.find(bucket);
  if (it != idf.end()) return it->second;
  return std::log((1.0 + static_cast<double>(n_docs)) / 1.0) + 1.0;
}

void HashedTfidfModel::save(const std::string& path) const {
  BinaryWriter w(path);
  w.write_u32(kTfidfMagic);
  w.write_u32(kTfidfVersion);
  w.write_i64(n_buckets);
  w.write_u64(hash_seed);
  w.write_i64(n_docs);
  std::vector<std::pair<std::uint64_t, double>> entries(idf.begin(), idf.end());
  std::sort(entries.begin(), entries.end());
  w.write_u64(entries.size());
  for (const auto& [bucket, value] : entries) {
    w.write_u64(bucket);
    w.write_f64(value);
  }
  w.close();
}

HashedTfidfModel HashedTfidfModel::load(const std::string& path) {
  BinaryReader r(path);
  expect_magic(r, kTfidfMagic, kTfidfVersion, "tfidf model");
  HashedTfidfModel m;
  m.n_buckets = r.read_i64();
  m.hash_seed = r.read_u64();
  m.n_docs = r.read_i64();
  if (!is_power_of_two(m.n_buckets)) throw IoError("tfidf model corrupt: " + path);
  std::uint64_t n = r.read_u64();
  m.idf.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) {
    std::uint64_t bucket = r.read_u64();
    double value = r.read_f64();
    m.idf.emplace(bucket, value);
  }
  return m;
}

void add_ngram_counts(std::span<const std::string> tokens, std::uint64_t hash_seed,
                      std::int64_t n_buckets,
                      std::unordered_map<std::uint64_t, double>& counts) {
  const std::uint64_t mask = static_cast<std::uint64_t>(n_buckets - 1);
  std::string scratch;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    std::string lo = to_lower(tokens[i]);
    counts[hash64(lo, hash_seed) & mask] += 1.0;
    if (i + 1 < tokens.size()) {
      scratch = lo;
      scratch.push_back('\x1f');
      scratch += to_lower(tokens[i + 1]);
      counts[hash64(scratch, hash_seed) & mask] += 1.0;
    }
  }
}

HashedTfidfModel fit_tfidf(const Corpus& corpus, const TfidfConfig& config) {
  config.check();
  HashedTfidfModel model;
  model.n_buckets = config.n_buckets;
  model.hash_seed = config.hash_seed;
  model.n_docs = corpus.n_docs();

  std::unordered_map<std::uint64_t, std::int64_t> df;
  std::unordered_map<std::uint64_t, double> counts;
  for (const Document& d : corpus.documents) {
    counts.clear();
    add_ngram_counts(d.tokens, config.hash_seed, config.n_buckets, counts);
    for (const auto& [bucket, tf] : counts) ++df[bucket];
  }
  const double n = static_cast<double>(model.n_docs);
  model.idf.reserve(df.size());
  for (const auto& [bucket, count] : df)
    model.idf.emplace(bucket,
                      std::log((1.0 + n) / (1.0 + static_cast<double>(count))) + 1.0);
  return model;
}

SparseVector passage_vector(const HashedTfidfModel& model, const Corpus& corpus,
                            std::int64_t doc_id) {
  if (doc_id < 0 || doc_id >= corpus.n_docs())
    throw ContractError("passage_vector: doc_id out of range");
  std::unordered_map<std::uint64_t, double> counts;
  add_ngram_counts(corpus.documents[doc_id].tokens, model.hash_seed, model.n_buckets, counts);
  return counts_to_vector(model, counts);
}

SparseVector mention_passage_vector(const HashedTfidfModel& model, const Corpus& corpus,
                                    const Mention& mention) {
  return passage_vector(model, corpus, mention.doc_id);
}

SparseVector surface_vector(const HashedTfidfModel& model, const Entity& entity) {
  std::unordered_map<std::uint64_t, double> counts;
  std::vector<std::string> toks = tokenize(entity.surface_form);
  add_ngram_counts(toks, model.hash_seed, model.n_buckets, counts);
  for (const std::string& alias : entity.aliases) {
    toks = tokenize(alias);
    add_ngram_counts(toks, model.hash_seed, model.n_buckets, counts);
  }
  return counts_to_vector(model, counts);
}

SparseVector text_vector(const HashedTfidfModel& model, const std::string& text) {
  std::unordered_map<std::uint64_t, double> counts;
  std::vector<std::string> toks = tokenize(text);
  add_ngram_counts(toks, model.hash_seed, model.n_buckets, counts);
  return counts_to_vector(model, counts);
}

RaggedMatrix build_entity_mention_matrix(const HashedTfidfModel& model, const Corpus& corpus,
                                         const CoocConfig& config) {
  config.check();

  // Precompute passage vectors and invert them: bucket -> (doc, weight).
  // Entity rows are then sparse dot products against every passage at once.
  std::unordered_map<std::uint64_t, std::vector<std::pair<std::int64_t, double>>> inverted;
  for (std::int64_t d = 0; d < corpus.n_docs(); ++d) {
    SparseVector pv = passage_vector(model, corpus, d);
    for (std::size_t i = 0; i < pv.indices.size(); ++i)
      inverted[static_cast<std::uint64_t>(pv.indices[i])].emplace_back(d, pv.values[i]);
  }

  RaggedMatrix::Builder builder(corpus.n_entities(), corpus.n_mentions());
  std::unordered_map<std::int64_t, double> doc_score;
  for (std::int64_t e = 0; e < corpus.n_entities(); ++e) {
    SparseVector ev = surface_vector(model, corpus.entities[e]);
    doc_score.clear();
    for (std::size_t i = 0; i < ev.indices.size(); ++i) {
      auto it = inverted.find(static_cast<std::uint64_t>(ev.indices[i]));
      if (it == inverted.end()) continue;
      for (const auto& [doc, w] : it->second) doc_score[doc] += ev.values[i] * w;
    }

    std::vector<std::pair<std::int64_t, double>> docs;  // (doc, score)
    docs.reserve(doc_score.size());
    for (const auto& [doc, s] : doc_score)
      if (s > config.epsilon) docs.emplace_back(doc, s);
    std::sort(docs.begin(), docs.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (static_cast<std::int64_t>(docs.size()) > config.top_paragraphs)
      docs.resize(static_cast<std::size_t>(config.top_paragraphs));

    std::vector<std::pair<std::int64_t, double>> row;  // (mention, score)
    for (const auto& [doc, s] : docs)
      for (std::int64_t m : corpus.mentions_by_doc[doc]) row.emplace_back(m, s);
    std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    if (static_cast<std::int64_t>(row.size()) > config.mu)
      row.resize(static_cast<std::size_t>(config.mu));
    if (config.binarize)
      for (auto& [m, s] : row) s = 1.0;
    builder.push_row(std::move(row));
  }
  return builder.finish();
}

RaggedMatrix build_coref_matrix(const Corpus& corpus) {
  RaggedMatrix::Builder builder(corpus.n_mentions(), corpus.n_entities());
  for (const Mention& m : corpus.mentions) builder.push_row({{m.entity_id, 1.0}});
  return builder.finish();
}

}  // namespace vkb
