// Command-line surface for the whole pipeline: dataset generation, matrix and
// index building, the two training stages, querying, evaluation, and
// benchmarks.  Everything that affects results lives in a JSON config file
// (unknown keys rejected); flags cover only paths, the query text, and output
// shape.  Exit codes: 0 success, 1 failed benchmark assertion, 2 usage or
// config problems, 3 bad data, 4 internal errors.

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vkb/corpus.hpp"
#include "vkb/dense_index.hpp"
#include "vkb/encoders.hpp"
#include "vkb/errors.hpp"
#include "vkb/featurize.hpp"
#include "vkb/reasoner.hpp"
#include "vkb/sparse.hpp"
#include "vkb/synthetic.hpp"
#include "vkb/training.hpp"
#include "vkb/util.hpp"

namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void reject_unknown(const json& obj, std::initializer_list<const char*> keys,
                    const std::string& where) {
  if (!obj.is_object())
    throw vkb::ConfigError("config: '" + where + "' must be a JSON object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find_if(keys.begin(), keys.end(), [&](const char* k) { return it.key() == k; }) ==
        keys.end())
      throw vkb::ConfigError("config: unknown key '" + it.key() + "' in " + where);
  }
}

template <typename T>
T get_or(const json& obj, const char* key, T fallback) {
  if (!obj.contains(key)) return fallback;
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw vkb::ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

struct PathsConfig {
  std::string dir = ".";
  std::string corpus, lexicon, kb, relations, questions;
  std::string tfidf, cooc, coref, index, checkpoint;
  std::string metrics, pretrain_metrics, report;
};

PathsConfig parse_paths(const json& obj, const std::string& dir_flag) {
  reject_unknown(obj,
                 {"dir", "corpus", "lexicon", "kb", "relations", "questions", "tfidf", "cooc",
                  "coref", "index", "checkpoint", "metrics", "pretrain_metrics", "report"},
                 "paths");
  PathsConfig p;
  p.dir = get_or<std::string>(obj, "dir", ".");
  if (!dir_flag.empty()) p.dir = dir_flag;
  if (const char* e = std::getenv("VKB_DIR")) p.dir = e;

  auto resolve = [&](const char* key, const char* env, const char* def) {
    std::string v = get_or<std::string>(obj, key, "");
    if (const char* e = std::getenv(env)) v = e;
    if (v.empty()) v = p.dir + "/" + def;
    return v;
  };
  p.corpus = resolve("corpus", "VKB_CORPUS", "corpus.jsonl");
  p.lexicon = resolve("lexicon", "VKB_LEXICON", "lexicon.jsonl");
  p.kb = resolve("kb", "VKB_KB", "kb.tsv");
  p.relations = resolve("relations", "VKB_RELATIONS", "relations.tsv");
  p.questions = resolve("questions", "VKB_QUESTIONS", "questions.jsonl");
  p.tfidf = resolve("tfidf", "VKB_TFIDF", "tfidf.bin");
  p.cooc = resolve("cooc", "VKB_COOC", "cooc.bin");
  p.coref = resolve("coref", "VKB_COREF", "coref.bin");
  p.index = resolve("index", "VKB_INDEX", "index.bin");
  p.checkpoint = resolve("checkpoint", "VKB_CHECKPOINT", "checkpoint.bin");
  p.metrics = resolve("metrics", "VKB_METRICS", "metrics.jsonl");
  p.pretrain_metrics = resolve("pretrain_metrics", "VKB_PRETRAIN_METRICS",
                               "pretrain_metrics.jsonl");
  p.report = resolve("report", "VKB_REPORT", "report.csv");
  return p;
}

struct RunConfig {
  std::uint64_t seed = 1;
  PathsConfig paths;
  vkb::SyntheticConfig synthetic;
  vkb::TfidfConfig tfidf;
  vkb::CoocConfig cooc;
  vkb::EncoderConfig encoder;
  vkb::IndexConfig index;
  vkb::FollowConfig follow;
  vkb::TrainConfig train;
  // query
  int query_hops = 1;  // 0 = variable-hop mixture
  int query_limit = 10;
  std::string link_mode = "exact";  // exact | tfidf
  // eval
  std::string eval_split = "dev";  // dev | train | all
  // bench
  std::vector<std::int64_t> qps_k_sweep = {10, 100, 1000};
  std::vector<int> qps_threads = {1, 2};
  int qps_questions = 200;
  int qps_repeats = 3;
  std::vector<std::int64_t> scaling_entities = {10000, 100000, 1000000};
  int scaling_questions = 50;
  int scaling_repeats = 5;
  int scaling_out_degree = 2;
  std::int64_t scaling_list_size = 2000;
  std::int64_t scaling_probe = 4;
  double scaling_budget_ratio = 2.0;
};

RunConfig parse_run_config(const json& root, const std::string& dir_flag) {
  reject_unknown(root,
                 {"seed", "paths", "synthetic", "tfidf", "cooc", "encoder", "index", "follow",
                  "train", "query", "eval", "bench"},
                 "config root");
  RunConfig c;
  c.seed = get_or<std::uint64_t>(root, "seed", 1);
  c.paths = parse_paths(root.contains("paths") ? root.at("paths") : json::object(), dir_flag);

  if (root.contains("synthetic")) {
    const json& o = root.at("synthetic");
    reject_unknown(o,
                   {"n_entities", "n_relations", "n_docs", "n_questions", "max_hops",
                    "min_out_degree", "max_out_degree", "max_in_degree"},
                   "synthetic");
    c.synthetic.n_entities = get_or<std::int64_t>(o, "n_entities", c.synthetic.n_entities);
    c.synthetic.n_relations = get_or<std::int64_t>(o, "n_relations", c.synthetic.n_relations);
    c.synthetic.n_docs = get_or<std::int64_t>(o, "n_docs", c.synthetic.n_docs);
    c.synthetic.n_questions = get_or<std::int64_t>(o, "n_questions", c.synthetic.n_questions);
    c.synthetic.max_hops = get_or<int>(o, "max_hops", c.synthetic.max_hops);
    c.synthetic.min_out_degree = get_or<int>(o, "min_out_degree", c.synthetic.min_out_degree);
    c.synthetic.max_out_degree = get_or<int>(o, "max_out_degree", c.synthetic.max_out_degree);
    c.synthetic.max_in_degree = get_or<std::int64_t>(o, "max_in_degree", c.synthetic.max_in_degree);
  }
  c.synthetic.seed = c.seed;

  if (root.contains("tfidf")) {
    const json& o = root.at("tfidf");
    reject_unknown(o, {"n_buckets"}, "tfidf");
    c.tfidf.n_buckets = get_or<std::int64_t>(o, "n_buckets", c.tfidf.n_buckets);
  }

  if (root.contains("cooc")) {
    const json& o = root.at("cooc");
    reject_unknown(o, {"epsilon", "mu", "top_paragraphs", "binarize"}, "cooc");
    c.cooc.epsilon = get_or<double>(o, "epsilon", c.cooc.epsilon);
    c.cooc.mu = get_or<std::int64_t>(o, "mu", c.cooc.mu);
    c.cooc.top_paragraphs = get_or<std::int64_t>(o, "top_paragraphs", c.cooc.top_paragraphs);
    c.cooc.binarize = get_or<bool>(o, "binarize", c.cooc.binarize);
  }

  if (root.contains("encoder")) {
    const json& o = root.at("encoder");
    reject_unknown(o,
                   {"feature_dim", "p", "context_window", "max_hops", "word_buckets",
                    "max_query_segments", "init_seed"},
                   "encoder");
    c.encoder.feature_dim = get_or<std::int64_t>(o, "feature_dim", c.encoder.feature_dim);
    c.encoder.p = get_or<std::int64_t>(o, "p", c.encoder.p);
    c.encoder.context_window = get_or<int>(o, "context_window", c.encoder.context_window);
    c.encoder.max_hops = get_or<int>(o, "max_hops", c.encoder.max_hops);
    c.encoder.word_buckets = get_or<std::int64_t>(o, "word_buckets", c.encoder.word_buckets);
    c.encoder.max_query_segments =
        get_or<int>(o, "max_query_segments", c.encoder.max_query_segments);
    c.encoder.init_seed = get_or<std::uint64_t>(o, "init_seed", c.encoder.init_seed);
  }

  c.index.seed = c.seed;
  if (root.contains("index")) {
    const json& o = root.at("index");
    reject_unknown(o, {"mode", "n_clusters", "n_probe", "kmeans_iters", "train_sample", "seed"},
                   "index");
    const std::string mode = get_or<std::string>(o, "mode", "exact");
    if (mode == "exact")
      c.index.mode = vkb::IndexMode::kExact;
    else if (mode == "clustered")
      c.index.mode = vkb::IndexMode::kClustered;
    else
      throw vkb::ConfigError("config: index.mode must be 'exact' or 'clustered'");
    c.index.n_clusters = get_or<std::int64_t>(o, "n_clusters", c.index.n_clusters);
    c.index.n_probe = get_or<std::int64_t>(o, "n_probe", c.index.n_probe);
    c.index.kmeans_iters = get_or<int>(o, "kmeans_iters", c.index.kmeans_iters);
    c.index.train_sample = get_or<std::int64_t>(o, "train_sample", c.index.train_sample);
    c.index.seed = get_or<std::uint64_t>(o, "seed", c.index.seed);
  }

  if (root.contains("follow")) {
    const json& o = root.at("follow");
    reject_unknown(o, {"k", "temperature", "aggregation", "tfidf_filter", "binarize_cooc"},
                   "follow");
    c.follow.k = get_or<std::int64_t>(o, "k", c.follow.k);
    c.follow.temperature = get_or<double>(o, "temperature", c.follow.temperature);
    const std::string agg = get_or<std::string>(o, "aggregation", "max");
    if (agg == "max")
      c.follow.aggregation = vkb::FollowConfig::Aggregation::kMax;
    else if (agg == "sum")
      c.follow.aggregation = vkb::FollowConfig::Aggregation::kSum;
    else
      throw vkb::ConfigError("config: follow.aggregation must be 'max' or 'sum'");
    c.follow.tfidf_filter = get_or<bool>(o, "tfidf_filter", c.follow.tfidf_filter);
    c.follow.binarize_cooc = get_or<bool>(o, "binarize_cooc", c.follow.binarize_cooc);
  }

  c.train.seed = c.seed;
  if (root.contains("train")) {
    const json& o = root.at("train");
    reject_unknown(o,
                   {"lr", "momentum", "batch_size", "epochs", "negatives_per_positive",
                    "mix_shared_entity", "mix_shared_relation", "mix_random", "dev_fraction",
                    "use_mixture"},
                   "train");
    c.train.lr = get_or<double>(o, "lr", c.train.lr);
    c.train.momentum = get_or<double>(o, "momentum", c.train.momentum);
    c.train.batch_size = get_or<int>(o, "batch_size", c.train.batch_size);
    c.train.epochs = get_or<int>(o, "epochs", c.train.epochs);
    c.train.negatives_per_positive =
        get_or<int>(o, "negatives_per_positive", c.train.negatives_per_positive);
    c.train.mix_shared_entity = get_or<double>(o, "mix_shared_entity", c.train.mix_shared_entity);
    c.train.mix_shared_relation =
        get_or<double>(o, "mix_shared_relation", c.train.mix_shared_relation);
    c.train.mix_random = get_or<double>(o, "mix_random", c.train.mix_random);
    c.train.dev_fraction = get_or<double>(o, "dev_fraction", c.train.dev_fraction);
    c.train.use_mixture = get_or<bool>(o, "use_mixture", c.train.use_mixture);
  }

  if (root.contains("query")) {
    const json& o = root.at("query");
    reject_unknown(o, {"hops", "limit", "link"}, "query");
    c.query_hops = get_or<int>(o, "hops", c.query_hops);
    c.query_limit = get_or<int>(o, "limit", c.query_limit);
    c.link_mode = get_or<std::string>(o, "link", c.link_mode);
    if (c.link_mode != "exact" && c.link_mode != "tfidf")
      throw vkb::ConfigError("config: query.link must be 'exact' or 'tfidf'");
  }

  if (root.contains("eval")) {
    const json& o = root.at("eval");
    reject_unknown(o, {"split"}, "eval");
    c.eval_split = get_or<std::string>(o, "split", c.eval_split);
    if (c.eval_split != "dev" && c.eval_split != "train" && c.eval_split != "all")
      throw vkb::ConfigError("config: eval.split must be 'dev', 'train', or 'all'");
  }

  if (root.contains("bench")) {
    const json& o = root.at("bench");
    reject_unknown(o,
                   {"qps_k_sweep", "qps_threads", "qps_questions", "qps_repeats",
                    "scaling_entities", "scaling_questions", "scaling_repeats",
                    "scaling_out_degree", "scaling_list_size", "scaling_probe",
                    "scaling_budget_ratio"},
                   "bench");
    c.qps_k_sweep = get_or<std::vector<std::int64_t>>(o, "qps_k_sweep", c.qps_k_sweep);
    c.qps_threads = get_or<std::vector<int>>(o, "qps_threads", c.qps_threads);
    c.qps_questions = get_or<int>(o, "qps_questions", c.qps_questions);
    c.qps_repeats = get_or<int>(o, "qps_repeats", c.qps_repeats);
    c.scaling_entities =
        get_or<std::vector<std::int64_t>>(o, "scaling_entities", c.scaling_entities);
    c.scaling_questions = get_or<int>(o, "scaling_questions", c.scaling_questions);
    c.scaling_repeats = get_or<int>(o, "scaling_repeats", c.scaling_repeats);
    c.scaling_out_degree = get_or<int>(o, "scaling_out_degree", c.scaling_out_degree);
    c.scaling_list_size = get_or<std::int64_t>(o, "scaling_list_size", c.scaling_list_size);
    c.scaling_probe = get_or<std::int64_t>(o, "scaling_probe", c.scaling_probe);
    c.scaling_budget_ratio = get_or<double>(o, "scaling_budget_ratio", c.scaling_budget_ratio);
  }
  return c;
}

json resolved_config_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["paths"] = {{"dir", c.paths.dir},
                {"corpus", c.paths.corpus},
                {"lexicon", c.paths.lexicon},
                {"kb", c.paths.kb},
                {"relations", c.paths.relations},
                {"questions", c.paths.questions},
                {"tfidf", c.paths.tfidf},
                {"cooc", c.paths.cooc},
                {"coref", c.paths.coref},
                {"index", c.paths.index},
                {"checkpoint", c.paths.checkpoint},
                {"metrics", c.paths.metrics},
                {"pretrain_metrics", c.paths.pretrain_metrics},
                {"report", c.paths.report}};
  j["synthetic"] = {{"n_entities", c.synthetic.n_entities},
                    {"n_relations", c.synthetic.n_relations},
                    {"n_docs", c.synthetic.n_docs},
                    {"n_questions", c.synthetic.n_questions},
                    {"max_hops", c.synthetic.max_hops},
                    {"min_out_degree", c.synthetic.min_out_degree},
                    {"max_out_degree", c.synthetic.max_out_degree},
                    {"max_in_degree", c.synthetic.max_in_degree}};
  j["tfidf"] = {{"n_buckets", c.tfidf.n_buckets}};
  j["cooc"] = {{"epsilon", c.cooc.epsilon},
               {"mu", c.cooc.mu},
               {"top_paragraphs", c.cooc.top_paragraphs},
               {"binarize", c.cooc.binarize}};
  j["encoder"] = {{"feature_dim", c.encoder.feature_dim},
                  {"p", c.encoder.p},
                  {"context_window", c.encoder.context_window},
                  {"max_hops", c.encoder.max_hops},
                  {"word_buckets", c.encoder.word_buckets},
                  {"max_query_segments", c.encoder.max_query_segments},
                  {"init_seed", c.encoder.init_seed}};
  j["index"] = {{"mode", c.index.mode == vkb::IndexMode::kExact ? "exact" : "clustered"},
                {"n_clusters", c.index.n_clusters},
                {"n_probe", c.index.n_probe},
                {"kmeans_iters", c.index.kmeans_iters},
                {"train_sample", c.index.train_sample},
                {"seed", c.index.seed}};
  j["follow"] = {
      {"k", c.follow.k},
      {"temperature", c.follow.temperature},
      {"aggregation",
       c.follow.aggregation == vkb::FollowConfig::Aggregation::kMax ? "max" : "sum"},
      {"tfidf_filter", c.follow.tfidf_filter},
      {"binarize_cooc", c.follow.binarize_cooc}};
  j["train"] = {{"lr", c.train.lr},
                {"momentum", c.train.momentum},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"negatives_per_positive", c.train.negatives_per_positive},
                {"mix_shared_entity", c.train.mix_shared_entity},
                {"mix_shared_relation", c.train.mix_shared_relation},
                {"mix_random", c.train.mix_random},
                {"dev_fraction", c.train.dev_fraction},
                {"use_mixture", c.train.use_mixture}};
  j["query"] = {{"hops", c.query_hops}, {"limit", c.query_limit}, {"link", c.link_mode}};
  j["eval"] = {{"split", c.eval_split}};
  j["bench"] = {{"qps_k_sweep", c.qps_k_sweep},
                {"qps_threads", c.qps_threads},
                {"qps_questions", c.qps_questions},
                {"qps_repeats", c.qps_repeats},
                {"scaling_entities", c.scaling_entities},
                {"scaling_questions", c.scaling_questions},
                {"scaling_repeats", c.scaling_repeats},
                {"scaling_out_degree", c.scaling_out_degree},
                {"scaling_list_size", c.scaling_list_size},
                {"scaling_probe", c.scaling_probe},
                {"scaling_budget_ratio", c.scaling_budget_ratio}};
  return j;
}

void log_resolved_config(const RunConfig& c) {
  std::clog << "resolved config: " << resolved_config_json(c).dump() << "\n";
}

// ---------------------------------------------------------------------------
// Artifact loading
// ---------------------------------------------------------------------------

struct Artifacts {
  vkb::Corpus corpus;
  vkb::HashedTfidfModel tfidf;
  vkb::RaggedMatrix cooc;
  vkb::RaggedMatrix coref;
  vkb::DenseMentionIndex index;
  std::optional<vkb::Encoders> encoders;
};

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::exists(path))
    throw vkb::ConfigError(std::string("missing ") + what + ": " + path +
                           " (run the earlier pipeline stages first)");
}

Artifacts load_artifacts(const RunConfig& cfg, bool need_tfidf) {
  require_file(cfg.paths.corpus, "corpus");
  require_file(cfg.paths.lexicon, "lexicon");
  require_file(cfg.paths.cooc, "expansion matrix");
  require_file(cfg.paths.coref, "coreference matrix");
  require_file(cfg.paths.index, "mention index");
  require_file(cfg.paths.checkpoint, "checkpoint");

  Artifacts a;
  a.corpus = vkb::ingest_corpus(cfg.paths.corpus, cfg.paths.lexicon);
  if (need_tfidf) {
    require_file(cfg.paths.tfidf, "TFIDF model");
    a.tfidf = vkb::HashedTfidfModel::load(cfg.paths.tfidf);
  }
  a.cooc = vkb::RaggedMatrix::load(cfg.paths.cooc);
  a.coref = vkb::RaggedMatrix::load(cfg.paths.coref);
  a.index = vkb::DenseMentionIndex::load(cfg.paths.index);
  a.encoders.emplace(cfg.encoder,
                     vkb::EncoderParams::load(cfg.paths.checkpoint, cfg.encoder), a.corpus);
  if (a.index.source_hash() != 0 &&
      a.index.source_hash() != a.encoders->mention_fingerprint())
    throw vkb::StalenessError("index at " + cfg.paths.index +
                              " was built from different mention-encoder parameters");
  return a;
}

std::vector<vkb::MultiHopQuestion> load_split(const RunConfig& cfg) {
  require_file(cfg.paths.questions, "questions");
  auto all = vkb::read_questions(cfg.paths.questions);
  if (cfg.eval_split == "all") return all;
  std::vector<vkb::MultiHopQuestion> out;
  for (auto& q : all) {
    const bool dev = vkb::in_dev_split(q.text, cfg.train);
    if ((cfg.eval_split == "dev") == dev) out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_datagen(const RunConfig& cfg) {
  auto ds = vkb::generate_synthetic_dataset(cfg.synthetic);
  vkb::write_corpus(ds.corpus, cfg.paths.corpus, cfg.paths.lexicon);
  vkb::write_kb(ds.kb, cfg.paths.kb, cfg.paths.relations);
  vkb::write_questions(ds.questions, cfg.paths.questions);
  json out;
  out["documents"] = ds.corpus.n_docs();
  out["entities"] = ds.corpus.n_entities();
  out["mentions"] = ds.corpus.n_mentions();
  out["triples"] = static_cast<std::int64_t>(ds.kb.triples.size());
  out["questions"] = static_cast<std::int64_t>(ds.questions.size());
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_index(const RunConfig& cfg) {
  require_file(cfg.paths.corpus, "corpus");
  require_file(cfg.paths.lexicon, "lexicon");
  vkb::Corpus corpus = vkb::ingest_corpus(cfg.paths.corpus, cfg.paths.lexicon);
  if (corpus.n_docs() == 0) throw vkb::ValidationError("index: corpus has no documents");

  vkb::HashedTfidfModel model = vkb::fit_tfidf(corpus, cfg.tfidf);
  model.save(cfg.paths.tfidf);
  vkb::RaggedMatrix cooc = vkb::build_entity_mention_matrix(model, corpus, cfg.cooc);
  cooc.save(cfg.paths.cooc);
  vkb::RaggedMatrix coref = vkb::build_coref_matrix(corpus);
  coref.save(cfg.paths.coref);

  std::int64_t max_row = 0;
  for (std::int64_t e = 0; e < cooc.n_rows; ++e) max_row = std::max(max_row, cooc.row_nnz(e));

  json out;
  out["tfidf_buckets_observed"] = static_cast<std::int64_t>(model.idf.size());
  out["expansion_nnz"] = static_cast<std::int64_t>(cooc.col_ids.size());
  out["expansion_max_row"] = max_row;
  out["expansion_row_cap"] = cfg.cooc.mu;
  out["coref_nnz"] = static_cast<std::int64_t>(coref.col_ids.size());

  if (std::filesystem::exists(cfg.paths.checkpoint)) {
    vkb::EncoderParams params = vkb::EncoderParams::load(cfg.paths.checkpoint, cfg.encoder);
    vkb::Encoders encoders(cfg.encoder, std::move(params), corpus);
    vkb::DenseMentionIndex index = vkb::freeze_and_index(encoders, corpus, cfg.index);
    index.save(cfg.paths.index);
    out["index_vectors"] = index.size();
    out["index_mode"] = index.mode() == vkb::IndexMode::kExact ? "exact" : "clustered";
  } else {
    out["index_vectors"] = nullptr;
    std::clog << "no checkpoint at " << cfg.paths.checkpoint
              << "; dense mention index not built\n";
  }
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_pretrain(const RunConfig& cfg) {
  require_file(cfg.paths.corpus, "corpus");
  require_file(cfg.paths.kb, "knowledge base");
  vkb::Corpus corpus = vkb::ingest_corpus(cfg.paths.corpus, cfg.paths.lexicon);
  vkb::KnowledgeBase kb = vkb::read_kb(cfg.paths.kb, cfg.paths.relations, corpus.n_entities());

  auto positives = vkb::generate_pretraining_data(kb, corpus);
  if (positives.empty()) throw vkb::ValidationError("pretrain: no co-mention positives found");
  std::vector<std::string> log;
  auto groups = vkb::build_pretraining_groups(positives, kb, corpus, cfg.train, &log);

  vkb::Encoders encoders(cfg.encoder, vkb::EncoderParams::init(cfg.encoder), corpus);
  auto metrics = vkb::pretrain_mention_encoder(groups, corpus, encoders, cfg.train, &log);

  encoders.params().save(cfg.paths.checkpoint, cfg.encoder);
  vkb::DenseMentionIndex index = vkb::freeze_and_index(encoders, corpus, cfg.index);
  index.save(cfg.paths.index);

  std::ofstream mf(cfg.paths.pretrain_metrics, std::ios::trunc);
  if (!mf) throw vkb::IoError("cannot write " + cfg.paths.pretrain_metrics);
  for (const auto& m : metrics) mf << vkb::to_json_line(m) << "\n";

  for (const auto& line : log) std::clog << line << "\n";
  json out;
  out["positives"] = static_cast<std::int64_t>(positives.size());
  std::int64_t negatives = 0;
  for (const auto& g : groups) negatives += static_cast<std::int64_t>(g.negatives.size());
  out["negatives"] = negatives;
  out["epochs"] = static_cast<std::int64_t>(metrics.size());
  out["final_loss"] = metrics.empty() ? 0.0 : metrics.back().loss;
  out["index_vectors"] = index.size();
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_train(const RunConfig& cfg) {
  Artifacts a = load_artifacts(cfg, /*need_tfidf=*/false);
  require_file(cfg.paths.questions, "questions");
  auto questions = vkb::read_questions(cfg.paths.questions);

  vkb::Reasoner reasoner(a.index, a.cooc, a.coref, *a.encoders);
  std::ofstream metrics(cfg.paths.metrics, std::ios::trunc);
  if (!metrics) throw vkb::IoError("cannot write " + cfg.paths.metrics);
  auto result =
      vkb::train_end_to_end(questions, reasoner, *a.encoders, cfg.follow, cfg.train, &metrics);

  a.encoders->params().save(cfg.paths.checkpoint, cfg.encoder);
  json out;
  out["epochs"] = static_cast<std::int64_t>(result.log.size());
  out["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
  out["final_hits1"] = result.log.empty() ? 0.0 : result.log.back().hits1;
  out["final_hits5"] = result.log.empty() ? 0.0 : result.log.back().hits5;
  out["skipped_empty"] = result.skipped_empty;
  out["skipped_zero_mass"] = result.skipped_zero_mass;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_query(const RunConfig& cfg, const std::string& question, bool as_json) {
  Artifacts a = load_artifacts(cfg, cfg.link_mode == "tfidf");
  vkb::Reasoner reasoner(a.index, a.cooc, a.coref, *a.encoders);

  const auto mode = cfg.link_mode == "tfidf" ? vkb::QuestionLinkMode::kTfidfTopK
                                             : vkb::QuestionLinkMode::kLeastFrequentExact;
  vkb::SparseVector z0 = vkb::link_question(question, a.corpus, mode,
                                            cfg.link_mode == "tfidf" ? &a.tfidf : nullptr);

  vkb::QueryResult result;
  bool empty = false;
  try {
    result = reasoner.run(question, z0, cfg.query_hops, cfg.follow);
  } catch (const vkb::EmptyResultError& e) {
    empty = true;
    std::clog << "warning: empty result (" << e.what() << ")\n";
  }

  auto surface = [&](std::int64_t e) {
    return a.corpus.entities[static_cast<std::size_t>(e)].surface_form;
  };
  const std::size_t limit =
      cfg.query_limit > 0 ? static_cast<std::size_t>(cfg.query_limit) : result.ranked.size();

  if (as_json) {
    json out;
    out["question"] = question;
    out["hops"] = cfg.query_hops;
    out["empty"] = empty;
    out["results"] = json::array();
    for (std::size_t i = 0; i < result.ranked.size() && i < limit; ++i)
      out["results"].push_back({{"rank", i + 1},
                                {"entity", result.ranked[i].entity},
                                {"surface", surface(result.ranked[i].entity)},
                                {"score", result.ranked[i].score}});
    out["hop_distributions"] = json::array();
    for (const auto& z : result.hop_distributions) {
      json hop = json::array();
      auto top = vkb::rank_entities(z, 5);
      for (const auto& r : top)
        hop.push_back({{"entity", r.entity}, {"surface", surface(r.entity)}, {"score", r.score}});
      out["hop_distributions"].push_back(hop);
    }
    if (!result.mixture_weights.empty()) out["mixture_weights"] = result.mixture_weights;
    std::cout << out.dump() << "\n";
    return 0;
  }

  if (empty) {
    std::cout << "no results\n";
    return 0;
  }
  for (std::size_t i = 0; i < result.ranked.size() && i < limit; ++i)
    std::cout << (i + 1) << "\t" << result.ranked[i].entity << "\t"
              << surface(result.ranked[i].entity) << "\t" << result.ranked[i].score << "\n";
  for (std::size_t h = 0; h < result.hop_distributions.size(); ++h) {
    std::cout << "# hop " << (h + 1) << ":";
    for (const auto& r : vkb::rank_entities(result.hop_distributions[h], 5))
      std::cout << " " << surface(r.entity) << "=" << r.score;
    std::cout << "\n";
  }
  if (!result.mixture_weights.empty()) {
    std::cout << "# mixture:";
    for (double w : result.mixture_weights) std::cout << " " << w;
    std::cout << "\n";
  }
  return 0;
}

int cmd_eval(const RunConfig& cfg) {
  Artifacts a = load_artifacts(cfg, /*need_tfidf=*/false);
  vkb::Reasoner reasoner(a.index, a.cooc, a.coref, *a.encoders);
  auto questions = load_split(cfg);
  if (questions.empty()) throw vkb::ValidationError("eval: selected split is empty");

  vkb::EvalResult ev =
      vkb::evaluate_questions(questions, reasoner, cfg.follow, cfg.train.use_mixture);

  std::vector<std::vector<std::int64_t>> golds;
  for (const auto& q : questions) golds.push_back(q.answers);

  json out;
  out["split"] = cfg.eval_split;
  out["n"] = ev.n;
  out["hits1"] = ev.hits1;
  out["hits5"] = ev.hits5;
  out["hits10"] = vkb::hits_at_k(ev.rankings, golds, 10);
  out["empty_results"] = ev.empty_results;
  out["sparsity_violations"] = ev.sparsity_violations;

  // Per-hop-count breakdown.
  json by_hops = json::object();
  for (int h = 1; h <= cfg.encoder.max_hops; ++h) {
    std::vector<std::vector<vkb::RankedEntity>> preds;
    std::vector<std::vector<std::int64_t>> gold_h;
    for (std::size_t i = 0; i < questions.size(); ++i) {
      if (questions[i].hops != h) continue;
      preds.push_back(ev.rankings[i]);
      gold_h.push_back(questions[i].answers);
    }
    if (preds.empty()) continue;
    by_hops[std::to_string(h)] = {{"n", static_cast<std::int64_t>(preds.size())},
                                  {"hits1", vkb::hits_at_k(preds, gold_h, 1)},
                                  {"hits5", vkb::hits_at_k(preds, gold_h, 5)}};
  }
  out["by_hops"] = by_hops;
  std::cout << out.dump() << "\n";
  return 0;
}

int cmd_bench_qps(const RunConfig& cfg) {
  Artifacts a = load_artifacts(cfg, /*need_tfidf=*/false);
  vkb::Reasoner reasoner(a.index, a.cooc, a.coref, *a.encoders);
  auto questions = load_split(cfg);
  if (questions.empty()) throw vkb::ValidationError("bench-qps: selected split is empty");
  if (static_cast<int>(questions.size()) > cfg.qps_questions)
    questions.resize(static_cast<std::size_t>(cfg.qps_questions));

  std::ofstream report(cfg.paths.report, std::ios::trunc);
  if (!report) throw vkb::IoError("cannot write " + cfg.paths.report);
  report << "# bench-qps, batch size 1 per query, config: "
         << resolved_config_json(cfg).dump() << "\n";
  report << "k,threads,qps,hits1,empty_results\n";

  for (std::int64_t k : cfg.qps_k_sweep) {
    vkb::FollowConfig fc = cfg.follow;
    fc.k = k;
    // Warm pass: fills the entity-embedding cache (so threads only read) and
    // produces the accuracy numbers.
    vkb::EvalResult warm =
        vkb::evaluate_questions(questions, reasoner, fc, cfg.train.use_mixture);

    for (int threads : cfg.qps_threads) {
      const int t = std::max(1, threads);
      double best_qps = 0.0;
      for (int rep = 0; rep < cfg.qps_repeats; ++rep) {
        const double t0 = vkb::wall_ms();
        auto worker = [&](int wid) {
          for (std::size_t i = static_cast<std::size_t>(wid); i < questions.size();
               i += static_cast<std::size_t>(t)) {
            const auto& q = questions[i];
            vkb::SparseVector z0 =
                vkb::initial_distribution(q, a.corpus.n_entities());
            try {
              if (cfg.train.use_mixture)
                reasoner.mixture(q.text, z0, fc);
              else
                reasoner.multi_hop(q.text, z0, q.hops, fc);
            } catch (const vkb::EmptyResultError&) {
            }
          }
        };
        if (t == 1) {
          worker(0);
        } else {
          std::vector<std::thread> pool;
          for (int w = 0; w < t; ++w) pool.emplace_back(worker, w);
          for (auto& th : pool) th.join();
        }
        const double secs = (vkb::wall_ms() - t0) / 1000.0;
        best_qps = std::max(best_qps,
                            secs > 0.0 ? static_cast<double>(questions.size()) / secs : 0.0);
      }
      report << k << "," << t << "," << best_qps << "," << warm.hits1 << ","
             << warm.empty_results << "\n";
      std::cout << "k=" << k << " threads=" << t << " qps=" << best_qps
                << " hits1=" << warm.hits1 << "\n";
    }
  }
  return 0;
}

int cmd_bench_scaling(const RunConfig& cfg) {
  std::ofstream report(cfg.paths.report, std::ios::trunc);
  if (!report) throw vkb::IoError("cannot write " + cfg.paths.report);
  report << "# bench-scaling, config: " << resolved_config_json(cfg).dump() << "\n";
  report << "n_entities,n_mentions,n_clusters,follow_median_ms,follow_mean_ms,"
            "matmul_median_ms,empty_fraction\n";

  struct Row {
    std::int64_t n_entities = 0;
    double follow_median_ms = 0.0;
  };
  std::vector<Row> rows;

  for (std::int64_t n_e : cfg.scaling_entities) {
    vkb::SyntheticConfig sc;
    sc.n_entities = n_e;
    sc.n_docs = n_e;
    sc.n_relations = cfg.synthetic.n_relations;
    sc.n_questions = cfg.scaling_questions;
    sc.max_hops = 1;
    sc.min_out_degree = cfg.scaling_out_degree;
    sc.max_out_degree = cfg.scaling_out_degree;
    sc.max_in_degree = cfg.synthetic.max_in_degree;
    sc.seed = cfg.seed;
    auto ds = vkb::generate_synthetic_dataset(sc);

    vkb::HashedTfidfModel model = vkb::fit_tfidf(ds.corpus, cfg.tfidf);
    vkb::RaggedMatrix cooc = vkb::build_entity_mention_matrix(model, ds.corpus, cfg.cooc);
    vkb::RaggedMatrix coref = vkb::build_coref_matrix(ds.corpus);
    vkb::Encoders encoders(cfg.encoder, vkb::EncoderParams::init(cfg.encoder), ds.corpus);

    const std::int64_t n_m = ds.corpus.n_mentions();
    vkb::IndexConfig ic;
    ic.mode = vkb::IndexMode::kClustered;
    ic.n_clusters = std::max<std::int64_t>(1, n_m / cfg.scaling_list_size);
    ic.n_probe = std::min<std::int64_t>(cfg.scaling_probe, ic.n_clusters);
    ic.kmeans_iters = 3;
    ic.train_sample = std::min<std::int64_t>(n_m, 50000);
    if (ic.train_sample < ic.n_clusters) ic.train_sample = 0;
    ic.seed = cfg.seed;
    vkb::DenseMentionIndex index =
        vkb::DenseMentionIndex::build(encoders.encode_all_mentions(ds.corpus),
                                      cfg.encoder.p, ic);
    vkb::Reasoner reasoner(index, cooc, coref, encoders);

    // Pre-linked inputs so the timed region is exactly one follow step.
    std::vector<vkb::SparseVector> z0s;
    std::vector<vkb::FeatureVec> psis;
    for (const auto& q : ds.questions) {
      z0s.push_back(vkb::initial_distribution(q, ds.corpus.n_entities()));
      psis.push_back(encoders.featurize_question(q.text));
    }
    encoders.entity_embedding(0);  // warm the lazy entity matrix

    std::vector<double> follow_ms;
    std::int64_t empties = 0;
    for (int rep = 0; rep < cfg.scaling_repeats; ++rep) {
      for (std::size_t i = 0; i < z0s.size(); ++i) {
        const double t0 = vkb::wall_ms();
        try {
          reasoner.follow(z0s[i], psis[i], 0, cfg.follow);
        } catch (const vkb::EmptyResultError&) {
          // With untrained parameters the co-occurrence gate usually empties
          // the candidate set; all the scale-dependent work (retrieval,
          // expansion, intersection) has already run by then, so the sample
          // still measures the follow step.
          ++empties;
        }
        follow_ms.push_back(vkb::wall_ms() - t0);
      }
    }
    std::vector<double> matmul_ms;
    for (int rep = 0; rep < cfg.scaling_repeats; ++rep) {
      for (const auto& z0 : z0s) {
        const double t0 = vkb::wall_ms();
        vkb::spvec_ragged_matmul(z0, cooc);
        matmul_ms.push_back(vkb::wall_ms() - t0);
      }
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v.empty() ? 0.0 : v[v.size() / 2];
    };
    const double f_med = median(follow_ms);
    const double f_mean =
        std::accumulate(follow_ms.begin(), follow_ms.end(), 0.0) /
        static_cast<double>(follow_ms.size());
    const double m_med = median(matmul_ms);
    const double empty_frac =
        static_cast<double>(empties) / static_cast<double>(follow_ms.size());

    report << n_e << "," << n_m << "," << ic.n_clusters << "," << f_med << "," << f_mean << ","
           << m_med << "," << empty_frac << "\n";
    report.flush();
    std::cout << "entities=" << n_e << " mentions=" << n_m << " follow_median_ms=" << f_med
              << " matmul_median_ms=" << m_med << " empty_fraction=" << empty_frac << "\n";
    rows.push_back({n_e, f_med});
  }

  double lo = rows.front().follow_median_ms, hi = rows.front().follow_median_ms;
  for (const Row& r : rows) {
    lo = std::min(lo, r.follow_median_ms);
    hi = std::max(hi, r.follow_median_ms);
  }
  const double ratio = lo > 0.0 ? hi / lo : 0.0;
  std::cout << "latency growth ratio: " << ratio << " (budget " << cfg.scaling_budget_ratio
            << ")\n";
  report << "# growth_ratio," << ratio << "\n";
  if (ratio >= cfg.scaling_budget_ratio) {
    std::cerr << "FAIL: follow latency grew " << ratio << "x across corpus sizes (budget "
              << cfg.scaling_budget_ratio << "x)\n";
    return 1;
  }
  return 0;
}

int cmd_ablate(const RunConfig& cfg) {
  Artifacts a = load_artifacts(cfg, /*need_tfidf=*/false);
  vkb::Reasoner reasoner(a.index, a.cooc, a.coref, *a.encoders);
  auto questions = load_split(cfg);
  if (questions.empty()) throw vkb::ValidationError("ablate: selected split is empty");

  std::vector<vkb::MultiHopQuestion> multi_answer;
  for (const auto& q : questions)
    if (q.answers.size() > 1) multi_answer.push_back(q);

  struct Variant {
    std::string name;
    vkb::FollowConfig config;
    const std::vector<vkb::MultiHopQuestion>* subset;
  };
  vkb::FollowConfig base = cfg.follow;
  vkb::FollowConfig no_filter = base;
  no_filter.tfidf_filter = false;
  vkb::FollowConfig temp1 = base;
  temp1.temperature = 1.0;
  vkb::FollowConfig sum_agg = base;
  sum_agg.aggregation = vkb::FollowConfig::Aggregation::kSum;

  std::vector<Variant> variants = {
      {"baseline", base, &questions},
      {"baseline_repeat", base, &questions},
      {"no_tfidf_filter", no_filter, &questions},
      {"temperature_1", temp1, &questions},
      {"baseline_multi_answer", base, &multi_answer},
      {"sum_aggregation_multi_answer", sum_agg, &multi_answer},
  };

  std::ofstream report(cfg.paths.report, std::ios::trunc);
  if (!report) throw vkb::IoError("cannot write " + cfg.paths.report);
  report << "# ablate, config: " << resolved_config_json(cfg).dump() << "\n";
  report << "variant,n,hits1,hits5,delta_hits1_vs_baseline\n";

  std::map<std::string, double> baseline_hits;
  for (const auto& v : variants) {
    if (v.subset->empty()) {
      report << v.name << ",0,,,\n";
      continue;
    }
    vkb::EvalResult ev =
        vkb::evaluate_questions(*v.subset, reasoner, v.config, cfg.train.use_mixture);
    const std::string base_key = v.subset == &multi_answer ? "multi" : "full";
    if (v.name == "baseline" || v.name == "baseline_multi_answer")
      baseline_hits[base_key] = ev.hits1;
    const double delta = ev.hits1 - baseline_hits[base_key];
    report << v.name << "," << ev.n << "," << ev.hits1 << "," << ev.hits5 << "," << delta
           << "\n";
    std::cout << v.name << ": n=" << ev.n << " hits1=" << ev.hits1 << " delta=" << delta
              << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"virtual knowledge base pipeline"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string dir_flag;
  app.add_option("--config", config_path, "JSON run configuration file");
  app.add_option("--dir", dir_flag, "artifact directory (overrides paths.dir)");

  auto* sc_datagen =
      app.add_subcommand("datagen", "generate a synthetic corpus, knowledge base, and questions");
  auto* sc_index =
      app.add_subcommand("index", "fit TFIDF, build expansion/coreference matrices and the "
                                  "mention index (when a checkpoint exists)");
  auto* sc_pretrain = app.add_subcommand(
      "pretrain", "train the mention encoder on slot-filling data, freeze it into an index");
  auto* sc_train =
      app.add_subcommand("train", "train the query side end-to-end against the frozen index");
  std::string question;
  bool as_json = false;
  auto* sc_query = app.add_subcommand("query", "answer one question");
  sc_query->add_option("--question", question, "question text")->required();
  sc_query->add_flag("--json", as_json, "emit one JSON object instead of text");
  auto* sc_eval = app.add_subcommand("eval", "evaluate Hits@k on a question split");
  auto* sc_bench_qps = app.add_subcommand("bench-qps", "queries/sec and Hits@1 across a K sweep");
  auto* sc_bench_scaling =
      app.add_subcommand("bench-scaling", "follow-step latency across corpus sizes");
  auto* sc_ablate = app.add_subcommand("ablate", "paired evaluations with components toggled");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    json root = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw vkb::ConfigError("cannot open config file: " + config_path);
      try {
        in >> root;
      } catch (const json::exception& e) {
        throw vkb::ConfigError("config file " + config_path + ": " + e.what());
      }
    }
    RunConfig cfg = parse_run_config(root, dir_flag);
    log_resolved_config(cfg);

    if (sc_datagen->parsed()) return cmd_datagen(cfg);
    if (sc_index->parsed()) return cmd_index(cfg);
    if (sc_pretrain->parsed()) return cmd_pretrain(cfg);
    if (sc_train->parsed()) return cmd_train(cfg);
    if (sc_query->parsed()) return cmd_query(cfg, question, as_json);
    if (sc_eval->parsed()) return cmd_eval(cfg);
    if (sc_bench_qps->parsed()) return cmd_bench_qps(cfg);
    if (sc_bench_scaling->parsed()) return cmd_bench_scaling(cfg);
    if (sc_ablate->parsed()) return cmd_ablate(cfg);
    return 2;
  } catch (const vkb::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const vkb::ParseError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const vkb::ValidationError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const vkb::IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const vkb::StalenessError& e) {
    std::cerr << "staleness error: " << e.what() << "\n";
    return 3;
  } catch (const vkb::GenerationError& e) {
    std::cerr << "generation error: " << e.what() << "\n";
    return 3;
  } catch (const vkb::LinkingError& e) {
    std::cerr << "linking error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 4;
  }
}
