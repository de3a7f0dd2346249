#include "vkb/encoders.hpp"

#include <algorithm>
#include <cmath>

#include "vkb/util.hpp"

namespace vkb {

namespace {
constexpr std::uint32_t kCheckpointMagic = 0x564b4243;  // "VKBC"
constexpr std::uint32_t kCheckpointVersion = 1;

bool is_power_of_two(std::int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

// Block salt constants for the hashed featurizers.
constexpr std::uint64_t kSpanBlock = 0xb10c0;
constexpr std::uint64_t kLeftBlock = 0xb10c1;
constexpr std::uint64_t kRightBlock = 0xb10c2;
constexpr std::uint64_t kGlobalBlock = 0x9b10b;
constexpr std::uint64_t kSegmentBlockBase = 0x5e900;
constexpr std::uint64_t kWordSalt = 0x50bd;

void fill_uniform(Tensor& t, Rng& rng, double scale) {
  for (double& v : t.data) v = rng.next_uniform(-scale, scale);
}

void write_tensor(BinaryWriter& w, const std::string& name, const Tensor& t) {
  w.write_string(name);
  w.write_u32(static_cast<std::uint32_t>(t.shape.size()));
  for (std::int64_t d : t.shape) w.write_i64(d);
  for (double v : t.data) w.write_f32(static_cast<float>(v));
}

Tensor read_tensor(BinaryReader& r, const std::string& expected_name) {
  std::string name = r.read_string();
  if (name != expected_name)
    throw IoError("checkpoint: expected tensor '" + expected_name + "', found '" + name + "'");
  std::uint32_t ndims = r.read_u32();
  if (ndims == 0 || ndims > 4) throw IoError("checkpoint: implausible tensor rank");
  Tensor t;
  std::int64_t numel = 1;
  for (std::uint32_t i = 0; i < ndims; ++i) {
    std::int64_t d = r.read_i64();
    if (d <= 0) throw IoError("checkpoint: non-positive tensor dim");
    t.shape.push_back(d);
    numel *= d;
  }
  t.data.resize(static_cast<std::size_t>(numel));
  std::vector<float> buf;
  r.read_vec(buf, static_cast<std::size_t>(numel));
  for (std::size_t i = 0; i < buf.size(); ++i) t.data[i] = static_cast<double>(buf[i]);
  return t;
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
  Tensor t;
  std::int64_t numel = 1;
  for (std::int64_t d : shape) numel *= d;
  t.shape = std::move(shape);
  t.data.assign(static_cast<std::size_t>(numel), 0.0);
  return t;
}

std::int64_t Tensor::numel() const {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

void EncoderConfig::check() const {
  if (!is_power_of_two(feature_dim)) throw ConfigError("encoder: feature_dim must be a power of two");
  if (!is_power_of_two(word_buckets)) throw ConfigError("encoder: word_buckets must be a power of two");
  if (p < 2 || p % 2 != 0) throw ConfigError("encoder: p must be even and >= 2");
  if (context_window < 0) throw ConfigError("encoder: context_window must be >= 0");
  if (max_hops < 1) throw ConfigError("encoder: max_hops must be >= 1");
  if (max_query_segments < 1) throw ConfigError("encoder: max_query_segments must be >= 1");
}

EncoderParams EncoderParams::init(const EncoderConfig& config) {
  config.check();
  Rng rng(config.init_seed);
  // Embeddings interact through p-term dot products, so 1/sqrt(p) keeps
  // initial scores O(1) at any feature dimensionality.
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.p));
  EncoderParams params;
  params.mention_proj = Tensor::zeros({config.mention_feature_dim(), config.p});
  fill_uniform(params.mention_proj, rng, scale);
  for (int t = 0; t < config.max_hops; ++t) {
    Tensor v = Tensor::zeros({config.query_feature_dim(), config.p});
    fill_uniform(v, rng, scale);
    params.query_proj.push_back(std::move(v));
  }
  params.word_table = Tensor::zeros({config.word_buckets, config.p});
  fill_uniform(params.word_table, rng, scale);
  params.mixer = Tensor::zeros({config.query_feature_dim(), kMixComponents});
  fill_uniform(params.mixer, rng, scale);
  params.rescore_proj = Tensor::zeros({config.query_feature_dim(), config.p});
  fill_uniform(params.rescore_proj, rng, scale);
  return params;
}

void EncoderParams::save(const std::string& path, const EncoderConfig& config) const {
  BinaryWriter w(path);
  w.write_u32(kCheckpointMagic);
  w.write_u32(kCheckpointVersion);
  w.write_i64(config.feature_dim);
  w.write_i64(config.p);
  w.write_i64(config.context_window);
  w.write_i64(config.max_hops);
  w.write_i64(config.word_buckets);
  w.write_i64(config.max_query_segments);
  w.write_u64(config.hash_seed);
  w.write_u32(static_cast<std::uint32_t>(4 + query_proj.size()));
  write_tensor(w, "mention_proj", mention_proj);
  for (std::size_t t = 0; t < query_proj.size(); ++t)
    write_tensor(w, "query_proj_" + std::to_string(t), query_proj[t]);
  write_tensor(w, "word_table", word_table);
  write_tensor(w, "mixer", mixer);
  write_tensor(w, "rescore_proj", rescore_proj);
  w.close();
}

EncoderParams EncoderParams::load(const std::string& path, const EncoderConfig& config) {
  BinaryReader r(path);
  expect_magic(r, kCheckpointMagic, kCheckpointVersion, "checkpoint");
  auto expect_field = [&](std::int64_t want, const char* what) {
    std::int64_t got = r.read_i64();
    if (got != want)
      throw IoError("checkpoint " + path + ": " + what + " is " + std::to_string(got) +
                    ", runtime config says " + std::to_string(want));
  };
  expect_field(config.feature_dim, "feature_dim");
  expect_field(config.p, "p");
  expect_field(config.context_window, "context_window");
  expect_field(config.max_hops, "max_hops");
  expect_field(config.word_buckets, "word_buckets");
  expect_field(config.max_query_segments, "max_query_segments");
  if (r.read_u64() != config.hash_seed)
    throw IoError("checkpoint " + path + ": hash_seed differs from runtime config");
  std::uint32_t n_tensors = r.read_u32();
  if (n_tensors != static_cast<std::uint32_t>(4 + config.max_hops))
    throw IoError("checkpoint " + path + ": unexpected tensor count");

  EncoderParams params;
  params.mention_proj = read_tensor(r, "mention_proj");
  for (int t = 0; t < config.max_hops; ++t)
    params.query_proj.push_back(read_tensor(r, "query_proj_" + std::to_string(t)));
  params.word_table = read_tensor(r, "word_table");
  params.mixer = read_tensor(r, "mixer");
  params.rescore_proj = read_tensor(r, "rescore_proj");

  auto expect_shape = [&](const Tensor& t, std::int64_t rows, std::int64_t cols,
                          const char* name) {
    if (t.shape != std::vector<std::int64_t>{rows, cols})
      throw IoError("checkpoint " + path + ": tensor " + name + " has wrong shape");
  };
  expect_shape(params.mention_proj, config.mention_feature_dim(), config.p, "mention_proj");
  for (const Tensor& v : params.query_proj)
    expect_shape(v, config.query_feature_dim(), config.p, "query_proj");
  expect_shape(params.word_table, config.word_buckets, config.p, "word_table");
  expect_shape(params.mixer, config.query_feature_dim(), kMixComponents, "mixer");
  expect_shape(params.rescore_proj, config.query_feature_dim(), config.p, "rescore_proj");
  return params;
}

std::uint64_t EncoderParams::mention_fingerprint(const EncoderConfig& config) const {
  // Hash the f32 (checkpoint) form so the fingerprint survives a save/load
  // round trip.
  static thread_local std::vector<float> scratch;
  scratch.resize(mention_proj.data.size());
  for (std::size_t i = 0; i < mention_proj.data.size(); ++i)
    scratch[i] = static_cast<float>(mention_proj.data[i]);
  std::uint64_t h = fingerprint64(scratch.data(), scratch.size() * sizeof(float));
  h = hash_combine(h, static_cast<std::uint64_t>(config.feature_dim));
  h = hash_combine(h, static_cast<std::uint64_t>(config.p));
  h = hash_combine(h, static_cast<std::uint64_t>(config.context_window));
  h = hash_combine(h, config.hash_seed);
  return h;
}

void SparseRowGrads::init(std::int64_t n_rows_, std::int64_t n_cols_) {
  n_rows = n_rows_;
  n_cols = n_cols_;
  rows.clear();
}

std::vector<double>& SparseRowGrads::row(std::int64_t r) {
  if (r < 0 || r >= n_rows) throw ContractError("SparseRowGrads: row out of range");
  auto it = rows.find(r);
  if (it == rows.end())
    it = rows.emplace(r, std::vector<double>(static_cast<std::size_t>(n_cols), 0.0)).first;
  return it->second;
}

std::vector<double> SparseRowGrads::to_dense() const {
  std::vector<double> out(static_cast<std::size_t>(n_rows * n_cols), 0.0);
  for (const auto& [r, row] : rows)
    std::copy(row.begin(), row.end(), out.begin() + r * n_cols);
  return out;
}

EncoderGrads EncoderGrads::zeros_like(const EncoderParams& params) {
  EncoderGrads g;
  g.mention_proj.init(params.mention_proj.rows(), params.mention_proj.cols());
  g.query_proj.resize(params.query_proj.size());
  for (std::size_t t = 0; t < params.query_proj.size(); ++t)
    g.query_proj[t].init(params.query_proj[t].rows(), params.query_proj[t].cols());
  g.word_table.init(params.word_table.rows(), params.word_table.cols());
  g.mixer.init(params.mixer.rows(), params.mixer.cols());
  g.rescore_proj.init(params.rescore_proj.rows(), params.rescore_proj.cols());
  return g;
}

void EncoderGrads::clear() {
  mention_proj.clear();
  for (SparseRowGrads& g : query_proj) g.clear();
  word_table.clear();
  mixer.clear();
  rescore_proj.clear();
}

SgdMomentum::SgdMomentum(double lr, double momentum, double purge_threshold)
    : lr_(lr), momentum_(momentum), purge_threshold_(purge_threshold) {
  if (lr <= 0.0) throw ConfigError("sgd: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("sgd: momentum must be in [0, 1)");
  if (purge_threshold < 0.0) throw ConfigError("sgd: purge threshold must be >= 0");
}

void SgdMomentum::register_tensor(const std::string& name, Tensor* tensor) {
  if (tensor == nullptr) throw ContractError("sgd: null tensor");
  auto [it, inserted] = states_.emplace(name, State{});
  if (!inserted) throw ContractError("sgd: tensor registered twice: " + name);
  it->second.tensor = tensor;
}

void SgdMomentum::step(const std::map<std::string, const SparseRowGrads*>& grads) {
  for (const auto& [name, g] : grads)
    if (!states_.contains(name)) throw ContractError("sgd: unknown tensor in step: " + name);

  for (auto& [name, state] : states_) {
    Tensor& t = *state.tensor;
    const std::int64_t cols = t.cols();
    auto found = grads.find(name);
    const SparseRowGrads* g = (found != grads.end()) ? found->second : nullptr;
    if (g && (g->n_rows != t.rows() || g->n_cols != cols))
      throw ContractError("sgd: gradient shape mismatch for " + name);

    // Union of live-velocity rows and newly touched rows, processed in
    // ascending order so the arithmetic sequence is reproducible.
    std::vector<std::int64_t> touched;
    touched.reserve(state.velocity.size() + (g ? g->rows.size() : 0));
    for (const auto& [r, v] : state.velocity) touched.push_back(r);
    if (g)
      for (const auto& [r, v] : g->rows) touched.push_back(r);
    std::sort(touched.begin(), touched.end());
    touched.erase(std::unique(touched.begin(), touched.end()), touched.end());

    for (std::int64_t r : touched) {
      auto vit = state.velocity.find(r);
      if (vit == state.velocity.end())
        vit = state.velocity.emplace(r, std::vector<double>(static_cast<std::size_t>(cols), 0.0)).first;
      else
        for (double& x : vit->second) x *= momentum_;
      if (g) {
        auto grow = g->rows.find(r);
        if (grow != g->rows.end())
          for (std::int64_t c = 0; c < cols; ++c) vit->second[c] += grow->second[c];
      }
      auto w = t.row(r);
      double vmax = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        w[c] -= lr_ * vit->second[c];
        vmax = std::max(vmax, std::abs(vit->second[c]));
      }
      if (vmax <= purge_threshold_) state.velocity.erase(vit);
    }
  }
}

Encoders::Encoders(EncoderConfig config, EncoderParams params, const Corpus& corpus)
    : config_(std::move(config)), params_(std::move(params)) {
  config_.check();
  const std::uint64_t salt = hash_combine(config_.hash_seed, kWordSalt);
  entity_word_rows_.reserve(corpus.entities.size());
  for (const Entity& e : corpus.entities) {
    std::vector<std::int64_t> rows;
    for (const std::string& tok : tokenize(e.surface_form))
      rows.push_back(static_cast<std::int64_t>(hash64(tok, salt) &
                                               static_cast<std::uint64_t>(config_.word_buckets - 1)));
    if (rows.empty()) throw ValidationError("entity with no tokens in surface form");
    entity_word_rows_.push_back(std::move(rows));
  }
}

void Encoders::add_ngram_features(std::span<const std::string> tokens, std::int64_t block,
                                  std::uint64_t salt,
                                  std::map<std::int64_t, double>& counts) const {
  const std::uint64_t mask = static_cast<std::uint64_t>(config_.feature_dim - 1);
  const std::int64_t base = block * config_.feature_dim;
  std::string scratch;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    counts[base + static_cast<std::int64_t>(hash64(tokens[i], salt) & mask)] += 1.0;
    if (i + 1 < tokens.size()) {
      scratch = tokens[i];
      scratch.push_back('\x1f');
      scratch += tokens[i + 1];
      counts[base + static_cast<std::int64_t>(hash64(scratch, salt) & mask)] += 1.0;
    }
  }
}

FeatureVec Encoders::featurize_mention(const Document& doc, const Mention& mention) const {
  const std::int64_t len = static_cast<std::int64_t>(doc.tokens.size());
  if (mention.start < 0 || mention.start > mention.end || mention.end >= len)
    throw ContractError("featurize_mention: span out of bounds");

  std::vector<std::string> lowered(doc.tokens.size());
  for (std::size_t i = 0; i < doc.tokens.size(); ++i) lowered[i] = to_lower(doc.tokens[i]);

  std::map<std::int64_t, double> counts;
  const std::int64_t w = config_.context_window;
  // Block 0: the span itself.
  add_ngram_features({lowered.data() + mention.start,
                      static_cast<std::size_t>(mention.end - mention.start + 1)},
                     0, hash_combine(config_.hash_seed, kSpanBlock), counts);
  // Block 1: left context.
  const std::int64_t lbegin = std::max<std::int64_t>(0, mention.start - w);
  add_ngram_features({lowered.data() + lbegin, static_cast<std::size_t>(mention.start - lbegin)},
                     1, hash_combine(config_.hash_seed, kLeftBlock), counts);
  // Block 2: right context.
  const std::int64_t rend = std::min<std::int64_t>(len, mention.end + 1 + w);
  add_ngram_features({lowered.data() + mention.end + 1,
                      static_cast<std::size_t>(rend - mention.end - 1)},
                     2, hash_combine(config_.hash_seed, kRightBlock), counts);

  FeatureVec out;
  out.dim = config_.mention_feature_dim();
  out.indices.reserve(counts.size());
  out.counts.reserve(counts.size());
  for (const auto& [idx, c] : counts) {
    out.indices.push_back(idx);
    out.counts.push_back(c);
  }
  return out;
}

FeatureVec Encoders::featurize_question(const std::string& text) const {
  std::vector<std::string> tokens = tokenize(text);
  std::map<std::int64_t, double> counts;
  add_ngram_features(tokens, 0, hash_combine(config_.hash_seed, kGlobalBlock), counts);

  // Comma-separated segments, salted by (clamped) segment position.
  std::size_t seg_begin = 0;
  int seg = 0;
  for (std::size_t i = 0; i <= tokens.size(); ++i) {
    if (i == tokens.size() || tokens[i] == ",") {
      if (i > seg_begin) {
        const int s = std::min(seg, config_.max_query_segments - 1);
        add_ngram_features({tokens.data() + seg_begin, i - seg_begin}, 1 + s,
                           hash_combine(config_.hash_seed, kSegmentBlockBase + static_cast<std::uint64_t>(s)),
                           counts);
      }
      seg_begin = i + 1;
      ++seg;
    }
  }

  FeatureVec out;
  out.dim = config_.query_feature_dim();
  out.indices.reserve(counts.size());
  out.counts.reserve(counts.size());
  for (const auto& [idx, c] : counts) {
    out.indices.push_back(idx);
    out.counts.push_back(c);
  }
  return out;
}

namespace {
std::vector<double> project(const Tensor& t, const FeatureVec& feats) {
  const std::int64_t p = t.cols();
  std::vector<double> out(static_cast<std::size_t>(p), 0.0);
  for (std::size_t i = 0; i < feats.indices.size(); ++i) {
    const double c = feats.counts[i];
    auto row = t.row(feats.indices[i]);
    for (std::int64_t j = 0; j < p; ++j) out[j] += c * row[j];
  }
  return out;
}

void accumulate_rows(SparseRowGrads& g, const FeatureVec& feats, std::span<const double> d) {
  for (std::size_t i = 0; i < feats.indices.size(); ++i) {
    const double c = feats.counts[i];
    std::vector<double>& row = g.row(feats.indices[i]);
    for (std::size_t j = 0; j < d.size(); ++j) row[j] += c * d[j];
  }
}
}  // namespace

std::vector<double> Encoders::encode_mention(const FeatureVec& phi) const {
  if (phi.dim != config_.mention_feature_dim())
    throw ContractError("encode_mention: feature dim mismatch");
  return project(params_.mention_proj, phi);
}

std::vector<double> Encoders::encode_query(const FeatureVec& psi, int hop) const {
  if (psi.dim != config_.query_feature_dim())
    throw ContractError("encode_query: feature dim mismatch");
  if (hop < 0 || hop >= config_.max_hops) throw ContractError("encode_query: hop out of range");
  return project(params_.query_proj[static_cast<std::size_t>(hop)], psi);
}

std::span<const double> Encoders::entity_embedding(std::int64_t e) const {
  if (e < 0 || e >= n_entities()) throw ContractError("entity_embedding: id out of range");
  if (entity_matrix_dirty_) refresh_entity_matrix();
  return {entity_matrix_.data() + e * config_.p, static_cast<std::size_t>(config_.p)};
}

void Encoders::refresh_entity_matrix() const {
  const std::int64_t p = config_.p;
  entity_matrix_.assign(static_cast<std::size_t>(n_entities() * p), 0.0);
  for (std::int64_t e = 0; e < n_entities(); ++e) {
    const auto& rows = entity_word_rows_[static_cast<std::size_t>(e)];
    const double inv = 1.0 / static_cast<double>(rows.size());
    double* out = entity_matrix_.data() + e * p;
    for (std::int64_t r : rows) {
      auto row = params_.word_table.row(r);
      for (std::int64_t j = 0; j < p; ++j) out[j] += inv * row[j];
    }
  }
  entity_matrix_dirty_ = false;
}

std::vector<double> Encoders::condition_query(std::span<const double> g_tilde,
                                              const SparseVector& z_prev) const {
  if (static_cast<std::int64_t>(g_tilde.size()) != config_.p)
    throw ContractError("condition_query: g_tilde has wrong width");
  if (z_prev.dim != n_entities())
    throw ContractError("condition_query: z_prev dimension is not the entity count");
  std::vector<double> g(g_tilde.begin(), g_tilde.end());
  for (std::size_t i = 0; i < z_prev.indices.size(); ++i) {
    auto emb = entity_embedding(z_prev.indices[i]);
    const double z = z_prev.values[i];
    for (std::int64_t j = 0; j < config_.p; ++j) g[j] += z * emb[j];
  }
  return g;
}

std::vector<double> Encoders::mix_logits(const FeatureVec& psi) const {
  if (psi.dim != config_.query_feature_dim())
    throw ContractError("mix_logits: feature dim mismatch");
  return project(params_.mixer, psi);
}

std::vector<double> Encoders::rescore_query(const FeatureVec& psi) const {
  if (psi.dim != config_.query_feature_dim())
    throw ContractError("rescore_query: feature dim mismatch");
  return project(params_.rescore_proj, psi);
}

std::vector<float> Encoders::encode_all_mentions(const Corpus& corpus) const {
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(corpus.n_mentions() * config_.p));
  for (const Mention& m : corpus.mentions) {
    FeatureVec phi = featurize_mention(corpus.documents[m.doc_id], m);
    std::vector<double> f = encode_mention(phi);
    for (double v : f) out.push_back(static_cast<float>(v));
  }
  return out;
}

void Encoders::grad_mention(const FeatureVec& phi, std::span<const double> df,
                            EncoderGrads& grads) const {
  if (static_cast<std::int64_t>(df.size()) != config_.p)
    throw ContractError("grad_mention: df has wrong width");
  accumulate_rows(grads.mention_proj, phi, df);
}

void Encoders::grad_query(const FeatureVec& psi, int hop, std::span<const double> dg,
                          EncoderGrads& grads) const {
  if (hop < 0 || hop >= config_.max_hops) throw ContractError("grad_query: hop out of range");
  accumulate_rows(grads.query_proj[static_cast<std::size_t>(hop)], psi, dg);
}

void Encoders::grad_condition(const SparseVector& z_prev, std::span<const double> dg,
                              EncoderGrads& grads, SparseVector* dz_prev) const {
  if (static_cast<std::int64_t>(dg.size()) != config_.p)
    throw ContractError("grad_condition: dg has wrong width");
  if (dz_prev) {
    dz_prev->dim = z_prev.dim;
    dz_prev->indices = z_prev.indices;
    dz_prev->values.assign(z_prev.indices.size(), 0.0);
  }
  for (std::size_t i = 0; i < z_prev.indices.size(); ++i) {
    const std::int64_t e = z_prev.indices[i];
    const auto& rows = entity_word_rows_[static_cast<std::size_t>(e)];
    const double inv = 1.0 / static_cast<double>(rows.size());
    const double z = z_prev.values[i];
    for (std::int64_t r : rows) {
      std::vector<double>& wrow = grads.word_table.row(r);
      for (std::size_t j = 0; j < dg.size(); ++j) wrow[j] += z * inv * dg[j];
    }
    if (dz_prev) {
      auto emb = entity_embedding(e);
      double acc = 0.0;
      for (std::size_t j = 0; j < dg.size(); ++j) acc += emb[j] * dg[j];
      dz_prev->values[i] = acc;
    }
  }
}

void Encoders::grad_mixer(const FeatureVec& psi, std::span<const double> dlogits,
                          EncoderGrads& grads) const {
  if (static_cast<std::int64_t>(dlogits.size()) != kMixComponents)
    throw ContractError("grad_mixer: dlogits has wrong width");
  accumulate_rows(grads.mixer, psi, dlogits);
}

void Encoders::grad_entity(std::int64_t e, std::span<const double> de,
                           EncoderGrads& grads) const {
  if (e < 0 || e >= n_entities()) throw ContractError("grad_entity: id out of range");
  if (static_cast<std::int64_t>(de.size()) != config_.p)
    throw ContractError("grad_entity: de has wrong width");
  const auto& rows = entity_word_rows_[static_cast<std::size_t>(e)];
  const double inv = 1.0 / static_cast<double>(rows.size());
  for (std::int64_t r : rows) {
    std::vector<double>& wrow = grads.word_table.row(r);
    for (std::size_t j = 0; j < de.size(); ++j) wrow[j] += inv * de[j];
  }
}

void Encoders::grad_rescore(const FeatureVec& psi, std::span<const double> dg,
                            EncoderGrads& grads) const {
  if (static_cast<std::int64_t>(dg.size()) != config_.p)
    throw ContractError("grad_rescore: dg has wrong width");
  accumulate_rows(grads.rescore_proj, psi, dg);
}

}  // namespace vkb
