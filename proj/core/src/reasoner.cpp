#include "vkb/reasoner.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "vkb/errors.hpp"

namespace vkb {

namespace {

// z^T A with optional on-the-fly binarization of A's values.
SparseVector expansion_matmul(const SparseVector& z, const RaggedMatrix& a, bool binarize) {
  if (!binarize) return spvec_ragged_matmul(z, a);
  std::vector<std::pair<std::int64_t, double>> gathered;
  for (std::size_t i = 0; i < z.indices.size(); ++i) {
    const double coef = z.values[i];
    for (std::int64_t col : a.row_cols(z.indices[i])) gathered.emplace_back(col, coef);
  }
  return SparseVector::from_pairs(a.n_cols, std::move(gathered));
}

// Dense softmax for tiny vectors (mixture weights).
std::vector<double> dense_softmax(std::span<const double> x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

std::vector<double> dense_softmax_backward(std::span<const double> y,
                                           std::span<const double> dy) {
  double dot = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) dot += y[i] * dy[i];
  std::vector<double> out(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) out[i] = y[i] * (dy[i] - dot);
  return out;
}

}  // namespace

void FollowConfig::check() const {
  if (k < 1) throw ConfigError("follow: K must be >= 1");
  if (temperature <= 0.0) throw ConfigError("follow: temperature must be positive");
}

LossResult loss_and_grad(const SparseVector& z, std::span<const std::int64_t> answers) {
  if (!std::is_sorted(answers.begin(), answers.end()))
    throw ContractError("loss_and_grad: answers must be sorted");
  LossResult out;
  out.dz.dim = z.dim;
  out.dz.indices = z.indices;
  out.dz.values.assign(z.indices.size(), 0.0);

  double mass = 0.0;
  std::vector<std::size_t> hits;
  std::size_t ai = 0;
  for (std::size_t i = 0; i < z.indices.size() && ai < answers.size();) {
    if (z.indices[i] < answers[ai]) {
      ++i;
    } else if (z.indices[i] > answers[ai]) {
      ++ai;
    } else {
      mass += z.values[i];
      hits.push_back(i);
      ++i;
      ++ai;
    }
  }

  constexpr double kFloor = 1e-12;
  const double clamped = std::max(mass, kFloor);
  out.loss = -std::log(clamped);
  out.zero_mass = (mass <= 0.0);
  if (!out.zero_mass) {
    const double d = -1.0 / clamped;
    for (std::size_t i : hits) out.dz.values[i] = d;
  }
  return out;
}

std::vector<RankedEntity> rank_entities(const SparseVector& z, std::int64_t limit) {
  std::vector<RankedEntity> out;
  out.reserve(z.indices.size());
  for (std::size_t i = 0; i < z.indices.size(); ++i)
    out.push_back({z.indices[i], z.values[i]});
  std::sort(out.begin(), out.end(), [](const RankedEntity& a, const RankedEntity& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.entity < b.entity;
  });
  if (limit > 0 && static_cast<std::int64_t>(out.size()) > limit)
    out.resize(static_cast<std::size_t>(limit));
  return out;
}

Reasoner::Reasoner(const DenseMentionIndex& index, const RaggedMatrix& cooc,
                   const RaggedMatrix& coref, const Encoders& encoders)
    : index_(index), cooc_(cooc), coref_(coref), encoders_(encoders) {
  if (cooc_.n_cols != index_.size() || coref_.n_rows != index_.size())
    throw ContractError("reasoner: mention dimension mismatch between matrices and index");
  if (cooc_.n_rows != coref_.n_cols)
    throw ContractError("reasoner: entity dimension mismatch between matrices");
  if (encoders_.n_entities() != cooc_.n_rows)
    throw ContractError("reasoner: encoder entity count does not match matrices");
}

FollowResult Reasoner::follow(const SparseVector& z_prev, const FeatureVec& psi, int hop,
                              const FollowConfig& config) const {
  config.check();
  if (z_prev.dim != cooc_.n_rows)
    throw ContractError("follow: z_prev dimension is not the entity count");
  if (z_prev.nnz() == 0) throw ContractError("follow: z_prev is empty");

  FollowResult out;
  HopTrace& trace = out.trace;
  trace.hop = hop;
  trace.psi = psi;
  trace.z_prev = z_prev;

  // Query embedding, conditioned on where the walk currently stands.
  std::vector<double> g_tilde = encoders_.encode_query(psi, hop);
  trace.g = encoders_.condition_query(g_tilde, z_prev);

  // Top-K mention retrieval by inner product.
  trace.retrieved = index_.mips_topk(trace.g, config.k);
  if (trace.retrieved.nnz() == 0)
    throw EmptyResultError("follow: retrieval returned nothing", hop + 1, 0, 0, config.k);

  // Stabilized exponentiation of the retrieved scores.
  trace.shift = trace.retrieved.values[0];
  trace.shift_mention = trace.retrieved.indices[0];
  for (std::size_t i = 1; i < trace.retrieved.values.size(); ++i) {
    if (trace.retrieved.values[i] > trace.shift) {
      trace.shift = trace.retrieved.values[i];
      trace.shift_mention = trace.retrieved.indices[i];
    }
  }
  SparseVector relevance;
  relevance.dim = trace.retrieved.dim;
  relevance.indices = trace.retrieved.indices;
  relevance.values.resize(trace.retrieved.values.size());
  for (std::size_t i = 0; i < trace.retrieved.values.size(); ++i)
    relevance.values[i] = std::exp(trace.retrieved.values[i] - trace.shift);

  // Gate by co-occurrence with the current entities.
  if (config.tfidf_filter) {
    trace.expansion = expansion_matmul(z_prev, cooc_, config.binarize_cooc);
    trace.masked = elementwise_product(trace.expansion, relevance);
  } else {
    trace.expansion.dim = cooc_.n_cols;
    trace.masked = relevance;
  }
  if (trace.masked.nnz() == 0)
    throw EmptyResultError(
        "follow: no retrieved mention co-occurs with the current entities", hop + 1,
        trace.expansion.nnz(), trace.retrieved.nnz(), config.k);

  // Aggregate surviving mentions per entity.
  std::map<std::int64_t, double> scores;
  std::map<std::int64_t, std::int64_t> argmax;
  for (std::size_t i = 0; i < trace.masked.indices.size(); ++i) {
    const std::int64_t m = trace.masked.indices[i];
    const double mv = trace.masked.values[i];
    auto cols = coref_.row_cols(m);
    auto vals = coref_.row_vals(m);
    for (std::size_t j = 0; j < cols.size(); ++j) {
      const std::int64_t e = cols[j];
      const double contribution = mv * vals[j];
      if (config.aggregation == FollowConfig::Aggregation::kSum) {
        scores[e] += contribution;
      } else {
        auto it = scores.find(e);
        if (it == scores.end()) {
          scores.emplace(e, contribution);
          argmax[e] = m;
        } else if (contribution > it->second) {  // ties keep the lower mention id
          it->second = contribution;
          argmax[e] = m;
        }
      }
    }
  }

  trace.entity_scores.dim = cooc_.n_rows;
  trace.entity_scores.indices.reserve(scores.size());
  trace.entity_scores.values.reserve(scores.size());
  for (const auto& [e, s] : scores) {
    trace.entity_scores.indices.push_back(e);
    trace.entity_scores.values.push_back(s);
  }
  if (config.aggregation == FollowConfig::Aggregation::kMax) {
    trace.argmax_mention.reserve(argmax.size());
    for (const auto& [e, m] : argmax) trace.argmax_mention.push_back(m);
  }

  trace.z_out = sparse_softmax(trace.entity_scores, config.temperature);
  out.z = trace.z_out;
  return out;
}

MultiHopResult Reasoner::multi_hop(const std::string& question, const SparseVector& z0,
                                   int hops, const FollowConfig& config) const {
  if (hops < 1) throw ContractError("multi_hop: hops must be >= 1");
  if (hops > encoders_.config().max_hops)
    throw ContractError("multi_hop: hops exceeds the number of per-hop encoders");
  MultiHopResult out;
  out.psi = encoders_.featurize_question(question);
  out.z.push_back(z0);
  for (int t = 0; t < hops; ++t) {
    try {
      FollowResult step = follow(out.z.back(), out.psi, t, config);
      out.z.push_back(step.z);
      out.traces.push_back(std::move(step.trace));
    } catch (const EmptyResultError& e) {
      throw EmptyResultError("hop " + std::to_string(t + 1) + ": " + e.what(), t + 1,
                             e.expansion_nnz, e.retrieved_nnz, e.k);
    }
  }
  return out;
}

MixtureResult Reasoner::mixture(const std::string& question, const SparseVector& z0,
                                const FollowConfig& config) const {
  if (encoders_.config().max_hops < 2)
    throw ContractError("mixture: needs at least 2 hop encoders");
  MixtureResult out;
  out.hops = multi_hop(question, z0, 2, config);
  MixtureTrace& mix = out.mix;
  mix.psi = out.hops.psi;
  mix.z0 = z0;

  mix.logits = encoders_.mix_logits(mix.psi);
  mix.pi = dense_softmax(mix.logits);

  // Rescore the seed entities with a question-specific embedding; the walk
  // distributions z1/z2 are used as-is.
  mix.rescore_q = encoders_.rescore_query(mix.psi);
  mix.rescore_scores.dim = z0.dim;
  mix.rescore_scores.indices = z0.indices;
  mix.rescore_scores.values.resize(z0.indices.size());
  for (std::size_t i = 0; i < z0.indices.size(); ++i) {
    auto emb = encoders_.entity_embedding(z0.indices[i]);
    double acc = 0.0;
    for (std::size_t j = 0; j < emb.size(); ++j) acc += mix.rescore_q[j] * emb[j];
    mix.rescore_scores.values[i] = acc;
  }
  mix.z0_rescored = sparse_softmax(mix.rescore_scores, 1.0);

  std::vector<std::pair<std::int64_t, double>> pairs;
  const SparseVector* comps[3] = {&mix.z0_rescored, &out.hops.z[1], &out.hops.z[2]};
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < comps[c]->indices.size(); ++i)
      pairs.emplace_back(comps[c]->indices[i], mix.pi[c] * comps[c]->values[i]);
  mix.z_star = SparseVector::from_pairs(z0.dim, std::move(pairs));
  return out;
}

SparseVector Reasoner::follow_backward(const HopTrace& trace, const SparseVector& upstream,
                                       const FollowConfig& config, EncoderGrads& grads) const {
  if (upstream.indices != trace.z_out.indices || upstream.dim != trace.z_out.dim)
    throw ContractError("follow_backward: upstream support does not match the trace");

  // Softmax.
  SparseVector d_scores = sparse_softmax_backward(trace.z_out, upstream, config.temperature);

  // Aggregation: spread entity-score gradients onto mentions.
  const bool use_max = config.aggregation == FollowConfig::Aggregation::kMax;
  std::vector<double> d_masked(trace.masked.indices.size(), 0.0);
  if (use_max) {
    for (std::size_t i = 0; i < d_scores.indices.size(); ++i) {
      const std::int64_t m = trace.argmax_mention[i];
      const double bval = coref_.row_vals(m).empty() ? 0.0 : [&] {
        auto cols = coref_.row_cols(m);
        auto vals = coref_.row_vals(m);
        for (std::size_t j = 0; j < cols.size(); ++j)
          if (cols[j] == d_scores.indices[i]) return vals[j];
        return 0.0;
      }();
      auto pos = std::lower_bound(trace.masked.indices.begin(), trace.masked.indices.end(), m);
      d_masked[static_cast<std::size_t>(pos - trace.masked.indices.begin())] +=
          d_scores.values[i] * bval;
    }
  } else {
    for (std::size_t i = 0; i < trace.masked.indices.size(); ++i) {
      const std::int64_t m = trace.masked.indices[i];
      auto cols = coref_.row_cols(m);
      auto vals = coref_.row_vals(m);
      for (std::size_t j = 0; j < cols.size(); ++j) {
        const double ds = d_scores.at(cols[j]);
        if (ds != 0.0) d_masked[i] += ds * vals[j];
      }
    }
  }

  // masked_m = c_m * exp(s_m - shift) where c_m is the expansion weight (or
  // 1 without the filter) and shift = s at `shift_mention`.  Both the direct
  // and the shift dependency on the scores are differentiated.
  double shift_pull = 0.0;  // sum_m d_masked[m] * masked[m]
  std::vector<double> d_s(trace.masked.indices.size(), 0.0);
  for (std::size_t i = 0; i < trace.masked.indices.size(); ++i) {
    const double t = d_masked[i] * trace.masked.values[i];
    d_s[i] = t;
    shift_pull += t;
  }

  // d(loss)/dg = sum_m d_s[m] * f(m), including the shift mention.
  std::vector<double> dg(trace.g.size(), 0.0);
  for (std::size_t i = 0; i < trace.masked.indices.size(); ++i) {
    if (d_s[i] == 0.0) continue;
    auto f = index_.row(trace.masked.indices[i]);
    for (std::size_t j = 0; j < dg.size(); ++j) dg[j] += d_s[i] * static_cast<double>(f[j]);
  }
  if (shift_pull != 0.0) {
    auto f = index_.row(trace.shift_mention);
    for (std::size_t j = 0; j < dg.size(); ++j) dg[j] -= shift_pull * static_cast<double>(f[j]);
  }

  // Query-side parameter gradients and the conditioning path into z_prev.
  encoders_.grad_query(trace.psi, trace.hop, dg, grads);
  SparseVector dz_cond;
  encoders_.grad_condition(trace.z_prev, dg, grads, &dz_cond);

  // Expansion path into z_prev: d(expansion_m) = d_masked[m] * rel_m, and
  // expansion = z_prev^T A.
  SparseVector dz_prev = dz_cond;
  if (config.tfidf_filter) {
    // rel_m = masked_m / expansion_m, but recompute from the retrieved
    // scores to avoid dividing by small numbers.
    std::vector<double> d_expansion(trace.masked.indices.size(), 0.0);
    {
      std::size_t ri = 0;
      for (std::size_t i = 0; i < trace.masked.indices.size(); ++i) {
        const std::int64_t m = trace.masked.indices[i];
        while (trace.retrieved.indices[ri] < m) ++ri;
        d_expansion[i] =
            d_masked[i] * std::exp(trace.retrieved.values[ri] - trace.shift);
      }
    }
    for (std::size_t zi = 0; zi < trace.z_prev.indices.size(); ++zi) {
      const std::int64_t row = trace.z_prev.indices[zi];
      auto cols = cooc_.row_cols(row);
      auto vals = cooc_.row_vals(row);
      double acc = 0.0;
      std::size_t a = 0, b = 0;
      while (a < cols.size() && b < trace.masked.indices.size()) {
        if (cols[a] < trace.masked.indices[b]) {
          ++a;
        } else if (cols[a] > trace.masked.indices[b]) {
          ++b;
        } else {
          acc += (config.binarize_cooc ? 1.0 : vals[a]) * d_expansion[b];
          ++a;
          ++b;
        }
      }
      dz_prev.values[zi] += acc;
    }
  }
  return dz_prev;
}

void Reasoner::multi_hop_backward(const MultiHopResult& result, const SparseVector& dz_final,
                                  const FollowConfig& config, EncoderGrads& grads) const {
  if (result.traces.empty()) throw ContractError("multi_hop_backward: empty result");
  SparseVector upstream = dz_final;
  for (std::size_t t = result.traces.size(); t-- > 0;)
    upstream = follow_backward(result.traces[t], upstream, config, grads);
}

void Reasoner::mixture_backward(const MixtureResult& result, const SparseVector& dz_star,
                                const FollowConfig& config, EncoderGrads& grads) const {
  const MixtureTrace& mix = result.mix;
  const SparseVector* comps[3] = {&mix.z0_rescored, &result.hops.z[1], &result.hops.z[2]};

  // Mixture weights.
  std::vector<double> dpi(3, 0.0);
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < comps[c]->indices.size(); ++i)
      dpi[c] += dz_star.at(comps[c]->indices[i]) * comps[c]->values[i];
  std::vector<double> dlogits = dense_softmax_backward(mix.pi, dpi);
  encoders_.grad_mixer(mix.psi, dlogits, grads);

  // Component upstreams, restricted to each component's support.
  auto component_upstream = [&](int c) {
    SparseVector u;
    u.dim = dz_star.dim;
    u.indices = comps[c]->indices;
    u.values.resize(u.indices.size());
    for (std::size_t i = 0; i < u.indices.size(); ++i)
      u.values[i] = mix.pi[c] * dz_star.at(u.indices[i]);
    return u;
  };

  // Rescored seed: softmax over the seed support, scores = q . E[e].
  {
    SparseVector dz0r = component_upstream(0);
    SparseVector dscores = sparse_softmax_backward(mix.z0_rescored, dz0r, 1.0);
    std::vector<double> dq(mix.rescore_q.size(), 0.0);
    std::vector<double> de(mix.rescore_q.size());
    for (std::size_t i = 0; i < dscores.indices.size(); ++i) {
      const std::int64_t e = dscores.indices[i];
      auto emb = encoders_.entity_embedding(e);
      for (std::size_t j = 0; j < dq.size(); ++j) {
        dq[j] += dscores.values[i] * emb[j];
        de[j] = dscores.values[i] * mix.rescore_q[j];
      }
      encoders_.grad_entity(e, de, grads);
    }
    encoders_.grad_rescore(mix.psi, dq, grads);
  }

  // Walk components: hop 2's backward contributes to z1's gradient, which
  // combines with the direct mixture term before hop 1's backward.
  SparseVector dz2 = component_upstream(2);
  SparseVector dz1_from_hop2 = follow_backward(result.hops.traces[1], dz2, config, grads);
  SparseVector dz1 = component_upstream(1);
  for (std::size_t i = 0; i < dz1.values.size(); ++i) dz1.values[i] += dz1_from_hop2.values[i];
  follow_backward(result.hops.traces[0], dz1, config, grads);
}

QueryResult Reasoner::run(const std::string& question, const SparseVector& z0, int hops,
                          const FollowConfig& config) const {
  QueryResult out;
  if (hops >= 1) {
    MultiHopResult r = multi_hop(question, z0, hops, config);
    out.final = r.z.back();
    out.hop_distributions.assign(r.z.begin() + 1, r.z.end());
  } else {
    MixtureResult r = mixture(question, z0, config);
    out.final = r.mix.z_star;
    out.hop_distributions.assign(r.hops.z.begin() + 1, r.hops.z.end());
    out.mixture_weights = r.mix.pi;
  }
  out.ranked = rank_entities(out.final);
  return out;
}

}  // namespace vkb
