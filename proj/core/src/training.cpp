#include "vkb/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <utility>

#include <json.hpp>

#include "vkb/errors.hpp"

namespace vkb {

namespace {

// Sorted unique doc ids mentioning each entity.
std::vector<std::vector<std::int64_t>> docs_by_entity(const Corpus& corpus) {
  std::vector<std::vector<std::int64_t>> out(
      static_cast<std::size_t>(corpus.n_entities()));
  for (const Mention& m : corpus.mentions) {  // already sorted by doc
    auto& v = out[static_cast<std::size_t>(m.entity_id)];
    if (v.empty() || v.back() != m.doc_id) v.push_back(m.doc_id);
  }
  return out;
}

bool corpus_has_titles(const Corpus& corpus) {
  return std::any_of(corpus.documents.begin(), corpus.documents.end(),
                     [](const Document& d) { return d.title_entity.has_value(); });
}

// Docs co-mentioning s and o, optionally restricted to s's own article.
std::vector<std::int64_t> copresence_docs(
    const std::vector<std::vector<std::int64_t>>& by_entity, const Corpus& corpus,
    std::int64_t s, std::int64_t o, bool title_restrict) {
  std::vector<std::int64_t> out;
  const auto& a = by_entity[static_cast<std::size_t>(s)];
  const auto& b = by_entity[static_cast<std::size_t>(o)];
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  if (title_restrict) {
    std::erase_if(out, [&](std::int64_t d) {
      const auto& t = corpus.documents[static_cast<std::size_t>(d)].title_entity;
      return !t.has_value() || *t != s;
    });
  }
  return out;
}

std::string slot_query(const Corpus& corpus, const KnowledgeBase& kb, std::int64_t s,
                       std::int64_t r) {
  return corpus.entities[static_cast<std::size_t>(s)].surface_form + " , " +
         kb.relation_descriptions[static_cast<std::size_t>(r)] + " , ?";
}

// Sorted tail sets keyed by (subject, relation).
std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::int64_t>> gold_tail_map(
    const KnowledgeBase& kb) {
  std::map<std::pair<std::int64_t, std::int64_t>, std::vector<std::int64_t>> out;
  for (const Triple& t : kb.triples) out[{t.subject, t.relation}].push_back(t.object);
  for (auto& [key, tails] : out) {
    std::sort(tails.begin(), tails.end());
    tails.erase(std::unique(tails.begin(), tails.end()), tails.end());
  }
  return out;
}

void scale_rows(SparseRowGrads& g, double s) {
  for (auto& [row, vals] : g.rows)
    for (double& v : vals) v *= s;
}

void scale_grads(EncoderGrads& g, double s) {
  scale_rows(g.mention_proj, s);
  for (auto& q : g.query_proj) scale_rows(q, s);
  scale_rows(g.word_table, s);
  scale_rows(g.mixer, s);
  scale_rows(g.rescore_proj, s);
}

}  // namespace

void TrainConfig::check() const {
  if (lr <= 0.0) throw ConfigError("train: lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0,1)");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
  if (negatives_per_positive < 0)
    throw ConfigError("train: negatives_per_positive must be >= 0");
  const double mix = mix_shared_entity + mix_shared_relation + mix_random;
  if (mix_shared_entity < 0.0 || mix_shared_relation < 0.0 || mix_random < 0.0 ||
      std::abs(mix - 1.0) > 1e-9)
    throw ConfigError("train: negative mix ratios must be nonnegative and sum to 1");
  if (dev_fraction < 0.0 || dev_fraction >= 1.0)
    throw ConfigError("train: dev_fraction must be in [0,1)");
}

std::string to_json_line(const EpochMetrics& m) {
  nlohmann::json j;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["hits1"] = m.hits1;
  j["hits5"] = m.hits5;
  j["wall_ms"] = m.wall_ms;
  return j.dump();
}

std::vector<SlotFillingExample> generate_pretraining_data(const KnowledgeBase& kb,
                                                          const Corpus& corpus) {
  kb.check(corpus.n_entities());
  const auto by_entity = docs_by_entity(corpus);
  const bool titles = corpus_has_titles(corpus);

  std::vector<SlotFillingExample> out;
  for (const Triple& t : kb.triples) {
    for (std::int64_t d : copresence_docs(by_entity, corpus, t.subject, t.object, titles)) {
      SlotFillingExample ex;
      ex.query = slot_query(corpus, kb, t.subject, t.relation);
      ex.doc_id = d;
      for (std::int64_t mid : corpus.mentions_by_doc[static_cast<std::size_t>(d)]) {
        const Mention& m = corpus.mentions[static_cast<std::size_t>(mid)];
        if (m.entity_id == t.object) ex.answer_spans.emplace_back(m.start, m.end);
      }
      ex.label = ExampleLabel::kPositive;
      ex.subject = t.subject;
      ex.relation = t.relation;
      out.push_back(std::move(ex));
    }
  }
  return out;
}

bool passage_excludes(const Corpus& corpus, std::int64_t doc_id,
                      std::span<const std::int64_t> gold) {
  std::vector<std::int64_t> sorted(gold.begin(), gold.end());
  std::sort(sorted.begin(), sorted.end());

  for (std::int64_t mid : corpus.mentions_by_doc[static_cast<std::size_t>(doc_id)]) {
    const Mention& m = corpus.mentions[static_cast<std::size_t>(mid)];
    if (std::binary_search(sorted.begin(), sorted.end(), m.entity_id)) return false;
  }

  const Document& doc = corpus.documents[static_cast<std::size_t>(doc_id)];
  std::vector<std::string> doc_tokens;
  doc_tokens.reserve(doc.tokens.size());
  for (const std::string& t : doc.tokens) doc_tokens.push_back(to_lower(t));

  auto contains_phrase = [&](const std::string& phrase) {
    const std::vector<std::string> needle = tokenize(phrase);
    if (needle.empty() || needle.size() > doc_tokens.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= doc_tokens.size(); ++i) {
      bool match = true;
      for (std::size_t j = 0; j < needle.size(); ++j) {
        if (doc_tokens[i + j] != needle[j]) {
          match = false;
          break;
        }
      }
      if (match) return true;
    }
    return false;
  };

  for (std::int64_t e : sorted) {
    const Entity& ent = corpus.entities[static_cast<std::size_t>(e)];
    if (contains_phrase(ent.surface_form)) return false;
    for (const std::string& alias : ent.aliases)
      if (contains_phrase(alias)) return false;
  }
  return true;
}

std::vector<SlotFillingExample> make_negatives(std::span<const SlotFillingExample> positives,
                                               const KnowledgeBase& kb, const Corpus& corpus,
                                               ExampleLabel type, std::int64_t count, Rng& rng,
                                               std::vector<std::string>* log) {
  if (type == ExampleLabel::kPositive)
    throw ContractError("make_negatives: type must be a negative label");
  if (positives.empty() || count <= 0) return {};

  const auto by_entity = docs_by_entity(corpus);
  const bool titles = corpus_has_titles(corpus);
  const auto tails = gold_tail_map(kb);

  // Same-relation triples, for shared-relation negatives.
  std::map<std::int64_t, std::vector<const Triple*>> by_relation;
  if (type == ExampleLabel::kSharedRelationNeg)
    for (const Triple& t : kb.triples) by_relation[t.relation].push_back(&t);

  // Valid shared-entity candidate docs are the same for every slot of one
  // positive; cache them.
  std::map<std::int64_t, std::vector<std::int64_t>> shared_entity_cache;

  auto note = [&](std::int64_t pos_idx, const char* why) {
    if (log)
      log->push_back("negative type " + std::to_string(static_cast<int>(type)) +
                     " unavailable for positive " + std::to_string(pos_idx) + ": " + why);
  };

  std::vector<SlotFillingExample> out;
  const std::int64_t n_pos = static_cast<std::int64_t>(positives.size());
  constexpr int kAttempts = 50;

  for (std::int64_t slot = 0; slot < count; ++slot) {
    const std::int64_t pi = slot % n_pos;
    const SlotFillingExample& pos = positives[static_cast<std::size_t>(pi)];
    const auto& gold = tails.at({pos.subject, pos.relation});

    std::int64_t chosen_doc = -1;
    switch (type) {
      case ExampleLabel::kSharedEntityNeg: {
        auto it = shared_entity_cache.find(pi);
        if (it == shared_entity_cache.end()) {
          std::vector<std::int64_t> cands;
          for (std::int64_t d : by_entity[static_cast<std::size_t>(pos.subject)])
            if (d != pos.doc_id && passage_excludes(corpus, d, gold)) cands.push_back(d);
          it = shared_entity_cache.emplace(pi, std::move(cands)).first;
        }
        if (it->second.empty()) {
          note(pi, "no other clean passage mentions the subject");
          continue;
        }
        chosen_doc = it->second[rng.next_index(it->second.size())];
        break;
      }
      case ExampleLabel::kSharedRelationNeg: {
        const auto& pool = by_relation[pos.relation];
        for (int a = 0; a < kAttempts && chosen_doc < 0; ++a) {
          const Triple& t = *pool[rng.next_index(pool.size())];
          if (t.subject == pos.subject) continue;
          auto docs = copresence_docs(by_entity, corpus, t.subject, t.object, titles);
          if (docs.empty()) continue;
          const std::int64_t d = docs[rng.next_index(docs.size())];
          if (d != pos.doc_id && passage_excludes(corpus, d, gold)) chosen_doc = d;
        }
        if (chosen_doc < 0) {
          note(pi, "no clean passage expressing the relation elsewhere");
          continue;
        }
        break;
      }
      case ExampleLabel::kRandomNeg: {
        for (int a = 0; a < kAttempts && chosen_doc < 0; ++a) {
          const std::int64_t d =
              static_cast<std::int64_t>(rng.next_index(corpus.documents.size()));
          if (d != pos.doc_id && passage_excludes(corpus, d, gold)) chosen_doc = d;
        }
        if (chosen_doc < 0) {
          note(pi, "no clean random passage found");
          continue;
        }
        break;
      }
      case ExampleLabel::kPositive:
        break;  // unreachable
    }

    SlotFillingExample neg;
    neg.query = pos.query;
    neg.doc_id = chosen_doc;
    neg.label = type;
    neg.subject = pos.subject;
    neg.relation = pos.relation;
    neg.positive_index = pi;
    out.push_back(std::move(neg));
  }
  return out;
}

std::vector<PretrainGroup> build_pretraining_groups(
    std::span<const SlotFillingExample> positives, const KnowledgeBase& kb,
    const Corpus& corpus, const TrainConfig& config, std::vector<std::string>* log) {
  config.check();
  std::vector<PretrainGroup> groups(positives.size());
  for (std::size_t i = 0; i < positives.size(); ++i) groups[i].positive = positives[i];
  if (positives.empty() || config.negatives_per_positive == 0) return groups;

  // Largest-remainder allocation of the total negative budget to the three
  // types, so realized counts track the ratios within +-1.
  const std::int64_t total =
      static_cast<std::int64_t>(positives.size()) * config.negatives_per_positive;
  const double ratios[3] = {config.mix_shared_entity, config.mix_shared_relation,
                            config.mix_random};
  std::int64_t counts[3];
  double remainders[3];
  std::int64_t assigned = 0;
  for (int t = 0; t < 3; ++t) {
    const double target = ratios[t] * static_cast<double>(total);
    counts[t] = static_cast<std::int64_t>(std::floor(target));
    remainders[t] = target - static_cast<double>(counts[t]);
    assigned += counts[t];
  }
  while (assigned < total) {
    int best = 0;
    for (int t = 1; t < 3; ++t)
      if (remainders[t] > remainders[best]) best = t;
    ++counts[best];
    remainders[best] = -1.0;
    ++assigned;
  }

  Rng rng(config.seed);
  const ExampleLabel types[3] = {ExampleLabel::kSharedEntityNeg,
                                 ExampleLabel::kSharedRelationNeg, ExampleLabel::kRandomNeg};
  for (int t = 0; t < 3; ++t) {
    auto negs = make_negatives(positives, kb, corpus, types[t], counts[t], rng, log);
    for (auto& n : negs) {
      const std::size_t pi = static_cast<std::size_t>(n.positive_index);
      groups[pi].negatives.push_back(std::move(n));
    }
  }
  return groups;
}

std::optional<double> span_loss_and_grad(const PretrainGroup& group, const Corpus& corpus,
                                         const Encoders& encoders, EncoderGrads* grads) {
  const std::int64_t p = encoders.config().p;
  const std::size_t half = static_cast<std::size_t>(p / 2);

  // Candidate spans: entity-linked mentions of the positive passage plus
  // those of every (distinct) negative passage.
  std::vector<std::int64_t> docs{group.positive.doc_id};
  for (const auto& n : group.negatives)
    if (std::find(docs.begin(), docs.end(), n.doc_id) == docs.end()) docs.push_back(n.doc_id);

  std::vector<std::int64_t> cand;
  std::vector<bool> gold;
  for (std::int64_t d : docs) {
    for (std::int64_t mid : corpus.mentions_by_doc[static_cast<std::size_t>(d)]) {
      const Mention& m = corpus.mentions[static_cast<std::size_t>(mid)];
      bool is_gold = false;
      if (d == group.positive.doc_id)
        for (const auto& [s, e] : group.positive.answer_spans)
          if (m.start == s && m.end == e) is_gold = true;
      cand.push_back(mid);
      gold.push_back(is_gold);
    }
  }
  if (std::find(gold.begin(), gold.end(), true) == gold.end()) return std::nullopt;

  // Query embedding: hop-0 question encoding conditioned on the subject.
  const FeatureVec psi = encoders.featurize_question(group.positive.query);
  const SparseVector subject =
      SparseVector::one_hot(encoders.n_entities(), group.positive.subject);
  const std::vector<double> g =
      encoders.condition_query(encoders.encode_query(psi, 0), subject);

  // Span scores: first halves of f(m) and g score starts, second halves ends.
  const std::size_t n = cand.size();
  std::vector<FeatureVec> phis(n);
  std::vector<std::vector<double>> f(n);
  std::vector<double> s_start(n), s_end(n);
  for (std::size_t c = 0; c < n; ++c) {
    const Mention& m = corpus.mentions[static_cast<std::size_t>(cand[c])];
    phis[c] = encoders.featurize_mention(
        corpus.documents[static_cast<std::size_t>(m.doc_id)], m);
    f[c] = encoders.encode_mention(phis[c]);
    double a = 0.0, b = 0.0;
    for (std::size_t j = 0; j < half; ++j) a += f[c][j] * g[j];
    for (std::size_t j = half; j < static_cast<std::size_t>(p); ++j) b += f[c][j] * g[j];
    s_start[c] = a;
    s_end[c] = b;
  }

  auto softmax = [](std::vector<double> s) {
    const double mx = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& v : s) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : s) v /= z;
    return s;
  };
  const std::vector<double> p_start = softmax(s_start);
  const std::vector<double> p_end = softmax(s_end);

  constexpr double kFloor = 1e-12;
  double mass_start = 0.0, mass_end = 0.0;
  for (std::size_t c = 0; c < n; ++c) {
    if (!gold[c]) continue;
    mass_start += p_start[c];
    mass_end += p_end[c];
  }
  mass_start = std::max(mass_start, kFloor);
  mass_end = std::max(mass_end, kFloor);
  const double loss = -std::log(mass_start) - std::log(mass_end);

  if (grads != nullptr) {
    std::vector<double> dg(static_cast<std::size_t>(p), 0.0);
    std::vector<double> df(static_cast<std::size_t>(p));
    for (std::size_t c = 0; c < n; ++c) {
      const double ds = p_start[c] * (1.0 - (gold[c] ? 1.0 / mass_start : 0.0));
      const double de = p_end[c] * (1.0 - (gold[c] ? 1.0 / mass_end : 0.0));
      for (std::size_t j = 0; j < half; ++j) {
        df[j] = ds * g[j];
        dg[j] += ds * f[c][j];
      }
      for (std::size_t j = half; j < static_cast<std::size_t>(p); ++j) {
        df[j] = de * g[j];
        dg[j] += de * f[c][j];
      }
      encoders.grad_mention(phis[c], df, *grads);
    }
    // Only the subject-embedding half of the query path trains here; the
    // query projection stays at its initialization until the later stage.
    encoders.grad_condition(subject, dg, *grads, nullptr);
  }
  return loss;
}

std::vector<EpochMetrics> pretrain_mention_encoder(std::span<const PretrainGroup> groups,
                                                   const Corpus& corpus, Encoders& encoders,
                                                   const TrainConfig& config,
                                                   std::vector<std::string>* log) {
  config.check();
  if (groups.empty()) throw ContractError("pretrain: no groups");

  SgdMomentum opt(config.lr, config.momentum);
  opt.register_tensor("mention_proj", &encoders.params().mention_proj);
  opt.register_tensor("word_table", &encoders.params().word_table);

  Rng rng(config.seed);
  std::vector<std::size_t> order(groups.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<EpochMetrics> metrics;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double t0 = wall_ms();
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::int64_t used = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(config.batch_size));
      EncoderGrads grads = EncoderGrads::zeros_like(encoders.params());
      std::int64_t batch_used = 0;
      for (std::size_t i = b; i < e; ++i) {
        auto loss = span_loss_and_grad(groups[order[i]], corpus, encoders, &grads);
        if (!loss.has_value()) {
          if (log)
            log->push_back("pretrain: group " + std::to_string(order[i]) +
                           " skipped: no gold candidate span");
          continue;
        }
        loss_sum += *loss;
        ++batch_used;
      }
      if (batch_used == 0) continue;
      scale_grads(grads, 1.0 / static_cast<double>(batch_used));
      opt.step({{"mention_proj", &grads.mention_proj}, {"word_table", &grads.word_table}});
      encoders.note_params_changed();
      used += batch_used;
    }
    EpochMetrics m;
    m.epoch = epoch;
    m.loss = used > 0 ? loss_sum / static_cast<double>(used) : 0.0;
    m.wall_ms = wall_ms() - t0;
    metrics.push_back(m);
  }
  return metrics;
}

DenseMentionIndex freeze_and_index(const Encoders& encoders, const Corpus& corpus,
                                   const IndexConfig& config) {
  DenseMentionIndex index = DenseMentionIndex::build(encoders.encode_all_mentions(corpus),
                                                     encoders.config().p, config);
  index.set_source_hash(encoders.mention_fingerprint());
  return index;
}

SparseVector initial_distribution(const MultiHopQuestion& q, std::int64_t n_entities) {
  if (q.seed_entities.empty()) throw ContractError("question has no seed entities");
  return SparseVector::uniform_over(n_entities, q.seed_entities);
}

bool in_dev_split(const std::string& text, const TrainConfig& config) {
  const auto bucket = hash64(text, config.seed) % 100;
  return bucket < static_cast<std::uint64_t>(std::llround(config.dev_fraction * 100.0));
}

EvalResult evaluate_questions(std::span<const MultiHopQuestion> questions,
                              const Reasoner& reasoner, const FollowConfig& follow,
                              bool use_mixture) {
  EvalResult out;
  out.n = static_cast<std::int64_t>(questions.size());
  const std::int64_t n_entities = reasoner.encoders().n_entities();

  std::vector<std::vector<std::int64_t>> golds;
  for (const MultiHopQuestion& q : questions) {
    const SparseVector z0 = initial_distribution(q, n_entities);

    SparseVector final;
    std::vector<SparseVector> hop_dists;
    FollowConfig cfg = follow;
    bool ok = false;
    for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
      if (attempt == 1) cfg.k = follow.k * 4;
      try {
        if (use_mixture) {
          MixtureResult r = reasoner.mixture(q.text, z0, cfg);
          final = r.mix.z_star;
          hop_dists.assign(r.hops.z.begin() + 1, r.hops.z.end());
        } else {
          MultiHopResult r = reasoner.multi_hop(q.text, z0, q.hops, cfg);
          final = r.z.back();
          hop_dists.assign(r.z.begin() + 1, r.z.end());
        }
        ok = true;
      } catch (const EmptyResultError&) {
        hop_dists.clear();
      }
    }

    if (!ok) {
      ++out.empty_results;
      out.rankings.emplace_back();
    } else {
      for (const SparseVector& z : hop_dists)
        if (z.nnz() > cfg.k) ++out.sparsity_violations;
      out.rankings.push_back(rank_entities(final));
    }
    golds.push_back(q.answers);
  }

  out.hits1 = hits_at_k(out.rankings, golds, 1);
  out.hits5 = hits_at_k(out.rankings, golds, 5);
  return out;
}

double hits_at_k(std::span<const std::vector<RankedEntity>> predictions,
                 std::span<const std::vector<std::int64_t>> gold, int k) {
  if (predictions.size() != gold.size())
    throw ContractError("hits_at_k: prediction/gold size mismatch");
  if (predictions.empty()) return 0.0;
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& ranked = predictions[i];
    const auto& g = gold[i];
    const std::size_t top = std::min(ranked.size(), static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < top; ++r) {
      if (std::binary_search(g.begin(), g.end(), ranked[r].entity)) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

double retrieval_accuracy_at_k(std::span<const std::vector<std::int64_t>> ranked_docs,
                               std::span<const std::vector<std::int64_t>> required_docs,
                               int k) {
  if (ranked_docs.size() != required_docs.size())
    throw ContractError("retrieval_accuracy_at_k: size mismatch");
  if (ranked_docs.empty()) return 0.0;
  std::int64_t hits = 0;
  for (std::size_t i = 0; i < ranked_docs.size(); ++i) {
    const auto& ranked = ranked_docs[i];
    const std::size_t top = std::min(ranked.size(), static_cast<std::size_t>(k));
    bool all = !required_docs[i].empty();
    for (std::int64_t need : required_docs[i]) {
      if (std::find(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(top), need) ==
          ranked.begin() + static_cast<std::ptrdiff_t>(top)) {
        all = false;
        break;
      }
    }
    if (all) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ranked_docs.size());
}

TrainResult train_end_to_end(std::span<const MultiHopQuestion> questions,
                             const Reasoner& reasoner, Encoders& encoders,
                             const FollowConfig& follow, const TrainConfig& config,
                             std::ostream* metrics_out) {
  config.check();
  follow.check();
  if (&reasoner.encoders() != &encoders)
    throw ContractError("train_end_to_end: reasoner must wrap the trained encoders");
  if (questions.empty()) throw ContractError("train_end_to_end: no questions");

  std::vector<std::size_t> train_ids;
  std::vector<MultiHopQuestion> dev;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    if (in_dev_split(questions[i].text, config))
      dev.push_back(questions[i]);
    else
      train_ids.push_back(i);
  }
  if (train_ids.empty()) throw ContractError("train_end_to_end: dev split ate every question");

  SgdMomentum opt(config.lr, config.momentum);
  EncoderParams& params = encoders.params();
  std::vector<std::string> proj_names;
  for (std::size_t t = 0; t < params.query_proj.size(); ++t) {
    proj_names.push_back("query_proj_" + std::to_string(t));
    opt.register_tensor(proj_names.back(), &params.query_proj[t]);
  }
  opt.register_tensor("word_table", &params.word_table);
  opt.register_tensor("mixer", &params.mixer);
  opt.register_tensor("rescore_proj", &params.rescore_proj);

  const std::int64_t n_entities = encoders.n_entities();
  Rng rng(config.seed);
  TrainResult result;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const double t0 = wall_ms();
    rng.shuffle(train_ids);
    double loss_sum = 0.0;
    std::int64_t used_total = 0;

    for (std::size_t b = 0; b < train_ids.size();
         b += static_cast<std::size_t>(config.batch_size)) {
      // The mention side must still match the index that was frozen from it.
      if (encoders.mention_fingerprint() != reasoner.index().source_hash())
        throw StalenessError("train_end_to_end: mention encoder drifted from the index");

      const std::size_t e =
          std::min(train_ids.size(), b + static_cast<std::size_t>(config.batch_size));
      EncoderGrads grads = EncoderGrads::zeros_like(params);
      std::int64_t batch_used = 0;

      for (std::size_t i = b; i < e; ++i) {
        const MultiHopQuestion& q = questions[train_ids[i]];
        const SparseVector z0 = initial_distribution(q, n_entities);
        FollowConfig cfg = follow;

        if (config.use_mixture) {
          std::optional<MixtureResult> r;
          for (int attempt = 0; attempt < 2 && !r.has_value(); ++attempt) {
            if (attempt == 1) cfg.k = follow.k * 4;
            try {
              r = reasoner.mixture(q.text, z0, cfg);
            } catch (const EmptyResultError&) {
            }
          }
          if (!r.has_value()) {
            ++result.skipped_empty;
            continue;
          }
          LossResult lr = loss_and_grad(r->mix.z_star, q.answers);
          if (lr.zero_mass) {
            ++result.skipped_zero_mass;
            continue;
          }
          reasoner.mixture_backward(*r, lr.dz, cfg, grads);
          loss_sum += lr.loss;
          ++batch_used;
        } else {
          std::optional<MultiHopResult> r;
          for (int attempt = 0; attempt < 2 && !r.has_value(); ++attempt) {
            if (attempt == 1) cfg.k = follow.k * 4;
            try {
              r = reasoner.multi_hop(q.text, z0, q.hops, cfg);
            } catch (const EmptyResultError&) {
            }
          }
          if (!r.has_value()) {
            ++result.skipped_empty;
            continue;
          }
          LossResult lr = loss_and_grad(r->z.back(), q.answers);
          if (lr.zero_mass) {
            ++result.skipped_zero_mass;
            continue;
          }
          reasoner.multi_hop_backward(*r, lr.dz, cfg, grads);
          loss_sum += lr.loss;
          ++batch_used;
        }
      }

      if (batch_used == 0) continue;
      scale_grads(grads, 1.0 / static_cast<double>(batch_used));
      std::map<std::string, const SparseRowGrads*> step;
      for (std::size_t t = 0; t < grads.query_proj.size(); ++t)
        step[proj_names[t]] = &grads.query_proj[t];
      step["word_table"] = &grads.word_table;
      step["mixer"] = &grads.mixer;
      step["rescore_proj"] = &grads.rescore_proj;
      opt.step(step);
      encoders.note_params_changed();
      used_total += batch_used;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = used_total > 0 ? loss_sum / static_cast<double>(used_total) : 0.0;
    if (!dev.empty()) {
      EvalResult ev = evaluate_questions(dev, reasoner, follow, config.use_mixture);
      m.hits1 = ev.hits1;
      m.hits5 = ev.hits5;
    }
    m.wall_ms = wall_ms() - t0;
    result.log.push_back(m);
    if (metrics_out != nullptr) *metrics_out << to_json_line(m) << '\n';
  }
  return result;
}

}  // namespace vkb
