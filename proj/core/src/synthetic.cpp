#include "vkb/synthetic.hpp"

#include <algorithm>
#include <set>
#include <string>

#include "vkb/util.hpp"

namespace vkb {

namespace {

// Verbalizations for relation ids.  Tokens here never collide with entity
// surfaces (those are always "ent<k>"), so a question's head entity is
// unambiguous.  Ids beyond the pool fall back to "relation<j> of".
const char* kRelationPhrases[] = {
    "directed by",   "produced by",  "works at",   "born in",
    "married to",    "lives in",     "capital of", "member of",
    "plays for",     "wrote about",  "owned by",   "reports to",
    "studied at",    "discovered in", "named after", "exported from",
};

std::string relation_phrase(std::int64_t r) {
  constexpr std::int64_t kPool = static_cast<std::int64_t>(std::size(kRelationPhrases));
  if (r < kPool) return kRelationPhrases[r];
  return "relation" + std::to_string(r) + " of";
}

std::string entity_surface(std::int64_t e) { return "ent" + std::to_string(e); }

}  // namespace

KbIndex::KbIndex(const KnowledgeBase& kb, std::int64_t n_entities)
    : in_degree_(static_cast<std::size_t>(n_entities), 0),
      n_relations_(kb.n_relations()) {
  std::vector<Triple> sorted = kb.triples;
  std::sort(sorted.begin(), sorted.end());
  objects_.reserve(sorted.size());
  for (std::size_t i = 0; i < sorted.size();) {
    const std::int64_t s = sorted[i].subject;
    const std::int64_t r = sorted[i].relation;
    const std::int64_t begin = static_cast<std::int64_t>(objects_.size());
    while (i < sorted.size() && sorted[i].subject == s && sorted[i].relation == r) {
      objects_.push_back(sorted[i].object);
      ++i;
    }
    const std::uint64_t key =
        static_cast<std::uint64_t>(s) * static_cast<std::uint64_t>(n_relations_) +
        static_cast<std::uint64_t>(r);
    spans_.emplace(key, std::pair{begin, static_cast<std::int64_t>(objects_.size())});
  }
  for (const Triple& t : kb.triples) ++in_degree_[t.object];
}

std::span<const std::int64_t> KbIndex::objects(std::int64_t subject,
                                               std::int64_t relation) const {
  const std::uint64_t key =
      static_cast<std::uint64_t>(subject) * static_cast<std::uint64_t>(n_relations_) +
      static_cast<std::uint64_t>(relation);
  auto it = spans_.find(key);
  if (it == spans_.end()) return {};
  return {objects_.data() + it->second.first,
          static_cast<std::size_t>(it->second.second - it->second.first)};
}

std::vector<std::int64_t> traverse_step(const KbIndex& index,
                                        std::span<const std::int64_t> frontier,
                                        std::int64_t relation,
                                        std::optional<std::int64_t> max_in_degree) {
  std::vector<std::int64_t> next;
  for (std::int64_t s : frontier)
    for (std::int64_t o : index.objects(s, relation)) {
      if (max_in_degree && index.in_degree(o) > *max_in_degree) continue;
      next.push_back(o);
    }
  std::sort(next.begin(), next.end());
  next.erase(std::unique(next.begin(), next.end()), next.end());
  return next;
}

std::vector<std::vector<std::int64_t>> traverse_chain(const KbIndex& index, std::int64_t head,
                                                      std::span<const std::int64_t> relations,
                                                      std::int64_t max_in_degree) {
  std::vector<std::vector<std::int64_t>> chain;
  chain.push_back({head});
  for (std::size_t t = 0; t < relations.size(); ++t) {
    const bool last = (t + 1 == relations.size());
    chain.push_back(traverse_step(
        index, chain.back(), relations[t],
        last ? std::nullopt : std::optional<std::int64_t>(max_in_degree)));
    if (chain.back().empty()) break;
  }
  return chain;
}

void SyntheticConfig::check() const {
  if (n_entities < 2) throw ConfigError("synthetic: need at least 2 entities");
  if (n_relations < 1) throw ConfigError("synthetic: need at least 1 relation");
  if (n_docs < 1 || n_docs > n_entities)
    throw ConfigError("synthetic: n_docs must be in [1, n_entities]");
  if (n_questions < 0) throw ConfigError("synthetic: n_questions must be >= 0");
  if (max_hops < 1) throw ConfigError("synthetic: max_hops must be >= 1");
  if (min_out_degree < 1 || max_out_degree < min_out_degree)
    throw ConfigError("synthetic: out-degree bounds invalid");
  if (max_in_degree < 1) throw ConfigError("synthetic: max_in_degree must be >= 1");
}

SyntheticDataset generate_synthetic_dataset(const SyntheticConfig& config) {
  config.check();
  Rng rng(config.seed);
  SyntheticDataset ds;

  // Entities.
  ds.corpus.entities.reserve(static_cast<std::size_t>(config.n_entities));
  for (std::int64_t e = 0; e < config.n_entities; ++e) {
    Entity ent;
    ent.entity_id = e;
    ent.surface_form = entity_surface(e);
    ds.corpus.entities.push_back(std::move(ent));
  }

  // Relations.
  for (std::int64_t r = 0; r < config.n_relations; ++r)
    ds.kb.relation_descriptions.push_back(relation_phrase(r));

  // Subjects: a seeded shuffle decides which entities get a document.
  std::vector<std::int64_t> order(static_cast<std::size_t>(config.n_entities));
  for (std::int64_t e = 0; e < config.n_entities; ++e)
    order[static_cast<std::size_t>(e)] = e;
  rng.shuffle(order);
  order.resize(static_cast<std::size_t>(config.n_docs));

  // Triples: per subject, a small number of distinct edges.
  std::set<Triple> seen;
  std::vector<std::vector<Triple>> triples_by_doc(order.size());
  const int degree_range = config.max_out_degree - config.min_out_degree + 1;
  for (std::size_t d = 0; d < order.size(); ++d) {
    const std::int64_t s = order[d];
    const int degree =
        config.min_out_degree + static_cast<int>(rng.next_index(static_cast<std::size_t>(degree_range)));
    for (int k = 0; k < degree; ++k) {
      bool placed = false;
      for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
        Triple t;
        t.subject = s;
        t.relation = static_cast<std::int64_t>(rng.next_index(static_cast<std::size_t>(config.n_relations)));
        t.object = static_cast<std::int64_t>(rng.next_index(static_cast<std::size_t>(config.n_entities)));
        if (t.object == s) continue;
        if (seen.insert(t).second) {
          triples_by_doc[d].push_back(t);
          placed = true;
        }
      }
    }
    if (triples_by_doc[d].empty())
      throw GenerationError("synthetic: could not place any triple for subject " +
                            std::to_string(s));
  }
  for (const auto& ts : triples_by_doc)
    for (const Triple& t : ts) ds.kb.triples.push_back(t);

  // Documents: one per subject, one sentence per triple.
  for (std::size_t d = 0; d < order.size(); ++d) {
    Document doc;
    doc.doc_id = static_cast<std::int64_t>(d);
    doc.title_entity = order[d];
    for (const Triple& t : triples_by_doc[d]) {
      const std::int64_t base = static_cast<std::int64_t>(doc.tokens.size());
      doc.tokens.push_back(entity_surface(t.subject));
      std::vector<std::string> desc = tokenize(ds.kb.relation_descriptions[t.relation]);
      for (std::string& tok : desc) doc.tokens.push_back(std::move(tok));
      const std::int64_t obj_pos = static_cast<std::int64_t>(doc.tokens.size());
      doc.tokens.push_back(entity_surface(t.object));
      doc.tokens.push_back(".");

      Mention subj;
      subj.entity_id = t.subject;
      subj.doc_id = doc.doc_id;
      subj.start = subj.end = base;
      Mention obj;
      obj.entity_id = t.object;
      obj.doc_id = doc.doc_id;
      obj.start = obj.end = obj_pos;
      ds.corpus.mentions.push_back(subj);
      ds.corpus.mentions.push_back(obj);
    }
    ds.corpus.documents.push_back(std::move(doc));
  }
  for (std::size_t m = 0; m < ds.corpus.mentions.size(); ++m)
    ds.corpus.mentions[m].mention_id = static_cast<std::int64_t>(m);
  ds.corpus.finalize();
  ds.kb.check(config.n_entities);

  // Questions.
  KbIndex index(ds.kb, config.n_entities);
  std::vector<std::int64_t> heads = order;  // every subject has out-edges
  constexpr int kMaxAttempts = 500;
  for (std::int64_t qi = 0; qi < config.n_questions; ++qi) {
    const int hops = 1 + static_cast<int>(qi % config.max_hops);
    bool done = false;
    for (int attempt = 0; attempt < kMaxAttempts && !done; ++attempt) {
      const std::int64_t head = heads[rng.next_index(heads.size())];
      std::vector<std::int64_t> relations;
      std::vector<std::vector<std::int64_t>> chain;
      chain.push_back({head});
      bool dead = false;
      for (int t = 0; t < hops && !dead; ++t) {
        const bool last = (t + 1 == hops);
        std::vector<std::int64_t> viable;
        for (std::int64_t r = 0; r < config.n_relations; ++r) {
          auto next = traverse_step(
              index, chain.back(), r,
              last ? std::nullopt : std::optional<std::int64_t>(config.max_in_degree));
          if (!next.empty()) viable.push_back(r);
        }
        if (viable.empty()) {
          dead = true;
          break;
        }
        const std::int64_t r = viable[rng.next_index(viable.size())];
        relations.push_back(r);
        chain.push_back(traverse_step(
            index, chain.back(), r,
            last ? std::nullopt : std::optional<std::int64_t>(config.max_in_degree)));
      }
      if (dead) continue;

      MultiHopQuestion q;
      q.hops = hops;
      q.seed_entities = {head};
      q.answers = chain.back();
      q.gold_chain = std::move(chain);
      q.text = entity_surface(head);
      for (std::int64_t r : relations) q.text += " , " + ds.kb.relation_descriptions[r];
      q.text += " , ?";
      ds.questions.push_back(std::move(q));
      done = true;
    }
    if (!done)
      throw GenerationError("synthetic: no answerable " + std::to_string(hops) +
                            "-hop question found after " + std::to_string(kMaxAttempts) +
                            " attempts; graph too sparse for the requested shape");
  }

  return ds;
}

}  // namespace vkb
