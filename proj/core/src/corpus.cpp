#include "vkb/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "vkb/featurize.hpp"
#include "vkb/util.hpp"

namespace vkb {

using nlohmann::json;

namespace {

json parse_json_line(const std::string& line, const std::string& path, std::size_t lineno) {
  json j = json::parse(line, nullptr, false);
  if (j.is_discarded() || !j.is_object())
    throw ParseError(path + ":" + std::to_string(lineno) + ": malformed JSON object");
  return j;
}

// Reads a required field, with type checking that yields a ParseError
// mentioning file and line rather than a json exception.
template <typename T>
T get_field(const json& j, const char* key, const std::string& path, std::size_t lineno) {
  auto it = j.find(key);
  if (it == j.end())
    throw ParseError(path + ":" + std::to_string(lineno) + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(path + ":" + std::to_string(lineno) + ": field '" + key +
                     "' has wrong type");
  }
}

std::ifstream open_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  return in;
}

}  // namespace

void Corpus::finalize() {
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (documents[i].doc_id != static_cast<std::int64_t>(i))
      throw ValidationError("doc ids must be dense and ascending from 0");
    if (documents[i].tokens.empty())
      throw ValidationError("document " + std::to_string(i) + " has no tokens");
    if (documents[i].title_entity &&
        (*documents[i].title_entity < 0 || *documents[i].title_entity >= n_entities()))
      throw ValidationError("document " + std::to_string(i) + " has dangling title entity");
  }
  for (std::size_t e = 0; e < entities.size(); ++e) {
    if (entities[e].entity_id != static_cast<std::int64_t>(e))
      throw ValidationError("entity ids must be dense and ascending from 0");
    if (entities[e].surface_form.empty())
      throw ValidationError("entity " + std::to_string(e) + " has empty surface form");
  }
  for (std::size_t m = 0; m < mentions.size(); ++m) {
    const Mention& men = mentions[m];
    if (men.mention_id != static_cast<std::int64_t>(m))
      throw ValidationError("mention ids must be dense and ascending from 0");
    if (men.doc_id < 0 || men.doc_id >= n_docs())
      throw ValidationError("mention " + std::to_string(m) + " has dangling doc id");
    if (men.entity_id < 0 || men.entity_id >= n_entities())
      throw ValidationError("mention " + std::to_string(m) + " has dangling entity id");
    const auto len = static_cast<std::int64_t>(documents[men.doc_id].tokens.size());
    if (men.start < 0 || men.start > men.end || men.end >= len)
      throw ValidationError("mention " + std::to_string(m) + " span out of bounds");
    if (m > 0) {
      const Mention& prev = mentions[m - 1];
      if (std::tuple(prev.doc_id, prev.start, prev.end) >
          std::tuple(men.doc_id, men.start, men.end))
        throw ValidationError("mentions must be sorted by (doc, start, end)");
    }
  }

  mentions_by_doc.assign(documents.size(), {});
  for (const Mention& m : mentions) mentions_by_doc[m.doc_id].push_back(m.mention_id);
  entity_mention_count.assign(entities.size(), 0);
  for (const Mention& m : mentions) ++entity_mention_count[m.entity_id];
}

Corpus ingest_corpus(const std::string& corpus_path, const std::string& lexicon_path) {
  Corpus c;

  {
    std::ifstream in = open_text(lexicon_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j = parse_json_line(line, lexicon_path, lineno);
      Entity e;
      e.entity_id = get_field<std::int64_t>(j, "entity_id", lexicon_path, lineno);
      e.surface_form = get_field<std::string>(j, "surface_form", lexicon_path, lineno);
      if (j.contains("aliases"))
        e.aliases = get_field<std::vector<std::string>>(j, "aliases", lexicon_path, lineno);
      c.entities.push_back(std::move(e));
    }
  }

  struct RawMention {
    std::int64_t entity_id, doc_id, start, end;
  };
  std::vector<RawMention> raw;
  {
    std::ifstream in = open_text(corpus_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j = parse_json_line(line, corpus_path, lineno);
      Document d;
      d.doc_id = get_field<std::int64_t>(j, "doc_id", corpus_path, lineno);
      d.tokens = get_field<std::vector<std::string>>(j, "tokens", corpus_path, lineno);
      if (j.contains("title_entity"))
        d.title_entity = get_field<std::int64_t>(j, "title_entity", corpus_path, lineno);
      if (j.contains("mentions")) {
        const json& ms = j.at("mentions");
        if (!ms.is_array())
          throw ParseError(corpus_path + ":" + std::to_string(lineno) +
                           ": 'mentions' must be an array");
        for (const json& mj : ms) {
          RawMention rm;
          rm.doc_id = d.doc_id;
          rm.entity_id = get_field<std::int64_t>(mj, "entity_id", corpus_path, lineno);
          rm.start = get_field<std::int64_t>(mj, "start", corpus_path, lineno);
          rm.end = get_field<std::int64_t>(mj, "end", corpus_path, lineno);
          raw.push_back(rm);
        }
      }
      c.documents.push_back(std::move(d));
    }
  }

  std::stable_sort(raw.begin(), raw.end(), [](const RawMention& a, const RawMention& b) {
    return std::tuple(a.doc_id, a.start, a.end) < std::tuple(b.doc_id, b.start, b.end);
  });
  c.mentions.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    Mention m;
    m.mention_id = static_cast<std::int64_t>(i);
    m.entity_id = raw[i].entity_id;
    m.doc_id = raw[i].doc_id;
    m.start = raw[i].start;
    m.end = raw[i].end;
    c.mentions.push_back(m);
  }

  c.finalize();
  return c;
}

void write_corpus(const Corpus& corpus, const std::string& corpus_path,
                  const std::string& lexicon_path) {
  {
    std::ofstream out(lexicon_path);
    if (!out) throw IoError("cannot open for writing: " + lexicon_path);
    for (const Entity& e : corpus.entities) {
      json j;
      j["entity_id"] = e.entity_id;
      j["surface_form"] = e.surface_form;
      if (!e.aliases.empty()) j["aliases"] = e.aliases;
      out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + lexicon_path);
  }
  {
    std::ofstream out(corpus_path);
    if (!out) throw IoError("cannot open for writing: " + corpus_path);
    std::size_t next_mention = 0;
    for (const Document& d : corpus.documents) {
      json j;
      j["doc_id"] = d.doc_id;
      j["tokens"] = d.tokens;
      json ms = json::array();
      while (next_mention < corpus.mentions.size() &&
             corpus.mentions[next_mention].doc_id == d.doc_id) {
        const Mention& m = corpus.mentions[next_mention];
        ms.push_back({{"entity_id", m.entity_id}, {"start", m.start}, {"end", m.end}});
        ++next_mention;
      }
      j["mentions"] = std::move(ms);
      if (d.title_entity) j["title_entity"] = *d.title_entity;
      out << j.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + corpus_path);
  }
}

void KnowledgeBase::check(std::int64_t n_entities) const {
  for (const Triple& t : triples) {
    if (t.subject < 0 || t.subject >= n_entities || t.object < 0 || t.object >= n_entities)
      throw ValidationError("triple references unknown entity");
    if (t.relation < 0 || t.relation >= n_relations())
      throw ValidationError("triple references unknown relation");
  }
  std::vector<Triple> sorted = triples;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ValidationError("duplicate triple in knowledge base");
  for (const std::string& d : relation_descriptions)
    if (d.empty()) throw ValidationError("empty relation description");
}

KnowledgeBase read_kb(const std::string& triples_path, const std::string& relations_path,
                      std::int64_t n_entities) {
  KnowledgeBase kb;
  {
    std::ifstream in = open_text(relations_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::size_t tab = line.find('\t');
      if (tab == std::string::npos)
        throw ParseError(relations_path + ":" + std::to_string(lineno) + ": expected 2 fields");
      std::int64_t id = 0;
      try {
        id = std::stoll(line.substr(0, tab));
      } catch (const std::exception&) {
        throw ParseError(relations_path + ":" + std::to_string(lineno) + ": bad relation id");
      }
      if (id != static_cast<std::int64_t>(kb.relation_descriptions.size()))
        throw ValidationError(relations_path + ": relation ids must be dense and ascending");
      kb.relation_descriptions.push_back(line.substr(tab + 1));
    }
  }
  {
    std::ifstream in = open_text(triples_path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      Triple t;
      std::string s, r, o;
      if (!std::getline(ss, s, '\t') || !std::getline(ss, r, '\t') || !std::getline(ss, o))
        throw ParseError(triples_path + ":" + std::to_string(lineno) + ": expected 3 fields");
      try {
        t.subject = std::stoll(s);
        t.relation = std::stoll(r);
        t.object = std::stoll(o);
      } catch (const std::exception&) {
        throw ParseError(triples_path + ":" + std::to_string(lineno) + ": bad id");
      }
      kb.triples.push_back(t);
    }
  }
  kb.check(n_entities);
  return kb;
}

void write_kb(const KnowledgeBase& kb, const std::string& triples_path,
              const std::string& relations_path) {
  {
    std::ofstream out(relations_path);
    if (!out) throw IoError("cannot open for writing: " + relations_path);
    for (std::size_t r = 0; r < kb.relation_descriptions.size(); ++r)
      out << r << "\t" << kb.relation_descriptions[r] << "\n";
    if (!out) throw IoError("write failed: " + relations_path);
  }
  {
    std::ofstream out(triples_path);
    if (!out) throw IoError("cannot open for writing: " + triples_path);
    for (const Triple& t : kb.triples)
      out << t.subject << "\t" << t.relation << "\t" << t.object << "\n";
    if (!out) throw IoError("write failed: " + triples_path);
  }
}

std::vector<MultiHopQuestion> read_questions(const std::string& path) {
  std::vector<MultiHopQuestion> out;
  std::ifstream in = open_text(path);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j = parse_json_line(line, path, lineno);
    MultiHopQuestion q;
    q.text = get_field<std::string>(j, "text", path, lineno);
    q.hops = get_field<int>(j, "hops", path, lineno);
    q.seed_entities = get_field<std::vector<std::int64_t>>(j, "seed_entities", path, lineno);
    q.answers = get_field<std::vector<std::int64_t>>(j, "answers", path, lineno);
    if (j.contains("gold_chain"))
      q.gold_chain =
          get_field<std::vector<std::vector<std::int64_t>>>(j, "gold_chain", path, lineno);
    if (q.hops < 1) throw ValidationError(path + ": question with hops < 1");
    if (q.seed_entities.empty() || q.answers.empty())
      throw ValidationError(path + ": question needs seed entities and answers");
    if (!std::is_sorted(q.answers.begin(), q.answers.end()) ||
        std::adjacent_find(q.answers.begin(), q.answers.end()) != q.answers.end())
      throw ValidationError(path + ": answers must be sorted and unique");
    out.push_back(std::move(q));
  }
  return out;
}

void write_questions(const std::vector<MultiHopQuestion>& questions, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open for writing: " + path);
  for (const MultiHopQuestion& q : questions) {
    json j;
    j["text"] = q.text;
    j["hops"] = q.hops;
    j["seed_entities"] = q.seed_entities;
    j["answers"] = q.answers;
    if (!q.gold_chain.empty()) j["gold_chain"] = q.gold_chain;
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Entity linking
// ---------------------------------------------------------------------------

namespace {

// Lexicon phrase table: lowercased token sequence -> entity id (lowest wins
// on collisions).  Keys are token vectors joined by '\x1f' so multi-token
// surfaces cannot collide with unrelated token splits.
struct PhraseTable {
  std::unordered_map<std::string, std::int64_t> phrase_to_entity;
  std::size_t max_len = 0;

  static std::string key(std::span<const std::string> tokens) {
    std::string k;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      if (i) k.push_back('\x1f');
      k += tokens[i];
    }
    return k;
  }

  void add(const std::string& phrase, std::int64_t entity_id) {
    std::vector<std::string> toks = tokenize(phrase);
    if (toks.empty()) return;
    max_len = std::max(max_len, toks.size());
    auto [it, inserted] = phrase_to_entity.try_emplace(key(toks), entity_id);
    if (!inserted) it->second = std::min(it->second, entity_id);
  }

  explicit PhraseTable(const std::vector<Entity>& lexicon) {
    for (const Entity& e : lexicon) {
      add(e.surface_form, e.entity_id);
      for (const std::string& a : e.aliases) add(a, e.entity_id);
    }
  }
};

}  // namespace

std::vector<Mention> link_mentions(const std::vector<Document>& documents,
                                   const std::vector<Entity>& lexicon) {
  PhraseTable table(lexicon);
  std::vector<Mention> out;
  for (const Document& d : documents) {
    std::vector<std::string> lowered;
    lowered.reserve(d.tokens.size());
    for (const std::string& t : d.tokens) lowered.push_back(to_lower(t));
    std::size_t pos = 0;
    while (pos < lowered.size()) {
      std::size_t longest = 0;
      std::int64_t entity = -1;
      std::size_t cap = std::min(table.max_len, lowered.size() - pos);
      for (std::size_t len = cap; len >= 1; --len) {
        auto it = table.phrase_to_entity.find(
            PhraseTable::key({lowered.data() + pos, len}));
        if (it != table.phrase_to_entity.end()) {
          longest = len;
          entity = it->second;
          break;
        }
      }
      if (longest > 0) {
        Mention m;
        m.mention_id = static_cast<std::int64_t>(out.size());
        m.entity_id = entity;
        m.doc_id = d.doc_id;
        m.start = static_cast<std::int64_t>(pos);
        m.end = static_cast<std::int64_t>(pos + longest - 1);
        out.push_back(m);
        pos += longest;
      } else {
        ++pos;
      }
    }
  }
  return out;
}

SparseVector link_question(const std::string& question, const Corpus& corpus,
                           QuestionLinkMode mode, const HashedTfidfModel* model, int top_n) {
  if (corpus.entity_mention_count.empty() && !corpus.entities.empty())
    throw ContractError("link_question: corpus not finalized");

  if (mode == QuestionLinkMode::kLeastFrequentExact) {
    Document probe;
    probe.doc_id = 0;
    probe.tokens = tokenize(question);
    if (probe.tokens.empty()) throw LinkingError("question has no tokens");
    std::vector<Mention> matches = link_mentions({probe}, corpus.entities);
    if (matches.empty())
      throw LinkingError("no lexicon entity matches question: " + question);
    std::int64_t best = -1;
    std::int64_t best_count = 0;
    for (const Mention& m : matches) {
      std::int64_t count = corpus.entity_mention_count[m.entity_id];
      if (best < 0 || count < best_count || (count == best_count && m.entity_id < best)) {
        best = m.entity_id;
        best_count = count;
      }
    }
    return SparseVector::one_hot(corpus.n_entities(), best);
  }

  if (model == nullptr)
    throw ContractError("link_question: TFIDF mode needs a fitted model");
  SparseVector qv = text_vector(*model, question);
  std::vector<std::pair<std::int64_t, double>> scored;
  for (const Entity& e : corpus.entities) {
    SparseVector ev = surface_vector(*model, e);
    SparseVector prod = elementwise_product(qv, ev);
    double s = prod.sum();
    if (s > 0.0) scored.emplace_back(e.entity_id, s);
  }
  if (scored.empty())
    throw LinkingError("no entity has TFIDF overlap with question: " + question);
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int>(scored.size()) > top_n) scored.resize(static_cast<std::size_t>(top_n));
  double total = 0.0;
  for (const auto& [e, s] : scored) total += s;
  for (auto& [e, s] : scored) s /= total;
  return SparseVector::from_pairs(corpus.n_entities(), std::move(scored));
}

}  // namespace vkb
