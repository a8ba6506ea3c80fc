#include "kerm/distill.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/text.h"

namespace kerm {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Global pruning

PrunedGraph prune_graph(const KnowledgeGraph& g, const KgEmbeddings& emb,
                        std::size_t pi) {
  if (pi == 0) throw ConfigError("prune_graph: pi must be positive");
  if (emb.entities.rows() != g.entity_count() ||
      emb.relations.rows() != g.relation_count())
    throw ConfigError("prune_graph: embeddings do not match the graph");

  struct Scored {
    double reliability;
    Edge edge;
  };
  std::vector<Triplet> kept;
  std::vector<Scored> scored;
  for (std::size_t e = 0; e < g.entity_count(); ++e) {
    const auto head = static_cast<EntityId>(e);
    auto adj = g.neighbors(head);
    if (adj.size() <= pi) {
      for (const Edge& edge : adj) kept.push_back({head, edge.relation, edge.tail});
      continue;
    }
    scored.clear();
    for (const Edge& edge : adj)
      scored.push_back({triplet_reliability(emb, head, edge.relation, edge.tail), edge});
    std::sort(scored.begin(), scored.end(), [](const Scored& a, const Scored& b) {
      if (a.reliability != b.reliability) return a.reliability > b.reliability;
      return a.edge < b.edge;
    });
    for (std::size_t i = 0; i < pi; ++i)
      kept.push_back({head, scored[i].edge.relation, scored[i].edge.tail});
  }
  return PrunedGraph{KnowledgeGraph(g.entities(), g.relations(), std::move(kept)), pi};
}

// ---------------------------------------------------------------------------
// Sentences

std::vector<std::vector<std::string>> split_sentences(std::string_view passage) {
  std::vector<std::vector<std::string>> out;
  std::size_t start = 0;
  auto is_space = [](char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
  };
  for (std::size_t i = 0; i < passage.size(); ++i) {
    const char c = passage[i];
    if (c != '.' && c != '!' && c != '?') continue;
    if (i + 1 < passage.size() && !is_space(passage[i + 1])) continue;
    auto tokens = tokenize(passage.substr(start, i + 1 - start));
    if (!tokens.empty()) out.push_back(std::move(tokens));
    start = i + 1;
  }
  if (start < passage.size()) {
    auto tokens = tokenize(passage.substr(start));
    if (!tokens.empty()) out.push_back(std::move(tokens));
  }
  return out;
}

KeySentence select_key_sentence(const WordEmbeddingTable& tbl,
                                const std::vector<std::string>& query,
                                const std::vector<std::vector<std::string>>& sentences) {
  KeySentence best;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    auto s = query_sentence_relevance(tbl, query, sentences[i]);
    if (!s) continue;
    if (!best.score || *s > *best.score) {
      best.index = i;
      best.score = s;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Lexicon

EntityLexicon::EntityLexicon() : nodes_(1) {}

EntityLexicon::EntityLexicon(const KnowledgeGraph& g) : EntityLexicon() {
  for (std::size_t i = 0; i < g.entity_count(); ++i)
    insert(g.entities()[i], static_cast<EntityId>(i));
}

void EntityLexicon::insert(std::string_view normalized_name, EntityId id) {
  auto parts = split_exact(normalized_name, '_');
  std::erase_if(parts, [](const std::string& p) { return p.empty(); });
  if (parts.empty()) return;
  std::size_t node = 0;
  for (const auto& p : parts) {
    auto it = nodes_[node].children.find(p);
    if (it == nodes_[node].children.end()) {
      nodes_.push_back({});
      it = nodes_[node].children.emplace(p, nodes_.size() - 1).first;
    }
    node = it->second;
  }
  if (!nodes_[node].entity) ++entries_;
  nodes_[node].entity = id;
  max_len_ = std::max(max_len_, parts.size());
}

std::optional<EntityId> EntityLexicon::match(const std::vector<std::string>& tokens,
                                             std::size_t start, std::size_t length,
                                             bool strip_plural) const {
  if (length == 0 || start + length > tokens.size()) return std::nullopt;
  std::size_t node = 0;
  for (std::size_t i = 0; i < length; ++i) {
    std::string_view tok = tokens[start + i];
    if (i + 1 == length && strip_plural) {
      if (tok.size() < 2 || tok.back() != 's') return std::nullopt;
      tok.remove_suffix(1);
    }
    auto it = nodes_[node].children.find(tok);
    if (it == nodes_[node].children.end()) return std::nullopt;
    node = it->second;
  }
  return nodes_[node].entity;
}

std::vector<EntityMention> recognize_entities(const std::vector<std::string>& tokens,
                                              const EntityLexicon& lex) {
  std::vector<EntityMention> out;
  std::size_t i = 0;
  while (i < tokens.size()) {
    std::optional<EntityMention> found;
    const std::size_t longest = std::min(lex.max_phrase_length(), tokens.size() - i);
    for (std::size_t len = longest; len >= 1 && !found; --len) {
      for (bool strip : {false, true}) {
        if (auto id = lex.match(tokens, i, len, strip)) {
          found = EntityMention{*id, i, len};
          break;
        }
      }
    }
    if (found) {
      out.push_back(*found);
      i += found->length;
    } else {
      ++i;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Path discovery

PathSearch discover_paths(const KnowledgeGraph& pruned,
                          const std::vector<EntityId>& sources,
                          const std::vector<EntityId>& targets, std::size_t max_hops,
                          std::size_t max_frontier) {
  if (max_hops == 0) throw ConfigError("discover_paths: max_hops must be >= 1");
  PathSearch result;
  if (sources.empty() || targets.empty()) return result;
  const std::unordered_set<EntityId> target_set(targets.begin(), targets.end());

  std::vector<MetaPath> queue;
  std::unordered_set<EntityId> seen;
  for (EntityId s : sources) {
    if (!seen.insert(s).second) continue;
    queue.push_back(MetaPath{{s}, {}});
  }
  for (std::size_t hop = 1; hop <= max_hops && !queue.empty(); ++hop) {
    std::vector<MetaPath> next;
    const bool last = hop == max_hops;
    for (const MetaPath& path : queue) {
      for (const Edge& e : pruned.neighbors(path.entities.back())) {
        const bool is_target = target_set.count(e.tail) > 0;
        if (!is_target && last) continue;  // would be dropped after the loop
        if (!is_target && next.size() >= max_frontier) {
          result.truncated = true;
          continue;
        }
        MetaPath ext = path;
        ext.entities.push_back(e.tail);
        ext.relations.push_back(e.relation);
        if (is_target)
          result.paths.push_back(std::move(ext));
        else
          next.push_back(std::move(ext));
      }
    }
    queue = std::move(next);
  }
  return result;
}

void MetaGraph::rebuild() {
  nodes.clear();
  edges.clear();
  std::unordered_set<EntityId> node_seen;
  std::set<Triplet> edge_seen;
  for (const MetaPath& p : paths) {
    for (std::size_t i = 0; i < p.entities.size(); ++i) {
      if (node_seen.insert(p.entities[i]).second) nodes.push_back(p.entities[i]);
      if (i + 1 < p.entities.size()) {
        Triplet t{p.entities[i], p.relations[i], p.entities[i + 1]};
        if (edge_seen.insert(t).second) edges.push_back(t);
      }
    }
  }
}

void MetaGraph::validate(const KnowledgeGraph& pruned, std::size_t max_hops) const {
  auto fail = [](const std::string& what) { throw InvariantError("meta-graph: " + what); };
  const std::set<EntityId> q(query_entities.begin(), query_entities.end());
  const std::set<EntityId> s(sentence_entities.begin(), sentence_entities.end());
  std::set<EntityId> node_union;
  std::set<Triplet> edge_union;
  for (const MetaPath& p : paths) {
    if (p.entities.size() != p.relations.size() + 1) fail("malformed path");
    if (p.hops() < 1 || p.hops() > max_hops) fail("path length outside 1..K");
    if (!q.count(p.entities.front())) fail("path does not start at a query entity");
    if (!s.count(p.entities.back())) fail("path does not end at a sentence entity");
    for (std::size_t i = 1; i + 1 < p.entities.size(); ++i)
      if (s.count(p.entities[i])) fail("path continues through a sentence entity");
    for (std::size_t i = 0; i < p.hops(); ++i) {
      Triplet t{p.entities[i], p.relations[i], p.entities[i + 1]};
      if (!pruned.contains(t)) fail("path edge is not in the pruned graph");
      edge_union.insert(t);
    }
    node_union.insert(p.entities.begin(), p.entities.end());
  }
  if (std::set<EntityId>(nodes.begin(), nodes.end()) != node_union ||
      nodes.size() != node_union.size())
    fail("nodes are not the union of path entities");
  if (std::set<Triplet>(edges.begin(), edges.end()) != edge_union ||
      edges.size() != edge_union.size())
    fail("edges are not the union of path edges");
}

MetaGraph build_meta_graph(std::string_view query, std::string_view passage,
                           const PrunedGraph& pg, const EntityLexicon& lex,
                           const WordEmbeddingTable& tbl, const MetaGraphOptions& opts) {
  if (opts.max_hops == 0) throw ConfigError("build_meta_graph: k must be >= 1");
  MetaGraph mg;
  const auto q_tokens = tokenize(query);
  const auto sentences = split_sentences(passage);
  if (sentences.empty()) {
    mg.key_sentence_scored = false;
    return mg;
  }
  const KeySentence key = select_key_sentence(tbl, q_tokens, sentences);
  mg.key_sentence = key.index;
  mg.key_sentence_scored = key.score.has_value();
  for (std::size_t i = 0; i < key.index; ++i) mg.key_begin += sentences[i].size();
  mg.key_end = mg.key_begin + sentences[key.index].size();

  mg.query_mentions = recognize_entities(q_tokens, lex);
  mg.sentence_mentions = recognize_entities(sentences[key.index], lex);
  for (auto& m : mg.sentence_mentions) m.start += mg.key_begin;

  auto unique_ids = [](const std::vector<EntityMention>& ms) {
    std::vector<EntityId> out;
    std::unordered_set<EntityId> seen;
    for (const auto& m : ms)
      if (seen.insert(m.entity).second) out.push_back(m.entity);
    return out;
  };
  mg.query_entities = unique_ids(mg.query_mentions);
  mg.sentence_entities = unique_ids(mg.sentence_mentions);

  PathSearch search = discover_paths(pg.graph, mg.query_entities, mg.sentence_entities,
                                     opts.max_hops, opts.max_frontier);
  mg.paths = std::move(search.paths);
  mg.truncated = search.truncated;
  mg.rebuild();
  return mg;
}

// ---------------------------------------------------------------------------
// Stats

MetaGraphStats meta_graph_stats(const std::vector<MetaGraph>& mgs,
                                const KgEmbeddings& emb) {
  if (mgs.empty()) throw ConfigError("meta_graph_stats: no meta-graphs");
  MetaGraphStats stats;
  stats.graphs = mgs.size();
  std::size_t edges = 0;
  double reliability = 0.0;
  for (const MetaGraph& mg : mgs) {
    edges += mg.edges.size();
    for (const Triplet& t : mg.edges)
      reliability += triplet_reliability(emb, t.head, t.relation, t.tail);
  }
  stats.avg_edges = static_cast<double>(edges) / static_cast<double>(mgs.size());
  if (edges > 0) stats.avg_edge_reliability = reliability / static_cast<double>(edges);
  return stats;
}

// ---------------------------------------------------------------------------
// JSON lines

namespace {

json mentions_to_json(const std::vector<EntityMention>& ms) {
  json out = json::array();
  for (const auto& m : ms) out.push_back({m.entity, m.start, m.length});
  return out;
}

std::vector<EntityMention> mentions_from_json(const json& j) {
  std::vector<EntityMention> out;
  for (const auto& m : j) {
    if (!m.is_array() || m.size() != 3)
      throw InputError("mention must be [entity, start, length]");
    out.push_back({m[0].get<EntityId>(), m[1].get<std::size_t>(), m[2].get<std::size_t>()});
  }
  return out;
}

}  // namespace

json meta_graph_to_json(const std::string& qid, const std::string& pid,
                        const MetaGraph& mg) {
  json paths = json::array();
  for (const MetaPath& p : mg.paths) {
    json seq = json::array();
    for (std::size_t i = 0; i < p.entities.size(); ++i) {
      seq.push_back(p.entities[i]);
      if (i < p.relations.size()) seq.push_back(p.relations[i]);
    }
    paths.push_back(std::move(seq));
  }
  return json{{"qid", qid},
              {"pid", pid},
              {"key_sentence", mg.key_sentence},
              {"key_scored", mg.key_sentence_scored},
              {"key_span", {mg.key_begin, mg.key_end}},
              {"query_entities", mg.query_entities},
              {"sentence_entities", mg.sentence_entities},
              {"query_mentions", mentions_to_json(mg.query_mentions)},
              {"sentence_mentions", mentions_to_json(mg.sentence_mentions)},
              {"paths", std::move(paths)},
              {"truncated", mg.truncated}};
}

MetaGraph meta_graph_from_json(const json& j, std::string* qid, std::string* pid) {
  MetaGraph mg;
  try {
    if (qid) *qid = j.at("qid").get<std::string>();
    if (pid) *pid = j.at("pid").get<std::string>();
    mg.key_sentence = j.at("key_sentence").get<std::size_t>();
    mg.key_sentence_scored = j.at("key_scored").get<bool>();
    mg.key_begin = j.at("key_span").at(0).get<std::size_t>();
    mg.key_end = j.at("key_span").at(1).get<std::size_t>();
    mg.query_entities = j.at("query_entities").get<std::vector<EntityId>>();
    mg.sentence_entities = j.at("sentence_entities").get<std::vector<EntityId>>();
    mg.query_mentions = mentions_from_json(j.at("query_mentions"));
    mg.sentence_mentions = mentions_from_json(j.at("sentence_mentions"));
    for (const auto& seq : j.at("paths")) {
      if (!seq.is_array() || seq.size() < 3 || seq.size() % 2 == 0)
        throw InputError("path must alternate entity, relation, ..., entity");
      MetaPath p;
      for (std::size_t i = 0; i < seq.size(); ++i) {
        if (i % 2 == 0)
          p.entities.push_back(seq[i].get<EntityId>());
        else
          p.relations.push_back(seq[i].get<RelationId>());
      }
      mg.paths.push_back(std::move(p));
    }
    mg.truncated = j.at("truncated").get<bool>();
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed meta-graph record: ") + e.what());
  }
  mg.rebuild();
  return mg;
}

void write_meta_graphs(
    const std::string& path,
    const std::vector<std::pair<std::pair<std::string, std::string>, MetaGraph>>& rows) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write meta-graphs to '" + path + "'");
  for (const auto& [key, mg] : rows)
    out << meta_graph_to_json(key.first, key.second, mg).dump() << '\n';
}

MetaGraphIndex read_meta_graphs(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open meta-graphs '" + path + "'");
  MetaGraphIndex index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(path, line_no, e.what());
    }
    std::string qid, pid;
    MetaGraph mg = meta_graph_from_json(j, &qid, &pid);
    index[{qid, pid}] = std::move(mg);
  }
  return index;
}

}  // namespace kerm
