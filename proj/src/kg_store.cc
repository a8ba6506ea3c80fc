#include "kerm/kg_store.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <tuple>

#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/text.h"

namespace kerm {

using json = nlohmann::json;

namespace {

constexpr int kGraphFormatVersion = 1;

// KagNet-style merge of ConceptNet 5 relations into 17 types. Directional
// inversions KagNet applies (e.g. hasa -> partof reversed) are not modelled;
// the edge keeps its original direction.
const std::map<std::string, std::string>& default_merge_entries() {
  static const std::map<std::string, std::string> entries = {
      {"antonym", "antonym"},
      {"distinctfrom", "antonym"},
      {"atlocation", "atlocation"},
      {"locatednear", "atlocation"},
      {"capableof", "capableof"},
      {"causes", "causes"},
      {"causesdesire", "causes"},
      {"motivatedbygoal", "causes"},
      {"createdby", "createdby"},
      {"isa", "isa"},
      {"instanceof", "isa"},
      {"definedas", "isa"},
      {"desires", "desires"},
      {"hassubevent", "hassubevent"},
      {"hasfirstsubevent", "hassubevent"},
      {"haslastsubevent", "hassubevent"},
      {"hasprerequisite", "hassubevent"},
      {"entails", "hassubevent"},
      {"mannerof", "hassubevent"},
      {"partof", "partof"},
      {"hasa", "partof"},
      {"hascontext", "hascontext"},
      {"hasproperty", "hasproperty"},
      {"madeof", "madeof"},
      {"notcapableof", "notcapableof"},
      {"nothasproperty", "notcapableof"},
      {"notusedfor", "notcapableof"},
      {"obstructedby", "notcapableof"},
      {"notdesires", "notdesires"},
      {"receivesaction", "receivesaction"},
      {"relatedto", "relatedto"},
      {"similarto", "relatedto"},
      {"synonym", "relatedto"},
      {"formof", "relatedto"},
      {"derivedfrom", "relatedto"},
      {"etymologicallyrelatedto", "relatedto"},
      {"etymologicallyderivedfrom", "relatedto"},
      {"symbolof", "relatedto"},
      {"externalurl", "relatedto"},
      {"dbpedia/capital", "relatedto"},
      {"dbpedia/field", "relatedto"},
      {"dbpedia/genre", "relatedto"},
      {"dbpedia/genus", "relatedto"},
      {"dbpedia/influencedby", "relatedto"},
      {"dbpedia/knownfor", "relatedto"},
      {"dbpedia/language", "relatedto"},
      {"dbpedia/leader", "relatedto"},
      {"dbpedia/occupation", "relatedto"},
      {"dbpedia/product", "relatedto"},
      {"usedfor", "usedfor"},
  };
  return entries;
}

}  // namespace

// ---------------------------------------------------------------------------
// RelationMergeMap

RelationMergeMap::RelationMergeMap(std::map<std::string, std::string> raw_to_merged,
                                   bool strict)
    : strict_(strict) {
  for (auto& [raw, merged] : raw_to_merged) {
    std::string key = normalize_relation(raw);
    std::string value = normalize_relation(merged);
    if (key.empty() || value.empty())
      throw ConfigError("relation merge map has an empty name");
    map_[key] = value;
  }
}

RelationMergeMap RelationMergeMap::from_json(const json& object, bool strict) {
  if (!object.is_object())
    throw ConfigError("relation merge map must be a JSON object");
  std::map<std::string, std::string> entries;
  for (auto it = object.begin(); it != object.end(); ++it) {
    if (!it.value().is_string())
      throw ConfigError("relation merge map value for '" + it.key() +
                        "' is not a string");
    entries[it.key()] = it.value().get<std::string>();
  }
  return RelationMergeMap(std::move(entries), strict);
}

RelationMergeMap RelationMergeMap::load(const std::string& path, bool strict) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open relation merge map '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError(path, 0, e.what());
  }
  return from_json(j, strict);
}

RelationMergeMap RelationMergeMap::conceptnet_default() {
  return RelationMergeMap(default_merge_entries(), true);
}

std::string RelationMergeMap::merge(std::string_view raw) const {
  std::string key = normalize_relation(raw);
  auto it = map_.find(key);
  if (it != map_.end()) return it->second;
  if (strict_) throw MappingError("relation '" + std::string(raw) +
                                  "' is not in the merge map");
  return key;
}

std::size_t RelationMergeMap::merged_count() const {
  std::set<std::string> merged;
  for (const auto& [raw, m] : map_) merged.insert(m);
  return merged.size();
}

// ---------------------------------------------------------------------------
// KnowledgeGraph

KnowledgeGraph::KnowledgeGraph(std::vector<std::string> entities,
                               std::vector<std::string> relations,
                               std::vector<Triplet> triplets)
    : entities_(std::move(entities)), relations_(std::move(relations)) {
  for (std::size_t i = 0; i < entities_.size(); ++i) {
    if (!entity_index_.emplace(entities_[i], static_cast<EntityId>(i)).second)
      throw InputError("duplicate entity name '" + entities_[i] + "'");
  }
  for (std::size_t i = 0; i < relations_.size(); ++i) {
    if (!relation_index_.emplace(relations_[i], static_cast<RelationId>(i)).second)
      throw InputError("duplicate relation name '" + relations_[i] + "'");
  }
  const auto ne = static_cast<EntityId>(entities_.size());
  const auto nr = static_cast<RelationId>(relations_.size());
  for (const Triplet& t : triplets) {
    if (t.head < 0 || t.head >= ne || t.tail < 0 || t.tail >= ne ||
        t.relation < 0 || t.relation >= nr)
      throw LookupError("triplet (" + std::to_string(t.head) + ", " +
                        std::to_string(t.relation) + ", " +
                        std::to_string(t.tail) + ") is out of vocabulary range");
  }
  std::sort(triplets.begin(), triplets.end());
  triplets.erase(std::unique(triplets.begin(), triplets.end()), triplets.end());
  triplets_ = std::move(triplets);

  offsets_.assign(entities_.size() + 1, 0);
  for (const Triplet& t : triplets_) ++offsets_[static_cast<std::size_t>(t.head) + 1];
  for (std::size_t i = 1; i < offsets_.size(); ++i) offsets_[i] += offsets_[i - 1];
  edges_.reserve(triplets_.size());
  // triplets_ is sorted by head first, so edges land in CSR order directly.
  for (const Triplet& t : triplets_) edges_.push_back({t.relation, t.tail});
}

const std::string& KnowledgeGraph::entity_name(EntityId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entities_.size())
    throw LookupError("entity id " + std::to_string(id) + " out of range");
  return entities_[static_cast<std::size_t>(id)];
}

const std::string& KnowledgeGraph::relation_name(RelationId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= relations_.size())
    throw LookupError("relation id " + std::to_string(id) + " out of range");
  return relations_[static_cast<std::size_t>(id)];
}

std::optional<EntityId> KnowledgeGraph::find_entity(std::string_view name) const {
  auto it = entity_index_.find(std::string(name));
  if (it == entity_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<RelationId> KnowledgeGraph::find_relation(std::string_view name) const {
  auto it = relation_index_.find(std::string(name));
  if (it == relation_index_.end()) return std::nullopt;
  return it->second;
}

std::span<const Edge> KnowledgeGraph::neighbors(EntityId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= entities_.size())
    throw LookupError("entity id " + std::to_string(id) + " out of range (" +
                      std::to_string(entities_.size()) + " entities)");
  const auto i = static_cast<std::size_t>(id);
  return std::span<const Edge>(edges_.data() + offsets_[i],
                               offsets_[i + 1] - offsets_[i]);
}

bool KnowledgeGraph::contains(const Triplet& t) const {
  return std::binary_search(triplets_.begin(), triplets_.end(), t);
}

// ---------------------------------------------------------------------------
// GraphBuilder

EntityId GraphBuilder::entity(const std::string& name) {
  auto [it, inserted] =
      entity_ids_.emplace(name, static_cast<EntityId>(entities_.size()));
  if (inserted) entities_.push_back(name);
  return it->second;
}

RelationId GraphBuilder::relation(const std::string& name) {
  auto [it, inserted] =
      relation_ids_.emplace(name, static_cast<RelationId>(relations_.size()));
  if (inserted) relations_.push_back(name);
  return it->second;
}

GraphBuilder& GraphBuilder::add(const std::string& head,
                                const std::string& rel,
                                const std::string& tail) {
  EntityId h = entity(head);
  RelationId r = relation(rel);
  EntityId t = entity(tail);
  triplets_.push_back({h, r, t});
  return *this;
}

KnowledgeGraph GraphBuilder::build() const {
  return KnowledgeGraph(entities_, relations_, triplets_);
}

// ---------------------------------------------------------------------------
// TSV I/O

KnowledgeGraph parse_triples(std::istream& in, const RelationMergeMap& merge,
                             const std::string& source_name) {
  using Named = std::tuple<std::string, std::string, std::string>;
  std::vector<Named> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = split_exact(line, '\t');
    if (fields.size() != 3)
      throw ParseError(source_name, line_no,
                       "expected 3 tab-separated columns, got " +
                           std::to_string(fields.size()));
    std::string head = normalize_entity(fields[0]);
    std::string tail = normalize_entity(fields[2]);
    if (head.empty() || tail.empty() || normalize_relation(fields[1]).empty())
      throw ParseError(source_name, line_no, "empty field after normalization");
    std::string rel;
    try {
      rel = merge.merge(fields[1]);
    } catch (const MappingError& e) {
      throw MappingError(source_name + ":" + std::to_string(line_no) + ": " +
                         e.what());
    }
    rows.emplace_back(std::move(head), std::move(rel), std::move(tail));
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());

  GraphBuilder builder;
  for (const auto& [h, r, t] : rows) builder.add(h, r, t);
  return builder.build();
}

KnowledgeGraph load_triples(const std::string& path,
                            const RelationMergeMap& merge) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open triple file '" + path + "'");
  return parse_triples(in, merge, path);
}

void write_triples(const KnowledgeGraph& g, std::ostream& out) {
  using Named = std::tuple<std::string, std::string, std::string>;
  std::vector<Named> rows;
  rows.reserve(g.triplets().size());
  for (const Triplet& t : g.triplets())
    rows.emplace_back(g.entity_name(t.head), g.relation_name(t.relation),
                      g.entity_name(t.tail));
  std::sort(rows.begin(), rows.end());
  for (const auto& [h, r, t] : rows) out << h << '\t' << r << '\t' << t << '\n';
}

GraphStats graph_stats(const KnowledgeGraph& g) {
  GraphStats s;
  s.entities = g.entity_count();
  s.relations = g.relation_count();
  s.triplets = g.triplets().size();
  for (std::size_t e = 0; e < g.entity_count(); ++e)
    s.max_out_degree =
        std::max(s.max_out_degree, g.neighbors(static_cast<EntityId>(e)).size());
  return s;
}

// ---------------------------------------------------------------------------
// JSON dump

json graph_to_json(const KnowledgeGraph& g) {
  json triplets = json::array();
  for (const Triplet& t : g.triplets())
    triplets.push_back({t.head, t.relation, t.tail});
  return json{{"format", "kerm-graph"},
              {"version", kGraphFormatVersion},
              {"entities", g.entities()},
              {"relations", g.relations()},
              {"triplets", std::move(triplets)}};
}

KnowledgeGraph graph_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "kerm-graph")
      throw InputError("not a kerm-graph dump");
    if (j.at("version").get<int>() != kGraphFormatVersion)
      throw InputError("unsupported graph dump version " +
                       std::to_string(j.at("version").get<int>()));
    std::vector<Triplet> triplets;
    for (const auto& t : j.at("triplets")) {
      if (!t.is_array() || t.size() != 3)
        throw InputError("graph dump triplet must be [head, relation, tail]");
      triplets.push_back({t[0].get<EntityId>(), t[1].get<RelationId>(),
                          t[2].get<EntityId>()});
    }
    return KnowledgeGraph(j.at("entities").get<std::vector<std::string>>(),
                          j.at("relations").get<std::vector<std::string>>(),
                          std::move(triplets));
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed graph dump: ") + e.what());
  }
}

void save_graph(const KnowledgeGraph& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write graph to '" + path + "'");
  out << graph_to_json(g).dump() << '\n';
}

KnowledgeGraph load_graph(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open graph dump '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError(path, 0, e.what());
  }
  return graph_from_json(j);
}

}  // namespace kerm
