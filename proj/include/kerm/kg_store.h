#pragma once

#include <compare>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace kerm {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

struct Triplet {
  EntityId head = 0;
  RelationId relation = 0;
  EntityId tail = 0;
  auto operator<=>(const Triplet&) const = default;
};

struct Edge {
  RelationId relation = 0;
  EntityId tail = 0;
  auto operator<=>(const Edge&) const = default;
};

// Maps raw relation names (compared after normalize_relation) onto a smaller
// merged set. A strict map rejects relations it does not know; a lenient map
// passes them through unchanged.
class RelationMergeMap {
 public:
  RelationMergeMap() = default;
  RelationMergeMap(std::map<std::string, std::string> raw_to_merged,
                   bool strict);

  // Parses {"raw": "merged", ...}.
  static RelationMergeMap from_json(const nlohmann::json& object, bool strict);
  static RelationMergeMap load(const std::string& path, bool strict);
  // The 17-relation ConceptNet merge shipped in config/relation_merge.json.
  static RelationMergeMap conceptnet_default();
  // Lenient and empty: every relation keeps its own (normalized) name.
  static RelationMergeMap identity() { return {}; }

  // Throws MappingError for unknown relations when strict.
  std::string merge(std::string_view raw) const;

  std::size_t merged_count() const;
  bool strict() const { return strict_; }
  const std::map<std::string, std::string>& entries() const { return map_; }

 private:
  std::map<std::string, std::string> map_;
  bool strict_ = false;
};

struct GraphStats {
  std::size_t entities = 0;
  std::size_t relations = 0;
  std::size_t triplets = 0;
  std::size_t max_out_degree = 0;
  bool operator==(const GraphStats&) const = default;
};

// Immutable multi-relational directed graph. Triplets are unique and kept
// sorted by (head, relation, tail); adjacency is a CSR view over them, so
// every neighbor list is sorted by (relation, tail).
class KnowledgeGraph {
 public:
  KnowledgeGraph() = default;
  // Validates ids against the vocabularies and drops duplicate triplets.
  KnowledgeGraph(std::vector<std::string> entities,
                 std::vector<std::string> relations,
                 std::vector<Triplet> triplets);

  std::size_t entity_count() const { return entities_.size(); }
  std::size_t relation_count() const { return relations_.size(); }
  const std::vector<std::string>& entities() const { return entities_; }
  const std::vector<std::string>& relations() const { return relations_; }
  const std::vector<Triplet>& triplets() const { return triplets_; }

  const std::string& entity_name(EntityId id) const;
  const std::string& relation_name(RelationId id) const;
  std::optional<EntityId> find_entity(std::string_view name) const;
  std::optional<RelationId> find_relation(std::string_view name) const;

  // Outgoing edges of `id`. Throws LookupError for ids out of range.
  std::span<const Edge> neighbors(EntityId id) const;
  bool contains(const Triplet& t) const;

  bool operator==(const KnowledgeGraph& other) const {
    return entities_ == other.entities_ && relations_ == other.relations_ &&
           triplets_ == other.triplets_;
  }

 private:
  std::vector<std::string> entities_;
  std::vector<std::string> relations_;
  std::vector<Triplet> triplets_;
  std::vector<std::size_t> offsets_;  // entity_count + 1
  std::vector<Edge> edges_;
  std::unordered_map<std::string, EntityId> entity_index_;
  std::unordered_map<std::string, RelationId> relation_index_;
};

// Convenience builder keyed by names; ids follow first use.
class GraphBuilder {
 public:
  EntityId entity(const std::string& name);
  RelationId relation(const std::string& name);
  GraphBuilder& add(const std::string& head, const std::string& relation,
                    const std::string& tail);
  KnowledgeGraph build() const;

 private:
  std::vector<std::string> entities_;
  std::vector<std::string> relations_;
  std::map<std::string, EntityId> entity_ids_;
  std::map<std::string, RelationId> relation_ids_;
  std::vector<Triplet> triplets_;
};

// Reads `head<TAB>relation<TAB>tail` lines. Entities are normalized, relations
// merged, duplicates dropped. Ids are assigned by first occurrence after a
// lexicographic sort of the normalized triplets, so the result does not
// depend on line order. Blank lines are skipped.
KnowledgeGraph load_triples(const std::string& path,
                            const RelationMergeMap& merge);
KnowledgeGraph parse_triples(std::istream& in, const RelationMergeMap& merge,
                             const std::string& source_name = "");

// Writes the graph back as TSV in the order load_triples would sort it.
void write_triples(const KnowledgeGraph& g, std::ostream& out);

GraphStats graph_stats(const KnowledgeGraph& g);

// Versioned JSON dump with explicit ids; load(save(g)) == g.
nlohmann::json graph_to_json(const KnowledgeGraph& g);
KnowledgeGraph graph_from_json(const nlohmann::json& j);
void save_graph(const KnowledgeGraph& g, const std::string& path);
KnowledgeGraph load_graph(const std::string& path);

}  // namespace kerm
