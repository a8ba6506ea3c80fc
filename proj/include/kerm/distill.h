#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kerm/embed.h"
#include "kerm/kg_store.h"

namespace kerm {

// The global graph after top-pi pruning. Shares the vocabulary (and therefore
// the ids) of the source graph.
struct PrunedGraph {
  KnowledgeGraph graph;
  std::size_t pi = 0;
};

// Keeps, per head entity, the `pi` outgoing edges with the highest
// triplet_reliability. Ties go to the smaller relation id, then the smaller
// tail id. Ranking by reliability rather than by its reciprocal keeps the
// order total when reliabilities are <= 0; such edges rank below every
// positive one. Throws ConfigError for pi == 0.
PrunedGraph prune_graph(const KnowledgeGraph& g, const KgEmbeddings& emb,
                        std::size_t pi);

// Sentence boundaries are '.', '!' or '?' followed by whitespace or the end
// of the text. No abbreviation handling: "e.g. test." is two sentences.
// Each sentence is returned tokenized; sentences without tokens are dropped,
// so concatenating the result equals tokenize(passage).
std::vector<std::vector<std::string>> split_sentences(std::string_view passage);

struct KeySentence {
  std::size_t index = 0;
  std::optional<double> score;  // nullopt when no sentence could be scored
};

// Argmax of query_sentence_relevance; first index wins ties, unscorable
// sentences are skipped, and index 0 is returned if none can be scored.
KeySentence select_key_sentence(const WordEmbeddingTable& tbl,
                                const std::vector<std::string>& query,
                                const std::vector<std::vector<std::string>>& sentences);

// Token trie over normalized entity names ("liver_enzyme" is the path
// liver -> enzyme).
class EntityLexicon {
 public:
  EntityLexicon();
  explicit EntityLexicon(const KnowledgeGraph& g);

  void insert(std::string_view normalized_name, EntityId id);
  std::size_t max_phrase_length() const { return max_len_; }
  std::size_t size() const { return entries_; }

  // Entity whose phrase is exactly tokens[start, start + length), if any.
  // When `strip_plural` is set the last token is matched without one
  // trailing 's'.
  std::optional<EntityId> match(const std::vector<std::string>& tokens,
                                std::size_t start, std::size_t length,
                                bool strip_plural) const;

 private:
  struct Node {
    std::map<std::string, std::size_t, std::less<>> children;
    std::optional<EntityId> entity;
  };
  std::vector<Node> nodes_;
  std::size_t max_len_ = 0;
  std::size_t entries_ = 0;
};

struct EntityMention {
  EntityId entity = 0;
  std::size_t start = 0;   // token offset
  std::size_t length = 0;  // tokens
  bool operator==(const EntityMention&) const = default;
};

// Left-to-right longest-match scan. At each position lengths are tried from
// max_phrase_length down to 1; per length the exact phrase is tried before
// the plural-stripped one. A match consumes its tokens, so no returned
// mention is a sub-span of another.
std::vector<EntityMention> recognize_entities(const std::vector<std::string>& tokens,
                                              const EntityLexicon& lex);

// Alternating entity / relation walk: entities.size() == relations.size() + 1.
struct MetaPath {
  std::vector<EntityId> entities;
  std::vector<RelationId> relations;
  std::size_t hops() const { return relations.size(); }
  auto operator<=>(const MetaPath&) const = default;
};

struct PathSearch {
  std::vector<MetaPath> paths;
  bool truncated = false;
};

// Breadth-first path discovery between two entity sets, hop by hop up to
// `max_hops`. A path is emitted as soon as its last entity is a target and is
// then not extended; every other path moves to the next frontier. Paths may
// revisit entities. If a frontier would exceed `max_frontier` partial paths
// the surplus is dropped and `truncated` is set.
PathSearch discover_paths(const KnowledgeGraph& pruned,
                          const std::vector<EntityId>& sources,
                          const std::vector<EntityId>& targets, std::size_t max_hops,
                          std::size_t max_frontier);

struct MetaGraph {
  std::vector<EntityId> query_entities;     // unique, first-occurrence order
  std::vector<EntityId> sentence_entities;  // unique, first-occurrence order
  std::vector<EntityMention> query_mentions;     // offsets into query tokens
  std::vector<EntityMention> sentence_mentions;  // offsets into passage tokens
  std::size_t key_sentence = 0;
  bool key_sentence_scored = true;
  std::size_t key_begin = 0;  // key sentence span in passage tokens
  std::size_t key_end = 0;
  std::vector<MetaPath> paths;
  bool truncated = false;

  // Derived from paths by rebuild(): first-appearance order.
  std::vector<EntityId> nodes;
  std::vector<Triplet> edges;

  bool empty() const { return paths.empty(); }
  void rebuild();
  // Structural invariants; throws InvariantError on violation.
  void validate(const KnowledgeGraph& pruned, std::size_t max_hops) const;
  bool operator==(const MetaGraph&) const = default;
};

struct MetaGraphOptions {
  std::size_t max_hops = 2;
  std::size_t max_frontier = 10000;
};

// Key sentence selection, entity recognition on the query and the key
// sentence, then discover_paths between the two entity sets.
MetaGraph build_meta_graph(std::string_view query, std::string_view passage,
                           const PrunedGraph& pg, const EntityLexicon& lex,
                           const WordEmbeddingTable& tbl, const MetaGraphOptions& opts);

struct MetaGraphStats {
  std::size_t graphs = 0;
  double avg_edges = 0.0;
  std::optional<double> avg_edge_reliability;  // nullopt without any edge
};

// Average edge count per meta-graph and average reliability over all edges
// pooled. Throws ConfigError for an empty list.
MetaGraphStats meta_graph_stats(const std::vector<MetaGraph>& mgs,
                                const KgEmbeddings& emb);

// One JSON object per (query, passage) pair.
nlohmann::json meta_graph_to_json(const std::string& qid, const std::string& pid,
                                  const MetaGraph& mg);
MetaGraph meta_graph_from_json(const nlohmann::json& j, std::string* qid = nullptr,
                               std::string* pid = nullptr);

using MetaGraphIndex = std::map<std::pair<std::string, std::string>, MetaGraph>;
void write_meta_graphs(const std::string& path,
                       const std::vector<std::pair<std::pair<std::string, std::string>,
                                                   MetaGraph>>& rows);
MetaGraphIndex read_meta_graphs(const std::string& path);

}  // namespace kerm
