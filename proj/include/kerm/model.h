#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kerm/autodiff.h"
#include "kerm/distill.h"
#include "kerm/embed.h"
#include "kerm/matrix.h"

namespace kerm {

// Word-level vocabulary. Ids 0..2 are reserved for [UNK], [CLS], [SEP]; the
// remaining words are sorted so the id assignment does not depend on corpus
// order.
class Vocab {
 public:
  static constexpr std::int32_t kUnk = 0;
  static constexpr std::int32_t kCls = 1;
  static constexpr std::int32_t kSep = 2;

  Vocab();
  static Vocab build(const std::vector<std::string>& texts);
  explicit Vocab(std::vector<std::string> words);

  std::int32_t id(const std::string& word) const;
  const std::string& word(std::int32_t id) const;
  std::size_t size() const { return words_.size(); }
  const std::vector<std::string>& words() const { return words_; }
  bool operator==(const Vocab& o) const { return words_ == o.words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::int32_t> index_;
};

struct TokenizedPair {
  std::vector<std::int32_t> ids;       // [CLS] q [SEP] p [SEP]
  std::vector<std::int32_t> segments;  // 0 up to the first [SEP], 1 after
  std::size_t query_len = 0;    // query tokens kept
  std::size_t passage_len = 0;  // passage tokens kept
  std::size_t length() const { return ids.size(); }
  std::size_t passage_offset() const { return query_len + 2; }
};

// The passage is truncated first; if the query alone does not fit it is cut
// too. Throws InputError for a query without tokens and ConfigError when
// max_len < 4.
TokenizedPair tokenize_pair(std::string_view query, std::string_view passage,
                            const Vocab& vocab, std::size_t max_len);

struct AlignedEntity {
  EntityId entity = 0;
  std::size_t token = 0;  // position in the pair
  bool operator==(const AlignedEntity&) const = default;
};

struct EntityAlignment {
  std::vector<AlignedEntity> aligned;  // sorted by entity id
  std::vector<EntityId> intermediate;  // sorted by entity id
};

// Query entities map to the first token of their first mention in the query
// segment; passage-side entities not already aligned map to the first token
// of their first mention in the key sentence. Every other meta-graph node,
// and any entity whose mention was truncated away, is intermediate.
EntityAlignment align_entities(const TokenizedPair& pair, const MetaGraph& mg);

enum class KermMode { kFull, kNoPropagation, kNoInteraction, kVanilla };

const char* mode_name(KermMode mode);
KermMode mode_from_name(const std::string& name);

struct KermConfig {
  std::size_t text_layers = 3;      // N
  std::size_t injector_layers = 2;  // M
  std::size_t gmn_layers = 2;       // K
  std::size_t hidden = 64;
  std::size_t ffn = 128;
  std::size_t entity_dim = 32;
  std::size_t heads = 4;
  std::size_t max_len = 128;
  KermMode mode = KermMode::kFull;
  bool share_gmn = false;

  // Vanilla mode runs every layer as a plain transformer layer.
  std::size_t encoder_depth() const {
    return mode == KermMode::kVanilla ? text_layers + injector_layers : text_layers;
  }
  std::size_t injector_depth() const {
    return mode == KermMode::kVanilla ? 0 : injector_layers;
  }
  void validate() const;
  bool operator==(const KermConfig&) const = default;
};

nlohmann::json config_to_json(const KermConfig& cfg);
KermConfig config_from_json(const nlohmann::json& j);

// Everything the network needs about one (query, passage) pair, with the
// meta-graph in canonical form: nodes sorted by entity id and every edge
// present in both directions, sorted by (head, tail, relation).
struct ModelInput {
  TokenizedPair pair;
  std::vector<EntityId> nodes;
  Matrix node_init;  // TransE rows of `nodes`
  std::vector<RelationId> relations;
  Matrix relation_init;  // TransE rows of `relations`
  std::vector<std::size_t> edge_head;  // node index
  std::vector<std::size_t> edge_tail;  // node index
  std::vector<std::size_t> edge_rel;   // index into `relations`
  std::vector<std::size_t> aligned_nodes;   // node index
  std::vector<std::size_t> aligned_tokens;  // matching pair positions
  std::vector<std::size_t> intermediate_nodes;

  bool has_graph() const { return !nodes.empty(); }
};

ModelInput prepare_input(std::string_view query, std::string_view passage,
                         const MetaGraph& mg, const KgEmbeddings& kg_emb,
                         const Vocab& vocab, const KermConfig& cfg);

struct GmnRound {
  Matrix weights;                  // one attention weight per directed edge
  std::vector<std::size_t> heads;  // receiving node of each edge
};

// Optional side output of a forward pass for inspection in tests.
struct ForwardTrace {
  std::vector<std::vector<Matrix>> attention;  // [layer][head] L x L
  std::vector<GmnRound> gmn;                   // every round of every layer
  std::vector<Matrix> entity_states;           // E entering each injector layer
};

class KermModel {
 public:
  KermModel(KermConfig cfg, std::size_t vocab_size);

  const KermConfig& config() const { return cfg_; }
  std::size_t vocab_size() const { return vocab_size_; }

  // Adds every parameter for this configuration to `store`.
  void init_params(ParamStore& store, std::uint64_t seed) const;
  // Parameter names that only the knowledge path reads.
  static bool injector_only(const std::string& name);
  // Names trained at the injector learning rate.
  bool injector_group(const std::string& name) const;

  Var forward(Tape& tape, const ParamStore& params, const ModelInput& in,
              ForwardTrace* trace = nullptr) const;
  double score(const ParamStore& params, const ModelInput& in,
               ForwardTrace* trace = nullptr) const;

 private:
  Var encoder_layer(Tape& tape, const ParamStore& params, Var x,
                    const std::string& prefix, ForwardTrace* trace) const;
  Var attention(Tape& tape, const ParamStore& params, Var x, const std::string& prefix,
                ForwardTrace* trace) const;
  Var gmn(Tape& tape, const ParamStore& params, Var e, Var rel, const ModelInput& in,
          const std::string& prefix, ForwardTrace* trace) const;

  KermConfig cfg_;
  std::size_t vocab_size_;
};

// Model checkpoint: config, vocabulary and parameters in one file.
struct ModelCheckpoint {
  KermConfig config;
  Vocab vocab;
  ParamStore params;
};
void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path);
ModelCheckpoint load_checkpoint(const std::string& path);

}  // namespace kerm
