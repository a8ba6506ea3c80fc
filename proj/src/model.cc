#include "kerm/model.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <tuple>

#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/random.h"
#include "kerm/text.h"

namespace kerm {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Vocabulary and tokenization

namespace {
const std::vector<std::string> kSpecials = {"[UNK]", "[CLS]", "[SEP]"};
}

Vocab::Vocab() : Vocab(kSpecials) {}

Vocab::Vocab(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.size() < kSpecials.size() ||
      !std::equal(kSpecials.begin(), kSpecials.end(), words_.begin()))
    throw InputError("vocabulary must start with [UNK] [CLS] [SEP]");
  for (std::size_t i = 0; i < words_.size(); ++i) {
    if (!index_.emplace(words_[i], static_cast<std::int32_t>(i)).second)
      throw InputError("duplicate vocabulary word '" + words_[i] + "'");
  }
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const auto& t : texts)
    for (auto& tok : tokenize(t)) seen.insert(std::move(tok));
  std::vector<std::string> words = kSpecials;
  words.insert(words.end(), seen.begin(), seen.end());
  return Vocab(std::move(words));
}

std::int32_t Vocab::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocab::word(std::int32_t id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
    throw LookupError("token id " + std::to_string(id) + " out of range");
  return words_[static_cast<std::size_t>(id)];
}

TokenizedPair tokenize_pair(std::string_view query, std::string_view passage,
                            const Vocab& vocab, std::size_t max_len) {
  if (max_len < 4) throw ConfigError("max_len must be at least 4");
  auto q = tokenize(query);
  if (q.empty()) throw InputError("query has no tokens");
  auto p = tokenize(passage);
  const std::size_t budget = max_len - 3;
  if (q.size() > budget) q.resize(budget);
  if (p.size() > budget - q.size()) p.resize(budget - q.size());

  TokenizedPair out;
  out.query_len = q.size();
  out.passage_len = p.size();
  out.ids.push_back(Vocab::kCls);
  for (const auto& w : q) out.ids.push_back(vocab.id(w));
  out.ids.push_back(Vocab::kSep);
  out.segments.assign(out.ids.size(), 0);
  for (const auto& w : p) out.ids.push_back(vocab.id(w));
  out.ids.push_back(Vocab::kSep);
  out.segments.resize(out.ids.size(), 1);
  return out;
}

EntityAlignment align_entities(const TokenizedPair& pair, const MetaGraph& mg) {
  std::vector<EntityId> nodes = mg.nodes;
  std::sort(nodes.begin(), nodes.end());
  const std::set<EntityId> q(mg.query_entities.begin(), mg.query_entities.end());
  const std::set<EntityId> s(mg.sentence_entities.begin(), mg.sentence_entities.end());

  auto first_start = [](const std::vector<EntityMention>& ms, EntityId e) {
    std::optional<std::size_t> best;
    for (const auto& m : ms)
      if (m.entity == e && (!best || m.start < *best)) best = m.start;
    return best;
  };

  EntityAlignment out;
  for (EntityId e : nodes) {
    std::optional<std::size_t> token;
    if (q.count(e)) {
      auto start = first_start(mg.query_mentions, e);
      if (start && *start < pair.query_len) token = 1 + *start;
    }
    if (!token && s.count(e)) {
      auto start = first_start(mg.sentence_mentions, e);
      if (start && *start < pair.passage_len) token = pair.passage_offset() + *start;
    }
    if (token)
      out.aligned.push_back({e, *token});
    else
      out.intermediate.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Configuration

const char* mode_name(KermMode mode) {
  switch (mode) {
    case KermMode::kFull: return "full";
    case KermMode::kNoPropagation: return "no_propagation";
    case KermMode::kNoInteraction: return "no_interaction";
    case KermMode::kVanilla: return "vanilla";
  }
  return "?";
}

KermMode mode_from_name(const std::string& name) {
  for (KermMode m : {KermMode::kFull, KermMode::kNoPropagation, KermMode::kNoInteraction,
                     KermMode::kVanilla})
    if (name == mode_name(m)) return m;
  throw ConfigError("unknown mode '" + name +
                    "' (expected full, no_propagation, no_interaction or vanilla)");
}

void KermConfig::validate() const {
  auto positive = [](std::size_t v, const char* what) {
    if (v == 0) throw ConfigError(std::string("model.") + what + " must be positive");
  };
  positive(hidden, "hidden");
  positive(ffn, "ffn");
  positive(entity_dim, "entity_dim");
  positive(heads, "heads");
  if (hidden % heads != 0)
    throw ConfigError("model.hidden (" + std::to_string(hidden) +
                      ") must be divisible by model.heads (" + std::to_string(heads) + ")");
  if (max_len < 4) throw ConfigError("model.max_len must be at least 4");
  if (encoder_depth() + injector_depth() == 0)
    throw ConfigError("model needs at least one layer");
  if ((mode == KermMode::kFull || mode == KermMode::kNoInteraction) && gmn_layers == 0)
    throw ConfigError("model.gmn_layers must be >= 1 in " + std::string(mode_name(mode)) +
                      " mode");
}

json config_to_json(const KermConfig& cfg) {
  return json{{"text_layers", cfg.text_layers},   {"injector_layers", cfg.injector_layers},
              {"gmn_layers", cfg.gmn_layers},     {"hidden", cfg.hidden},
              {"ffn", cfg.ffn},                   {"entity_dim", cfg.entity_dim},
              {"heads", cfg.heads},               {"max_len", cfg.max_len},
              {"mode", mode_name(cfg.mode)},      {"share_gmn", cfg.share_gmn}};
}

KermConfig config_from_json(const json& j) {
  KermConfig cfg;
  if (!j.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known = {
      "text_layers", "injector_layers", "gmn_layers", "hidden", "ffn",
      "entity_dim",  "heads",           "max_len",    "mode",   "share_gmn"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key())) throw ConfigError("unknown model key '" + it.key() + "'");
  try {
    cfg.text_layers = j.value("text_layers", cfg.text_layers);
    cfg.injector_layers = j.value("injector_layers", cfg.injector_layers);
    cfg.gmn_layers = j.value("gmn_layers", cfg.gmn_layers);
    cfg.hidden = j.value("hidden", cfg.hidden);
    cfg.ffn = j.value("ffn", cfg.ffn);
    cfg.entity_dim = j.value("entity_dim", cfg.entity_dim);
    cfg.heads = j.value("heads", cfg.heads);
    cfg.max_len = j.value("max_len", cfg.max_len);
    cfg.share_gmn = j.value("share_gmn", cfg.share_gmn);
    if (j.contains("mode")) cfg.mode = mode_from_name(j.at("mode").get<std::string>());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad model config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Input preparation

ModelInput prepare_input(std::string_view query, std::string_view passage,
                         const MetaGraph& mg, const KgEmbeddings& kg_emb,
                         const Vocab& vocab, const KermConfig& cfg) {
  ModelInput in;
  in.pair = tokenize_pair(query, passage, vocab, cfg.max_len);
  if (cfg.mode == KermMode::kVanilla || mg.nodes.empty()) return in;
  if (kg_emb.dim() != cfg.entity_dim)
    throw ConfigError("entity embeddings have dim " + std::to_string(kg_emb.dim()) +
                      " but model.entity_dim is " + std::to_string(cfg.entity_dim));

  in.nodes = mg.nodes;
  std::sort(in.nodes.begin(), in.nodes.end());
  auto node_index = [&](EntityId e) {
    return static_cast<std::size_t>(
        std::lower_bound(in.nodes.begin(), in.nodes.end(), e) - in.nodes.begin());
  };
  in.node_init = Matrix(in.nodes.size(), cfg.entity_dim);
  for (std::size_t i = 0; i < in.nodes.size(); ++i) {
    auto row = kg_emb.entity(in.nodes[i]);
    std::copy(row.begin(), row.end(), in.node_init.row(i).begin());
  }

  std::set<RelationId> rels;
  std::set<std::tuple<std::size_t, std::size_t, RelationId>> directed;
  for (const Triplet& t : mg.edges) {
    rels.insert(t.relation);
    const std::size_t h = node_index(t.head), tl = node_index(t.tail);
    directed.emplace(h, tl, t.relation);
    if (h != tl) directed.emplace(tl, h, t.relation);
  }
  in.relations.assign(rels.begin(), rels.end());
  in.relation_init = Matrix(in.relations.size(), cfg.entity_dim);
  for (std::size_t i = 0; i < in.relations.size(); ++i) {
    auto row = kg_emb.relation(in.relations[i]);
    std::copy(row.begin(), row.end(), in.relation_init.row(i).begin());
  }
  for (const auto& [h, tl, r] : directed) {
    in.edge_head.push_back(h);
    in.edge_tail.push_back(tl);
    in.edge_rel.push_back(static_cast<std::size_t>(
        std::lower_bound(in.relations.begin(), in.relations.end(), r) -
        in.relations.begin()));
  }

  const EntityAlignment align = align_entities(in.pair, mg);
  for (const auto& a : align.aligned) {
    in.aligned_nodes.push_back(node_index(a.entity));
    in.aligned_tokens.push_back(a.token);
  }
  for (EntityId e : align.intermediate) in.intermediate_nodes.push_back(node_index(e));
  return in;
}

// ---------------------------------------------------------------------------
// Network

KermModel::KermModel(KermConfig cfg, std::size_t vocab_size)
    : cfg_(cfg), vocab_size_(vocab_size) {
  cfg_.validate();
  if (vocab_size_ < 3) throw ConfigError("vocabulary too small");
}

namespace {

std::string layer_prefix(std::size_t i) { return "layer" + std::to_string(i); }

std::string gmn_prefix(const KermConfig& cfg, std::size_t injector_index) {
  return cfg.share_gmn ? "gmn.shared" : "gmn" + std::to_string(injector_index);
}

bool uses_gmn(KermMode m) {
  return m == KermMode::kFull || m == KermMode::kNoInteraction;
}

}  // namespace

void KermModel::init_params(ParamStore& store, std::uint64_t seed) const {
  Rng rng(seed);
  auto normal = [&](std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal() * stddev;
    return m;
  };
  auto dense = [&](const std::string& w, const std::string& b, std::size_t in,
                   std::size_t out) {
    store.add(w, normal(in, out, 1.0 / std::sqrt(static_cast<double>(in))));
    store.add(b, Matrix(1, out));
  };
  auto norm = [&](const std::string& prefix, std::size_t dim) {
    store.add(prefix + ".gain", Matrix(1, dim, 1.0));
    store.add(prefix + ".bias", Matrix(1, dim));
  };
  const std::size_t h = cfg_.hidden, f = cfg_.ffn, de = cfg_.entity_dim;

  store.add("embed.token", normal(vocab_size_, h, 1.0));
  store.add("embed.position", normal(cfg_.max_len, h, 0.1));
  store.add("embed.segment", normal(2, h, 0.1));
  norm("embed.ln", h);

  const std::size_t depth = cfg_.encoder_depth() + cfg_.injector_depth();
  for (std::size_t i = 0; i < depth; ++i) {
    const std::string p = layer_prefix(i);
    for (const char* m : {"q", "k", "v", "o"})
      dense(p + ".attn.w" + m, p + ".attn.b" + m, h, h);
    norm(p + ".attn_ln", h);
    dense(p + ".ffn.w1", p + ".ffn.b1", h, f);
    dense(p + ".ffn.w2", p + ".ffn.b2", f, h);
    norm(p + ".ffn_ln", h);
    if (i >= cfg_.encoder_depth()) {
      dense(p + ".inject.w3", p + ".inject.b3", de, f);
      dense(p + ".inject.w5", p + ".inject.b5", f, de);
    }
  }
  if (cfg_.injector_depth() > 0 && uses_gmn(cfg_.mode)) {
    dense("relation_proj.w", "relation_proj.b", de, de);
    const std::size_t count = cfg_.share_gmn ? 1 : cfg_.injector_depth();
    for (std::size_t j = 0; j < count; ++j) {
      const std::string p = gmn_prefix(cfg_, j);
      for (const char* m : {"alpha", "beta", "gamma"})
        dense(p + "." + m + ".w", p + "." + m + ".b", 2 * de, 1);
    }
  }
  if (cfg_.mode == KermMode::kNoInteraction)
    dense("head.w6", "head.b6", h + de, 1);
  else
    dense("head.w4", "head.b4", h, 1);
}

bool KermModel::injector_only(const std::string& name) {
  return name.starts_with("gmn") || name.starts_with("relation_proj.") ||
         name.find(".inject.") != std::string::npos;
}

bool KermModel::injector_group(const std::string& name) const {
  if (injector_only(name) || name.starts_with("head.")) return true;
  if (!name.starts_with("layer")) return false;
  const std::size_t index = std::stoul(name.substr(5, name.find('.') - 5));
  return index >= cfg_.encoder_depth();
}

Var KermModel::attention(Tape& tape, const ParamStore& params, Var x,
                         const std::string& prefix, ForwardTrace* trace) const {
  auto p = [&](const std::string& n) { return tape.param(params, prefix + n); };
  const Var q = ad::linear(x, p(".attn.wq"), p(".attn.bq"));
  const Var k = ad::linear(x, p(".attn.wk"), p(".attn.bk"));
  const Var v = ad::linear(x, p(".attn.wv"), p(".attn.bv"));
  const std::size_t dk = cfg_.hidden / cfg_.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  std::vector<Var> heads;
  std::vector<Matrix> probs;
  for (std::size_t hd = 0; hd < cfg_.heads; ++hd) {
    const Var qh = ad::slice_cols(q, hd * dk, dk);
    const Var kh = ad::slice_cols(k, hd * dk, dk);
    const Var vh = ad::slice_cols(v, hd * dk, dk);
    const Var a = ad::softmax_rows(ad::scale(ad::matmul(qh, ad::transpose(kh)), inv));
    if (trace) probs.push_back(a.value());
    heads.push_back(ad::matmul(a, vh));
  }
  if (trace) trace->attention.push_back(std::move(probs));
  return ad::linear(ad::concat_cols(heads), p(".attn.wo"), p(".attn.bo"));
}

Var KermModel::encoder_layer(Tape& tape, const ParamStore& params, Var x,
                             const std::string& prefix, ForwardTrace* trace) const {
  auto p = [&](const std::string& n) { return tape.param(params, prefix + n); };
  const Var a = ad::layer_norm(ad::add(x, attention(tape, params, x, prefix, trace)),
                               p(".attn_ln.gain"), p(".attn_ln.bias"));
  const Var f = ad::activation(ad::linear(a, p(".ffn.w1"), p(".ffn.b1")), Activation::kGelu);
  return ad::layer_norm(ad::add(a, ad::linear(f, p(".ffn.w2"), p(".ffn.b2"))),
                        p(".ffn_ln.gain"), p(".ffn_ln.bias"));
}

Var KermModel::gmn(Tape& tape, const ParamStore& params, Var e, Var rel,
                   const ModelInput& in, const std::string& prefix,
                   ForwardTrace* trace) const {
  if (in.edge_head.empty()) return e;
  auto p = [&](const std::string& n) { return tape.param(params, prefix + n); };
  const std::size_t n = in.nodes.size();
  const Var r = ad::gather_rows(rel, in.edge_rel);
  Var x = e;
  for (std::size_t k = 0; k < cfg_.gmn_layers; ++k) {
    const Var h = ad::gather_rows(x, in.edge_head);
    const Var t = ad::gather_rows(x, in.edge_tail);
    Var logit = ad::linear(ad::concat_cols({h, t}), p(".alpha.w"), p(".alpha.b"));
    logit = ad::add(logit, ad::linear(ad::concat_cols({h, r}), p(".beta.w"), p(".beta.b")));
    logit = ad::add(logit, ad::linear(ad::concat_cols({r, t}), p(".gamma.w"), p(".gamma.b")));
    const Var a = ad::segment_softmax(ad::activation(logit, Activation::kSigmoid),
                                      in.edge_head);
    if (trace) trace->gmn.push_back({a.value(), in.edge_head});
    x = ad::add(x, ad::scatter_add_rows(ad::scale_rows(t, a), in.edge_head, n));
  }
  return x;
}

Var KermModel::forward(Tape& tape, const ParamStore& params, const ModelInput& in,
                       ForwardTrace* trace) const {
  const TokenizedPair& pair = in.pair;
  const std::size_t len = pair.length();
  if (len == 0 || len > cfg_.max_len)
    throw ShapeError("pair length " + std::to_string(len) + " outside 1.." +
                     std::to_string(cfg_.max_len));
  std::vector<std::size_t> ids, positions, segments;
  for (std::size_t i = 0; i < len; ++i) {
    if (pair.ids[i] < 0 || static_cast<std::size_t>(pair.ids[i]) >= vocab_size_)
      throw ShapeError("token id " + std::to_string(pair.ids[i]) +
                       " outside the vocabulary");
    ids.push_back(static_cast<std::size_t>(pair.ids[i]));
    positions.push_back(i);
    segments.push_back(static_cast<std::size_t>(pair.segments[i]));
  }
  auto p = [&](const std::string& n) { return tape.param(params, n); };

  Var x = ad::add(ad::add(ad::gather_rows(p("embed.token"), ids),
                          ad::gather_rows(p("embed.position"), positions)),
                  ad::gather_rows(p("embed.segment"), segments));
  x = ad::layer_norm(x, p("embed.ln.gain"), p("embed.ln.bias"));
  for (std::size_t i = 0; i < cfg_.encoder_depth(); ++i)
    x = encoder_layer(tape, params, x, layer_prefix(i), trace);

  const bool graph = in.has_graph() && cfg_.mode != KermMode::kVanilla;
  Var e, rel;
  if (graph) {
    if (in.node_init.rows() != in.nodes.size() || in.node_init.cols() != cfg_.entity_dim)
      throw ShapeError("node embeddings " + in.node_init.shape_string() + " for " +
                       std::to_string(in.nodes.size()) + " nodes of dim " +
                       std::to_string(cfg_.entity_dim));
    for (std::size_t t : in.aligned_tokens)
      if (t >= len) throw InvariantError("aligned token " + std::to_string(t) +
                                         " outside pair of length " + std::to_string(len));
    e = tape.constant(in.node_init);
    if (uses_gmn(cfg_.mode) && cfg_.injector_depth() > 0)
      rel = ad::linear(tape.constant(in.relation_init), p("relation_proj.w"),
                       p("relation_proj.b"));
  }

  for (std::size_t j = 0; j < cfg_.injector_depth(); ++j) {
    const std::string prefix = layer_prefix(cfg_.encoder_depth() + j);
    auto lp = [&](const std::string& n) { return tape.param(params, prefix + n); };
    if (trace && graph) trace->entity_states.push_back(e.value());

    const Var a = ad::layer_norm(ad::add(x, attention(tape, params, x, prefix, trace)),
                                 lp(".attn_ln.gain"), lp(".attn_ln.bias"));
    Var pre = ad::linear(a, lp(".ffn.w1"), lp(".ffn.b1"));
    const bool inject = graph && cfg_.mode != KermMode::kNoInteraction &&
                        !in.aligned_nodes.empty();
    if (inject) {
      const Var proj = ad::linear(ad::gather_rows(e, in.aligned_nodes),
                                  lp(".inject.w3"), lp(".inject.b3"));
      pre = ad::add(pre, ad::scatter_add_rows(proj, in.aligned_tokens, len));
    }
    const Var f = ad::activation(pre, Activation::kGelu);
    x = ad::layer_norm(ad::add(a, ad::linear(f, lp(".ffn.w2"), lp(".ffn.b2"))),
                       lp(".ffn_ln.gain"), lp(".ffn_ln.bias"));
    if (!graph) continue;

    const std::size_t n = in.nodes.size();
    if (cfg_.mode == KermMode::kFull) {
      std::vector<Var> parts;
      if (!in.aligned_nodes.empty()) {
        const Var sliced = ad::linear(ad::gather_rows(f, in.aligned_tokens),
                                      lp(".inject.w5"), lp(".inject.b5"));
        parts.push_back(ad::scatter_add_rows(sliced, in.aligned_nodes, n));
      }
      if (!in.intermediate_nodes.empty())
        parts.push_back(ad::scatter_add_rows(ad::gather_rows(e, in.intermediate_nodes),
                                             in.intermediate_nodes, n));
      Var start = parts[0];
      for (std::size_t i = 1; i < parts.size(); ++i) start = ad::add(start, parts[i]);
      e = gmn(tape, params, start, rel, in, gmn_prefix(cfg_, j), trace);
    } else if (cfg_.mode == KermMode::kNoInteraction) {
      const Var fe = ad::activation(ad::linear(e, lp(".inject.w3"), lp(".inject.b3")),
                                    Activation::kGelu);
      const Var start = ad::linear(fe, lp(".inject.w5"), lp(".inject.b5"));
      e = gmn(tape, params, start, rel, in, gmn_prefix(cfg_, j), trace);
    }
  }

  const Var cls = ad::gather_rows(x, {0});
  if (cfg_.mode == KermMode::kNoInteraction) {
    const Var pooled =
        graph ? ad::mean_rows(e) : tape.constant(Matrix(1, cfg_.entity_dim));
    return ad::linear(ad::concat_cols({cls, pooled}), p("head.w6"), p("head.b6"));
  }
  return ad::linear(cls, p("head.w4"), p("head.b4"));
}

double KermModel::score(const ParamStore& params, const ModelInput& in,
                        ForwardTrace* trace) const {
  Tape tape(false);
  return forward(tape, params, in, trace).value()(0, 0);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {
constexpr char kModelMagic[8] = {'K', 'E', 'R', 'M', 'M', 'D', 'L', '1'};
}

void save_checkpoint(const ModelCheckpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint '" + path + "'");
  const std::string header =
      json{{"config", config_to_json(ckpt.config)}, {"vocab", ckpt.vocab.words()}}.dump();
  const std::uint64_t size = header.size();
  out.write(kModelMagic, sizeof(kModelMagic));
  out.write(reinterpret_cast<const char*>(&size), sizeof(size));
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  ckpt.params.write(out);
  if (!out) throw InputError("failed writing checkpoint '" + path + "'");
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint '" + path + "'");
  char magic[sizeof(kModelMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kModelMagic, sizeof(magic)) != 0)
    throw InputError("'" + path + "' is not a model checkpoint");
  std::uint64_t size = 0;
  in.read(reinterpret_cast<char*>(&size), sizeof(size));
  if (!in || size > (1u << 30)) throw InputError("corrupt checkpoint header in '" + path + "'");
  std::string header(size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(size));
  json j;
  try {
    j = json::parse(header);
  } catch (const json::exception& e) {
    throw InputError("corrupt checkpoint header in '" + path + "': " + e.what());
  }
  ModelCheckpoint ckpt{config_from_json(j.at("config")),
                       Vocab(j.at("vocab").get<std::vector<std::string>>()),
                       ParamStore::read(in)};
  return ckpt;
}

}  // namespace kerm
