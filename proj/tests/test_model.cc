#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/model.h"
#include "kerm/random.h"
#include "kerm/text.h"
#include "support.h"

namespace kerm {
namespace {

KermConfig tiny_config(KermMode mode) {
  KermConfig cfg;
  cfg.text_layers = 1;
  cfg.injector_layers = 1;
  cfg.gmn_layers = 2;
  cfg.hidden = 8;
  cfg.ffn = 12;
  cfg.entity_dim = 4;
  cfg.heads = 2;
  cfg.max_len = 16;
  cfg.mode = mode;
  return cfg;
}

ParamStore random_params(const KermModel& model, std::uint64_t seed) {
  ParamStore p;
  model.init_params(p, seed);
  Rng rng(seed + 1000);
  testing::perturb(p, rng, 0.1);
  return p;
}

// Row-wise layer normalization written out directly.
Matrix reference_layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias) {
  Matrix out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0, var = 0;
    for (double v : x.row(r)) mean += v / n;
    for (double v : x.row(r)) var += (v - mean) * (v - mean) / n;
    for (std::size_t c = 0; c < x.cols(); ++c)
      out(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-12) * gain(0, c) + bias(0, c);
  }
  return out;
}

Matrix reference_embedding(const ParamStore& p, const TokenizedPair& pair) {
  const Matrix& tok = p.value("embed.token");
  Matrix x(pair.length(), tok.cols());
  for (std::size_t i = 0; i < pair.length(); ++i)
    for (std::size_t c = 0; c < tok.cols(); ++c)
      x(i, c) = tok(static_cast<std::size_t>(pair.ids[i]), c) + p.value("embed.position")(i, c) +
                p.value("embed.segment")(static_cast<std::size_t>(pair.segments[i]), c);
  return reference_layer_norm(x, p.value("embed.ln.gain"), p.value("embed.ln.bias"));
}

double reference_head(const ParamStore& p, const Matrix& x) {
  double s = p.value("head.b4")(0, 0);
  for (std::size_t c = 0; c < x.cols(); ++c) s += x(0, c) * p.value("head.w4")(c, 0);
  return s;
}

void zero(ParamStore& p, const std::string& name) {
  for (double& v : p.value(name).data()) v = 0.0;
}

TEST(Vocab, SpecialsFirstThenSortedWords) {
  const auto v = Vocab::build({"b a", "c a"});
  EXPECT_EQ(v.words(), (std::vector<std::string>{"[UNK]", "[CLS]", "[SEP]", "a", "b", "c"}));
  EXPECT_EQ(v.id("zzz"), Vocab::kUnk);
  EXPECT_THROW(Vocab({"a", "b", "c"}), InputError);
}

TEST(TokenizePair, Layout) {
  const auto v = Vocab::build({"a b"});
  const auto p = tokenize_pair("a", "b", v, 16);
  EXPECT_EQ(p.ids, (std::vector<std::int32_t>{Vocab::kCls, v.id("a"), Vocab::kSep, v.id("b"),
                                              Vocab::kSep}));
  EXPECT_EQ(p.segments, (std::vector<std::int32_t>{0, 0, 0, 1, 1}));
  EXPECT_EQ(tokenize_pair("a", "unseen", v, 16).ids[3], Vocab::kUnk);
}

TEST(TokenizePair, PassageTruncatedFirst) {
  const auto v = Vocab::build({"q1 q2 p1 p2 p3 p4"});
  const auto p = tokenize_pair("q1 q2", "p1 p2 p3 p4", v, 6);
  EXPECT_EQ(p.query_len, 2u);
  EXPECT_EQ(p.passage_len, 1u);
  EXPECT_EQ(p.length(), 6u);
  const auto cut = tokenize_pair("q1 q2 q1 q2 q1", "p1", v, 5);
  EXPECT_EQ(cut.query_len, 2u);
  EXPECT_EQ(cut.passage_len, 0u);
  EXPECT_THROW(tokenize_pair("...", "p1", v, 8), InputError);
  EXPECT_THROW(tokenize_pair("q1", "p1", v, 2), ConfigError);
}

TEST(TokenizePairProperty, Framing) {
  Rng rng(73);
  const auto v = Vocab::build({"a b c d"});
  const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 300; ++trial) {
    std::string q = words[rng.below(5)], p;
    for (std::size_t i = 0, n = rng.below(8); i < n; ++i) q += " " + words[rng.below(5)];
    for (std::size_t i = 0, n = rng.below(20); i < n; ++i) p += " " + words[rng.below(5)];
    const std::size_t max_len = 4 + rng.below(20);
    const auto pair = tokenize_pair(q, p, v, max_len);
    EXPECT_LE(pair.length(), max_len);
    EXPECT_EQ(pair.ids[0], Vocab::kCls);
    EXPECT_EQ(std::count(pair.ids.begin(), pair.ids.end(), Vocab::kCls), 1);
    EXPECT_EQ(std::count(pair.ids.begin(), pair.ids.end(), Vocab::kSep), 2);
    EXPECT_EQ(pair.ids.back(), Vocab::kSep);
    EXPECT_EQ(pair.ids[pair.query_len + 1], Vocab::kSep);
    EXPECT_GE(pair.query_len, 1u);
    // The query is only cut once the passage is gone.
    if (pair.query_len < tokenize(q).size()) {
      EXPECT_EQ(pair.passage_len, 0u);
    }
  }
}

TEST(AlignEntities, FirstTokenOfQueryPhrase) {
  const auto v = Vocab::build({"liver enzyme low"});
  const auto pair = tokenize_pair("liver enzyme low", "low", v, 16);
  MetaGraph mg;
  mg.query_entities = {5};
  mg.sentence_entities = {9};
  mg.query_mentions = {{5, 0, 2}};
  mg.sentence_mentions = {{9, 0, 1}};
  mg.paths = {{{5, 7, 9}, {0, 0}}};
  mg.rebuild();
  const auto a = align_entities(pair, mg);
  EXPECT_EQ(a.aligned, (std::vector<AlignedEntity>{{5, 1}, {9, 5}}));
  EXPECT_EQ(a.intermediate, (std::vector<EntityId>{7}));
  EXPECT_EQ(pair.ids[1], v.id("liver"));
}

TEST(AlignEntities, EmptyAndTruncated) {
  const auto v = Vocab::build({"a b c d"});
  EXPECT_TRUE(align_entities(tokenize_pair("a", "b", v, 16), MetaGraph{}).aligned.empty());
  MetaGraph mg;
  mg.query_entities = {1};
  mg.sentence_entities = {2};
  mg.query_mentions = {{1, 0, 1}};
  mg.sentence_mentions = {{2, 3, 1}};
  mg.paths = {{{1, 2}, {0}}};
  mg.rebuild();
  const auto pair = tokenize_pair("a", "b c d a", v, 6);
  ASSERT_EQ(pair.passage_len, 2u);
  const auto a = align_entities(pair, mg);
  EXPECT_EQ(a.aligned, (std::vector<AlignedEntity>{{1, 1}}));
  EXPECT_EQ(a.intermediate, (std::vector<EntityId>{2}));
}

TEST(KermConfig, ValidationAndJson) {
  auto cfg = tiny_config(KermMode::kFull);
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_EQ(config_from_json(config_to_json(cfg)), cfg);
  cfg.heads = 3;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_config(KermMode::kFull);
  cfg.gmn_layers = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.mode = KermMode::kNoPropagation;
  EXPECT_NO_THROW(cfg.validate());
  EXPECT_THROW(config_from_json({{"layers", 3}}), ConfigError);
  EXPECT_THROW(mode_from_name("half"), ConfigError);
  auto vanilla = tiny_config(KermMode::kVanilla);
  EXPECT_EQ(vanilla.encoder_depth(), 2u);
  EXPECT_EQ(vanilla.injector_depth(), 0u);
}

TEST(KermModel, ParameterGroups) {
  KermModel model(tiny_config(KermMode::kFull), 10);
  ParamStore p;
  model.init_params(p, 1);
  EXPECT_TRUE(p.contains("gmn0.alpha.w"));
  EXPECT_TRUE(p.contains("layer1.inject.w3"));
  EXPECT_FALSE(p.contains("layer0.inject.w3"));
  EXPECT_TRUE(KermModel::injector_only("gmn0.beta.b"));
  EXPECT_TRUE(KermModel::injector_only("relation_proj.w"));
  EXPECT_FALSE(KermModel::injector_only("layer1.ffn.w1"));
  EXPECT_TRUE(model.injector_group("layer1.ffn.w1"));
  EXPECT_FALSE(model.injector_group("layer0.ffn.w1"));
  EXPECT_TRUE(model.injector_group("head.w4"));
  EXPECT_FALSE(model.injector_group("embed.token"));
  EXPECT_EQ(p.value("layer1.inject.w3").rows(), 4u);
  EXPECT_EQ(p.value("layer1.inject.w3").cols(), 12u);

  auto shared = tiny_config(KermMode::kFull);
  shared.share_gmn = true;
  shared.injector_layers = 2;
  ParamStore s;
  KermModel(shared, 10).init_params(s, 1);
  EXPECT_TRUE(s.contains("gmn.shared.gamma.w"));
  EXPECT_FALSE(s.contains("gmn1.gamma.w"));
}

TEST(TransformerLayer, ZeroedOutputWeightsLeaveTwoLayerNorms) {
  auto cfg = tiny_config(KermMode::kVanilla);
  cfg.injector_layers = 0;
  KermModel model(cfg, 10);
  auto p = random_params(model, 3);
  for (const char* n : {"layer0.attn.wo", "layer0.attn.bo", "layer0.ffn.w2", "layer0.ffn.b2"})
    zero(p, n);
  Rng rng(4);
  const auto in = testing::random_input(rng, cfg, 10, 2, 3, 0, 0);
  const Matrix x0 = reference_embedding(p, in.pair);
  const Matrix once = reference_layer_norm(x0, p.value("layer0.attn_ln.gain"),
                                           p.value("layer0.attn_ln.bias"));
  const Matrix twice = reference_layer_norm(once, p.value("layer0.ffn_ln.gain"),
                                            p.value("layer0.ffn_ln.bias"));
  EXPECT_NEAR(model.score(p, in), reference_head(p, twice), 1e-12);
}

TEST(TransformerLayer, SingleTokenAttendsToItself) {
  auto cfg = tiny_config(KermMode::kVanilla);
  cfg.injector_layers = 0;
  KermModel model(cfg, 10);
  auto p = random_params(model, 5);
  zero(p, "layer0.attn.wo");
  zero(p, "layer0.attn.bo");
  for (std::size_t i = 0; i < cfg.hidden; ++i) p.value("layer0.attn.wo")(i, i) = 1.0;
  zero(p, "layer0.ffn.w2");
  zero(p, "layer0.ffn.b2");
  ModelInput in;
  in.pair.ids = {Vocab::kCls};
  in.pair.segments = {0};
  ForwardTrace trace;
  const double got = model.score(p, in, &trace);

  ASSERT_EQ(trace.attention.size(), 1u);
  for (const Matrix& head : trace.attention[0]) EXPECT_EQ(head, Matrix::from({{1.0}}));
  const Matrix x0 = reference_embedding(p, in.pair);
  Matrix v = testing::naive_matmul(x0, p.value("layer0.attn.wv"));
  for (std::size_t c = 0; c < v.cols(); ++c) v(0, c) += p.value("layer0.attn.bv")(0, c) + x0(0, c);
  const Matrix a = reference_layer_norm(v, p.value("layer0.attn_ln.gain"),
                                        p.value("layer0.attn_ln.bias"));
  const Matrix out = reference_layer_norm(a, p.value("layer0.ffn_ln.gain"),
                                          p.value("layer0.ffn_ln.bias"));
  EXPECT_NEAR(got, reference_head(p, out), 1e-12);
}

TEST(TransformerLayer, AttentionRowsSumToOne) {
  const auto cfg = tiny_config(KermMode::kFull);
  KermModel model(cfg, 12);
  const auto p = random_params(model, 6);
  Rng rng(6);
  const auto in = testing::random_input(rng, cfg, 12, 3, 4, 4, 2);
  ForwardTrace trace;
  model.score(p, in, &trace);
  ASSERT_EQ(trace.attention.size(), 2u);
  for (const auto& layer : trace.attention)
    for (const Matrix& a : layer)
      for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0;
        for (double v : a.row(r)) s += v;
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
}

// Two nodes joined by one edge; every node then has exactly one neighbor.
ModelInput pair_graph(Rng& rng, const KermConfig& cfg, std::size_t vocab) {
  auto in = testing::random_input(rng, cfg, vocab, 2, 2, 0, 0);
  in.nodes = {3, 8};
  in.node_init = Matrix(2, cfg.entity_dim);
  for (double& v : in.node_init.data()) v = rng.normal();
  in.relations = {0};
  in.relation_init = Matrix(1, cfg.entity_dim, 0.3);
  in.edge_head = {0, 1};
  in.edge_tail = {1, 0};
  in.edge_rel = {0, 0};
  in.aligned_nodes = {0, 1};
  in.aligned_tokens = {1, 4};
  return in;
}

TEST(Gmn, SingleNeighborGetsWeightOne) {
  const auto cfg = tiny_config(KermMode::kFull);
  KermModel model(cfg, 12);
  const auto p = random_params(model, 7);
  Rng rng(7);
  ForwardTrace trace;
  model.score(p, pair_graph(rng, cfg, 12), &trace);
  ASSERT_EQ(trace.gmn.size(), cfg.gmn_layers);
  for (const auto& round : trace.gmn) EXPECT_EQ(round.weights, Matrix::from({{1.0}, {1.0}}));
}

TEST(Gmn, ZeroInputStaysZero) {
  auto cfg = tiny_config(KermMode::kNoInteraction);
  cfg.injector_layers = 2;
  KermModel model(cfg, 12);
  auto p = random_params(model, 8);
  zero(p, "layer1.inject.w5");
  zero(p, "layer1.inject.b5");
  Rng rng(8);
  ForwardTrace trace;
  model.score(p, testing::random_input(rng, cfg, 12, 3, 3, 4, 2), &trace);
  ASSERT_EQ(trace.entity_states.size(), 2u);
  EXPECT_EQ(trace.entity_states[1], Matrix(4, cfg.entity_dim));
}

TEST(Gmn, SymmetricNeighborsSplitEvenly) {
  const auto cfg = tiny_config(KermMode::kNoInteraction);
  KermModel model(cfg, 12);
  const auto p = random_params(model, 9);
  Rng rng(9);
  auto in = testing::random_input(rng, cfg, 12, 2, 2, 0, 0);
  in.nodes = {1, 2, 3};
  in.node_init = Matrix(3, cfg.entity_dim);
  for (std::size_t c = 0; c < cfg.entity_dim; ++c) {
    in.node_init(0, c) = rng.normal();
    in.node_init(1, c) = in.node_init(2, c) = rng.normal();
  }
  in.relations = {0};
  in.relation_init = Matrix(1, cfg.entity_dim, -0.2);
  in.edge_head = {0, 0, 1, 2};
  in.edge_tail = {1, 2, 0, 0};
  in.edge_rel = {0, 0, 0, 0};
  in.aligned_nodes = {0};
  in.aligned_tokens = {1};
  in.intermediate_nodes = {1, 2};
  ForwardTrace trace;
  model.score(p, in, &trace);
  for (const auto& round : trace.gmn) {
    EXPECT_DOUBLE_EQ(round.weights(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(round.weights(1, 0), 0.5);
  }
}

TEST(Injection, OnlyTheAlignedTokenChanges) {
  // With one injector layer the score reads only the [CLS] row, so an entity
  // aligned elsewhere cannot move it, while one aligned at [CLS] acts exactly
  // like adding its projection to the first FFN bias.
  auto cfg = tiny_config(KermMode::kFull);
  KermModel model(cfg, 12);
  auto p = random_params(model, 10);
  Rng rng(10);
  auto in = testing::random_input(rng, cfg, 12, 2, 2, 0, 0);
  const double text_only = model.score(p, in);
  in.nodes = {4};
  in.node_init = Matrix(1, cfg.entity_dim);
  for (double& v : in.node_init.data()) v = rng.normal();
  in.relation_init = Matrix(0, cfg.entity_dim);
  in.aligned_nodes = {0};
  for (std::size_t tok = 1; tok < in.pair.length(); ++tok) {
    in.aligned_tokens = {tok};
    EXPECT_EQ(model.score(p, in), text_only) << tok;
  }

  in.aligned_tokens = {0};
  const double injected = model.score(p, in);
  EXPECT_NE(injected, text_only);
  Matrix proj = testing::naive_matmul(in.node_init, p.value("layer1.inject.w3"));
  ParamStore folded = p;
  for (std::size_t c = 0; c < cfg.ffn; ++c)
    folded.value("layer1.ffn.b1")(0, c) += proj(0, c) + p.value("layer1.inject.b3")(0, c);
  ModelInput text;
  text.pair = in.pair;
  EXPECT_NEAR(model.score(folded, text), injected, 1e-12);
}

TEST(Reductions, EmptyGraphFullEqualsVanilla) {
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    auto full_cfg = tiny_config(KermMode::kFull);
    full_cfg.text_layers = 1 + rng.below(2);
    full_cfg.injector_layers = 1 + rng.below(2);
    auto van_cfg = full_cfg;
    van_cfg.mode = KermMode::kVanilla;
    KermModel full(full_cfg, 12), vanilla(van_cfg, 12);
    auto pf = random_params(full, 20 + trial);
    for (const auto& n : pf.names())
      if (KermModel::injector_only(n)) zero(pf, n);
    ParamStore pv;
    vanilla.init_params(pv, 99);
    for (const auto& n : pv.names()) pv.value(n) = pf.value(n);
    const auto in = testing::random_input(rng, full_cfg, 12, 3, 4, 0, 0);
    EXPECT_EQ(full.score(pf, in), vanilla.score(pv, in));
    // Vanilla ignores the graph entirely.
    const auto with_graph = testing::random_input(rng, full_cfg, 12, 3, 4, 4, 2);
    auto stripped = with_graph;
    stripped.nodes.clear();
    EXPECT_EQ(vanilla.score(pv, with_graph), vanilla.score(pv, stripped));
  }
}

TEST(Reductions, NoPropagationIgnoresGmnDepth) {
  Rng rng(13);
  auto a_cfg = tiny_config(KermMode::kNoPropagation);
  auto b_cfg = a_cfg;
  b_cfg.gmn_layers = 5;
  KermModel a(a_cfg, 12), b(b_cfg, 12);
  const auto p = random_params(a, 30);
  ParamStore pb;
  b.init_params(pb, 30);
  EXPECT_EQ(pb.names(), p.names());
  const auto in = testing::random_input(rng, a_cfg, 12, 3, 4, 4, 2);
  EXPECT_EQ(a.score(p, in), b.score(p, in));
}

TEST(Model, PrepareInputIsCanonical) {
  const auto g = GraphBuilder().add("x", "r", "y").add("y", "s", "z").build();
  KgEmbeddings emb{Matrix(3, 4), Matrix(2, 4)};
  for (std::size_t i = 0; i < 12; ++i) emb.entities.data()[i] = static_cast<double>(i);
  auto cfg = tiny_config(KermMode::kFull);
  const auto vocab = Vocab::build({"x z"});
  MetaGraph mg;
  mg.query_entities = {2};
  mg.sentence_entities = {0};
  mg.query_mentions = {{2, 0, 1}};
  mg.sentence_mentions = {{0, 0, 1}};
  mg.paths = {{{2, 1, 0}, {1, 0}}};
  mg.rebuild();
  const auto in = prepare_input("z", "x", mg, emb, vocab, cfg);
  EXPECT_EQ(in.nodes, (std::vector<EntityId>{0, 1, 2}));
  EXPECT_EQ(in.node_init(2, 0), 8.0);
  EXPECT_EQ(in.relations, (std::vector<RelationId>{0, 1}));
  EXPECT_EQ(in.edge_head, (std::vector<std::size_t>{0, 1, 1, 2}));
  EXPECT_EQ(in.edge_tail, (std::vector<std::size_t>{1, 0, 2, 1}));
  EXPECT_EQ(in.edge_rel, (std::vector<std::size_t>{0, 0, 1, 1}));
  EXPECT_EQ(in.aligned_nodes, (std::vector<std::size_t>{0, 2}));
  EXPECT_EQ(in.aligned_tokens, (std::vector<std::size_t>{3, 1}));
  EXPECT_EQ(in.intermediate_nodes, (std::vector<std::size_t>{1}));

  cfg.entity_dim = 5;
  EXPECT_THROW(prepare_input("z", "x", mg, emb, vocab, cfg), ConfigError);
  cfg.mode = KermMode::kVanilla;
  EXPECT_FALSE(prepare_input("z", "x", mg, emb, vocab, cfg).has_graph());
}

TEST(Model, BadAlignmentIsAnInvariantError) {
  const auto cfg = tiny_config(KermMode::kFull);
  KermModel model(cfg, 12);
  const auto p = random_params(model, 14);
  Rng rng(14);
  auto in = testing::random_input(rng, cfg, 12, 2, 2, 4, 2);
  in.aligned_tokens[0] = 50;
  EXPECT_THROW(model.score(p, in), InvariantError);
  ParamStore missing;
  EXPECT_THROW(model.score(missing, testing::random_input(rng, cfg, 12, 2, 2, 0, 0)), Error);
}

TEST(Model, GradientCheckAllParameters) {
  const auto cfg = tiny_config(KermMode::kFull);
  const std::size_t vocab = 6;
  KermModel model(cfg, vocab);
  auto p = random_params(model, 15);
  Rng rng(15);
  const auto in = testing::random_input(rng, cfg, vocab, 2, 2, 4, 2);
  ASSERT_EQ(in.pair.length(), 7u);
  const auto report =
      grad_check([&](Tape& t) { return model.forward(t, p, in); }, p, {1e-5, 1e-4, 1e-6});
  EXPECT_TRUE(report.passed) << report.worst_param << "[" << report.worst_index
                             << "] rel " << report.max_rel_error;
  EXPECT_EQ(report.checked, p.parameter_count());
}

TEST(Model, DeterministicScore) {
  const auto cfg = tiny_config(KermMode::kFull);
  KermModel model(cfg, 12);
  const auto p = random_params(model, 16);
  Rng rng(16);
  const auto in = testing::random_input(rng, cfg, 12, 3, 4, 4, 2);
  EXPECT_EQ(model.score(p, in), model.score(p, in));
  ParamStore again;
  model.init_params(again, 16);
  Rng r2(16 + 1000);
  testing::perturb(again, r2, 0.1);
  EXPECT_TRUE(again == p);
}

TEST(Checkpoint, RoundTrip) {
  const auto cfg = tiny_config(KermMode::kNoInteraction);
  const auto vocab = Vocab::build({"alpha beta gamma"});
  KermModel model(cfg, vocab.size());
  ModelCheckpoint ckpt{cfg, vocab, random_params(model, 17)};
  const auto dir = std::filesystem::temp_directory_path() / "kerm_model_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "m.bin").string();
  save_checkpoint(ckpt, path);
  const auto back = load_checkpoint(path);
  EXPECT_EQ(back.config, cfg);
  EXPECT_EQ(back.vocab, vocab);
  EXPECT_TRUE(back.params == ckpt.params);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace kerm
