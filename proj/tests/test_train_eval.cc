#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/random.h"
#include "kerm/synthetic.h"
#include "kerm/train_eval.h"
#include "support.h"

namespace kerm {
namespace {

RerankExample labelled(std::size_t positives, std::size_t negatives) {
  RerankExample ex;
  ex.qid = "q";
  ex.query = "query";
  for (std::size_t i = 0; i < positives + negatives; ++i) {
    ex.candidates.push_back({"p" + std::to_string(i), "text", i + 1});
    ex.labels.push_back(i < positives ? 1 : 0);
  }
  return ex;
}

RunFile run_of(const std::vector<std::tuple<std::string, std::string, double>>& rows) {
  return make_run(rows, "t");
}

TEST(FinetuneLoss, Examples) {
  EXPECT_NEAR(finetune_loss(0.3, {0.3}), std::log(2.0), 1e-15);
  EXPECT_NEAR(finetune_loss(1.0, {0.0, 0.0}), -std::log(std::exp(1.0) / (std::exp(1.0) + 2)),
              1e-15);
  EXPECT_NEAR(finetune_loss(1.0, {0.0, 0.0}), 0.5514, 1e-4);
  EXPECT_LT(finetune_loss(800.0, {0.0, -3.0}), 1e-300);
  EXPECT_TRUE(std::isfinite(finetune_loss(-1000.0, {1000.0})));
}

TEST(FinetuneLossProperty, NonNegativeAndShiftInvariant) {
  Rng rng(79);
  for (int trial = 0; trial < 500; ++trial) {
    const double pos = rng.normal() * 5;
    std::vector<double> neg(1 + rng.below(20));
    for (double& v : neg) v = rng.normal() * 5;
    const double base = finetune_loss(pos, neg);
    EXPECT_GE(base, 0.0);
    const double c = rng.normal() * 50;
    auto shifted = neg;
    for (double& v : shifted) v += c;
    EXPECT_NEAR(finetune_loss(pos + c, shifted), base, 1e-9);
    const std::vector<double> same(neg.size(), pos);
    EXPECT_NEAR(finetune_loss(pos, same), std::log(1.0 + static_cast<double>(neg.size())), 1e-12);
  }
}

TEST(SampleBatch, DistinctWhenEnoughNegatives) {
  const auto ex = labelled(1, 30);
  const auto b = sample_batch(ex, 19, 5);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->positive, 0u);
  EXPECT_EQ(b->negatives.size(), 19u);
  EXPECT_FALSE(b->with_replacement);
  EXPECT_EQ(std::set<std::size_t>(b->negatives.begin(), b->negatives.end()).size(), 19u);
  for (std::size_t n : b->negatives) EXPECT_EQ(ex.labels[n], 0);
}

TEST(SampleBatch, ReplacementWhenShort) {
  const auto ex = labelled(1, 5);
  const auto b = sample_batch(ex, 19, 5);
  ASSERT_TRUE(b.has_value());
  EXPECT_EQ(b->negatives.size(), 19u);
  EXPECT_TRUE(b->with_replacement);
  for (std::size_t n : b->negatives) EXPECT_EQ(ex.labels[n], 0);
}

TEST(SampleBatch, DeterministicAndSkips) {
  const auto ex = labelled(3, 30);
  const auto a = sample_batch(ex, 7, 11), b = sample_batch(ex, 7, 11);
  EXPECT_EQ(a->positive, b->positive);
  EXPECT_EQ(a->negatives, b->negatives);
  EXPECT_EQ(ex.labels[a->positive], 1);
  EXPECT_FALSE(sample_batch(labelled(0, 5), 3, 1).has_value());
  EXPECT_FALSE(sample_batch(labelled(2, 0), 3, 1).has_value());
}

TEST(MakeRun, OrdersByScoreThenPid) {
  const auto run = run_of({{"q", "p1", 0.2}, {"q", "p2", 0.9}});
  ASSERT_EQ(run.rows.size(), 2u);
  EXPECT_EQ(run.rows[0].pid, "p2");
  EXPECT_EQ(run.rows[0].rank, 1u);
  const auto tie = run_of({{"q", "pb", 0.5}, {"q", "pa", 0.5}, {"q", "pc", 0.7}});
  EXPECT_EQ(tie.rows[0].pid, "pc");
  EXPECT_EQ(tie.rows[1].pid, "pa");
  EXPECT_EQ(tie.rows[2].pid, "pb");
  EXPECT_EQ(tie.rows[2].rank, 3u);
}

TEST(Metrics, MrrExamples) {
  Qrels qrels{{"q1", {{"c", 1}}}, {"q2", {{"x", 1}}}};
  const auto third = run_of({{"q1", "a", 3}, {"q1", "b", 2}, {"q1", "c", 1}});
  EXPECT_DOUBLE_EQ(mrr_at_k(third, qrels, 10), 1.0 / 3.0);

  std::vector<std::tuple<std::string, std::string, double>> eleven;
  for (int i = 0; i < 11; ++i) eleven.emplace_back("q1", i == 10 ? "c" : "d" + std::to_string(i), 20 - i);
  EXPECT_DOUBLE_EQ(mrr_at_k(run_of(eleven), qrels, 10), 0.0);

  const auto two = run_of({{"q1", "c", 2}, {"q1", "a", 1}, {"q2", "b", 2}, {"q2", "x", 1}});
  EXPECT_DOUBLE_EQ(mrr_at_k(two, qrels, 10), 0.75);
}

TEST(Metrics, MapExamples) {
  Qrels qrels{{"q", {{"a", 1}, {"b", 2}}}};
  EXPECT_DOUBLE_EQ(map_at_k(run_of({{"q", "a", 3}, {"q", "b", 2}, {"q", "c", 1}}), qrels, 10), 1.0);
  Qrels one{{"q", {{"b", 1}}}};
  EXPECT_DOUBLE_EQ(map_at_k(run_of({{"q", "a", 3}, {"q", "b", 2}}), one, 10), 0.5);
  EXPECT_DOUBLE_EQ(map_at_k(run_of({{"q", "a", 3}, {"q", "c", 2}, {"q", "b", 1}}), qrels, 10),
                   (1.0 + 2.0 / 3.0) / 2.0);
}

TEST(Metrics, ConventionsAndErrors) {
  // Grade 0 is not relevant and queries without relevant judgments are skipped.
  Qrels qrels{{"q1", {{"a", 0}, {"b", 1}}}, {"q2", {{"x", 0}}}};
  const auto run = run_of({{"q1", "a", 2}, {"q1", "b", 1}, {"q2", "x", 1}, {"q3", "y", 1}});
  EXPECT_DOUBLE_EQ(mrr_at_k(run, qrels, 10), 0.5);
  EXPECT_THROW(mrr_at_k(RunFile{}, qrels, 10), ConfigError);
  EXPECT_THROW(map_at_k(run, qrels, 0), ConfigError);
}

TEST(MetricsProperty, MatchReferenceDefinitions) {
  Rng rng(83);
  for (int trial = 0; trial < 100; ++trial) {
    const auto [run, qrels] = testing::random_run(rng, 1 + rng.below(6), 15);
    for (std::size_t k : {1, 3, 10, 30}) {
      const double mrr = mrr_at_k(run, qrels, k), map = map_at_k(run, qrels, k);
      EXPECT_NEAR(mrr, testing::reference_mrr(run, qrels, k), 1e-12);
      EXPECT_NEAR(map, testing::reference_map(run, qrels, k), 1e-12);
      EXPECT_GE(mrr, 0.0);
      EXPECT_LE(mrr, 1.0);
      EXPECT_GE(map, 0.0);
      EXPECT_LE(map, 1.0);
    }
  }
}

TEST(MetricsProperty, PerfectRankingScoresOne) {
  Rng rng(89);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::tuple<std::string, std::string, double>> rows;
    Qrels qrels;
    for (int q = 0; q < 3; ++q) {
      const std::string qid = "q" + std::to_string(q);
      const std::size_t docs = 2 + rng.below(10), rel = 1 + rng.below(docs - 1);
      for (std::size_t d = 0; d < docs; ++d) {
        const std::string pid = "d" + std::to_string(d);
        rows.emplace_back(qid, pid, d < rel ? 10.0 - d * 0.1 : -static_cast<double>(d));
        if (d < rel) qrels[qid][pid] = 1 + static_cast<int>(rng.below(3));
      }
    }
    const auto run = run_of(rows);
    EXPECT_DOUBLE_EQ(mrr_at_k(run, qrels, 10), 1.0);
    EXPECT_DOUBLE_EQ(map_at_k(run, qrels, 10), 1.0);
  }
}

TEST(RunIo, RoundTripIsExact) {
  Rng rng(97);
  std::vector<std::tuple<std::string, std::string, double>> rows;
  for (int i = 0; i < 40; ++i)
    rows.emplace_back("q" + std::to_string(i % 4), "p" + std::to_string(i), rng.normal() * 1e3);
  rows.emplace_back("q0", "tiny", 1e-310);
  const auto run = run_of(rows);
  std::stringstream buf;
  write_run(run, buf);
  EXPECT_EQ(parse_run(buf, "run"), run);
}

TEST(RunIo, Errors) {
  std::istringstream four("q Q0 p 1\n");
  try {
    parse_run(four, "run");
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  std::istringstream bad_rank("q Q0 p 1 0.5 t\nq Q0 p2 0 0.4 t\n");
  EXPECT_THROW(parse_run(bad_rank, "run"), ParseError);
  std::istringstream nan("q Q0 p 1 nan t\n");
  EXPECT_THROW(parse_run(nan, "run"), ParseError);
}

TEST(QrelsIo, GradedLabels) {
  std::istringstream in("q1 0 p1 2\nq1 0 p2 0\n\nq2 0 p9 1\n");
  const auto q = parse_qrels(in, "qrels");
  EXPECT_EQ(q.at("q1").at("p1"), 2);
  EXPECT_EQ(q.at("q1").at("p2"), 0);
  EXPECT_EQ(q.at("q2").at("p9"), 1);
  std::istringstream bad("q1 0 p1\n");
  EXPECT_THROW(parse_qrels(bad, "qrels"), ParseError);
  std::istringstream grade("q1 0 p1 high\n");
  EXPECT_THROW(parse_qrels(grade, "qrels"), ParseError);
}

TEST(Tsv, DuplicateIdsAreRejected) {
  const auto dir = std::filesystem::temp_directory_path() / "kerm_tsv_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "c.tsv").string();
  std::ofstream(path) << "p1\tfirst text\np2\tsecond\ttext\n";
  const auto rows = read_tsv(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[1].second, "second\ttext");
  std::ofstream(path) << "p1\ta\np1\tb\n";
  EXPECT_THROW(read_tsv(path), ParseError);
  std::filesystem::remove_all(dir);
}

TEST(BuildExamples, JoinsAndValidates) {
  const std::vector<std::pair<std::string, std::string>> queries = {{"q1", "one"}, {"q2", "two"}};
  const std::vector<std::pair<std::string, std::string>> coll = {{"a", "A"}, {"b", "B"}};
  const auto cands = run_of({{"q1", "a", 2}, {"q1", "b", 1}});
  const auto ex = build_examples(queries, coll, cands, {{"q1", {{"b", 3}}}});
  ASSERT_EQ(ex.size(), 1u);
  EXPECT_EQ(ex[0].candidates[0].pid, "a");
  EXPECT_EQ(ex[0].labels, (std::vector<int>{0, 3}));
  EXPECT_THROW(build_examples(queries, coll, run_of({{"q1", "zz", 1}}), {}), InputError);
  RunFile dup = cands;
  dup.rows.push_back(dup.rows[0]);
  EXPECT_THROW(build_examples(queries, coll, dup, {}), InputError);
}

// A small synthetic corpus run through distillation, shared by the training
// tests below.
struct TrainFixture {
  testing::DistilledCorpus corpus;
  KermConfig cfg;
  std::vector<PreparedQuery> data;

  TrainFixture() {
    SyntheticConfig sc;
    sc.queries = 8;
    sc.candidates = 10;
    sc.triplets = 80;
    TransEConfig tc;
    tc.dim = 8;
    tc.epochs = 30;
    corpus = testing::distill_corpus(generate_synthetic(sc), tc, 20, {2, 10000});
    cfg.text_layers = 1;
    cfg.injector_layers = 1;
    cfg.hidden = 16;
    cfg.ffn = 32;
    cfg.entity_dim = 8;
    cfg.heads = 2;
    cfg.max_len = 64;
    data = prepare_queries(corpus.examples, corpus.graphs, corpus.embeddings, corpus.vocab, cfg);
  }
};

TEST(Train, LossDecreasesOverTwoHundredSteps) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore p;
  model.init_params(p, 3);
  TrainConfig tc;
  tc.epochs = 25;
  tc.negatives = 9;
  std::vector<EpochLog> logs;
  const auto r = train(model, p, f.data, tc, [&](const EpochLog& e) { logs.push_back(e); });
  EXPECT_EQ(r.steps, 200u);
  ASSERT_EQ(logs.size(), 25u);
  EXPECT_LT(logs.back().mean_loss, logs.front().mean_loss);
  EXPECT_EQ(logs[0].lr_encoder, tc.lr_encoder);
  const auto j = epoch_log_to_json(logs[0]);
  EXPECT_TRUE(j.contains("mean_loss"));
  EXPECT_TRUE(j.contains("lr_injector"));
}

TEST(Train, ZeroLearningRateLeavesParametersUntouched) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore p;
  model.init_params(p, 4);
  const ParamStore before = p;
  TrainConfig tc;
  tc.lr_encoder = tc.lr_injector = 0.0;
  tc.epochs = 1;
  train(model, p, f.data, tc);
  for (const auto& n : p.names()) EXPECT_EQ(p.value(n), before.value(n)) << n;
}

TEST(Train, SameSeedSameParameters) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore a, b;
  model.init_params(a, 5);
  model.init_params(b, 5);
  TrainConfig tc;
  tc.epochs = 2;
  const auto ra = train(model, a, f.data, tc), rb = train(model, b, f.data, tc);
  for (const auto& n : a.names()) EXPECT_EQ(a.value(n), b.value(n)) << n;
  EXPECT_EQ(ra.step_losses, rb.step_losses);
}

TEST(Train, HugeLearningRateDiverges) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore p;
  model.init_params(p, 6);
  TrainConfig tc;
  tc.lr_encoder = tc.lr_injector = 1e300;
  tc.epochs = 3;
  EXPECT_THROW(train(model, p, f.data, tc), DivergenceError);
}

TEST(Train, MaxStepsAndConfigErrors) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore p;
  model.init_params(p, 7);
  TrainConfig tc;
  tc.max_steps = 3;
  EXPECT_EQ(train(model, p, f.data, tc).steps, 3u);
  EXPECT_THROW(train(model, p, {}, tc), ConfigError);
  tc.epochs = 0;
  EXPECT_THROW(train(model, p, f.data, tc), ConfigError);
}

TEST(Rerank, PermutationOfCandidates) {
  TrainFixture f;
  KermModel model(f.cfg, f.corpus.vocab.size());
  ParamStore p;
  model.init_params(p, 8);
  const auto run = rerank(model, p, f.data, "tag");
  std::size_t total = 0;
  for (const auto& q : f.data) {
    std::set<std::string> want, got;
    for (const auto& c : q.example.candidates) want.insert(c.pid);
    std::vector<std::size_t> ranks;
    double last = INFINITY;
    for (const auto& row : run.rows)
      if (row.qid == q.example.qid) {
        got.insert(row.pid);
        ranks.push_back(row.rank);
        EXPECT_LE(row.score, last);
        last = row.score;
        EXPECT_EQ(row.tag, "tag");
      }
    EXPECT_EQ(got, want);
    std::vector<std::size_t> expect(want.size());
    std::iota(expect.begin(), expect.end(), 1);
    EXPECT_EQ(ranks, expect);
    total += want.size();
  }
  EXPECT_EQ(run.rows.size(), total);
}

TEST(PrepareQueries, MissingGraphNamesThePair) {
  TrainFixture f;
  auto graphs = f.corpus.graphs;
  const auto& ex = f.corpus.examples[0];
  graphs.erase({ex.qid, ex.candidates[1].pid});
  try {
    prepare_queries(f.corpus.examples, graphs, f.corpus.embeddings, f.corpus.vocab, f.cfg);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("(" + ex.qid + ", " + ex.candidates[1].pid + ")"),
              std::string::npos);
  }
}

}  // namespace
}  // namespace kerm
