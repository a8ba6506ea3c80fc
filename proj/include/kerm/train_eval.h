#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "kerm/distill.h"
#include "kerm/model.h"

namespace kerm {

// qid -> pid -> graded label. Unjudged pairs are absent (label 0).
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct Candidate {
  std::string pid;
  std::string text;
  std::size_t rank = 0;  // first-stage rank
};

struct RerankExample {
  std::string qid;
  std::string query;
  std::vector<Candidate> candidates;
  std::vector<int> labels;  // parallel to candidates
};

struct RunRow {
  std::string qid;
  std::string pid;
  std::size_t rank = 0;
  double score = 0.0;
  std::string tag;
  bool operator==(const RunRow&) const = default;
};

struct RunFile {
  std::vector<RunRow> rows;
  bool operator==(const RunFile&) const = default;
};

// --- TREC and TSV files -----------------------------------------------------

Qrels read_qrels(const std::string& path);
Qrels parse_qrels(std::istream& in, const std::string& source = "");
// `qid Q0 pid rank score tag`; scores are written with 17 significant digits
// so a read after a write gives back the same doubles.
void write_run(const RunFile& run, const std::string& path);
void write_run(const RunFile& run, std::ostream& out);
RunFile read_run(const std::string& path);
RunFile parse_run(std::istream& in, const std::string& source = "");
// `id<TAB>text` rows in file order. Duplicate ids are a ParseError.
std::vector<std::pair<std::string, std::string>> read_tsv(const std::string& path);

// Joins queries, passage texts, a first-stage candidate run and qrels into
// one example per query, in the order queries appear. Queries without
// candidates are left out.
std::vector<RerankExample> build_examples(
    const std::vector<std::pair<std::string, std::string>>& queries,
    const std::vector<std::pair<std::string, std::string>>& collection,
    const RunFile& candidates, const Qrels& qrels);

// --- Training ---------------------------------------------------------------

struct TrainBatch {
  std::size_t positive = 0;             // candidate index
  std::vector<std::size_t> negatives;   // candidate indices
  bool with_replacement = false;
};

// nullopt when the example has no positive or no negative candidate. With
// fewer than n_neg negatives they are drawn with replacement.
std::optional<TrainBatch> sample_batch(const RerankExample& ex, std::size_t n_neg,
                                       std::uint64_t seed);

// -log(exp(pos) / (exp(pos) + sum exp(neg))), via log-sum-exp.
double finetune_loss(double pos, const std::vector<double>& neg);

// An example together with the model input of each of its candidates.
struct PreparedQuery {
  RerankExample example;
  std::vector<ModelInput> inputs;
};

// Throws InputError naming the pair when a candidate has no meta-graph.
std::vector<PreparedQuery> prepare_queries(const std::vector<RerankExample>& examples,
                                           const MetaGraphIndex& graphs,
                                           const KgEmbeddings& kg_emb, const Vocab& vocab,
                                           const KermConfig& cfg);

struct TrainConfig {
  double lr_encoder = 1e-3;
  double lr_injector = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t max_steps = 0;  // 0: no limit besides epochs
  std::size_t negatives = 19;
  std::uint64_t seed = 7;
};

struct EpochLog {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  std::size_t steps = 0;
  std::size_t skipped = 0;
  double lr_encoder = 0.0;
  double lr_injector = 0.0;
};

nlohmann::json epoch_log_to_json(const EpochLog& log);

struct TrainResult {
  std::vector<EpochLog> epochs;
  std::vector<double> step_losses;
  std::size_t steps = 0;
};

// Adam with one learning rate for the text encoder and one for the
// injector, head and graph parameters. One step is one query: its positive
// and sampled negatives are scored on a single tape. Updates `params` in
// place. A non-finite value anywhere raises DivergenceError.
TrainResult train(const KermModel& model, ParamStore& params,
                  const std::vector<PreparedQuery>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch = {});

// Scores every candidate and orders each query by score, ties by pid.
RunFile rerank(const KermModel& model, const ParamStore& params,
               const std::vector<PreparedQuery>& queries, const std::string& tag);

// Ranks per query: score descending, then pid ascending.
RunFile make_run(const std::vector<std::tuple<std::string, std::string, double>>& scored,
                 const std::string& tag);

// --- Metrics ----------------------------------------------------------------

// Both metrics treat label >= 1 as relevant and skip queries without any
// relevant judgment. Throw ConfigError for an empty run or k == 0.
double mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k);
double map_at_k(const RunFile& run, const Qrels& qrels, std::size_t k);

}  // namespace kerm
