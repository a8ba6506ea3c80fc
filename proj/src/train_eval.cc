#include "kerm/train_eval.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include <nlohmann/json.hpp>

#include "kerm/errors.h"
#include "kerm/random.h"
#include "kerm/text.h"

namespace kerm {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Files

namespace {

std::ifstream open_input(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw InputError(std::string("cannot open ") + what + " '" + path + "'");
  return in;
}

template <typename T>
bool parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

}  // namespace

Qrels parse_qrels(std::istream& in, const std::string& source) {
  Qrels out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto cols = split_ws(line);
    if (cols.empty()) continue;
    if (cols.size() != 4)
      throw ParseError(source, line_no,
                       "expected 4 columns (qid 0 pid grade), got " +
                           std::to_string(cols.size()));
    int grade = 0;
    if (!parse_number(cols[3], grade))
      throw ParseError(source, line_no, "grade '" + cols[3] + "' is not an integer");
    out[cols[0]][cols[2]] = grade;
  }
  return out;
}

Qrels read_qrels(const std::string& path) {
  auto in = open_input(path, "qrels");
  return parse_qrels(in, path);
}

void write_run(const RunFile& run, std::ostream& out) {
  char score[64];
  for (const RunRow& r : run.rows) {
    std::snprintf(score, sizeof(score), "%.17g", r.score);
    out << r.qid << " Q0 " << r.pid << ' ' << r.rank << ' ' << score << ' ' << r.tag
        << '\n';
  }
}

void write_run(const RunFile& run, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write run '" + path + "'");
  write_run(run, out);
}

RunFile parse_run(std::istream& in, const std::string& source) {
  RunFile run;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto cols = split_ws(line);
    if (cols.empty()) continue;
    if (cols.size() != 6)
      throw ParseError(source, line_no,
                       "expected 6 columns (qid Q0 pid rank score tag), got " +
                           std::to_string(cols.size()));
    RunRow row{cols[0], cols[2], 0, 0.0, cols[5]};
    if (!parse_number(cols[3], row.rank) || row.rank == 0)
      throw ParseError(source, line_no, "rank '" + cols[3] + "' is not a positive integer");
    if (!parse_double(cols[4], row.score))
      throw ParseError(source, line_no, "score '" + cols[4] + "' is not a finite number");
    run.rows.push_back(std::move(row));
  }
  return run;
}

RunFile read_run(const std::string& path) {
  auto in = open_input(path, "run");
  return parse_run(in, path);
}

std::vector<std::pair<std::string, std::string>> read_tsv(const std::string& path) {
  auto in = open_input(path, "TSV file");
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0)
      throw ParseError(path, line_no, "expected id<TAB>text");
    std::string id = line.substr(0, tab);
    if (!seen.insert(id).second) throw ParseError(path, line_no, "duplicate id '" + id + "'");
    out.emplace_back(std::move(id), line.substr(tab + 1));
  }
  return out;
}

std::vector<RerankExample> build_examples(
    const std::vector<std::pair<std::string, std::string>>& queries,
    const std::vector<std::pair<std::string, std::string>>& collection,
    const RunFile& candidates, const Qrels& qrels) {
  std::unordered_map<std::string, const std::string*> passages;
  for (const auto& [id, text] : collection) passages.emplace(id, &text);
  std::map<std::string, std::vector<const RunRow*>> by_query;
  for (const RunRow& r : candidates.rows) by_query[r.qid].push_back(&r);

  std::vector<RerankExample> out;
  for (const auto& [qid, text] : queries) {
    auto it = by_query.find(qid);
    if (it == by_query.end()) continue;
    auto rows = it->second;
    std::stable_sort(rows.begin(), rows.end(),
                     [](const RunRow* a, const RunRow* b) { return a->rank < b->rank; });
    RerankExample ex{qid, text, {}, {}};
    std::set<std::string> seen;
    const auto judged = qrels.find(qid);
    for (const RunRow* r : rows) {
      if (!seen.insert(r->pid).second)
        throw InputError("candidate '" + r->pid + "' listed twice for query '" + qid + "'");
      auto p = passages.find(r->pid);
      if (p == passages.end())
        throw InputError("candidate '" + r->pid + "' of query '" + qid +
                         "' is not in the collection");
      ex.candidates.push_back({r->pid, *p->second, r->rank});
      int label = 0;
      if (judged != qrels.end()) {
        auto l = judged->second.find(r->pid);
        if (l != judged->second.end()) label = l->second;
      }
      ex.labels.push_back(label);
    }
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sampling and loss

std::optional<TrainBatch> sample_batch(const RerankExample& ex, std::size_t n_neg,
                                       std::uint64_t seed) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < ex.labels.size(); ++i) (ex.labels[i] >= 1 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty() || n_neg == 0) return std::nullopt;
  Rng rng(seed);
  TrainBatch batch;
  batch.positive = pos[rng.below(pos.size())];
  if (neg.size() >= n_neg) {
    // Partial Fisher-Yates: the first n_neg slots are a uniform sample.
    for (std::size_t i = 0; i < n_neg; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(neg.size() - i));
      std::swap(neg[i], neg[j]);
    }
    batch.negatives.assign(neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(n_neg));
  } else {
    batch.with_replacement = true;
    for (std::size_t i = 0; i < n_neg; ++i) batch.negatives.push_back(neg[rng.below(neg.size())]);
  }
  return batch;
}

double finetune_loss(double pos, const std::vector<double>& neg) {
  double m = pos;
  for (double s : neg) m = std::max(m, s);
  double sum = std::exp(pos - m);
  for (double s : neg) sum += std::exp(s - m);
  return m + std::log(sum) - pos;
}

std::vector<PreparedQuery> prepare_queries(const std::vector<RerankExample>& examples,
                                           const MetaGraphIndex& graphs,
                                           const KgEmbeddings& kg_emb, const Vocab& vocab,
                                           const KermConfig& cfg) {
  std::vector<PreparedQuery> out;
  out.reserve(examples.size());
  for (const RerankExample& ex : examples) {
    PreparedQuery pq{ex, {}};
    for (const Candidate& c : ex.candidates) {
      auto it = graphs.find({ex.qid, c.pid});
      if (it == graphs.end())
        throw InputError("no meta-graph for pair (" + ex.qid + ", " + c.pid + ")");
      pq.inputs.push_back(prepare_input(ex.query, c.text, it->second, kg_emb, vocab, cfg));
    }
    out.push_back(std::move(pq));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

json epoch_log_to_json(const EpochLog& log) {
  return json{{"epoch", log.epoch},           {"mean_loss", log.mean_loss},
              {"steps", log.steps},           {"skipped", log.skipped},
              {"lr_encoder", log.lr_encoder}, {"lr_injector", log.lr_injector}};
}

namespace {

class Adam {
 public:
  Adam(const TrainConfig& cfg, const KermModel& model, const ParamStore& params)
      : cfg_(cfg) {
    for (const auto& name : params.names()) {
      const Matrix& v = params.value(name);
      state_.emplace(name, State{Matrix(v.rows(), v.cols()), Matrix(v.rows(), v.cols()),
                                 model.injector_group(name) ? cfg.lr_injector
                                                            : cfg.lr_encoder});
    }
  }

  void step(ParamStore& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, s] : state_) {
      auto& w = params.value(name).data();
      const auto& g = params.grad(name).data();
      auto& m = s.m.data();
      auto& v = s.v.data();
      for (std::size_t i = 0; i < w.size(); ++i) {
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
        w[i] -= s.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.adam_eps);
      }
    }
  }

 private:
  struct State {
    Matrix m, v;
    double lr;
  };
  TrainConfig cfg_;
  std::map<std::string, State> state_;
  std::uint64_t t_ = 0;
};

}  // namespace

TrainResult train(const KermModel& model, ParamStore& params,
                  const std::vector<PreparedQuery>& data, const TrainConfig& cfg,
                  const std::function<void(const EpochLog&)>& on_epoch) {
  if (data.empty()) throw ConfigError("train: no training queries");
  if (cfg.epochs == 0) throw ConfigError("train: epochs must be positive");
  if (cfg.negatives == 0) throw ConfigError("train: negatives must be positive");
  if (cfg.lr_encoder < 0 || cfg.lr_injector < 0)
    throw ConfigError("train: learning rates must be non-negative");

  Adam adam(cfg, model, params);
  Rng rng(cfg.seed);
  TrainResult result;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  params.zero_grad();
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    rng.shuffle(order);
    EpochLog log{epoch, 0.0, 0, 0, cfg.lr_encoder, cfg.lr_injector};
    double loss_sum = 0.0;
    for (std::size_t qi : order) {
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) break;
      const PreparedQuery& q = data[qi];
      const std::uint64_t sample_seed = rng.next();
      auto batch = sample_batch(q.example, cfg.negatives, sample_seed);
      if (!batch) {
        ++log.skipped;
        continue;
      }
      double loss = 0.0;
      try {
        Tape tape;
        std::vector<Var> scores;
        scores.push_back(model.forward(tape, params, q.inputs[batch->positive]));
        for (std::size_t n : batch->negatives)
          scores.push_back(model.forward(tape, params, q.inputs[n]));
        const Var l = ad::softmax_cross_entropy_first(ad::concat_rows(scores));
        loss = l.value()(0, 0);
        tape.backward(l);
        tape.accumulate_param_grads(params);
        adam.step(params);
        params.zero_grad();
        for (const auto& name : params.names())
          check_finite(params.value(name), "parameter update");
      } catch (const InvariantError& e) {
        throw DivergenceError("training diverged at epoch " + std::to_string(epoch) +
                              ", step " + std::to_string(result.steps + 1) + " (query '" +
                              q.example.qid + "'): " + e.what());
      }
      if (!std::isfinite(loss))
        throw DivergenceError("non-finite loss at step " + std::to_string(result.steps + 1));
      loss_sum += loss;
      result.step_losses.push_back(loss);
      ++result.steps;
      ++log.steps;
    }
    if (log.steps == 0 && log.skipped == 0) break;  // step budget exhausted
    log.mean_loss = log.steps > 0 ? loss_sum / static_cast<double>(log.steps) : 0.0;
    result.epochs.push_back(log);
    if (on_epoch) on_epoch(log);
    if (log.steps == 0) break;  // every query was skipped
  }
  return result;
}

// ---------------------------------------------------------------------------
// Ranking

RunFile make_run(const std::vector<std::tuple<std::string, std::string, double>>& scored,
                 const std::string& tag) {
  std::vector<std::string> qids;
  std::map<std::string, std::vector<std::pair<std::string, double>>> per_query;
  for (const auto& [qid, pid, score] : scored) {
    auto [it, inserted] = per_query.try_emplace(qid);
    if (inserted) qids.push_back(qid);
    it->second.emplace_back(pid, score);
  }
  RunFile run;
  for (const auto& qid : qids) {
    auto& rows = per_query[qid];
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    for (std::size_t i = 0; i < rows.size(); ++i)
      run.rows.push_back({qid, rows[i].first, i + 1, rows[i].second, tag});
  }
  return run;
}

RunFile rerank(const KermModel& model, const ParamStore& params,
               const std::vector<PreparedQuery>& queries, const std::string& tag) {
  std::vector<std::tuple<std::string, std::string, double>> scored;
  for (const PreparedQuery& q : queries)
    for (std::size_t i = 0; i < q.inputs.size(); ++i)
      scored.emplace_back(q.example.qid, q.example.candidates[i].pid,
                          model.score(params, q.inputs[i]));
  return make_run(scored, tag);
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

template <typename PerQuery>
double mean_over_queries(const RunFile& run, const Qrels& qrels, std::size_t k,
                         PerQuery per_query) {
  if (run.rows.empty()) throw ConfigError("metric over an empty run");
  if (k == 0) throw ConfigError("metric cutoff k must be >= 1");
  std::map<std::string, std::vector<const RunRow*>> by_query;
  for (const RunRow& r : run.rows) by_query[r.qid].push_back(&r);
  double total = 0.0;
  std::size_t counted = 0;
  for (auto& [qid, rows] : by_query) {
    auto judged = qrels.find(qid);
    if (judged == qrels.end()) continue;
    std::size_t relevant = 0;
    for (const auto& [pid, label] : judged->second) relevant += label >= 1 ? 1 : 0;
    if (relevant == 0) continue;
    std::stable_sort(rows.begin(), rows.end(),
                     [](const RunRow* a, const RunRow* b) { return a->rank < b->rank; });
    std::vector<bool> hits;
    for (std::size_t i = 0; i < rows.size() && i < k; ++i) {
      auto l = judged->second.find(rows[i]->pid);
      hits.push_back(l != judged->second.end() && l->second >= 1);
    }
    total += per_query(hits, relevant);
    ++counted;
  }
  return counted == 0 ? 0.0 : total / static_cast<double>(counted);
}

}  // namespace

double mrr_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return mean_over_queries(run, qrels, k, [](const std::vector<bool>& hits, std::size_t) {
    for (std::size_t i = 0; i < hits.size(); ++i)
      if (hits[i]) return 1.0 / static_cast<double>(i + 1);
    return 0.0;
  });
}

double map_at_k(const RunFile& run, const Qrels& qrels, std::size_t k) {
  return mean_over_queries(run, qrels, k,
                           [k](const std::vector<bool>& hits, std::size_t relevant) {
                             double sum = 0.0;
                             std::size_t found = 0;
                             for (std::size_t i = 0; i < hits.size(); ++i) {
                               if (!hits[i]) continue;
                               ++found;
                               sum += static_cast<double>(found) / static_cast<double>(i + 1);
                             }
                             return sum / static_cast<double>(std::min(relevant, k));
                           });
}

}  // namespace kerm
