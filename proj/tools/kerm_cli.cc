// Command line front end for the re-ranking pipeline.
//
//   kerm --config pipeline.json kg build
//   kerm --config pipeline.json distill prune --pi 10
//   kerm --config pipeline.json train --mode vanilla
//
// Exit codes: 0 ok, 1 bad configuration or usage, 2 bad input data,
// 3 internal error.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "kerm/errors.h"
#include "kerm/pipeline.h"

namespace {

using json = nlohmann::json;

template <typename T>
void override_value(json& j, const char* section, const char* key, const std::optional<T>& v) {
  if (v) j[section][key] = *v;
}

void print_metrics(const json& report) {
  std::printf("MRR@10  %.4f\nMAP@10  %.4f\nMAP@30  %.4f\n", report.at("mrr@10").get<double>(),
              report.at("map@10").get<double>(), report.at("map@30").get<double>());
}

void print_stats(const json& report) {
  std::printf("%-8s %-10s %-10s\n", "graphs", "avg_edges", "avg_score");
  const json& score = report.at("avg_edge_reliability");
  std::printf("%-8zu %-10.2f ", report.at("graphs").get<std::size_t>(),
              report.at("avg_edges").get<double>());
  if (score.is_null())
    std::printf("%-10s\n", "n/a");
  else
    std::printf("%-10.2f\n", score.get<double>());
}

int run(int argc, char** argv) {
  CLI::App app{"Knowledge-enhanced passage re-ranking pipeline"};
  app.require_subcommand(1);
  std::string config_path;
  std::optional<std::string> workdir;
  bool force = false;
  app.add_option("-c,--config", config_path, "pipeline configuration (JSON)")->required();
  app.add_option("--workdir", workdir, "override paths.workdir");
  app.add_flag("-f,--force", force, "rerun even if the stage is up to date");

  auto* kg = app.add_subcommand("kg", "knowledge graph stages");
  kg->require_subcommand(1);
  auto* kg_build = kg->add_subcommand("build", "load and normalize the triple file");
  auto* kg_transe = kg->add_subcommand("transe", "train TransE embeddings");
  std::optional<std::size_t> transe_epochs, transe_dim;
  std::optional<std::uint64_t> transe_seed;
  kg_transe->add_option("--epochs", transe_epochs);
  kg_transe->add_option("--dim", transe_dim);
  kg_transe->add_option("--seed", transe_seed);

  auto* distill = app.add_subcommand("distill", "graph distillation stages");
  distill->require_subcommand(1);
  auto* prune = distill->add_subcommand("prune", "keep the top-pi edges per entity");
  std::optional<std::size_t> pi, k, max_frontier;
  prune->add_option("--pi", pi);
  auto* build = distill->add_subcommand("build", "build a meta-graph for every candidate pair");
  build->add_option("--k", k, "maximum path length in hops");
  build->add_option("--max-frontier", max_frontier);

  auto* train = app.add_subcommand("train", "fine-tune the re-ranker");
  std::optional<std::string> mode;
  std::optional<std::size_t> epochs, max_steps, negatives;
  std::optional<double> lr_encoder, lr_injector;
  std::optional<std::uint64_t> seed;
  train->add_option("--mode", mode, "full, no_propagation, no_interaction or vanilla");
  train->add_option("--epochs", epochs);
  train->add_option("--max-steps", max_steps);
  train->add_option("--negatives", negatives);
  train->add_option("--lr-encoder", lr_encoder);
  train->add_option("--lr-injector", lr_injector);
  train->add_option("--seed", seed);

  auto* rerank = app.add_subcommand("rerank", "score and sort every candidate list");
  std::optional<std::string> tag;
  rerank->add_option("--tag", tag, "run tag written in the last column");
  auto* eval = app.add_subcommand("eval", "MRR@10, MAP@10 and MAP@30 of the run");
  auto* stats = app.add_subcommand("stats", "meta-graph edge count and edge score");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  const std::filesystem::path cfg_file(config_path);
  json j = kerm::load_config_json(cfg_file);
  if (workdir) j["paths"]["workdir"] = std::filesystem::absolute(*workdir).string();
  override_value(j, "transe", "epochs", transe_epochs);
  override_value(j, "transe", "dim", transe_dim);
  override_value(j, "transe", "seed", transe_seed);
  override_value(j, "distill", "pi", pi);
  override_value(j, "distill", "k", k);
  override_value(j, "distill", "max_frontier", max_frontier);
  override_value(j, "model", "mode", mode);
  override_value(j, "train", "epochs", epochs);
  override_value(j, "train", "max_steps", max_steps);
  override_value(j, "train", "negatives", negatives);
  override_value(j, "train", "lr_encoder", lr_encoder);
  override_value(j, "train", "lr_injector", lr_injector);
  override_value(j, "train", "seed", seed);
  override_value(j, "rerank", "tag", tag);
  if (transe_dim && !(j.contains("model") && j["model"].contains("entity_dim")))
    j["model"]["entity_dim"] = *transe_dim;

  auto cfg = kerm::pipeline_config_from_json(j, cfg_file.parent_path());
  kerm::Pipeline pipeline(std::move(cfg), std::cerr);

  if (kg_build->parsed()) pipeline.kg_build(force);
  if (kg_transe->parsed()) pipeline.kg_transe(force);
  if (prune->parsed()) pipeline.distill_prune(force);
  if (build->parsed()) pipeline.distill_build(force);
  if (train->parsed()) pipeline.train(force);
  if (rerank->parsed()) pipeline.rerank(force);
  if (eval->parsed()) {
    const auto r = pipeline.eval(force);
    print_metrics(r.report);
    std::printf("report: %s\n", pipeline.artifact("metrics.json").string().c_str());
  }
  if (stats->parsed()) {
    const auto r = pipeline.stats(force);
    print_stats(r.report);
    std::printf("report: %s\n", pipeline.artifact("stats.json").string().c_str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const kerm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "internal error: %s\n", e.what());
    return 3;
  }
}
