#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "kerm/distill.h"
#include "kerm/embed.h"
#include "kerm/model.h"
#include "kerm/train_eval.h"

namespace kerm {

// Every path and hyperparameter of the pipeline, read from one JSON file.
// Relative paths are resolved against the directory of that file.
struct PipelineConfig {
  struct Paths {
    std::filesystem::path triples;
    std::filesystem::path relation_map;  // empty: built-in default map
    std::filesystem::path word_vectors;
    std::filesystem::path collection;
    std::filesystem::path queries;
    std::filesystem::path train_queries;  // empty: same as queries
    std::filesystem::path qrels;
    std::filesystem::path candidates;
    std::filesystem::path workdir;
  } paths;
  bool strict_relations = true;
  TransEConfig transe;
  std::size_t pi = 20;
  MetaGraphOptions distill;
  KermConfig model;
  TrainConfig train;
  std::uint64_t init_seed = 11;
  std::string run_tag = "kerm";

  // The normalized configuration (defaults filled in, paths absolute).
  nlohmann::json to_json() const;
};

PipelineConfig pipeline_config_from_json(const nlohmann::json& j,
                                         const std::filesystem::path& base_dir);
nlohmann::json load_config_json(const std::filesystem::path& path);

struct StageResult {
  bool up_to_date = false;
  nlohmann::json report;  // stage-specific summary
};

// The stages of the command line, each reading the artifacts of earlier
// stages from the work directory. A stage writes `<stage>.stamp` holding a
// hash of its configuration and input files and is skipped when the stamp
// still matches and its outputs exist.
class Pipeline {
 public:
  Pipeline(PipelineConfig cfg, std::ostream& log);

  StageResult kg_build(bool force = false);
  StageResult kg_transe(bool force = false);
  StageResult distill_prune(bool force = false);
  StageResult distill_build(bool force = false);
  StageResult train(bool force = false);
  StageResult rerank(bool force = false);
  StageResult eval(bool force = false);
  StageResult stats(bool force = false);

  std::filesystem::path artifact(const std::string& name) const;
  const PipelineConfig& config() const { return cfg_; }

 private:
  struct Stage;
  StageResult run_stage(const Stage& stage, bool force);
  void require_artifact(const std::string& name, const std::string& producer) const;
  void require_input(const std::filesystem::path& p, const char* what) const;

  PipelineConfig cfg_;
  std::ostream& log_;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ULL);
std::uint64_t hash_file(const std::filesystem::path& p);

}  // namespace kerm
