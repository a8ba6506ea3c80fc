#include "kerm/pipeline.h"

#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "kerm/errors.h"
#include "kerm/kg_store.h"

namespace kerm {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t hash_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read '" + p.string() + "'");
  std::uint64_t h = fnv1a("");
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    h = fnv1a(std::string_view(buf, static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError("'" + where + "' must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError("unknown key '" + it.key() + "' in '" + where + "'");
}

const json& section(const json& j, const char* name) {
  static const json empty = json::object();
  return j.contains(name) ? j.at(name) : empty;
}

}  // namespace

json load_config_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
}

PipelineConfig pipeline_config_from_json(const json& j, const fs::path& base_dir) {
  PipelineConfig cfg;
  reject_unknown(j, {"paths", "kg", "transe", "distill", "model", "train", "rerank"}, "config");
  try {
    const json& p = section(j, "paths");
    reject_unknown(p, {"triples", "relation_map", "word_vectors", "collection", "queries",
                       "train_queries", "qrels", "candidates", "workdir"},
                   "paths");
    auto path = [&](const char* key) -> fs::path {
      if (!p.contains(key)) return {};
      fs::path v = p.at(key).get<std::string>();
      return v.is_absolute() ? v : (base_dir / v).lexically_normal();
    };
    cfg.paths = {path("triples"), path("relation_map"), path("word_vectors"),
                 path("collection"), path("queries"), path("train_queries"),
                 path("qrels"), path("candidates"), path("workdir")};
    if (cfg.paths.workdir.empty()) cfg.paths.workdir = (base_dir / "work").lexically_normal();

    const json& kg = section(j, "kg");
    reject_unknown(kg, {"strict_relations"}, "kg");
    cfg.strict_relations = kg.value("strict_relations", cfg.strict_relations);

    const json& t = section(j, "transe");
    reject_unknown(
        t, {"dim", "margin", "learning_rate", "epochs", "negatives", "seed", "tracked_pairs"},
        "transe");
    cfg.transe.dim = t.value("dim", cfg.transe.dim);
    cfg.transe.margin = t.value("margin", cfg.transe.margin);
    cfg.transe.learning_rate = t.value("learning_rate", cfg.transe.learning_rate);
    cfg.transe.epochs = t.value("epochs", cfg.transe.epochs);
    cfg.transe.negatives = t.value("negatives", cfg.transe.negatives);
    cfg.transe.seed = t.value("seed", cfg.transe.seed);
    cfg.transe.tracked_pairs = t.value("tracked_pairs", cfg.transe.tracked_pairs);

    const json& d = section(j, "distill");
    reject_unknown(d, {"pi", "k", "max_frontier"}, "distill");
    cfg.pi = d.value("pi", cfg.pi);
    cfg.distill.max_hops = d.value("k", cfg.distill.max_hops);
    cfg.distill.max_frontier = d.value("max_frontier", cfg.distill.max_frontier);

    json model = section(j, "model");
    if (!model.contains("entity_dim")) model["entity_dim"] = cfg.transe.dim;
    cfg.model = config_from_json(model);

    const json& tr = section(j, "train");
    reject_unknown(tr, {"lr_encoder", "lr_injector", "beta1", "beta2", "adam_eps", "epochs",
                        "max_steps", "negatives", "seed", "init_seed"},
                   "train");
    cfg.train.lr_encoder = tr.value("lr_encoder", cfg.train.lr_encoder);
    cfg.train.lr_injector = tr.value("lr_injector", cfg.train.lr_injector);
    cfg.train.beta1 = tr.value("beta1", cfg.train.beta1);
    cfg.train.beta2 = tr.value("beta2", cfg.train.beta2);
    cfg.train.adam_eps = tr.value("adam_eps", cfg.train.adam_eps);
    cfg.train.epochs = tr.value("epochs", cfg.train.epochs);
    cfg.train.max_steps = tr.value("max_steps", cfg.train.max_steps);
    cfg.train.negatives = tr.value("negatives", cfg.train.negatives);
    cfg.train.seed = tr.value("seed", cfg.train.seed);
    cfg.init_seed = tr.value("init_seed", cfg.init_seed);

    const json& r = section(j, "rerank");
    reject_unknown(r, {"tag"}, "rerank");
    cfg.run_tag = r.value("tag", cfg.run_tag);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }

  if (cfg.transe.dim == 0 || cfg.transe.epochs == 0 || cfg.transe.negatives == 0 ||
      cfg.transe.margin <= 0 || cfg.transe.learning_rate <= 0)
    throw ConfigError("transe settings must be positive");
  if (cfg.pi == 0) throw ConfigError("distill.pi must be positive");
  if (cfg.distill.max_hops == 0) throw ConfigError("distill.k must be positive");
  if (cfg.distill.max_frontier == 0) throw ConfigError("distill.max_frontier must be positive");
  if (cfg.model.entity_dim != cfg.transe.dim)
    throw ConfigError("model.entity_dim (" + std::to_string(cfg.model.entity_dim) +
                      ") must equal transe.dim (" + std::to_string(cfg.transe.dim) + ")");
  if (cfg.run_tag.empty() || cfg.run_tag.find_first_of(" \t\n") != std::string::npos)
    throw ConfigError("rerank.tag must be a single non-empty word");
  return cfg;
}

json PipelineConfig::to_json() const {
  return json{
      {"paths",
       {{"triples", paths.triples.string()},
        {"relation_map", paths.relation_map.string()},
        {"word_vectors", paths.word_vectors.string()},
        {"collection", paths.collection.string()},
        {"queries", paths.queries.string()},
        {"train_queries", paths.train_queries.string()},
        {"qrels", paths.qrels.string()},
        {"candidates", paths.candidates.string()},
        {"workdir", paths.workdir.string()}}},
      {"kg", {{"strict_relations", strict_relations}}},
      {"transe",
       {{"dim", transe.dim},
        {"margin", transe.margin},
        {"learning_rate", transe.learning_rate},
        {"epochs", transe.epochs},
        {"negatives", transe.negatives},
        {"seed", transe.seed},
        {"tracked_pairs", transe.tracked_pairs}}},
      {"distill", {{"pi", pi}, {"k", distill.max_hops}, {"max_frontier", distill.max_frontier}}},
      {"model", config_to_json(model)},
      {"train",
       {{"lr_encoder", train.lr_encoder},
        {"lr_injector", train.lr_injector},
        {"beta1", train.beta1},
        {"beta2", train.beta2},
        {"adam_eps", train.adam_eps},
        {"epochs", train.epochs},
        {"max_steps", train.max_steps},
        {"negatives", train.negatives},
        {"seed", train.seed},
        {"init_seed", init_seed}}},
      {"rerank", {{"tag", run_tag}}}};
}

// ---------------------------------------------------------------------------
// Stages

struct Pipeline::Stage {
  std::string name;
  json settings;                      // configuration the outputs depend on
  std::vector<fs::path> inputs;       // files the outputs depend on
  std::vector<std::string> outputs;   // artifact names
  std::string report_artifact;        // re-read as the report when up to date
  std::function<json()> run;
};

Pipeline::Pipeline(PipelineConfig cfg, std::ostream& log) : cfg_(std::move(cfg)), log_(log) {
  fs::create_directories(cfg_.paths.workdir);
}

fs::path Pipeline::artifact(const std::string& name) const { return cfg_.paths.workdir / name; }

void Pipeline::require_artifact(const std::string& name, const std::string& producer) const {
  if (!fs::exists(artifact(name)))
    throw ConfigError("missing " + artifact(name).string() + "; run `kerm " + producer +
                      "` first");
}

void Pipeline::require_input(const fs::path& p, const char* what) const {
  if (p.empty()) throw ConfigError(std::string("config does not set paths.") + what);
  if (!fs::exists(p))
    throw ConfigError(std::string("paths.") + what + " '" + p.string() + "' does not exist");
}

namespace {

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw InputError("cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(p.string(), 0, e.what());
  }
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw InputError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
}

}  // namespace

StageResult Pipeline::run_stage(const Stage& stage, bool force) {
  std::uint64_t h = fnv1a(stage.name);
  h = fnv1a(stage.settings.dump(), h);
  for (const auto& in : stage.inputs) h = fnv1a(hex(hash_file(in)), h);
  const std::string stamp = hex(h);
  const fs::path stamp_path = artifact(stage.name + ".stamp");

  bool fresh = !force && fs::exists(stamp_path);
  for (const auto& out : stage.outputs) fresh = fresh && fs::exists(artifact(out));
  if (fresh) {
    std::ifstream in(stamp_path);
    std::string old;
    std::getline(in, old);
    fresh = old == stamp;
  }
  StageResult result;
  if (fresh) {
    log_ << stage.name << ": up to date\n";
    result.up_to_date = true;
    if (!stage.report_artifact.empty())
      result.report = read_json_file(artifact(stage.report_artifact));
    return result;
  }
  fs::remove(stamp_path);
  result.report = stage.run();
  std::ofstream(stamp_path) << stamp << '\n';
  return result;
}

namespace {

RelationMergeMap merge_map(const PipelineConfig& cfg) {
  if (cfg.paths.relation_map.empty()) {
    return cfg.strict_relations ? RelationMergeMap::conceptnet_default()
                                : RelationMergeMap(RelationMergeMap::conceptnet_default().entries(),
                                                   false);
  }
  return RelationMergeMap::load(cfg.paths.relation_map.string(), cfg.strict_relations);
}

}  // namespace

StageResult Pipeline::kg_build(bool force) {
  require_input(cfg_.paths.triples, "triples");
  Stage s{"kg_build", {{"strict_relations", cfg_.strict_relations}},
          {cfg_.paths.triples}, {"kg.json"}, "", nullptr};
  if (!cfg_.paths.relation_map.empty()) {
    require_input(cfg_.paths.relation_map, "relation_map");
    s.inputs.push_back(cfg_.paths.relation_map);
  }
  s.run = [&] {
    const KnowledgeGraph g = load_triples(cfg_.paths.triples.string(), merge_map(cfg_));
    save_graph(g, artifact("kg.json").string());
    const GraphStats st = graph_stats(g);
    log_ << "kg build: " << st.entities << " entities, " << st.relations << " relations, "
         << st.triplets << " triplets\n";
    return json{{"entities", st.entities}, {"relations", st.relations},
                {"triplets", st.triplets}, {"max_out_degree", st.max_out_degree}};
  };
  return run_stage(s, force);
}

StageResult Pipeline::kg_transe(bool force) {
  require_artifact("kg.json", "kg build");
  Stage s{"kg_transe", cfg_.to_json()["transe"], {artifact("kg.json")}, {"transe.bin"}, "",
          nullptr};
  s.run = [&] {
    const KnowledgeGraph g = load_graph(artifact("kg.json").string());
    const TransEResult r = train_transe(g, cfg_.transe);
    save_embeddings(r.embeddings, g, artifact("transe.bin").string());
    log_ << "kg transe: " << cfg_.transe.epochs << " epochs, loss "
         << r.epoch_losses.front() << " -> " << r.epoch_losses.back() << ", "
         << r.rejected_epochs << " epochs undone\n";
    return json{{"first_loss", r.epoch_losses.front()},
                {"last_loss", r.epoch_losses.back()},
                {"rejected_epochs", r.rejected_epochs}};
  };
  return run_stage(s, force);
}

StageResult Pipeline::distill_prune(bool force) {
  require_artifact("kg.json", "kg build");
  require_artifact("transe.bin", "kg transe");
  Stage s{"distill_prune", {{"pi", cfg_.pi}}, {artifact("kg.json"), artifact("transe.bin")},
          {"pruned.json"}, "", nullptr};
  s.run = [&] {
    const KnowledgeGraph g = load_graph(artifact("kg.json").string());
    const KgEmbeddings emb = load_embeddings(artifact("transe.bin").string(), &g);
    const PrunedGraph pg = prune_graph(g, emb, cfg_.pi);
    save_graph(pg.graph, artifact("pruned.json").string());
    log_ << "distill prune: kept " << pg.graph.triplets().size() << " of "
         << g.triplets().size() << " triplets (pi = " << cfg_.pi << ")\n";
    return json{{"kept", pg.graph.triplets().size()}, {"total", g.triplets().size()}};
  };
  return run_stage(s, force);
}

namespace {

std::vector<std::pair<std::string, std::string>> read_query_sets(const PipelineConfig& cfg) {
  auto queries = read_tsv(cfg.paths.queries.string());
  if (!cfg.paths.train_queries.empty() && cfg.paths.train_queries != cfg.paths.queries) {
    std::set<std::string> seen;
    for (const auto& [id, text] : queries) seen.insert(id);
    for (auto& row : read_tsv(cfg.paths.train_queries.string()))
      if (seen.insert(row.first).second) queries.push_back(std::move(row));
  }
  return queries;
}

}  // namespace

StageResult Pipeline::distill_build(bool force) {
  require_artifact("pruned.json", "distill prune");
  require_input(cfg_.paths.word_vectors, "word_vectors");
  require_input(cfg_.paths.queries, "queries");
  require_input(cfg_.paths.collection, "collection");
  require_input(cfg_.paths.candidates, "candidates");
  Stage s{"distill_build",
          {{"k", cfg_.distill.max_hops}, {"max_frontier", cfg_.distill.max_frontier}},
          {artifact("pruned.json"), cfg_.paths.word_vectors, cfg_.paths.queries,
           cfg_.paths.collection, cfg_.paths.candidates},
          {"metagraphs.jsonl"},
          "",
          nullptr};
  if (!cfg_.paths.train_queries.empty()) {
    require_input(cfg_.paths.train_queries, "train_queries");
    s.inputs.push_back(cfg_.paths.train_queries);
  }
  s.run = [&] {
    const PrunedGraph pg{load_graph(artifact("pruned.json").string()), cfg_.pi};
    const EntityLexicon lex(pg.graph);
    const WordEmbeddingTable tbl = load_word_vectors(cfg_.paths.word_vectors.string());
    for (const auto& w : tbl.warnings()) log_ << "warning: " << w << '\n';
    const auto examples = build_examples(read_query_sets(cfg_),
                                         read_tsv(cfg_.paths.collection.string()),
                                         read_run(cfg_.paths.candidates.string()), {});
    std::vector<std::pair<std::pair<std::string, std::string>, MetaGraph>> rows;
    std::size_t empty = 0, truncated = 0;
    for (const auto& ex : examples) {
      for (const auto& c : ex.candidates) {
        MetaGraph mg = build_meta_graph(ex.query, c.text, pg, lex, tbl, cfg_.distill);
        mg.validate(pg.graph, cfg_.distill.max_hops);
        empty += mg.empty() ? 1 : 0;
        truncated += mg.truncated ? 1 : 0;
        rows.push_back({{ex.qid, c.pid}, std::move(mg)});
      }
    }
    write_meta_graphs(artifact("metagraphs.jsonl").string(), rows);
    log_ << "distill build: " << rows.size() << " meta-graphs, " << empty << " empty, "
         << truncated << " truncated\n";
    return json{{"pairs", rows.size()}, {"empty", empty}, {"truncated", truncated}};
  };
  return run_stage(s, force);
}

StageResult Pipeline::train(bool force) {
  require_artifact("kg.json", "kg build");
  require_artifact("transe.bin", "kg transe");
  require_artifact("metagraphs.jsonl", "distill build");
  const fs::path train_queries =
      cfg_.paths.train_queries.empty() ? cfg_.paths.queries : cfg_.paths.train_queries;
  require_input(train_queries, cfg_.paths.train_queries.empty() ? "queries" : "train_queries");
  require_input(cfg_.paths.collection, "collection");
  require_input(cfg_.paths.candidates, "candidates");
  require_input(cfg_.paths.qrels, "qrels");
  json settings = cfg_.to_json();
  Stage s{"train",
          {{"model", settings["model"]}, {"train", settings["train"]}},
          {artifact("kg.json"), artifact("transe.bin"), artifact("metagraphs.jsonl"),
           train_queries, cfg_.paths.collection, cfg_.paths.candidates, cfg_.paths.qrels},
          {"model.bin", "train_log.jsonl"},
          "",
          nullptr};
  s.run = [&, train_queries] {
    const KnowledgeGraph g = load_graph(artifact("kg.json").string());
    const KgEmbeddings emb = load_embeddings(artifact("transe.bin").string(), &g);
    const MetaGraphIndex graphs = read_meta_graphs(artifact("metagraphs.jsonl").string());
    const auto examples = build_examples(read_tsv(train_queries.string()),
                                         read_tsv(cfg_.paths.collection.string()),
                                         read_run(cfg_.paths.candidates.string()),
                                         read_qrels(cfg_.paths.qrels.string()));
    std::vector<std::string> texts;
    for (const auto& ex : examples) {
      texts.push_back(ex.query);
      for (const auto& c : ex.candidates) texts.push_back(c.text);
    }
    ModelCheckpoint ckpt{cfg_.model, Vocab::build(texts), {}};
    const KermModel model(cfg_.model, ckpt.vocab.size());
    model.init_params(ckpt.params, cfg_.init_seed);
    const auto data = prepare_queries(examples, graphs, emb, ckpt.vocab, cfg_.model);

    std::ofstream log_file(artifact("train_log.jsonl"));
    if (!log_file) throw InputError("cannot write train log");
    const TrainResult r = kerm::train(model, ckpt.params, data, cfg_.train,
                                      [&](const EpochLog& e) {
                                        log_file << epoch_log_to_json(e).dump() << '\n';
                                        log_ << "epoch " << e.epoch << ": mean loss "
                                             << e.mean_loss << '\n';
                                      });
    save_checkpoint(ckpt, artifact("model.bin").string());
    json report{{"steps", r.steps}, {"epochs", r.epochs.size()}};
    if (!r.epochs.empty()) report["final_mean_loss"] = r.epochs.back().mean_loss;
    return report;
  };
  return run_stage(s, force);
}

StageResult Pipeline::rerank(bool force) {
  require_artifact("kg.json", "kg build");
  require_artifact("transe.bin", "kg transe");
  require_artifact("metagraphs.jsonl", "distill build");
  require_artifact("model.bin", "train");
  require_input(cfg_.paths.queries, "queries");
  require_input(cfg_.paths.collection, "collection");
  require_input(cfg_.paths.candidates, "candidates");
  Stage s{"rerank",
          {{"tag", cfg_.run_tag}},
          {artifact("kg.json"), artifact("transe.bin"), artifact("metagraphs.jsonl"),
           artifact("model.bin"), cfg_.paths.queries, cfg_.paths.collection,
           cfg_.paths.candidates},
          {"run.trec"},
          "",
          nullptr};
  s.run = [&] {
    const KnowledgeGraph g = load_graph(artifact("kg.json").string());
    const KgEmbeddings emb = load_embeddings(artifact("transe.bin").string(), &g);
    const MetaGraphIndex graphs = read_meta_graphs(artifact("metagraphs.jsonl").string());
    const ModelCheckpoint ckpt = load_checkpoint(artifact("model.bin").string());
    const auto examples = build_examples(read_tsv(cfg_.paths.queries.string()),
                                         read_tsv(cfg_.paths.collection.string()),
                                         read_run(cfg_.paths.candidates.string()), {});
    const KermModel model(ckpt.config, ckpt.vocab.size());
    const auto data = prepare_queries(examples, graphs, emb, ckpt.vocab, ckpt.config);
    const RunFile run = kerm::rerank(model, ckpt.params, data, cfg_.run_tag);
    write_run(run, artifact("run.trec").string());
    log_ << "rerank: " << run.rows.size() << " rows for " << data.size() << " queries\n";
    return json{{"rows", run.rows.size()}, {"queries", data.size()}};
  };
  return run_stage(s, force);
}

StageResult Pipeline::eval(bool force) {
  require_artifact("run.trec", "rerank");
  require_input(cfg_.paths.qrels, "qrels");
  Stage s{"eval", json::object(), {artifact("run.trec"), cfg_.paths.qrels}, {"metrics.json"},
          "metrics.json", nullptr};
  s.run = [&] {
    const RunFile run = read_run(artifact("run.trec").string());
    const Qrels qrels = read_qrels(cfg_.paths.qrels.string());
    json report{{"mrr@10", mrr_at_k(run, qrels, 10)},
                {"map@10", map_at_k(run, qrels, 10)},
                {"map@30", map_at_k(run, qrels, 30)}};
    write_json_file(artifact("metrics.json"), report);
    return report;
  };
  return run_stage(s, force);
}

StageResult Pipeline::stats(bool force) {
  require_artifact("kg.json", "kg build");
  require_artifact("transe.bin", "kg transe");
  require_artifact("metagraphs.jsonl", "distill build");
  Stage s{"stats", json::object(),
          {artifact("kg.json"), artifact("transe.bin"), artifact("metagraphs.jsonl")},
          {"stats.json"}, "stats.json", nullptr};
  s.run = [&] {
    const KnowledgeGraph g = load_graph(artifact("kg.json").string());
    const KgEmbeddings emb = load_embeddings(artifact("transe.bin").string(), &g);
    const MetaGraphIndex graphs = read_meta_graphs(artifact("metagraphs.jsonl").string());
    std::vector<MetaGraph> mgs;
    std::size_t empty = 0;
    for (const auto& [key, mg] : graphs) {
      mgs.push_back(mg);
      empty += mg.empty() ? 1 : 0;
    }
    const MetaGraphStats st = meta_graph_stats(mgs, emb);
    json report{{"graphs", st.graphs}, {"empty_graphs", empty}, {"avg_edges", st.avg_edges}};
    report["avg_edge_reliability"] =
        st.avg_edge_reliability ? json(*st.avg_edge_reliability) : json(nullptr);
    write_json_file(artifact("stats.json"), report);
    return report;
  };
  return run_stage(s, force);
}

}  // namespace kerm
