#pragma once

// Random fixtures and reference implementations shared by the unit tests and
// the acceptance runner. The reference versions are written from the
// definitions, without reusing library code paths.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "kerm/distill.h"
#include "kerm/embed.h"
#include "kerm/kg_store.h"
#include "kerm/matrix.h"
#include "kerm/model.h"
#include "kerm/random.h"
#include "kerm/synthetic.h"
#include "kerm/text.h"
#include "kerm/train_eval.h"

namespace kerm::testing {

// Entities are named e0, e1, ... so a text made of names recognizes exactly
// those entities.
inline KnowledgeGraph random_graph(Rng& rng, std::size_t entities, std::size_t relations,
                                   std::size_t edges) {
  std::vector<std::string> ents, rels;
  for (std::size_t i = 0; i < entities; ++i) ents.push_back("e" + std::to_string(i));
  for (std::size_t i = 0; i < relations; ++i) rels.push_back("r" + std::to_string(i));
  std::vector<Triplet> ts;
  for (std::size_t i = 0; i < edges; ++i)
    ts.push_back({static_cast<EntityId>(rng.below(entities)),
                  static_cast<RelationId>(rng.below(relations)),
                  static_cast<EntityId>(rng.below(entities))});
  return KnowledgeGraph(std::move(ents), std::move(rels), std::move(ts));
}

// With `coarse` the vectors hold small integers, which makes equal
// reliabilities (and so the tie-break rule) common.
inline KgEmbeddings random_embeddings(Rng& rng, const KnowledgeGraph& g, std::size_t dim,
                                      bool coarse) {
  KgEmbeddings emb{Matrix(g.entity_count(), dim), Matrix(g.relation_count(), dim)};
  auto fill = [&](Matrix& m) {
    for (double& v : m.data())
      v = coarse ? static_cast<double>(rng.below(4)) - 1.0 : rng.normal();
  };
  fill(emb.entities);
  fill(emb.relations);
  return emb;
}

inline double reference_reliability(const KgEmbeddings& emb, const Triplet& t) {
  double hr = 0, ht = 0, rt = 0;
  for (std::size_t k = 0; k < emb.dim(); ++k) {
    const double h = emb.entities(static_cast<std::size_t>(t.head), k);
    const double r = emb.relations(static_cast<std::size_t>(t.relation), k);
    const double tl = emb.entities(static_cast<std::size_t>(t.tail), k);
    hr += h * r;
    ht += h * tl;
    rt += r * tl;
  }
  return hr + ht + rt;
}

// Sort every edge of a head by (reliability desc, relation asc, tail asc)
// and keep the first pi.
inline std::set<Triplet> reference_prune(const KnowledgeGraph& g, const KgEmbeddings& emb,
                                         std::size_t pi) {
  std::map<EntityId, std::vector<std::tuple<double, RelationId, EntityId>>> by_head;
  for (const Triplet& t : g.triplets())
    by_head[t.head].emplace_back(-reference_reliability(emb, t), t.relation, t.tail);
  std::set<Triplet> kept;
  for (auto& [h, list] : by_head) {
    std::sort(list.begin(), list.end());
    for (std::size_t i = 0; i < list.size() && i < pi; ++i)
      kept.insert({h, std::get<1>(list[i]), std::get<2>(list[i])});
  }
  return kept;
}

// Depth-first enumeration of every walk of 1..k hops from a source that
// stops as soon as it reaches a target.
inline std::vector<MetaPath> reference_paths(const KnowledgeGraph& g,
                                             const std::vector<EntityId>& sources,
                                             const std::vector<EntityId>& targets,
                                             std::size_t k) {
  const std::set<EntityId> src(sources.begin(), sources.end());
  const std::set<EntityId> dst(targets.begin(), targets.end());
  std::vector<MetaPath> out;
  std::vector<EntityId> ents;
  std::vector<RelationId> rels;
  auto walk = [&](auto&& self) -> void {
    for (const Triplet& t : g.triplets()) {
      if (t.head != ents.back()) continue;
      ents.push_back(t.tail);
      rels.push_back(t.relation);
      if (dst.count(t.tail))
        out.push_back({ents, rels});
      else if (rels.size() < k)
        self(self);
      ents.pop_back();
      rels.pop_back();
    }
  };
  for (EntityId s : src) {
    ents = {s};
    rels.clear();
    walk(walk);
  }
  std::sort(out.begin(), out.end());
  return out;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

// Metrics straight from the definitions: walk each ranked list, recount
// the relevant documents in every prefix.
inline std::map<std::string, std::vector<std::string>> ranked_lists(const RunFile& run) {
  std::map<std::string, std::vector<std::pair<std::size_t, std::string>>> tmp;
  for (const RunRow& r : run.rows) tmp[r.qid].emplace_back(r.rank, r.pid);
  std::map<std::string, std::vector<std::string>> out;
  for (auto& [q, rows] : tmp) {
    std::stable_sort(rows.begin(), rows.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto& [rank, pid] : rows) out[q].push_back(pid);
  }
  return out;
}

inline bool reference_relevant(const Qrels& qrels, const std::string& q, const std::string& p) {
  auto it = qrels.find(q);
  if (it == qrels.end()) return false;
  auto jt = it->second.find(p);
  return jt != it->second.end() && jt->second >= 1;
}

inline std::size_t reference_relevant_count(const Qrels& qrels, const std::string& q) {
  std::size_t n = 0;
  auto it = qrels.find(q);
  if (it == qrels.end()) return 0;
  for (const auto& [p, g] : it->second) n += g >= 1;
  return n;
}

inline double reference_mrr(const RunFile& run, const Qrels& qrels, std::size_t k) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [q, list] : ranked_lists(run)) {
    if (reference_relevant_count(qrels, q) == 0) continue;
    ++n;
    double rr = 0;
    for (std::size_t i = list.size(); i-- > 0;)
      if (i < k && reference_relevant(qrels, q, list[i])) rr = 1.0 / static_cast<double>(i + 1);
    sum += rr;
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

inline double reference_map(const RunFile& run, const Qrels& qrels, std::size_t k) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [q, list] : ranked_lists(run)) {
    const std::size_t r = reference_relevant_count(qrels, q);
    if (r == 0) continue;
    ++n;
    double ap = 0;
    for (std::size_t i = 0; i < std::min(k, list.size()); ++i) {
      if (!reference_relevant(qrels, q, list[i])) continue;
      std::size_t hits = 0;
      for (std::size_t j = 0; j <= i; ++j) hits += reference_relevant(qrels, q, list[j]);
      ap += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
    sum += ap / static_cast<double>(std::min(r, k));
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

// A run of random scores over `queries` queries with random graded qrels.
inline std::pair<RunFile, Qrels> random_run(Rng& rng, std::size_t queries,
                                            std::size_t max_docs) {
  std::vector<std::tuple<std::string, std::string, double>> scored;
  Qrels qrels;
  for (std::size_t q = 0; q < queries; ++q) {
    const std::string qid = "q" + std::to_string(q);
    const std::size_t docs = 1 + rng.below(max_docs);
    for (std::size_t d = 0; d < docs; ++d) {
      const std::string pid = "d" + std::to_string(d);
      scored.emplace_back(qid, pid, static_cast<double>(rng.below(10)));
      if (rng.uniform() < 0.4) qrels[qid][pid] = static_cast<int>(rng.below(4));
    }
    // A judged document that was not retrieved still counts towards R.
    if (rng.coin()) qrels[qid]["unretrieved"] = 1;
  }
  return {make_run(scored, "t"), qrels};
}

// Tiny network fixture: random vocabulary ids, a small meta-graph with two
// aligned and two intermediate nodes, random parameters with every entry
// perturbed away from its initial structure.
struct ModelFixture {
  KermConfig cfg;
  std::size_t vocab = 0;
  ModelInput input;
  ParamStore params;
};

inline ModelInput random_input(Rng& rng, const KermConfig& cfg, std::size_t vocab,
                               std::size_t qlen, std::size_t plen, std::size_t nodes,
                               std::size_t relations) {
  ModelInput in;
  in.pair.query_len = qlen;
  in.pair.passage_len = plen;
  in.pair.ids.push_back(Vocab::kCls);
  for (std::size_t i = 0; i < qlen; ++i)
    in.pair.ids.push_back(static_cast<std::int32_t>(3 + rng.below(vocab - 3)));
  in.pair.ids.push_back(Vocab::kSep);
  in.pair.segments.assign(in.pair.ids.size(), 0);
  for (std::size_t i = 0; i < plen; ++i)
    in.pair.ids.push_back(static_cast<std::int32_t>(3 + rng.below(vocab - 3)));
  in.pair.ids.push_back(Vocab::kSep);
  in.pair.segments.resize(in.pair.ids.size(), 1);
  if (nodes == 0) return in;

  for (std::size_t i = 0; i < nodes; ++i) in.nodes.push_back(static_cast<EntityId>(10 + 3 * i));
  in.node_init = Matrix(nodes, cfg.entity_dim);
  for (double& v : in.node_init.data()) v = rng.normal() * 0.5;
  for (std::size_t r = 0; r < relations; ++r) in.relations.push_back(static_cast<RelationId>(r));
  in.relation_init = Matrix(relations, cfg.entity_dim);
  for (double& v : in.relation_init.data()) v = rng.normal() * 0.5;
  // A path 0 - 2 - 3 - 1 plus a shortcut 0 - 1, both directions.
  const std::vector<std::pair<std::size_t, std::size_t>> und = {{0, 2}, {2, 3}, {3, 1}, {0, 1}};
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> dir;
  for (const auto& [a, b] : und) {
    if (a >= nodes || b >= nodes) continue;
    const std::size_t r = rng.below(relations);
    dir.emplace(a, b, r);
    dir.emplace(b, a, r);
  }
  for (const auto& [h, t, r] : dir) {
    in.edge_head.push_back(h);
    in.edge_tail.push_back(t);
    in.edge_rel.push_back(r);
  }
  in.aligned_nodes = {0};
  in.aligned_tokens = {1};
  if (nodes > 1 && plen > 0) {
    in.aligned_nodes.push_back(1);
    in.aligned_tokens.push_back(qlen + 2);
  }
  for (std::size_t i = in.aligned_nodes.size(); i < nodes; ++i) in.intermediate_nodes.push_back(i);
  return in;
}

inline void perturb(ParamStore& params, Rng& rng, double scale) {
  for (const auto& name : params.names())
    for (double& v : params.value(name).data()) v += rng.normal() * scale;
}

// The distillation stages run in memory on a synthetic corpus, mirroring
// what the command line does through files.
struct DistilledCorpus {
  KnowledgeGraph graph;
  KgEmbeddings embeddings;
  std::vector<RerankExample> examples;
  MetaGraphIndex graphs;
  Vocab vocab;
};

inline DistilledCorpus distill_corpus(const SyntheticCorpus& corpus, const TransEConfig& transe,
                                      std::size_t pi, const MetaGraphOptions& opts) {
  DistilledCorpus out;
  std::stringstream tsv;
  for (const auto& t : corpus.triples) tsv << t[0] << '\t' << t[1] << '\t' << t[2] << '\n';
  out.graph = parse_triples(tsv, RelationMergeMap::conceptnet_default(), "synthetic");
  out.embeddings = train_transe(out.graph, transe).embeddings;
  const PrunedGraph pg = prune_graph(out.graph, out.embeddings, pi);
  const EntityLexicon lex(pg.graph);
  out.examples = build_examples(corpus.queries, corpus.collection, corpus.candidates,
                                corpus.qrels);
  std::vector<std::string> texts;
  for (const auto& ex : out.examples) {
    texts.push_back(ex.query);
    for (const auto& c : ex.candidates) {
      texts.push_back(c.text);
      MetaGraph mg = build_meta_graph(ex.query, c.text, pg, lex, corpus.word_vectors, opts);
      mg.validate(pg.graph, opts.max_hops);
      out.graphs.emplace(std::make_pair(ex.qid, c.pid), std::move(mg));
    }
  }
  out.vocab = Vocab::build(texts);
  return out;
}

}  // namespace kerm::testing
