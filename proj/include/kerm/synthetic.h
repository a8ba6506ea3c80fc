#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "kerm/embed.h"
#include "kerm/train_eval.h"

namespace kerm {

// Generator for toy re-ranking corpora whose relevance is carried by the
// knowledge graph. Every query names a concept; its relevant passage names a
// different concept that the graph links to it in one or two hops, while the
// other candidates name concepts from unrelated parts of the graph. Query
// words are repeated in every candidate, so word overlap alone does not
// separate them.
struct SyntheticConfig {
  std::size_t queries = 20;
  std::size_t candidates = 20;  // per query, one of them relevant
  std::size_t triplets = 100;   // target graph size, filled with noise edges
  double two_hop_fraction = 0.5;
  std::size_t word_dim = 16;
  std::uint64_t seed = 1;
};

struct SyntheticCorpus {
  std::vector<std::array<std::string, 3>> triples;  // raw head, relation, tail
  std::vector<std::pair<std::string, std::string>> queries;
  std::vector<std::pair<std::string, std::string>> collection;
  RunFile candidates;
  Qrels qrels;
  WordEmbeddingTable word_vectors;
  std::vector<std::string> vector_words;  // table order for writing
};

SyntheticCorpus generate_synthetic(const SyntheticConfig& cfg);

// Writes triples.tsv, queries.tsv, collection.tsv, candidates.trec,
// qrels.txt and word_vectors.txt into `dir` (created if missing).
void write_synthetic(const SyntheticCorpus& corpus, const std::string& dir);

}  // namespace kerm
