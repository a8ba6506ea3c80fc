#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "kerm/kg_store.h"
#include "kerm/matrix.h"

namespace kerm {

// TransE vectors for every entity and relation of a graph.
struct KgEmbeddings {
  Matrix entities;   // |E| x dim
  Matrix relations;  // |R| x dim

  std::size_t dim() const { return entities.cols(); }
  std::span<const double> entity(EntityId id) const;
  std::span<const double> relation(RelationId id) const;
  bool operator==(const KgEmbeddings&) const = default;
};

struct TransEConfig {
  std::size_t dim = 32;
  double margin = 1.0;
  double learning_rate = 0.01;
  std::size_t epochs = 100;
  std::size_t negatives = 1;
  std::uint64_t seed = 13;
  // Size of the fixed corruption set the loss is tracked on. Every
  // corruption is used when the graph has at most this many.
  std::size_t tracked_pairs = 20000;
};

struct TransEResult {
  KgEmbeddings embeddings;
  std::vector<double> epoch_losses;    // tracked loss after each epoch
  std::vector<double> sampled_losses;  // mean hinge loss of the sampled pairs
  std::size_t rejected_epochs = 0;
};

// Plain SGD on the margin ranking loss
//   max(0, margin + |h + r - t| - |h' + r - t'|)
// with one head-or-tail corruption per negative (fair coin) and entity rows
// projected back into the unit ball after every update. After each epoch the
// loss is measured on a fixed corruption set; an epoch that raises it is
// undone and the learning rate halved, so epoch_losses never increases.
TransEResult train_transe(const KnowledgeGraph& g, const TransEConfig& cfg);

// |E(h) + E(r) - E(t)|_2, the quantity TransE minimizes for true triplets.
double translation_distance(const KgEmbeddings& emb, EntityId h, RelationId r,
                            EntityId t);

// E(h).E(r) + E(h).E(t) + E(r).E(t).
double triplet_reliability(const KgEmbeddings& emb, EntityId h, RelationId r,
                           EntityId t);

// 1 / triplet_reliability. Throws NonPositiveReliability when the
// reliability is <= 0.
double triplet_distance(const KgEmbeddings& emb, EntityId h, RelationId r,
                        EntityId t);

// Binary checkpoint: magic, version, shapes, FNV-1a hashes of the entity and
// relation vocabularies, raw doubles. Passing the graph on load verifies the
// hashes.
void save_embeddings(const KgEmbeddings& emb, const KnowledgeGraph& g,
                     const std::string& path);
KgEmbeddings load_embeddings(const std::string& path,
                             const KnowledgeGraph* expect = nullptr);

std::uint64_t vocabulary_hash(const std::vector<std::string>& names);

class WordEmbeddingTable {
 public:
  WordEmbeddingTable() = default;
  explicit WordEmbeddingTable(std::size_t dim) : dim_(dim) {}

  // Replaces an existing vector for `word` (and records a warning).
  void set(const std::string& word, std::vector<double> vec);
  const std::vector<double>* find(const std::string& word) const;

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  std::size_t dim_ = 0;
  std::unordered_map<std::string, std::vector<double>> vectors_;
  std::vector<std::string> warnings_;
};

// `word v1 ... vd` per line; an optional word2vec header line ("count dim")
// is detected by its two integer columns. Duplicate words: last one wins and
// a warning is recorded.
WordEmbeddingTable load_word_vectors(const std::string& path);
WordEmbeddingTable parse_word_vectors(std::istream& in,
                                      const std::string& source_name = "");

// Dot product of the mean word vectors of q and s. Out-of-vocabulary tokens
// are dropped from the means; nullopt if either side has no known token.
std::optional<double> query_sentence_relevance(const WordEmbeddingTable& tbl,
                                               const std::vector<std::string>& q,
                                               const std::vector<std::string>& s);

}  // namespace kerm
