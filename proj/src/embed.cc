#include "kerm/embed.h"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kerm/errors.h"
#include "kerm/random.h"
#include "kerm/text.h"

namespace kerm {

namespace {

constexpr char kEmbMagic[8] = {'K', 'E', 'R', 'M', 'T', 'R', 'E', '1'};

void check_entity(const KgEmbeddings& emb, EntityId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= emb.entities.rows())
    throw LookupError("entity id " + std::to_string(id) + " has no embedding");
}

void check_relation(const KgEmbeddings& emb, RelationId id) {
  if (id < 0 || static_cast<std::size_t>(id) >= emb.relations.rows())
    throw LookupError("relation id " + std::to_string(id) + " has no embedding");
}

double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

void project_unit_ball(std::span<double> v) {
  const double n = norm(v);
  if (n > 1.0)
    for (double& x : v) x /= n;
}

// Difference h + r - t written into `out`; returns its L2 norm.
double translation(std::span<const double> h, std::span<const double> r,
                   std::span<const double> t, std::vector<double>& out) {
  out.resize(h.size());
  double s = 0.0;
  for (std::size_t i = 0; i < h.size(); ++i) {
    out[i] = h[i] + r[i] - t[i];
    s += out[i] * out[i];
  }
  return std::sqrt(s);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw InputError("truncated embedding checkpoint");
  return v;
}

bool parse_double(const std::string& s, double& out) {
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && !s.empty();
}

bool is_integer(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  return true;
}

}  // namespace

std::span<const double> KgEmbeddings::entity(EntityId id) const {
  check_entity(*this, id);
  return entities.row(static_cast<std::size_t>(id));
}

std::span<const double> KgEmbeddings::relation(RelationId id) const {
  check_relation(*this, id);
  return relations.row(static_cast<std::size_t>(id));
}

TransEResult train_transe(const KnowledgeGraph& g, const TransEConfig& cfg) {
  if (g.triplets().empty()) throw ConfigError("train_transe: graph has no triplets");
  if (cfg.dim == 0 || cfg.epochs == 0 || cfg.negatives == 0 || cfg.margin <= 0.0 ||
      cfg.learning_rate <= 0.0)
    throw ConfigError("train_transe: dim, epochs, negatives, margin and "
                      "learning rate must be positive");

  Rng rng(cfg.seed);
  const double bound = 6.0 / std::sqrt(static_cast<double>(cfg.dim));
  TransEResult result;
  KgEmbeddings& emb = result.embeddings;
  emb.entities = Matrix(g.entity_count(), cfg.dim);
  emb.relations = Matrix(g.relation_count(), cfg.dim);
  for (double& v : emb.relations.data()) v = rng.uniform(-bound, bound);
  for (std::size_t r = 0; r < emb.relations.rows(); ++r) {
    auto row = emb.relations.row(r);
    const double n = norm(row);
    if (n > 0)
      for (double& v : row) v /= n;
  }
  for (double& v : emb.entities.data()) v = rng.uniform(-bound, bound);
  for (std::size_t e = 0; e < emb.entities.rows(); ++e)
    project_unit_ball(emb.entities.row(e));

  const std::size_t n_entities = g.entity_count();
  const auto corrupt = [&](Rng& r, Triplet t) {
    EntityId& slot = r.coin() ? t.head : t.tail;
    if (n_entities > 1) {
      // Draw from the other n-1 entities.
      const auto pick = static_cast<EntityId>(r.below(n_entities - 1));
      slot = pick >= slot ? pick + 1 : pick;
    }
    return t;
  };

  std::vector<std::pair<Triplet, Triplet>> tracked;
  const std::size_t all_pairs = g.triplets().size() * 2 * (n_entities - 1);
  if (all_pairs <= cfg.tracked_pairs) {
    for (const Triplet& t : g.triplets())
      for (std::size_t e = 0; e < n_entities; ++e) {
        const auto id = static_cast<EntityId>(e);
        if (id != t.head) tracked.push_back({t, {id, t.relation, t.tail}});
        if (id != t.tail) tracked.push_back({t, {t.head, t.relation, id}});
      }
  } else {
    Rng pick(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    for (std::size_t i = 0; i < cfg.tracked_pairs; ++i) {
      const Triplet t = g.triplets()[pick.below(g.triplets().size())];
      tracked.push_back({t, corrupt(pick, t)});
    }
  }
  std::vector<double> dpos, dneg;
  const auto tracked_loss = [&] {
    double total = 0.0;
    for (const auto& [p, n] : tracked)
      total += std::max(0.0, cfg.margin +
                                 translation(emb.entity(p.head), emb.relation(p.relation),
                                             emb.entity(p.tail), dpos) -
                                 translation(emb.entity(n.head), emb.relation(n.relation),
                                             emb.entity(n.tail), dneg));
    return tracked.empty() ? 0.0 : total / static_cast<double>(tracked.size());
  };

  std::vector<std::size_t> order(g.triplets().size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double lr = cfg.learning_rate;
  double best = tracked_loss();

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const KgEmbeddings before = emb;
    rng.shuffle(order);
    double total = 0.0;
    std::size_t pairs = 0;
    for (std::size_t idx : order) {
      const Triplet pos = g.triplets()[idx];
      for (std::size_t k = 0; k < cfg.negatives; ++k) {
        const Triplet neg = corrupt(rng, pos);
        const double d_pos = translation(emb.entity(pos.head), emb.relation(pos.relation),
                                         emb.entity(pos.tail), dpos);
        const double d_neg = translation(emb.entity(neg.head), emb.relation(neg.relation),
                                         emb.entity(neg.tail), dneg);
        const double loss = cfg.margin + d_pos - d_neg;
        ++pairs;
        if (loss <= 0.0) continue;
        total += loss;

        auto h = emb.entities.row(static_cast<std::size_t>(pos.head));
        auto t = emb.entities.row(static_cast<std::size_t>(pos.tail));
        auto r = emb.relations.row(static_cast<std::size_t>(pos.relation));
        auto nh = emb.entities.row(static_cast<std::size_t>(neg.head));
        auto nt = emb.entities.row(static_cast<std::size_t>(neg.tail));
        for (std::size_t i = 0; i < cfg.dim; ++i) {
          const double gp = d_pos > 0 ? dpos[i] / d_pos : 0.0;
          const double gn = d_neg > 0 ? dneg[i] / d_neg : 0.0;
          // d loss / d(h + r - t) = gp for the positive and -gn for the negative.
          h[i] -= lr * gp;
          t[i] += lr * gp;
          r[i] -= lr * (gp - gn);
          nh[i] += lr * gn;
          nt[i] -= lr * gn;
        }
        project_unit_ball(h);
        project_unit_ball(t);
        project_unit_ball(nh);
        project_unit_ball(nt);
      }
    }
    result.sampled_losses.push_back(total / static_cast<double>(pairs));
    const double now = tracked_loss();
    if (!std::isfinite(now)) throw DivergenceError("train_transe: non-finite loss");
    if (now > best) {
      emb = before;
      lr *= 0.5;
      ++result.rejected_epochs;
    } else {
      best = now;
    }
    result.epoch_losses.push_back(best);
  }
  for (double v : emb.entities.data())
    if (!std::isfinite(v)) throw DivergenceError("train_transe: non-finite embedding");
  return result;
}

double translation_distance(const KgEmbeddings& emb, EntityId h, RelationId r,
                            EntityId t) {
  std::vector<double> tmp;
  return translation(emb.entity(h), emb.relation(r), emb.entity(t), tmp);
}

double triplet_reliability(const KgEmbeddings& emb, EntityId h, RelationId r,
                           EntityId t) {
  auto eh = emb.entity(h);
  auto er = emb.relation(r);
  auto et = emb.entity(t);
  return dot(eh, et) + (dot(eh, er) + dot(et, er));
}

double triplet_distance(const KgEmbeddings& emb, EntityId h, RelationId r,
                        EntityId t) {
  const double rel = triplet_reliability(emb, h, r, t);
  if (rel <= 0.0) throw NonPositiveReliability(rel);
  return 1.0 / rel;
}

std::uint64_t vocabulary_hash(const std::vector<std::string>& names) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& n : names) {
    for (unsigned char c : n) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    h ^= 0xff;  // separator
    h *= 1099511628211ULL;
  }
  return h;
}

void save_embeddings(const KgEmbeddings& emb, const KnowledgeGraph& g,
                     const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write embeddings to '" + path + "'");
  out.write(kEmbMagic, sizeof(kEmbMagic));
  write_u64(out, emb.entities.rows());
  write_u64(out, emb.relations.rows());
  write_u64(out, emb.dim());
  write_u64(out, vocabulary_hash(g.entities()));
  write_u64(out, vocabulary_hash(g.relations()));
  out.write(reinterpret_cast<const char*>(emb.entities.data().data()),
            static_cast<std::streamsize>(emb.entities.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(emb.relations.data().data()),
            static_cast<std::streamsize>(emb.relations.size() * sizeof(double)));
}

KgEmbeddings load_embeddings(const std::string& path, const KnowledgeGraph* expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open embeddings '" + path + "'");
  char magic[sizeof(kEmbMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kEmbMagic, sizeof(magic)) != 0)
    throw InputError("'" + path + "' is not an embedding checkpoint");
  const std::uint64_t ne = read_u64(in);
  const std::uint64_t nr = read_u64(in);
  const std::uint64_t dim = read_u64(in);
  const std::uint64_t eh = read_u64(in);
  const std::uint64_t rh = read_u64(in);
  if (expect) {
    if (ne != expect->entity_count() || nr != expect->relation_count() ||
        eh != vocabulary_hash(expect->entities()) ||
        rh != vocabulary_hash(expect->relations()))
      throw InputError("embedding checkpoint '" + path +
                       "' was trained on a different graph");
  }
  KgEmbeddings emb;
  emb.entities = Matrix(ne, dim);
  emb.relations = Matrix(nr, dim);
  in.read(reinterpret_cast<char*>(emb.entities.data().data()),
          static_cast<std::streamsize>(emb.entities.size() * sizeof(double)));
  in.read(reinterpret_cast<char*>(emb.relations.data().data()),
          static_cast<std::streamsize>(emb.relations.size() * sizeof(double)));
  if (!in) throw InputError("truncated embedding checkpoint '" + path + "'");
  return emb;
}

// ---------------------------------------------------------------------------
// Word vectors

void WordEmbeddingTable::set(const std::string& word, std::vector<double> vec) {
  if (dim_ == 0) dim_ = vec.size();
  if (vec.size() != dim_)
    throw ShapeError("word vector for '" + word + "' has dimension " +
                     std::to_string(vec.size()) + ", table has " + std::to_string(dim_));
  auto [it, inserted] = vectors_.try_emplace(word);
  if (!inserted) warnings_.push_back("duplicate word '" + word + "': last vector wins");
  it->second = std::move(vec);
}

const std::vector<double>* WordEmbeddingTable::find(const std::string& word) const {
  auto it = vectors_.find(word);
  return it == vectors_.end() ? nullptr : &it->second;
}

WordEmbeddingTable parse_word_vectors(std::istream& in, const std::string& source_name) {
  WordEmbeddingTable table;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_ws(line);
    if (fields.empty()) continue;
    if (line_no == 1 && fields.size() == 2 && is_integer(fields[0]) &&
        is_integer(fields[1]))
      continue;  // word2vec header
    if (fields.size() < 2)
      throw ParseError(source_name, line_no, "word vector line needs a word and values");
    std::vector<double> vec(fields.size() - 1);
    for (std::size_t i = 1; i < fields.size(); ++i) {
      if (!parse_double(fields[i], vec[i - 1]) || !std::isfinite(vec[i - 1]))
        throw ParseError(source_name, line_no, "bad number '" + fields[i] + "'");
    }
    if (dim == 0) dim = vec.size();
    if (vec.size() != dim)
      throw ParseError(source_name, line_no,
                       "dimension " + std::to_string(vec.size()) + " differs from " +
                           std::to_string(dim));
    table.set(fields[0], std::move(vec));
  }
  return table;
}

WordEmbeddingTable load_word_vectors(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open word vectors '" + path + "'");
  return parse_word_vectors(in, path);
}

std::optional<double> query_sentence_relevance(const WordEmbeddingTable& tbl,
                                               const std::vector<std::string>& q,
                                               const std::vector<std::string>& s) {
  auto mean = [&tbl](const std::vector<std::string>& tokens)
      -> std::optional<std::vector<double>> {
    std::vector<double> acc(tbl.dim(), 0.0);
    std::size_t n = 0;
    for (const auto& tok : tokens) {
      const auto* v = tbl.find(tok);
      if (!v) continue;
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += (*v)[i];
      ++n;
    }
    if (n == 0) return std::nullopt;
    for (double& x : acc) x /= static_cast<double>(n);
    return acc;
  };
  auto mq = mean(q);
  if (!mq) return std::nullopt;
  auto ms = mean(s);
  if (!ms) return std::nullopt;
  return dot(*mq, *ms);
}

}  // namespace kerm
