#include "kerm/synthetic.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "kerm/errors.h"
#include "kerm/random.h"
#include "kerm/text.h"

namespace kerm {

namespace {

const std::vector<std::string> kSyllables = {"ba", "ko", "mi", "ru", "te", "zo", "ne",
                                             "fa", "li", "go", "pu", "sa", "de", "vi",
                                             "lo", "ka", "ti", "mu", "re", "no"};

const std::vector<std::string> kRelations = {"RelatedTo", "IsA",    "Causes",
                                             "AtLocation", "UsedFor", "PartOf",
                                             "HasA",      "CapableOf", "HasProperty"};

// Draws pseudo-words that never collide and never end in 's', so the plural
// fallback of entity recognition only fires where the generator adds an 's'.
class WordSource {
 public:
  explicit WordSource(Rng& rng) : rng_(rng) {}
  std::string next() {
    for (;;) {
      std::string w;
      const std::size_t n = 2 + static_cast<std::size_t>(rng_.below(2));
      for (std::size_t i = 0; i < n; ++i) w += kSyllables[rng_.below(kSyllables.size())];
      if (used_.insert(w).second) return w;
    }
  }

 private:
  Rng& rng_;
  std::set<std::string> used_;
};

struct Concept {
  std::vector<std::string> words;
  std::string id() const { return join(words, "_"); }
  std::string text(bool plural) const {
    std::string t = join(words, " ");
    return plural ? t + "s" : t;
  }
};

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[rng.below(v.size())];
}

}  // namespace

SyntheticCorpus generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.queries == 0 || cfg.candidates < 2 || cfg.word_dim == 0)
    throw ConfigError("synthetic corpus needs >= 1 query, >= 2 candidates and word_dim > 0");
  Rng rng(cfg.seed);
  WordSource words(rng);
  auto new_concept = [&] {
    Concept c;
    c.words.push_back(words.next());
    if (rng.uniform() < 0.3) c.words.push_back(words.next());
    return c;
  };

  const std::size_t nq = cfg.queries;
  std::vector<Concept> query_c(nq), middle_c(nq), bridge_c(nq);
  std::vector<bool> two_hop(nq);
  for (std::size_t i = 0; i < nq; ++i) {
    query_c[i] = new_concept();
    bridge_c[i] = new_concept();
    two_hop[i] = rng.uniform() < cfg.two_hop_fraction;
    if (two_hop[i]) middle_c[i] = new_concept();
  }
  std::vector<Concept> distractors(std::max<std::size_t>(10, nq));
  for (auto& d : distractors) d = new_concept();
  std::vector<std::string> topic(std::max<std::size_t>(6, nq / 2));
  for (auto& w : topic) w = words.next();
  std::vector<std::string> filler(40);
  for (auto& w : filler) w = words.next();

  SyntheticCorpus out;
  std::set<std::array<std::string, 3>> seen;
  auto add_triple = [&](const Concept& h, const std::string& r, const Concept& t) {
    std::array<std::string, 3> row{h.id(), r, t.id()};
    if (seen.insert(row).second) out.triples.push_back(row);
  };
  for (std::size_t i = 0; i < nq; ++i) {
    if (two_hop[i]) {
      add_triple(query_c[i], pick(rng, kRelations), middle_c[i]);
      add_triple(middle_c[i], pick(rng, kRelations), bridge_c[i]);
    } else {
      add_triple(query_c[i], pick(rng, kRelations), bridge_c[i]);
    }
  }
  // Noise edges only ever point at distractors, so no query concept reaches
  // another query's bridge concept.
  std::vector<const Concept*> heads;
  for (std::size_t i = 0; i < nq; ++i) {
    heads.push_back(&query_c[i]);
    heads.push_back(&bridge_c[i]);
    if (two_hop[i]) heads.push_back(&middle_c[i]);
  }
  for (const auto& d : distractors) heads.push_back(&d);
  const std::size_t max_noise = heads.size() * distractors.size() * kRelations.size();
  for (std::size_t tries = 0; out.triples.size() < cfg.triplets && tries < 20 * max_noise;
       ++tries)
    add_triple(*pick(rng, heads), pick(rng, kRelations), pick(rng, distractors));

  auto filler_words = [&](std::size_t n) {
    std::vector<std::string> w;
    for (std::size_t i = 0; i < n; ++i) w.push_back(pick(rng, filler));
    return join(w, " ");
  };

  for (std::size_t i = 0; i < nq; ++i) {
    const std::string qid = "Q" + std::to_string(i + 1);
    const std::string t1 = pick(rng, topic), t2 = pick(rng, topic);
    const std::string query = rng.coin()
        ? "what about " + query_c[i].text(false) + " " + t1 + " " + t2
        : "how does " + query_c[i].text(false) + " change " + t1 + " " + t2;
    out.queries.emplace_back(qid, query);

    const std::size_t positive = static_cast<std::size_t>(rng.below(cfg.candidates));
    std::vector<std::size_t> first_stage(cfg.candidates);
    for (std::size_t j = 0; j < cfg.candidates; ++j) first_stage[j] = j + 1;
    rng.shuffle(first_stage);
    std::size_t judged_negative = cfg.candidates;
    std::vector<RunRow> query_rows;

    for (std::size_t j = 0; j < cfg.candidates; ++j) {
      const std::string pid = "P" + std::to_string(i + 1) + "_" + std::to_string(j + 1);
      const Concept* c;
      if (j == positive) {
        c = &bridge_c[i];
      } else if (nq > 1 && rng.uniform() < 0.8) {
        std::size_t other = static_cast<std::size_t>(rng.below(nq - 1));
        if (other >= i) ++other;
        c = &bridge_c[other];
      } else {
        c = &pick(rng, distractors);
      }
      std::vector<std::string> sentences;
      sentences.push_back(t1 + " " + t2 + " " + c->text(rng.uniform() < 0.2) + " " +
                          filler_words(2) + ".");
      sentences.push_back(filler_words(2) + " " + pick(rng, distractors).text(false) + " " +
                          filler_words(1) + ".");
      if (rng.coin()) sentences.push_back(filler_words(3) + "!");
      rng.shuffle(sentences);
      out.collection.emplace_back(pid, join(sentences, " "));

      query_rows.push_back(
          {qid, pid, first_stage[j], static_cast<double>(cfg.candidates + 1 - first_stage[j]),
           "synthetic"});
      if (j == positive)
        out.qrels[qid][pid] = 1 + static_cast<int>(rng.below(3));
      else if (judged_negative == cfg.candidates) {
        judged_negative = j;
        out.qrels[qid][pid] = 0;
      }
    }
    std::sort(query_rows.begin(), query_rows.end(),
              [](const RunRow& a, const RunRow& b) { return a.rank < b.rank; });
    out.candidates.rows.insert(out.candidates.rows.end(), query_rows.begin(),
                               query_rows.end());
  }

  std::set<std::string> vocab;
  for (const auto& [id, text] : out.queries)
    for (auto& t : tokenize(text)) vocab.insert(t);
  for (const auto& [id, text] : out.collection)
    for (auto& t : tokenize(text)) vocab.insert(t);
  out.word_vectors = WordEmbeddingTable(cfg.word_dim);
  for (const auto& w : vocab) {
    std::vector<double> v(cfg.word_dim);
    // Rounded to the precision the text file keeps, so a written table reads
    // back identical.
    for (double& x : v) x = std::round(rng.normal() * 1e6) / 1e6;
    out.word_vectors.set(w, std::move(v));
    out.vector_words.push_back(w);
  }
  return out;
}

void write_synthetic(const SyntheticCorpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream f(fs::path(dir) / name);
    if (!f) throw InputError("cannot write " + (fs::path(dir) / name).string());
    return f;
  };
  {
    auto f = open("triples.tsv");
    for (const auto& t : corpus.triples) f << t[0] << '\t' << t[1] << '\t' << t[2] << '\n';
  }
  {
    auto f = open("queries.tsv");
    for (const auto& [id, text] : corpus.queries) f << id << '\t' << text << '\n';
  }
  {
    auto f = open("collection.tsv");
    for (const auto& [id, text] : corpus.collection) f << id << '\t' << text << '\n';
  }
  {
    auto f = open("candidates.trec");
    write_run(corpus.candidates, f);
  }
  {
    auto f = open("qrels.txt");
    for (const auto& [qid, judged] : corpus.qrels)
      for (const auto& [pid, grade] : judged) f << qid << " 0 " << pid << ' ' << grade << '\n';
  }
  {
    auto f = open("word_vectors.txt");
    f << corpus.vector_words.size() << ' ' << corpus.word_vectors.dim() << '\n';
    char buf[32];
    for (const auto& w : corpus.vector_words) {
      f << w;
      for (double x : *corpus.word_vectors.find(w)) {
        std::snprintf(buf, sizeof(buf), " %.6f", x);
        f << buf;
      }
      f << '\n';
    }
  }
}

}  // namespace kerm
