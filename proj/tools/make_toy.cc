// Writes a synthetic toy corpus (triples, texts, candidates, qrels, word
// vectors) into a directory.

#include <cstdio>

#include <CLI11.hpp>

#include "kerm/errors.h"
#include "kerm/synthetic.h"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic re-ranking corpus"};
  kerm::SyntheticConfig cfg;
  std::string out;
  app.add_option("out", out, "output directory")->required();
  app.add_option("--queries", cfg.queries);
  app.add_option("--candidates", cfg.candidates);
  app.add_option("--triplets", cfg.triplets);
  app.add_option("--word-dim", cfg.word_dim);
  app.add_option("--seed", cfg.seed);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    kerm::write_synthetic(kerm::generate_synthetic(cfg), out);
  } catch (const kerm::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return static_cast<int>(e.category());
  }
  return 0;
}
