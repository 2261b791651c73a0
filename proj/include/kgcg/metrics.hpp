#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "kgcg/data.hpp"
#include "kgcg/tensor.hpp"

namespace kgcg {

using Tokens = std::vector<std::string>;
using RefSet = std::vector<Tokens>;  // alternative references for one example

// Corpus BLEU: clipped n-gram counts pooled over the corpus, geometric mean
// of p_1..p_max_n, brevity penalty exp(1 - r/c) for c < r with r built from
// the closest reference length per example (ties -> shorter). No smoothing:
// any pooled p_n = 0 gives 0.
double bleu(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references,
            int max_n);

// Bigram-overlap F1 (beta = 1), best reference per example, mean over
// examples. Pairs lacking bigrams on either side score 0.
double rouge_2(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references);

// LCS-based F1 (beta = 1), best reference per example, mean over examples.
double rouge_l(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references);

// Exact-match METEOR: unigram alignment maximizing matches then minimizing
// chunks; F_mean = 10PR/(R+9P), penalty 0.5*(chunks/matches)^3; best
// reference per example, mean over examples.
double meteor(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references);

// Per-token unit-normalized embeddings for similarity scoring.
class EmbedProvider {
 public:
  virtual ~EmbedProvider() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::vector<double>> embed(const Tokens& tokens) const = 0;
};

// Deterministic random unit vector per distinct token string.
class HashEmbedProvider final : public EmbedProvider {
 public:
  explicit HashEmbedProvider(size_t dim = 64, uint64_t seed = 0);
  std::string name() const override { return "hash"; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override;

 private:
  size_t dim_;
  uint64_t seed_;
};

// Rows of a trained token-embedding table, unit-normalized; OOV tokens fall
// back to the UNK row.
class ModelEmbedProvider final : public EmbedProvider {
 public:
  ModelEmbedProvider(const TensorT<float>& token_table, Vocabulary vocab);
  std::string name() const override { return "model"; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override;

 private:
  std::vector<std::vector<double>> rows_;  // pre-normalized table
  Vocabulary vocab_;
};

// Greedy cosine matching (cosines clamped at 0): P = mean over candidate
// tokens of the best match in the reference, R symmetric, F1; best reference
// per example, mean over examples. Empty sides score 0.
double embed_score(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references,
                   const EmbedProvider& provider);

struct EvalReport {
  // presentation order: BLEU-3, BLEU-4, ROUGE-2, ROUGE-L, METEOR,
  // EmbedScore(provider), ConceptCoverage; values in percent, 2 decimals
  std::vector<std::pair<std::string, double>> scores;
  size_t n_examples = 0;

  double at(const std::string& name) const;
};

// Scores a prediction file (one sentence per line) against a corpus JSONL
// file; writes the JSON report when out_path is non-empty.
EvalReport evaluate(const std::string& pred_path, const std::string& refs_path,
                    const EmbedProvider& provider, const std::string& out_path);

// in-memory variant used by the demo pipeline
EvalReport evaluate_lines(const std::vector<std::string>& predictions, const Corpus& corpus,
                          const EmbedProvider& provider);

std::string report_json(const EvalReport& report);
std::string report_table(const EvalReport& report);

}  // namespace kgcg
