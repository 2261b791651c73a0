#pragma once

#include <functional>
#include <string>
#include <vector>

#include "kgcg/grounding.hpp"
#include "kgcg/model.hpp"

namespace kgcg {

// Next-token distribution given the BOS-prefixed token prefix: a row of
// log-probabilities over the vocabulary. Search is written against this, so
// the same code drives the real model and closed-form test distributions.
using StepScorer = std::function<std::vector<double>(const std::vector<TokenId>&)>;

struct Hypothesis {
  std::vector<TokenId> tokens;  // includes leading BOS; EOS present iff ended early
  double logprob = 0.0;
  bool finished = false;  // last token is EOS, or max_len tokens were generated
  // logprob / generated^alpha, generated = tokens past BOS
  double score(double length_alpha) const;
};

// argmax per step, ties to the lowest token id; stops at EOS or after
// max_len generated tokens
Hypothesis greedy_decode(const StepScorer& scorer, size_t vocab_size, size_t max_len);

// Width-limited exhaustive expansion: every continuation of every live
// hypothesis is scored, finished ones move to the completed pool, the best
// `beam` unfinished survive (logprob desc, token sequence asc). Returns the
// completed pool plus the survivors, ranked by length-normalized score.
std::vector<Hypothesis> beam_search(const StepScorer& scorer, size_t vocab_size, size_t beam,
                                    size_t max_len, double length_alpha);

// Fraction of concepts appearing verbatim in the normalized sentence.
double concept_coverage(const std::string& sentence, const ConceptSet& concepts);

// model-level conveniences; the decoder length cap also respects the model's
// positional range
template <class T>
size_t clamp_gen_len(const Parameters<T>& params, size_t max_len) {
  return std::min(max_len, params.config.max_len - 1);
}

// Wraps the network: the encoder side runs once, the decoder once per step.
template <class T>
StepScorer model_scorer(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                        const GraphInput& graph) {
  RunMode mode;  // evaluation: no dropout
  EncodeOut<T> enc = encode(params, input_ids, graph, mode);
  const Parameters<T>* p = &params;
  return [p, enc = std::move(enc), mode](const std::vector<TokenId>& prefix) {
    TensorT<T> logits = decode_logits(*p, enc, prefix, mode);
    const size_t V = logits.cols;
    const T* row = logits.row(logits.rows - 1);
    T mx = row[0];
    for (size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    double lse = 0.0;
    for (size_t v = 0; v < V; ++v) lse += std::exp(static_cast<double>(row[v] - mx));
    lse = static_cast<double>(mx) + std::log(lse);
    std::vector<double> logp(V);
    for (size_t v = 0; v < V; ++v) logp[v] = static_cast<double>(row[v]) - lse;
    return logp;
  };
}

template <class T>
Hypothesis greedy_decode(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                         const GraphInput& graph, size_t max_len) {
  return greedy_decode(model_scorer(params, input_ids, graph), params.config.vocab_size,
                       clamp_gen_len(params, max_len));
}

template <class T>
std::vector<Hypothesis> beam_search(const Parameters<T>& params,
                                    const std::vector<TokenId>& input_ids,
                                    const GraphInput& graph, size_t beam, size_t max_len,
                                    double length_alpha) {
  return beam_search(model_scorer(params, input_ids, graph), params.config.vocab_size, beam,
                     clamp_gen_len(params, max_len), length_alpha);
}

}  // namespace kgcg
