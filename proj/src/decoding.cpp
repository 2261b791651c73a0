#include "kgcg/decoding.hpp"

#include <algorithm>

#include "kgcg/error.hpp"
#include "kgcg/text.hpp"

namespace kgcg {

double Hypothesis::score(double length_alpha) const {
  const double gen = static_cast<double>(tokens.size() > 1 ? tokens.size() - 1 : 1);
  return logprob / std::pow(gen, length_alpha);
}

Hypothesis greedy_decode(const StepScorer& scorer, size_t vocab_size, size_t max_len) {
  require(max_len >= 1, "greedy_decode: max_len must be at least 1");
  require(vocab_size > Vocabulary::kEos, "greedy_decode: vocabulary lacks special tokens");
  Hypothesis hyp;
  hyp.tokens.push_back(Vocabulary::kBos);
  for (size_t step = 0; step < max_len; ++step) {
    std::vector<double> logp = scorer(hyp.tokens);
    require(logp.size() == vocab_size, "scorer returned a row of the wrong width");
    size_t best = 0;
    for (size_t v = 1; v < vocab_size; ++v)
      if (logp[v] > logp[best]) best = v;  // ties keep the lowest id
    hyp.tokens.push_back(static_cast<TokenId>(best));
    hyp.logprob += logp[best];
    if (best == static_cast<size_t>(Vocabulary::kEos)) break;
  }
  hyp.finished = true;
  return hyp;
}

namespace {

// (logprob desc, token sequence asc): a total, deterministic order
bool better_candidate(const Hypothesis& a, const Hypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return a.tokens < b.tokens;
}

}  // namespace

std::vector<Hypothesis> beam_search(const StepScorer& scorer, size_t vocab_size, size_t beam,
                                    size_t max_len, double length_alpha) {
  require(beam >= 1, "beam_search: beam must be at least 1");
  require(max_len >= 1, "beam_search: max_len must be at least 1");
  require(vocab_size > Vocabulary::kEos, "beam_search: vocabulary lacks special tokens");

  std::vector<Hypothesis> live;
  live.push_back(Hypothesis{{Vocabulary::kBos}, 0.0, false});
  std::vector<Hypothesis> completed;

  for (size_t step = 0; step < max_len && !live.empty(); ++step) {
    const bool last_step = step + 1 == max_len;
    std::vector<Hypothesis> expansions;
    expansions.reserve(live.size() * vocab_size);
    for (const Hypothesis& h : live) {
      std::vector<double> logp = scorer(h.tokens);
      require(logp.size() == vocab_size, "scorer returned a row of the wrong width");
      for (size_t v = 0; v < vocab_size; ++v) {
        Hypothesis next;
        next.tokens = h.tokens;
        next.tokens.push_back(static_cast<TokenId>(v));
        next.logprob = h.logprob + logp[v];
        if (v == static_cast<size_t>(Vocabulary::kEos) || last_step) {
          next.finished = true;
          completed.push_back(std::move(next));
        } else {
          expansions.push_back(std::move(next));
        }
      }
    }
    std::sort(expansions.begin(), expansions.end(), better_candidate);
    if (expansions.size() > beam) expansions.resize(beam);
    live = std::move(expansions);
  }

  // completed pool plus whatever is still alive, ranked by normalized score
  std::vector<Hypothesis> out = std::move(completed);
  out.insert(out.end(), live.begin(), live.end());
  std::sort(out.begin(), out.end(), [length_alpha](const Hypothesis& a, const Hypothesis& b) {
    const double sa = a.score(length_alpha), sb = b.score(length_alpha);
    if (sa != sb) return sa > sb;
    return a.tokens < b.tokens;
  });
  return out;
}

double concept_coverage(const std::string& sentence, const ConceptSet& concepts) {
  require(!concepts.concepts.empty(), "concept_coverage: empty concept set");
  const std::string norm = normalize(sentence);
  size_t hit = 0;
  for (const std::string& c : concepts.concepts)
    if (!norm.empty() && norm.find(c) != std::string::npos) ++hit;
  return static_cast<double>(hit) / static_cast<double>(concepts.concepts.size());
}

}  // namespace kgcg
