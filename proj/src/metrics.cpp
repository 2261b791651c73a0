#include "kgcg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "kgcg/decoding.hpp"
#include "kgcg/error.hpp"
#include "kgcg/rng.hpp"

#include <json.hpp>

namespace kgcg {

namespace {

void check_shapes(const std::vector<Tokens>& cands, const std::vector<RefSet>& refs) {
  require(!cands.empty(), "metrics: empty candidate list");
  require(cands.size() == refs.size(),
          "metrics: candidate count " + std::to_string(cands.size()) +
              " does not match reference-set count " + std::to_string(refs.size()));
  for (const RefSet& rs : refs)
    require(!rs.empty(), "metrics: example with an empty reference set");
}

// n-grams keyed by tokens joined with an unlikely separator byte
std::unordered_map<std::string, size_t> ngram_counts(const Tokens& toks, size_t n) {
  std::unordered_map<std::string, size_t> counts;
  if (toks.size() < n) return counts;
  for (size_t i = 0; i + n <= toks.size(); ++i) {
    std::string key = toks[i];
    for (size_t j = 1; j < n; ++j) {
      key += '\x1f';
      key += toks[i + j];
    }
    ++counts[key];
  }
  return counts;
}

double f_beta1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

double bleu(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references,
            int max_n) {
  check_shapes(candidates, references);
  require(max_n >= 1 && max_n <= 9, "bleu: max_n out of range");
  const size_t orders = static_cast<size_t>(max_n);
  std::vector<size_t> clipped(orders, 0), total(orders, 0);
  size_t c_len = 0, r_len = 0;
  for (size_t ex = 0; ex < candidates.size(); ++ex) {
    const Tokens& cand = candidates[ex];
    c_len += cand.size();
    // closest reference length; ties prefer the shorter
    size_t best_ref = references[ex][0].size();
    for (const Tokens& ref : references[ex]) {
      const auto diff = [&](size_t len) {
        return len > cand.size() ? len - cand.size() : cand.size() - len;
      };
      if (diff(ref.size()) < diff(best_ref) ||
          (diff(ref.size()) == diff(best_ref) && ref.size() < best_ref))
        best_ref = ref.size();
    }
    r_len += best_ref;
    for (size_t n = 1; n <= orders; ++n) {
      auto cand_counts = ngram_counts(cand, n);
      std::unordered_map<std::string, size_t> max_ref;
      for (const Tokens& ref : references[ex])
        for (const auto& [g, cnt] : ngram_counts(ref, n))
          max_ref[g] = std::max(max_ref[g], cnt);
      for (const auto& [g, cnt] : cand_counts) {
        auto it = max_ref.find(g);
        clipped[n - 1] += std::min(cnt, it == max_ref.end() ? size_t(0) : it->second);
        total[n - 1] += cnt;
      }
    }
  }
  if (c_len == 0) return 0.0;
  double log_p = 0.0;
  for (size_t n = 0; n < orders; ++n) {
    if (clipped[n] == 0 || total[n] == 0) return 0.0;
    log_p += std::log(static_cast<double>(clipped[n]) / static_cast<double>(total[n]));
  }
  log_p /= static_cast<double>(orders);
  const double bp =
      c_len < r_len
          ? std::exp(1.0 - static_cast<double>(r_len) / static_cast<double>(c_len))
          : 1.0;
  return bp * std::exp(log_p);
}

namespace {

double rouge_2_pair(const Tokens& cand, const Tokens& ref) {
  if (cand.size() < 2 || ref.size() < 2) return 0.0;
  auto cc = ngram_counts(cand, 2);
  auto rc = ngram_counts(ref, 2);
  size_t overlap = 0;
  for (const auto& [g, cnt] : cc) {
    auto it = rc.find(g);
    if (it != rc.end()) overlap += std::min(cnt, it->second);
  }
  const double p = static_cast<double>(overlap) / static_cast<double>(cand.size() - 1);
  const double r = static_cast<double>(overlap) / static_cast<double>(ref.size() - 1);
  return f_beta1(p, r);
}

size_t lcs_len(const Tokens& a, const Tokens& b) {
  if (a.empty() || b.empty()) return 0;
  std::vector<size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    for (size_t j = 1; j <= b.size(); ++j) {
      if (a[i - 1] == b[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l_pair(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double l = static_cast<double>(lcs_len(cand, ref));
  return f_beta1(l / static_cast<double>(cand.size()), l / static_cast<double>(ref.size()));
}

// --- METEOR alignment ---------------------------------------------------
// Exact branch-and-bound over injective occurrence alignments: maximize
// matches (fixed at sum of min counts), minimize chunks. Falls back to a
// greedy contiguity-preferring alignment if the search budget is exhausted
// (only plausible on long, highly repetitive sentences).

constexpr size_t kMeteorNodeBudget = 1 << 19;

struct MeteorSearch {
  const Tokens& cand;
  const Tokens& ref;
  size_t m = 0;  // required matches
  std::vector<uint8_t> ref_used;
  std::unordered_map<std::string, size_t> free_ref;    // per token, refs still free
  std::unordered_map<std::string, size_t> cand_ahead;  // per token, cand positions >= i
  size_t best = SIZE_MAX;
  size_t nodes = 0;
  bool exhausted = false;

  MeteorSearch(const Tokens& c, const Tokens& r) : cand(c), ref(r) {
    ref_used.assign(ref.size(), 0);
    for (const std::string& t : ref) ++free_ref[t];
    for (const std::string& t : cand) ++cand_ahead[t];
    for (const auto& [t, cnt] : cand_ahead) {
      auto it = free_ref.find(t);
      if (it != free_ref.end()) m += std::min(cnt, it->second);
    }
  }

  size_t possible_ahead() const {
    size_t s = 0;
    for (const auto& [t, cnt] : cand_ahead) {
      if (cnt == 0) continue;
      auto it = free_ref.find(t);
      if (it != free_ref.end()) s += std::min(cnt, it->second);
    }
    return s;
  }

  void dfs(size_t i, size_t matched, long long last_ci, long long last_rj, size_t chunks) {
    if (++nodes > kMeteorNodeBudget) {
      exhausted = true;
      return;
    }
    if (chunks >= best) return;
    if (matched + possible_ahead() < m) return;
    if (matched == m) {
      best = chunks;
      return;
    }
    if (i >= cand.size()) return;
    const std::string& tok = cand[i];
    auto fit = free_ref.find(tok);
    const bool matchable = fit != free_ref.end() && fit->second > 0;
    --cand_ahead[tok];
    if (matchable) {
      // contiguous continuation first: tighter bound sooner
      std::vector<size_t> js;
      for (size_t j = 0; j < ref.size(); ++j)
        if (!ref_used[j] && ref[j] == tok) js.push_back(j);
      std::stable_sort(js.begin(), js.end(), [&](size_t a, size_t b) {
        const bool ca = last_rj >= 0 && a == static_cast<size_t>(last_rj) + 1;
        const bool cb = last_rj >= 0 && b == static_cast<size_t>(last_rj) + 1;
        if (ca != cb) return ca;
        return a < b;
      });
      for (size_t j : js) {
        const bool contiguous = last_ci >= 0 && i == static_cast<size_t>(last_ci) + 1 &&
                                j == static_cast<size_t>(last_rj) + 1;
        ref_used[j] = 1;
        --fit->second;
        dfs(i + 1, matched + 1, static_cast<long long>(i), static_cast<long long>(j),
            chunks + (contiguous ? 0 : 1));
        ++fit->second;
        ref_used[j] = 0;
      }
    }
    // skipping this candidate position
    dfs(i + 1, matched, last_ci, last_rj, chunks);
    ++cand_ahead[tok];
  }

  size_t greedy_chunks() {
    std::fill(ref_used.begin(), ref_used.end(), 0);
    std::unordered_map<std::string, size_t> budget;  // per token, matches to make
    std::unordered_map<std::string, size_t> rc;
    for (const std::string& t : ref) ++rc[t];
    std::unordered_map<std::string, size_t> cc;
    for (const std::string& t : cand) ++cc[t];
    for (const auto& [t, cnt] : cc)
      if (rc.count(t)) budget[t] = std::min(cnt, rc.at(t));
    size_t chunks = 0, matched = 0;
    long long last_ci = -1, last_rj = -1;
    for (size_t i = 0; i < cand.size() && matched < m; ++i) {
      auto bit = budget.find(cand[i]);
      if (bit == budget.end() || bit->second == 0) continue;
      long long pick = -1;
      if (last_rj >= 0 && static_cast<size_t>(last_rj) + 1 < ref.size() &&
          !ref_used[static_cast<size_t>(last_rj) + 1] &&
          ref[static_cast<size_t>(last_rj) + 1] == cand[i] &&
          i == static_cast<size_t>(last_ci) + 1)
        pick = last_rj + 1;
      else
        for (size_t j = 0; j < ref.size(); ++j)
          if (!ref_used[j] && ref[j] == cand[i]) {
            pick = static_cast<long long>(j);
            break;
          }
      if (pick < 0) continue;
      const bool contiguous = last_ci >= 0 && i == static_cast<size_t>(last_ci) + 1 &&
                              pick == last_rj + 1;
      if (!contiguous) ++chunks;
      ref_used[static_cast<size_t>(pick)] = 1;
      --bit->second;
      last_ci = static_cast<long long>(i);
      last_rj = pick;
      ++matched;
    }
    return chunks;
  }
};

double meteor_pair(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  MeteorSearch search(cand, ref);
  if (search.m == 0) return 0.0;
  search.dfs(0, 0, -1, -1, 0);
  size_t chunks = search.best;
  if (search.exhausted) chunks = std::min(chunks, search.greedy_chunks());
  require(chunks != SIZE_MAX && chunks >= 1, "meteor: alignment search failed");
  const double m = static_cast<double>(search.m);
  const double p = m / static_cast<double>(cand.size());
  const double r = m / static_cast<double>(ref.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(chunks) / m, 3.0);
  return f_mean * (1.0 - penalty);
}

template <class PairFn>
double mean_best_ref(const std::vector<Tokens>& cands, const std::vector<RefSet>& refs,
                     PairFn pair_fn) {
  std::vector<double> per_example(cands.size(), 0.0);
  std::string first_error;  // exceptions must not cross the parallel region
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long long ex = 0; ex < static_cast<long long>(cands.size()); ++ex) {
    try {
      double best = 0.0;
      for (const Tokens& ref : refs[static_cast<size_t>(ex)])
        best = std::max(best, pair_fn(cands[static_cast<size_t>(ex)], ref));
      per_example[static_cast<size_t>(ex)] = best;
    } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!first_error.empty()) fail(first_error);
  double sum = 0.0;  // fixed-order reduction keeps runs bitwise identical
  for (double v : per_example) sum += v;
  return sum / static_cast<double>(cands.size());
}

}  // namespace

double rouge_2(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references) {
  check_shapes(candidates, references);
  return mean_best_ref(candidates, references, rouge_2_pair);
}

double rouge_l(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references) {
  check_shapes(candidates, references);
  return mean_best_ref(candidates, references, rouge_l_pair);
}

double meteor(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references) {
  check_shapes(candidates, references);
  return mean_best_ref(candidates, references, meteor_pair);
}

HashEmbedProvider::HashEmbedProvider(size_t dim, uint64_t seed) : dim_(dim), seed_(seed) {
  require(dim_ >= 1, "hash embeddings: dimension must be positive");
}

std::vector<std::vector<double>> HashEmbedProvider::embed(const Tokens& tokens) const {
  std::vector<std::vector<double>> out;
  out.reserve(tokens.size());
  for (const std::string& tok : tokens) {
    Rng rng(mix_seed(seed_, fnv1a(tok)));
    std::vector<double> v(dim_);
    double sq = 0.0;
    for (double& x : v) {
      x = rng.uniform_signed(1.0);
      sq += x * x;
    }
    if (sq == 0.0) {
      v[0] = 1.0;
      sq = 1.0;
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (double& x : v) x *= inv;
    out.push_back(std::move(v));
  }
  return out;
}

ModelEmbedProvider::ModelEmbedProvider(const TensorT<float>& token_table, Vocabulary vocab)
    : vocab_(std::move(vocab)) {
  require(token_table.rows == vocab_.size(),
          "model embeddings: table rows do not match the vocabulary");
  rows_.resize(token_table.rows);
  for (size_t i = 0; i < token_table.rows; ++i) {
    std::vector<double> v(token_table.cols);
    double sq = 0.0;
    for (size_t j = 0; j < token_table.cols; ++j) {
      v[j] = static_cast<double>(token_table.at(i, j));
      sq += v[j] * v[j];
    }
    if (sq > 0.0) {
      const double inv = 1.0 / std::sqrt(sq);
      for (double& x : v) x *= inv;
    }
    rows_[i] = std::move(v);
  }
}

std::vector<std::vector<double>> ModelEmbedProvider::embed(const Tokens& tokens) const {
  std::vector<std::vector<double>> out;
  out.reserve(tokens.size());
  for (const std::string& tok : tokens) out.push_back(rows_[static_cast<size_t>(vocab_.id(tok))]);
  return out;
}

namespace {

double embed_pair(const std::vector<std::vector<double>>& ce,
                  const std::vector<std::vector<double>>& re) {
  if (ce.empty() || re.empty()) return 0.0;
  auto best_against = [](const std::vector<std::vector<double>>& from,
                         const std::vector<std::vector<double>>& to) {
    double total = 0.0;
    for (const auto& f : from) {
      double best = 0.0;  // cosine clamped at zero keeps scores in [0, 1]
      for (const auto& t : to) {
        require(f.size() == t.size(), "embed_score: provider returned mixed dimensions");
        double dot = 0.0;
        for (size_t i = 0; i < f.size(); ++i) dot += f[i] * t[i];
        best = std::max(best, dot);
      }
      total += best;
    }
    return total / static_cast<double>(from.size());
  };
  return f_beta1(best_against(ce, re), best_against(re, ce));
}

}  // namespace

double embed_score(const std::vector<Tokens>& candidates, const std::vector<RefSet>& references,
                   const EmbedProvider& provider) {
  check_shapes(candidates, references);
  std::vector<double> per_example(candidates.size(), 0.0);
  std::string first_error;  // exceptions must not cross the parallel region
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
  for (long long ex = 0; ex < static_cast<long long>(candidates.size()); ++ex) {
    try {
      const auto ce = provider.embed(candidates[static_cast<size_t>(ex)]);
      double best = 0.0;
      for (const Tokens& ref : references[static_cast<size_t>(ex)])
        best = std::max(best, embed_pair(ce, provider.embed(ref)));
      per_example[static_cast<size_t>(ex)] = best;
    } catch (const std::exception& e) {
#ifdef _OPENMP
#pragma omp critical
#endif
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!first_error.empty()) fail(first_error);
  double sum = 0.0;
  for (double v : per_example) sum += v;
  return sum / static_cast<double>(candidates.size());
}

double EvalReport::at(const std::string& name) const {
  for (const auto& [k, v] : scores)
    if (k == name) return v;
  fail("report has no score named " + name);
}

namespace {

double to_percent(double x) { return std::round(x * 100.0 * 100.0) / 100.0; }

}  // namespace

EvalReport evaluate_lines(const std::vector<std::string>& predictions, const Corpus& corpus,
                          const EmbedProvider& provider) {
  require(predictions.size() == corpus.size(),
          "prediction count " + std::to_string(predictions.size()) +
              " does not match reference count " + std::to_string(corpus.size()));
  require(!corpus.empty(), "evaluate: empty corpus");
  std::vector<Tokens> cands(corpus.size());
  std::vector<RefSet> refs(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    cands[i] = tokenize(predictions[i]);
    for (const std::string& r : corpus[i].references) refs[i].push_back(tokenize(r));
  }
  double coverage = 0.0;
  for (size_t i = 0; i < corpus.size(); ++i)
    coverage += concept_coverage(predictions[i], corpus[i].concepts);
  coverage /= static_cast<double>(corpus.size());

  EvalReport rep;
  rep.n_examples = corpus.size();
  rep.scores = {
      {"BLEU-3", to_percent(bleu(cands, refs, 3))},
      {"BLEU-4", to_percent(bleu(cands, refs, 4))},
      {"ROUGE-2", to_percent(rouge_2(cands, refs))},
      {"ROUGE-L", to_percent(rouge_l(cands, refs))},
      {"METEOR", to_percent(meteor(cands, refs))},
      {"EmbedScore(" + provider.name() + ")", to_percent(embed_score(cands, refs, provider))},
      {"ConceptCoverage", to_percent(coverage)},
  };
  return rep;
}

EvalReport evaluate(const std::string& pred_path, const std::string& refs_path,
                    const EmbedProvider& provider, const std::string& out_path) {
  std::ifstream in(pred_path, std::ios::binary);
  if (!in) fail("cannot open prediction file: " + pred_path);
  std::vector<std::string> predictions;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    predictions.push_back(line);
  }
  Corpus corpus = load_jsonl(refs_path);
  EvalReport rep = evaluate_lines(predictions, corpus, provider);
  if (!out_path.empty()) {
    std::ofstream out(out_path, std::ios::binary);
    if (!out) fail("cannot write report file: " + out_path);
    out << report_json(rep) << '\n';
    if (!out) fail("failed writing report file: " + out_path);
  }
  return rep;
}

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  for (const auto& [name, value] : report.scores) j[name] = value;
  j["n_examples"] = report.n_examples;
  return j.dump();
}

std::string report_table(const EvalReport& report) {
  std::string header, row;
  char buf[64];
  for (const auto& [name, value] : report.scores) {
    const int w = static_cast<int>(std::max<size_t>(name.size(), 7)) + 2;
    std::snprintf(buf, sizeof buf, "%*s", w, name.c_str());
    header += buf;
    std::snprintf(buf, sizeof buf, "%*.2f", w, value);
    row += buf;
  }
  std::snprintf(buf, sizeof buf, "  (n=%zu)", report.n_examples);
  row += buf;
  return header + "\n" + row + "\n";
}

}  // namespace kgcg
