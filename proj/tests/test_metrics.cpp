#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgcg/error.hpp"
#include "kgcg/grounding.hpp"
#include "kgcg/metrics.hpp"
#include "kgcg/rng.hpp"

using namespace kgcg;

namespace {

Tokens toks(std::initializer_list<const char*> list) {
  Tokens out;
  for (const char* t : list) out.emplace_back(t);
  return out;
}

// unit vectors on fixed axes; "negx" points against "x"
class AxisProvider final : public EmbedProvider {
 public:
  std::string name() const override { return "axis"; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override {
    std::vector<std::vector<double>> out;
    for (const std::string& t : tokens) {
      if (t == "x") out.push_back({1.0, 0.0});
      else if (t == "y") out.push_back({0.0, 1.0});
      else if (t == "negx") out.push_back({-1.0, 0.0});
      else out.push_back({std::sqrt(0.5), std::sqrt(0.5)});
    }
    return out;
  }
};

class RaggedProvider final : public EmbedProvider {
 public:
  std::string name() const override { return "ragged"; }
  std::vector<std::vector<double>> embed(const Tokens& tokens) const override {
    std::vector<std::vector<double>> out;
    for (size_t i = 0; i < tokens.size(); ++i)
      out.push_back(std::vector<double>(2 + i % 2, 1.0));  // alternating widths
    return out;
  }
};

// exhaustive alignment: maximize matches, then minimize chunks (<= 8 tokens)
struct MeteorOracle {
  const Tokens& cand;
  const Tokens& ref;
  std::vector<uint8_t> used;
  size_t best_m = 0;
  size_t best_chunks = SIZE_MAX;

  MeteorOracle(const Tokens& c, const Tokens& r) : cand(c), ref(r), used(r.size(), 0) {}

  void dfs(size_t i, size_t m, long last_ci, long last_rj, size_t chunks) {
    if (i == cand.size()) {
      if (m > best_m || (m == best_m && chunks < best_chunks)) {
        best_m = m;
        best_chunks = chunks;
      }
      return;
    }
    dfs(i + 1, m, last_ci, last_rj, chunks);  // leave cand[i] unmatched
    for (size_t j = 0; j < ref.size(); ++j) {
      if (used[j] || cand[i] != ref[j]) continue;
      used[j] = 1;
      const bool contiguous =
          static_cast<long>(i) == last_ci + 1 && static_cast<long>(j) == last_rj + 1;
      dfs(i + 1, m + 1, static_cast<long>(i), static_cast<long>(j),
          chunks + (contiguous ? 0 : 1));
      used[j] = 0;
    }
  }

  double score() {
    dfs(0, 0, -2, -2, 0);
    if (best_m == 0) return 0.0;
    const double p = static_cast<double>(best_m) / static_cast<double>(cand.size());
    const double r = static_cast<double>(best_m) / static_cast<double>(ref.size());
    const double f = 10.0 * p * r / (r + 9.0 * p);
    const double ch = static_cast<double>(best_chunks) / static_cast<double>(best_m);
    return f * (1.0 - 0.5 * ch * ch * ch);
  }
};

double oracle_meteor_pair(const Tokens& c, const Tokens& r) {
  MeteorOracle o(c, r);
  return o.score();
}

// quadratic-scan reference implementations, independent of the library's
// hash-map based ones
size_t oracle_ngram_overlap(const Tokens& a, const Tokens& b, size_t n) {
  if (a.size() < n || b.size() < n) return 0;
  std::vector<uint8_t> taken(b.size(), 0);
  size_t hits = 0;
  for (size_t i = 0; i + n <= a.size(); ++i) {
    for (size_t j = 0; j + n <= b.size(); ++j) {
      if (taken[j]) continue;
      bool eq = true;
      for (size_t k = 0; k < n && eq; ++k) eq = a[i + k] == b[j + k];
      if (eq) {
        taken[j] = 1;
        ++hits;
        break;
      }
    }
  }
  return hits;
}

size_t oracle_lcs(const Tokens& a, const Tokens& b, size_t i = 0, size_t j = 0) {
  if (i == a.size() || j == b.size()) return 0;  // plain recursion, tiny inputs only
  if (a[i] == b[j]) return 1 + oracle_lcs(a, b, i + 1, j + 1);
  return std::max(oracle_lcs(a, b, i + 1, j), oracle_lcs(a, b, i, j + 1));
}

Tokens random_tokens(Rng& rng, size_t max_len, size_t vocab) {
  static const char* pool[] = {"a", "b", "c", "d", "e", "f", "g", "h"};
  Tokens out;
  const size_t len = 1 + static_cast<size_t>(rng.below(max_len));
  for (size_t i = 0; i < len; ++i)
    out.emplace_back(pool[rng.below(std::min(vocab, size_t(8)))]);
  return out;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("bleu identity and hand oracles") {
  std::vector<Tokens> cands{toks({"a", "b", "c", "d"}), toks({"x", "y", "z", "w"})};
  std::vector<RefSet> refs{{cands[0]}, {cands[1]}};
  CHECK(bleu(cands, refs, 3) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(bleu(cands, refs, 4) == doctest::Approx(1.0).epsilon(1e-12));

  // precisions all 1, brevity penalty exp(1 - 4/3)
  std::vector<Tokens> c2{toks({"a", "b", "c"})};
  std::vector<RefSet> r2{{toks({"a", "b", "c", "d"})}};
  CHECK(bleu(c2, r2, 3) == doctest::Approx(std::exp(1.0 - 4.0 / 3.0)).epsilon(1e-12));

  // no shared unigram -> hard zero, no smoothing
  std::vector<Tokens> c3{toks({"q", "r", "s"})};
  std::vector<RefSet> r3{{toks({"a", "b", "c"})}};
  CHECK(bleu(c3, r3, 3) == 0.0);
  // a missing higher order also zeroes the score
  std::vector<Tokens> c4{toks({"a", "c", "b"})};
  std::vector<RefSet> r4{{toks({"a", "b", "c"})}};
  CHECK(bleu(c4, r4, 3) == 0.0);  // no trigram match
}

TEST_CASE("bleu pools counts over the corpus") {
  // example 1 perfect, example 2 disjoint: pooled p_n = 1/2 for n=1..3, BP=1
  std::vector<Tokens> cands{toks({"a", "b", "c", "d"}), toks({"q", "r", "s", "t"})};
  std::vector<RefSet> refs{{toks({"a", "b", "c", "d"})}, {toks({"w", "x", "y", "z"})}};
  CHECK(bleu(cands, refs, 3) == doctest::Approx(0.5).epsilon(1e-12));

  // permutation invariance of the pooled counts
  std::vector<Tokens> rev{cands[1], cands[0]};
  std::vector<RefSet> rev_refs{refs[1], refs[0]};
  CHECK(bleu(rev, rev_refs, 3) == doctest::Approx(bleu(cands, refs, 3)).epsilon(1e-15));
}

TEST_CASE("bleu clips against the best reference and picks closest length") {
  // candidate repeats "a": clipped by the max count over references (2)
  std::vector<Tokens> cands{toks({"a", "a", "a"})};
  std::vector<RefSet> refs{{toks({"a", "b"}), toks({"a", "a", "c", "d"})}};
  // p1 = 2/3; closest ref length to 3: lengths 2 and 4 tie -> shorter (2), BP = 1
  CHECK(bleu(cands, refs, 1) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // same but candidate length 3 vs refs 4 and 2: r = 2, c = 3 >= r -> BP 1
  std::vector<RefSet> far{{toks({"a", "a", "a", "a", "a"})}};
  std::vector<Tokens> c2{toks({"a", "a", "a"})};
  // r=5 > c=3 -> BP = exp(1 - 5/3)
  CHECK(bleu(c2, far, 1) == doctest::Approx(std::exp(1.0 - 5.0 / 3.0)).epsilon(1e-12));
}

TEST_CASE("bleu validates input shapes") {
  std::vector<Tokens> cands{toks({"a"})};
  CHECK_THROWS_AS(bleu({}, {}, 3), Error);
  CHECK_THROWS_AS(bleu(cands, {}, 3), Error);
  CHECK_THROWS_AS(bleu(cands, {{}}, 3), Error);  // empty reference set
  CHECK_THROWS_AS(bleu(cands, {{toks({"a"})}}, 0), Error);
}

TEST_CASE("rouge_2 oracles") {
  std::vector<Tokens> ident{toks({"a", "b", "c", "d"})};
  CHECK(rouge_2(ident, {{ident[0]}}) == doctest::Approx(1.0).epsilon(1e-12));

  // shared bigram set {a b}: 1 of 3 on each side -> F1 = 1/3
  CHECK(rouge_2({toks({"a", "b", "c", "d"})}, {{toks({"a", "b", "d", "c"})}}) ==
        doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  // short sides score zero instead of erroring
  CHECK(rouge_2({toks({"a"})}, {{toks({"a", "b"})}}) == 0.0);
  CHECK(rouge_2({toks({"a", "b"})}, {{toks({"a"})}}) == 0.0);

  // max over references, mean over examples
  std::vector<Tokens> cands{toks({"a", "b"}), toks({"q", "r"})};
  std::vector<RefSet> refs{{toks({"z", "z"}), toks({"a", "b"})}, {toks({"a", "b"})}};
  CHECK(rouge_2(cands, refs) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("rouge_l oracles") {
  std::vector<Tokens> ident{toks({"a", "b", "c"})};
  CHECK(rouge_l(ident, {{ident[0]}}) == doctest::Approx(1.0).epsilon(1e-12));

  // LCS("a b c d", "a c b d") = 3 -> P = R = 3/4 -> F = 0.75
  CHECK(rouge_l({toks({"a", "b", "c", "d"})}, {{toks({"a", "c", "b", "d"})}}) ==
        doctest::Approx(0.75).epsilon(1e-12));

  CHECK(rouge_l({toks({"x", "y"})}, {{toks({"a", "b"})}}) == 0.0);
  CHECK(rouge_l({Tokens{}}, {{toks({"a"})}}) == 0.0);

  // different lengths: cand "a b" vs ref "a x b y": LCS 2, P=1, R=1/2, F=2/3
  CHECK(rouge_l({toks({"a", "b"})}, {{toks({"a", "x", "b", "y"})}}) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("meteor closed-form oracles") {
  // identity 4 tokens: matches 4, chunks 1, penalty 0.5/64
  Tokens four = toks({"the", "cat", "sat", "down"});
  CHECK(meteor({four}, {{four}}) == doctest::Approx(0.9921875).epsilon(1e-12));

  CHECK(meteor({toks({"q", "r"})}, {{toks({"a", "b"})}}) == 0.0);

  // full reversal: matches 4, chunks 4, P=R=1 -> 1 * (1 - 0.5) = 0.5
  CHECK(meteor({toks({"d", "c", "b", "a"})}, {{toks({"a", "b", "c", "d"})}}) ==
        doctest::Approx(0.5).epsilon(1e-12));

  // one swap: chunks 3 of 4 matches -> 1 - 0.5*(3/4)^3 = 0.7890625
  CHECK(meteor({toks({"b", "a", "c", "d"})}, {{toks({"a", "b", "c", "d"})}}) ==
        doctest::Approx(0.7890625).epsilon(1e-12));

  // duplicates: cand "a a b" vs ref "a b b": m=2, best alignment contiguous
  // P=2/3, R=2/3, F=2/3, penalty 0.5*(1/2)^3 -> 2/3 * 15/16 = 0.625
  CHECK(meteor({toks({"a", "a", "b"})}, {{toks({"a", "b", "b"})}}) ==
        doctest::Approx(0.625).epsilon(1e-12));

  // scrambled order keeps matches but adds chunks: strictly below identity
  double ident_score = meteor({four}, {{four}});
  double scrambled = meteor({toks({"sat", "the", "down", "cat"})}, {{four}});
  CHECK(scrambled < ident_score);
}

TEST_CASE("embed_score oracles under a fixed provider") {
  AxisProvider axis;
  // identical sequences -> 1 under any provider
  CHECK(embed_score({toks({"x", "y"})}, {{toks({"x", "y"})}}, axis) ==
        doctest::Approx(1.0).epsilon(1e-12));

  // candidate (1,0) vs refs (1,0),(0,1): P=1, R=(1+0)/2 -> F=2/3
  CHECK(embed_score({toks({"x"})}, {{toks({"x", "y"})}}, axis) ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // orthogonal everywhere -> 0
  CHECK(embed_score({toks({"x"})}, {{toks({"y"})}}, axis) == 0.0);
  // anti-parallel cosines clamp at zero rather than going negative
  CHECK(embed_score({toks({"x"})}, {{toks({"negx"})}}, axis) == 0.0);
  // empty candidate scores zero
  CHECK(embed_score({Tokens{}}, {{toks({"x"})}}, axis) == 0.0);

  RaggedProvider ragged;
  CHECK_THROWS_WITH_AS(embed_score({toks({"a", "b"})}, {{toks({"c", "d"})}}, ragged),
                       doctest::Contains("mixed dimensions"), Error);

  HashEmbedProvider hash;
  CHECK(hash.name() == "hash");
  Tokens sent = toks({"alpha", "beta"});
  CHECK(embed_score({sent}, {{sent}}, hash) == doctest::Approx(1.0).epsilon(1e-9));
  // per-token embeddings are deterministic across calls
  auto e1 = hash.embed(sent);
  auto e2 = hash.embed(sent);
  CHECK(e1 == e2);
  double norm = 0.0;
  for (double v : e1[0]) norm += v * v;
  CHECK(norm == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("duplicate references never change max-over-reference metrics") {
  std::vector<Tokens> cands{toks({"a", "b", "c"}), toks({"c", "a"})};
  std::vector<RefSet> refs{{toks({"a", "b", "d"}), toks({"b", "c"})},
                           {toks({"c", "a", "b"})}};
  std::vector<RefSet> dup = refs;
  dup[0].push_back(dup[0][0]);
  dup[1].push_back(dup[1][0]);
  AxisProvider axis;
  CHECK(rouge_2(cands, dup) == rouge_2(cands, refs));
  CHECK(rouge_l(cands, dup) == rouge_l(cands, refs));
  CHECK(meteor(cands, dup) == meteor(cands, refs));
  CHECK(embed_score(cands, dup, axis) == embed_score(cands, refs, axis));
}

TEST_CASE("randomized agreement with brute-force oracles") {
  Rng rng(2024);
  for (int round = 0; round < 60; ++round) {
    Tokens cand = random_tokens(rng, 6, 4);
    Tokens ref = random_tokens(rng, 6, 4);
    CAPTURE(round);

    // ROUGE-2 against a quadratic bigram matcher
    double r2 = rouge_2({cand}, {{ref}});
    double expect_r2 = 0.0;
    if (cand.size() >= 2 && ref.size() >= 2) {
      double overlap = static_cast<double>(oracle_ngram_overlap(cand, ref, 2));
      double p = overlap / static_cast<double>(cand.size() - 1);
      double r = overlap / static_cast<double>(ref.size() - 1);
      expect_r2 = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    }
    CHECK(r2 == doctest::Approx(expect_r2).epsilon(1e-9));

    // ROUGE-L against plain recursive LCS
    double lcs = static_cast<double>(oracle_lcs(cand, ref));
    double p = lcs / static_cast<double>(cand.size());
    double r = lcs / static_cast<double>(ref.size());
    double expect_rl = p + r > 0 ? 2 * p * r / (p + r) : 0.0;
    CHECK(rouge_l({cand}, {{ref}}) == doctest::Approx(expect_rl).epsilon(1e-9));

    // METEOR against the exhaustive alignment search
    CHECK(meteor({cand}, {{ref}}) ==
          doctest::Approx(oracle_meteor_pair(cand, ref)).epsilon(1e-9));

    // BLEU-2 single-pair against direct arithmetic
    double b2 = bleu({cand}, {{ref}}, 2);
    size_t m1 = oracle_ngram_overlap(cand, ref, 1);
    size_t m2 = oracle_ngram_overlap(cand, ref, 2);
    double expect_b2 = 0.0;
    if (m1 > 0 && m2 > 0 && cand.size() >= 2) {
      double p1 = static_cast<double>(m1) / static_cast<double>(cand.size());
      double p2 = static_cast<double>(m2) / static_cast<double>(cand.size() - 1);
      double bp = cand.size() < ref.size()
                      ? std::exp(1.0 - static_cast<double>(ref.size()) /
                                           static_cast<double>(cand.size()))
                      : 1.0;
      expect_b2 = bp * std::sqrt(p1 * p2);
    }
    CHECK(b2 == doctest::Approx(expect_b2).epsilon(1e-9));
  }
}

TEST_CASE("evaluate_lines on the identity corpus") {
  Corpus corpus;
  for (int i = 0; i < 3; ++i) {
    Example ex;
    ex.concepts = make_concept_set({"cat", "mat"});
    ex.references = {"cat sat mat down", "a cat sits on the mat"};
    corpus.push_back(ex);
  }
  std::vector<std::string> preds;
  for (const Example& ex : corpus) preds.push_back(ex.references[0]);

  HashEmbedProvider provider;
  EvalReport report = evaluate_lines(preds, corpus, provider);
  CHECK(report.n_examples == 3);
  CHECK(report.at("BLEU-3") == 100.00);
  CHECK(report.at("BLEU-4") == 100.00);
  CHECK(report.at("ROUGE-2") == 100.00);
  CHECK(report.at("ROUGE-L") == 100.00);
  CHECK(report.at("METEOR") == 99.22);  // uniform 4-token sentences
  CHECK(report.at("EmbedScore(hash)") == 100.00);
  CHECK(report.at("ConceptCoverage") == 100.00);
  CHECK_THROWS_AS(report.at("BLEU-5"), Error);

  // presentation order is fixed
  std::vector<std::string> names;
  for (const auto& [k, v] : report.scores) names.push_back(k);
  CHECK(names == std::vector<std::string>{"BLEU-3", "BLEU-4", "ROUGE-2", "ROUGE-L",
                                          "METEOR", "EmbedScore(hash)",
                                          "ConceptCoverage"});

  std::vector<std::string> short_preds{preds[0]};
  CHECK_THROWS_WITH_AS(evaluate_lines(short_preds, corpus, provider),
                       doctest::Contains("prediction count 1"), Error);
  CHECK_THROWS_WITH_AS(evaluate_lines(short_preds, corpus, provider),
                       doctest::Contains("reference count 3"), Error);
}

TEST_CASE("report serialization") {
  Corpus corpus;
  Example ex;
  ex.concepts = make_concept_set({"dog"});
  ex.references = {"the dog runs far away"};
  corpus.push_back(ex);
  HashEmbedProvider provider;
  EvalReport report = evaluate_lines({"the dog runs far away"}, corpus, provider);

  nlohmann::json j = nlohmann::json::parse(report_json(report));
  std::set<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.insert(k);
  CHECK(keys == std::set<std::string>{"BLEU-3", "BLEU-4", "ROUGE-2", "ROUGE-L", "METEOR",
                                      "EmbedScore(hash)", "ConceptCoverage",
                                      "n_examples"});
  CHECK(j.at("n_examples").get<size_t>() == 1);
  CHECK(j.at("BLEU-4").get<double>() == 100.00);

  std::string table = report_table(report);
  CHECK(table.find("BLEU-3") != std::string::npos);
  CHECK(table.find("ConceptCoverage") != std::string::npos);
  CHECK(table.find("(n=1)") != std::string::npos);
  CHECK(table.find("100.00") != std::string::npos);
}

TEST_CASE("percent values are rounded to two decimals") {
  Corpus corpus;
  Example ex;
  ex.concepts = make_concept_set({"a"});
  // prediction will share 1 of 3 bigrams -> ROUGE-2 = 1/3 -> 33.33
  ex.references = {"a b d c"};
  corpus.push_back(ex);
  HashEmbedProvider provider;
  EvalReport report = evaluate_lines({"a b c d"}, corpus, provider);
  CHECK(report.at("ROUGE-2") == 33.33);
}

}  // TEST_SUITE
