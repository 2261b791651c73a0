#include "kgcg/training.hpp"

#include <algorithm>
#include <chrono>

namespace kgcg {

PreparedData prepare_data(const Corpus& corpus, const KnowledgeGraph& graph,
                          const GroundingConfig& gcfg, size_t max_len, bool strip_graph,
                          const Vocabulary* fixed_vocab) {
  gcfg.validate();
  require(!corpus.empty(), "prepare_data: empty corpus");
  PreparedData out;
  out.vocab = fixed_vocab ? *fixed_vocab : Vocabulary::build(corpus);
  out.n_relations = graph.relations().size();
  out.items.reserve(corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    try {
      ConceptSubgraph sg = build_subgraph(corpus[i].concepts, graph, gcfg.node_budget,
                                          gcfg.fanout);
      if (strip_graph) sg = strip_to_self_loops(sg);
      EncodedExample enc = encode_example(corpus[i], sg, out.vocab, max_len);
      GraphInput gi = make_graph_input(sg, enc);
      out.items.push_back(TrainItem{std::move(enc), std::move(gi)});
    } catch (const Error& e) {
      fail("example " + std::to_string(i) + ": " + e.what());
    }
  }
  return out;
}

namespace {

// fixed, fully-featured miniature example: multi-token concepts, a retrieved
// node, non-SELF relations, label smoothing
struct GradCheckProblem {
  std::vector<TokenId> input_ids, dec_ids, gold;
  GraphInput graph;
};

GradCheckProblem make_problem(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(mix_seed(seed, fnv1a("grad_check")));
  auto tok = [&] {
    return static_cast<TokenId>(Vocabulary::kNumSpecials +
                                rng.below(cfg.vocab_size - Vocabulary::kNumSpecials));
  };
  GradCheckProblem p;
  // BOS t SEP t t EOS
  p.input_ids = {Vocabulary::kBos, tok(), Vocabulary::kSep, tok(), tok(), Vocabulary::kEos};
  require(p.input_ids.size() <= cfg.max_len, "grad_check: max_len too small");
  std::vector<TokenId> target = {Vocabulary::kBos, tok(), tok(), tok(), Vocabulary::kEos};
  p.dec_ids.assign(target.begin(), target.end() - 1);
  p.gold.assign(target.begin() + 1, target.end());

  p.graph.n_nodes = 3;
  p.graph.spans = {TokenSpan{1, 1}, TokenSpan{3, 4}, TokenSpan{}};
  p.graph.node_token_ids = {{tok()}, {tok(), tok()}, {tok(), Vocabulary::kUnk}};
  const RelationId r1 = cfg.n_relations > 1 ? 1 : 0;
  const RelationId r2 = static_cast<RelationId>((cfg.n_relations > 2) ? 2 : r1);
  p.graph.edges = {
      SubgraphEdge{0, r1, 1}, SubgraphEdge{1, r2, 0}, SubgraphEdge{2, r1, 1},
      SubgraphEdge{0, kSelfRelation, 0}, SubgraphEdge{1, kSelfRelation, 1},
      SubgraphEdge{2, kSelfRelation, 2},
  };
  return p;
}

}  // namespace

GradCheckReport grad_check(const ModelConfig& cfg, uint64_t seed, double fd_step,
                           double label_smoothing, size_t sample_cap) {
  cfg.validate();
  require(fd_step > 0.0, "grad_check: step size must be positive");
  require(sample_cap >= 1, "grad_check: sample cap must be positive");
  Parameters<double> params = init_params<double>(cfg, seed);
  GradCheckProblem prob = make_problem(cfg, seed);

  RunMode mode;  // evaluation mode: dropout off, the path is deterministic
  LossGrads<double> analytic = loss_and_gradients(params, prob.input_ids, prob.dec_ids, prob.gold,
                                                  prob.graph, label_smoothing, mode);
  const double inv_tokens = 1.0 / static_cast<double>(analytic.n_tokens);

  auto loss_at = [&]() {
    ForwardResult<double> f =
        forward(params, prob.input_ids, prob.dec_ids, prob.graph, mode, /*keep_cache=*/false);
    return static_cast<double>(cross_entropy(f.logits, prob.gold, label_smoothing));
  };

  GradCheckReport rep;
  for (auto& [name, theta] : params.tensors) {
    std::vector<size_t> picks;
    if (theta.data.size() <= sample_cap) {
      picks.resize(theta.data.size());
      for (size_t i = 0; i < picks.size(); ++i) picks[i] = i;
    } else {
      Rng prng(mix_seed(seed, fnv1a(name)));
      picks.resize(sample_cap);
      for (size_t i = 0; i < sample_cap; ++i)
        picks[i] = static_cast<size_t>(prng.below(theta.data.size()));
    }
    for (size_t idx : picks) {
      const double saved = theta.data[idx];
      theta.data[idx] = saved + fd_step;
      const double lp = loss_at();
      theta.data[idx] = saved - fd_step;
      const double lm = loss_at();
      theta.data[idx] = saved;
      const double numeric = (lp - lm) / (2.0 * fd_step);
      const double exact = analytic.grads.at(name).data[idx] * inv_tokens;
      const double denom = std::max({std::fabs(numeric), std::fabs(exact), 1e-6});
      const double rel = std::fabs(numeric - exact) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_tensor = name;
      }
      ++rep.n_checked;
    }
  }
  return rep;
}

}  // namespace kgcg
