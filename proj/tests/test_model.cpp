#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "kgcg/data.hpp"
#include "kgcg/error.hpp"
#include "kgcg/grounding.hpp"
#include "kgcg/kg.hpp"
#include "kgcg/model.hpp"

using namespace kgcg;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.graph_layers = 2;
  cfg.max_len = 12;
  cfg.vocab_size = 11;
  cfg.n_relations = 3;
  cfg.dropout = 0.0;
  return cfg;
}

// two concept nodes with a relation edge plus one retrieved neighbor
GraphInput tiny_graph() {
  GraphInput g;
  g.n_nodes = 3;
  g.edges = {SubgraphEdge{0, 0, 0}, SubgraphEdge{1, 0, 1}, SubgraphEdge{0, 1, 1},
             SubgraphEdge{2, 2, 0}};
  g.spans = {TokenSpan{1, 1}, TokenSpan{3, 3}, TokenSpan{}};
  g.node_token_ids = {{5}, {6}, {7, 8}};
  return g;
}

template <class T>
bool same_bits(const TensorT<T>& a, const TensorT<T>& b) {
  return a.rows == b.rows && a.cols == b.cols &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation rejects bad settings") {
  ModelConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());

  ModelConfig bad = cfg;
  bad.d_model = 10;  // not a multiple of n_heads=4 after the next line
  bad.n_heads = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.max_len = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.vocab_size = 4;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = cfg;
  bad.enc_layers = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("init_params realizes exactly the expected shapes") {
  ModelConfig cfg = tiny_config();
  auto shapes = expected_shapes(cfg);
  Parameters<float> params = init_params<float>(cfg, 42);

  CHECK(params.tensors.size() == shapes.size());
  size_t scalars = 0;
  for (const auto& [name, shape] : shapes) {
    CAPTURE(name);
    const TensorT<float>& t = params.at(name);
    CHECK(t.rows == shape.first);
    CHECK(t.cols == shape.second);
    CHECK(all_finite(t));
    scalars += t.size();
  }
  CHECK(params.scalar_count() == scalars);
  CHECK(shapes.count("embed.token") == 1);
  CHECK(shapes.at("embed.token") == std::pair<size_t, size_t>{cfg.vocab_size, cfg.d_model});
  CHECK(shapes.count("embed.relation") == 1);
  CHECK(shapes.at("embed.relation").first == cfg.n_relations);
  CHECK_THROWS_AS(params.at("no.such.tensor"), Error);
}

TEST_CASE("init_params is seed-deterministic") {
  ModelConfig cfg = tiny_config();
  Parameters<float> a = init_params<float>(cfg, 7);
  Parameters<float> b = init_params<float>(cfg, 7);
  Parameters<float> c = init_params<float>(cfg, 8);
  bool all_same = true, any_diff = false;
  for (const auto& [name, t] : a.tensors) {
    all_same = all_same && same_bits(t, b.at(name));
    any_diff = any_diff || !same_bits(t, c.at(name));
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("forward is deterministic and finite") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 3);
  std::vector<TokenId> input{Vocabulary::kBos, 5, Vocabulary::kSep, 6, Vocabulary::kEos};
  std::vector<TokenId> dec{Vocabulary::kBos, 5, 9, 6};
  GraphInput graph = tiny_graph();
  RunMode mode;

  ForwardResult<float> r1 = forward(params, input, dec, graph, mode, false);
  ForwardResult<float> r2 = forward(params, input, dec, graph, mode, false);
  CHECK(r1.logits.rows == dec.size());
  CHECK(r1.logits.cols == cfg.vocab_size);
  CHECK(all_finite(r1.logits));
  CHECK(same_bits(r1.logits, r2.logits));
  CHECK(r1.cache == nullptr);
  ForwardResult<float> r3 = forward(params, input, dec, graph, mode, true);
  CHECK(r3.cache != nullptr);
  CHECK(same_bits(r1.logits, r3.logits));
}

TEST_CASE("decoder rows are causal") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 4);
  std::vector<TokenId> input{Vocabulary::kBos, 5, Vocabulary::kEos};
  GraphInput graph = tiny_graph();
  RunMode mode;
  EncodeOut<float> enc = encode(params, input, graph, mode);

  std::vector<TokenId> full{Vocabulary::kBos, 7, 8, 9};
  TensorT<float> full_logits = decode_logits(params, enc, full, mode);
  for (size_t t = 1; t <= full.size(); ++t) {
    std::vector<TokenId> prefix(full.begin(), full.begin() + t);
    TensorT<float> pl = decode_logits(params, enc, prefix, mode);
    REQUIRE(pl.rows == t);
    // last prefix row must equal the matching row of the full pass bit for bit
    CHECK(std::memcmp(pl.row(t - 1), full_logits.row(t - 1),
                      cfg.vocab_size * sizeof(float)) == 0);
  }
}

TEST_CASE("encode output is reusable across decodes") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 5);
  std::vector<TokenId> input{Vocabulary::kBos, 5, Vocabulary::kSep, 6, Vocabulary::kEos};
  GraphInput graph = tiny_graph();
  RunMode mode;

  EncodeOut<float> enc = encode(params, input, graph, mode);
  CHECK(enc.memory.rows == input.size() + graph.n_nodes);
  CHECK(enc.memory.cols == cfg.d_model);
  CHECK(enc.mem_key_ok.size() == enc.memory.rows);

  ForwardResult<float> whole =
      forward(params, input, {Vocabulary::kBos, 9}, graph, mode, false);
  TensorT<float> via_enc = decode_logits(params, enc, {Vocabulary::kBos, 9}, mode);
  CHECK(same_bits(whole.logits, via_enc));
}

TEST_CASE("dropout only acts in training mode") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.5;
  Parameters<float> params = init_params<float>(cfg, 6);
  std::vector<TokenId> input{Vocabulary::kBos, 5, Vocabulary::kEos};
  std::vector<TokenId> dec{Vocabulary::kBos, 7};
  GraphInput graph = tiny_graph();

  RunMode eval_mode;  // training=false: dropout off, so two runs agree
  ForwardResult<float> e1 = forward(params, input, dec, graph, eval_mode, false);
  ForwardResult<float> e2 = forward(params, input, dec, graph, eval_mode, false);
  CHECK(same_bits(e1.logits, e2.logits));

  RunMode train_a{true, 1};
  RunMode train_b{true, 2};
  ForwardResult<float> t1 = forward(params, input, dec, graph, train_a, false);
  ForwardResult<float> t1_again = forward(params, input, dec, graph, train_a, false);
  ForwardResult<float> t2 = forward(params, input, dec, graph, train_b, false);
  CHECK(same_bits(t1.logits, t1_again.logits));  // seeded dropout is reproducible
  CHECK_FALSE(same_bits(t1.logits, t2.logits));  // different mask, different result
}

TEST_CASE("cross_entropy matches a hand computation") {
  TensorT<double> logits(1, 5);
  double vals[5] = {0.1, -0.3, 1.2, 0.0, -2.0};
  for (size_t v = 0; v < 5; ++v) logits.at(0, v) = vals[v];
  std::vector<TokenId> gold{2};

  double lse = 0.0;
  for (double x : vals) lse += std::exp(x);
  lse = std::log(lse);
  double expect = -(vals[2] - lse);
  CHECK(cross_entropy(logits, gold, 0.0) == doctest::Approx(expect).epsilon(1e-12));

  // label smoothing spreads ls/V mass over every class
  double ls = 0.1, smooth_expect = 0.0;
  for (size_t v = 0; v < 5; ++v) {
    double target = (v == 2 ? 1.0 - ls : 0.0) + ls / 5.0;
    smooth_expect += -target * (vals[v] - lse);
  }
  CHECK(cross_entropy(logits, gold, ls) == doctest::Approx(smooth_expect).epsilon(1e-12));
}

TEST_CASE("cross_entropy skips PAD and validates targets") {
  TensorT<double> logits(3, 5);
  for (size_t t = 0; t < 3; ++t)
    for (size_t v = 0; v < 5; ++v) logits.at(t, v) = 0.1 * static_cast<double>(t + v);
  std::vector<TokenId> with_pad{2, Vocabulary::kPad, 4};

  TensorT<double> dense(2, 5);
  std::copy(logits.row(0), logits.row(0) + 5, dense.row(0));
  std::copy(logits.row(2), logits.row(2) + 5, dense.row(2 - 1));
  std::vector<TokenId> dense_gold{2, 4};
  CHECK(cross_entropy(logits, with_pad, 0.0) ==
        doctest::Approx(cross_entropy(dense, dense_gold, 0.0)).epsilon(1e-12));

  CHECK_THROWS_AS(cross_entropy(logits, std::vector<TokenId>{2, 4}, 0.0), Error);
  CHECK_THROWS_AS(cross_entropy(logits, std::vector<TokenId>{2, 4, 99}, 0.0), Error);
  std::vector<TokenId> all_pad{Vocabulary::kPad, Vocabulary::kPad, Vocabulary::kPad};
  CHECK_THROWS_AS(cross_entropy(logits, all_pad, 0.0), Error);
  CHECK_THROWS_AS(cross_entropy(logits, with_pad, 1.0), Error);
}

TEST_CASE("loss_and_gradients agrees with the plain forward loss") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 11);
  std::vector<TokenId> input{Vocabulary::kBos, 5, Vocabulary::kSep, 6, Vocabulary::kEos};
  std::vector<TokenId> dec{Vocabulary::kBos, 5, 9};
  std::vector<TokenId> gold{5, 9, Vocabulary::kEos};
  GraphInput graph = tiny_graph();
  RunMode mode;

  LossGrads<float> lg = loss_and_gradients(params, input, dec, gold, graph, 0.0, mode);
  CHECK(lg.n_tokens == 3);
  ForwardResult<float> fr = forward(params, input, dec, graph, mode, false);
  float mean_ce = cross_entropy(fr.logits, gold, 0.0);
  CHECK(lg.loss_sum / static_cast<float>(lg.n_tokens) ==
        doctest::Approx(mean_ce).epsilon(1e-5));

  auto shapes = expected_shapes(cfg);
  CHECK(lg.grads.size() == shapes.size());
  bool any_nonzero = false;
  for (const auto& [name, g] : lg.grads) {
    CAPTURE(name);
    CHECK(g.rows == shapes.at(name).first);
    CHECK(g.cols == shapes.at(name).second);
    CHECK(all_finite(g));
    for (float v : g.data) any_nonzero = any_nonzero || v != 0.0f;
  }
  CHECK(any_nonzero);
}

TEST_CASE("graph input construction validates structure") {
  KnowledgeGraph g;
  g.add_triple("dog", "xNeed", "ball");
  Example ex;
  ex.concepts = make_concept_set({"dog", "ball"});
  ex.references = {"the dog wants the ball"};
  Vocabulary v = Vocabulary::build(Corpus{ex});
  ConceptSubgraph sg = build_subgraph(ex.concepts, g, 4, 2);
  EncodedExample enc = encode_example(ex, sg, v, 16);

  GraphInput gi = make_graph_input(sg, enc);
  CHECK(gi.n_nodes == sg.nodes.size());
  CHECK(gi.edges.size() == sg.edges.size());

  ConceptSubgraph mismatched = sg;
  mismatched.nodes.push_back(sg.nodes[0]);
  CHECK_THROWS_AS(make_graph_input(mismatched, enc), Error);

  ConceptSubgraph bad_edge = sg;
  bad_edge.edges.push_back(SubgraphEdge{0, 0, 99});
  CHECK_THROWS_AS(make_graph_input(bad_edge, enc), Error);

  ConceptSubgraph empty;
  EncodedExample empty_enc;
  CHECK_THROWS_AS(make_graph_input(empty, empty_enc), Error);
}

TEST_CASE("encode rejects malformed inputs") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 12);
  GraphInput graph = tiny_graph();
  RunMode mode;

  // token id outside the embedding table
  std::vector<TokenId> bad_ids{Vocabulary::kBos, 1000, Vocabulary::kEos};
  CHECK_THROWS_AS(encode(params, bad_ids, graph, mode), Error);

  // input longer than max_len has no position row
  std::vector<TokenId> long_ids(cfg.max_len + 1, 5);
  long_ids[0] = Vocabulary::kBos;
  CHECK_THROWS_AS(encode(params, long_ids, graph, mode), Error);
}

}  // TEST_SUITE
