#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "kgcg/data.hpp"
#include "kgcg/error.hpp"
#include "kgcg/grounding.hpp"
#include "kgcg/kernels.hpp"
#include "kgcg/rng.hpp"
#include "kgcg/tensor.hpp"

// Graph-augmented encoder-decoder. Templated on the scalar type: float for
// training/inference, double for finite-difference gradient checking.
// Backward passes are written by hand against per-op caches.

namespace kgcg {

struct ModelConfig {
  size_t d_model = 64;
  size_t n_heads = 4;
  size_t d_ff = 128;
  size_t enc_layers = 2;
  size_t dec_layers = 2;
  size_t graph_layers = 1;  // applications of the (shared) graph attention
  size_t max_len = 32;
  size_t vocab_size = 0;    // set from the vocabulary
  size_t n_relations = 1;   // set from the graph registry (SELF included)
  double dropout = 0.0;

  void validate() const {
    require(d_model >= 2 && n_heads >= 1 && d_model % n_heads == 0,
            "model config: d_model must be a positive multiple of n_heads");
    require(d_ff >= 1, "model config: d_ff must be positive");
    require(enc_layers >= 1 && dec_layers >= 1 && graph_layers >= 1,
            "model config: layer counts must be positive");
    require(max_len >= 4, "model config: max_len must be at least 4");
    require(vocab_size >= Vocabulary::kNumSpecials,
            "model config: vocab_size must cover the special tokens");
    require(n_relations >= 1, "model config: n_relations must be positive");
    require(dropout >= 0.0 && dropout < 1.0, "model config: dropout must be in [0, 1)");
  }
};

// What the network needs to know about a grounded subgraph, with all
// surfaces already resolved to token ids.
struct GraphInput {
  size_t n_nodes = 0;
  std::vector<SubgraphEdge> edges;
  std::vector<TokenSpan> spans;                    // per node; empty => embedding init
  std::vector<std::vector<TokenId>> node_token_ids;  // per node
};

inline GraphInput make_graph_input(const ConceptSubgraph& sg, const EncodedExample& enc) {
  require(sg.nodes.size() == enc.concept_spans.size() &&
              sg.nodes.size() == enc.node_token_ids.size(),
          "graph input: subgraph and encoding disagree on node count");
  require(!sg.nodes.empty(), "graph input: subgraph has no nodes");
  GraphInput g;
  g.n_nodes = sg.nodes.size();
  g.edges = sg.edges;
  g.spans = enc.concept_spans;
  g.node_token_ids = enc.node_token_ids;
  for (const SubgraphEdge& e : g.edges)
    require(e.src < g.n_nodes && e.dst < g.n_nodes, "graph input: edge endpoint out of range");
  return g;
}

template <class T>
using ParamMap = std::map<std::string, TensorT<T>>;  // name order is the canonical order

template <class T>
struct Parameters {
  ModelConfig config;
  ParamMap<T> tensors;

  TensorT<T>& at(const std::string& name) {
    auto it = tensors.find(name);
    require(it != tensors.end(), "unknown parameter tensor: " + name);
    return it->second;
  }
  const TensorT<T>& at(const std::string& name) const {
    auto it = tensors.find(name);
    require(it != tensors.end(), "unknown parameter tensor: " + name);
    return it->second;
  }
  size_t scalar_count() const {
    size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
  }
};

inline std::map<std::string, std::pair<size_t, size_t>> expected_shapes(const ModelConfig& cfg) {
  std::map<std::string, std::pair<size_t, size_t>> s;
  const size_t d = cfg.d_model, f = cfg.d_ff;
  s["embed.token"] = {cfg.vocab_size, d};
  s["embed.relation"] = {cfg.n_relations, d};
  auto attn = [&](const std::string& p) {
    s[p + ".wq"] = {d, d};
    s[p + ".wk"] = {d, d};
    s[p + ".wv"] = {d, d};
    s[p + ".wo"] = {d, d};
  };
  auto ln = [&](const std::string& p) {
    s[p + ".gamma"] = {1, d};
    s[p + ".beta"] = {1, d};
  };
  auto ffn = [&](const std::string& p) {
    s[p + ".w1"] = {d, f};
    s[p + ".b1"] = {1, f};
    s[p + ".w2"] = {f, d};
    s[p + ".b2"] = {1, d};
  };
  for (size_t i = 0; i < cfg.enc_layers; ++i) {
    std::string p = "enc." + std::to_string(i);
    attn(p + ".attn");
    ln(p + ".ln1");
    ffn(p + ".ffn");
    ln(p + ".ln2");
  }
  ln("enc.final_ln");
  for (size_t i = 0; i < cfg.dec_layers; ++i) {
    std::string p = "dec." + std::to_string(i);
    attn(p + ".self");
    ln(p + ".ln1");
    attn(p + ".cross");
    ln(p + ".ln2");
    ffn(p + ".ffn");
    ln(p + ".ln3");
  }
  ln("dec.final_ln");
  s["graph.wq"] = {d, d};
  s["graph.wk"] = {d, d};
  s["graph.wv"] = {d, d};
  s["graph.wr"] = {d, d};
  s["graph.attn_vec"] = {1, 3 * d};
  ln("graph.ln");
  s["graph.gate.w"] = {2 * d, d};
  return s;
}

// Xavier-uniform matrices, zero biases, unit layernorm gains. Each tensor
// draws from its own stream keyed by name, so init is order-independent.
template <class T>
Parameters<T> init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Parameters<T> p;
  p.config = cfg;
  for (const auto& [name, shape] : expected_shapes(cfg)) {
    TensorT<T> t(shape.first, shape.second);
    bool is_gamma = name.size() >= 5 && name.compare(name.size() - 5, 5, "gamma") == 0;
    bool is_bias = (name.size() >= 4 && name.compare(name.size() - 4, 4, "beta") == 0) ||
                   (name.size() >= 2 && (name.compare(name.size() - 2, 2, "b1") == 0 ||
                                         name.compare(name.size() - 2, 2, "b2") == 0));
    if (is_gamma) {
      std::fill(t.data.begin(), t.data.end(), T(1));
    } else if (is_bias) {
      // already zero
    } else {
      size_t fan_in = t.rows, fan_out = t.cols;
      if (name == "graph.attn_vec") {
        fan_in = 3 * cfg.d_model;  // scores a 3d-wide concatenation down to a scalar
        fan_out = 1;
      }
      double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      Rng rng(mix_seed(seed, fnv1a(name)));
      for (T& v : t.data) v = static_cast<T>(rng.uniform_signed(bound));
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

struct RunMode {
  bool training = false;   // dropout active only when training and config.dropout > 0
  uint64_t dropout_seed = 0;
};

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kLeakySlope = 0.2;

template <class T>
struct LnCache {
  TensorT<T> xhat;
  std::vector<T> rstd;
};

template <class T>
void ln_forward(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta,
                TensorT<T>& y, LnCache<T>* cache) {
  const size_t d = x.cols;
  y = TensorT<T>(x.rows, d);
  if (cache) {
    cache->xhat = TensorT<T>(x.rows, d);
    cache->rstd.assign(x.rows, T(0));
  }
  for (size_t i = 0; i < x.rows; ++i) {
    const T* xi = x.row(i);
    T mu = T(0);
    for (size_t j = 0; j < d; ++j) mu += xi[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (size_t j = 0; j < d; ++j) {
      T c = xi[j] - mu;
      var += c * c;
    }
    var /= static_cast<T>(d);
    T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
    T* yi = y.row(i);
    for (size_t j = 0; j < d; ++j) {
      T xh = (xi[j] - mu) * rstd;
      if (cache) cache->xhat.at(i, j) = xh;
      yi[j] = gamma.data[j] * xh + beta.data[j];
    }
    if (cache) cache->rstd[i] = rstd;
  }
}

template <class T>
void ln_backward(const LnCache<T>& cache, const TensorT<T>& gamma, const TensorT<T>& dy,
                 TensorT<T>& dx_accum, TensorT<T>& dgamma, TensorT<T>& dbeta) {
  const size_t d = dy.cols;
  for (size_t i = 0; i < dy.rows; ++i) {
    const T* dyi = dy.row(i);
    const T* xh = cache.xhat.row(i);
    T m1 = T(0), m2 = T(0);
    for (size_t j = 0; j < d; ++j) {
      T dxh = dyi[j] * gamma.data[j];
      m1 += dxh;
      m2 += dxh * xh[j];
    }
    m1 /= static_cast<T>(d);
    m2 /= static_cast<T>(d);
    T* dxi = dx_accum.row(i);
    for (size_t j = 0; j < d; ++j) {
      T dxh = dyi[j] * gamma.data[j];
      dxi[j] += cache.rstd[i] * (dxh - m1 - xh[j] * m2);
      dgamma.data[j] += dyi[j] * xh[j];
      dbeta.data[j] += dyi[j];
    }
  }
}

// Inverted dropout; the mask is cached so backward replays it exactly.
template <class T>
void dropout_forward(TensorT<T>& x, double rate, uint64_t seed, std::vector<uint8_t>& mask) {
  mask.assign(x.size(), 1);
  if (rate <= 0.0) return;
  Rng rng(seed);
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < x.data.size(); ++i) {
    if (rng.uniform() < rate) {
      mask[i] = 0;
      x.data[i] = T(0);
    } else {
      x.data[i] *= scale;
    }
  }
}

template <class T>
void dropout_backward(TensorT<T>& dx, double rate, const std::vector<uint8_t>& mask) {
  if (rate <= 0.0) return;
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] = mask[i] ? dx.data[i] * scale : T(0);
}

template <class T>
struct AttnCache {
  TensorT<T> q, k, v;   // projected
  TensorT<T> probs;     // (heads*Tq) x Tk, pre-dropout
  std::vector<uint8_t> drop_mask;
  TensorT<T> ctx;       // Tq x d, heads concatenated, post-dropout weighting
};

// allowed: Tq*Tk bytes, 1 where position i may attend key j. Every query row
// must keep at least one admissible key.
template <class T>
TensorT<T> mha_forward(const TensorT<T>& q_in, const TensorT<T>& kv_in, const TensorT<T>& wq,
                       const TensorT<T>& wk, const TensorT<T>& wv, const TensorT<T>& wo,
                       size_t n_heads, const std::vector<uint8_t>& allowed, double drop_rate,
                       uint64_t drop_seed, AttnCache<T>* cache) {
  const size_t tq = q_in.rows, tk = kv_in.rows, d = q_in.cols, dh = d / n_heads;
  TensorT<T> q = kernels::matmul(q_in, wq);
  TensorT<T> k = kernels::matmul(kv_in, wk);
  TensorT<T> v = kernels::matmul(kv_in, wv);
  TensorT<T> probs(n_heads * tq, tk);
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> srow(tk);
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t off = h * dh;
    for (size_t i = 0; i < tq; ++i) {
      const T* qi = q.row(i) + off;
      T mx = -std::numeric_limits<T>::infinity();
      for (size_t j = 0; j < tk; ++j) {
        if (!allowed[i * tk + j]) {
          srow[j] = -std::numeric_limits<T>::infinity();
          continue;
        }
        const T* kj = k.row(j) + off;
        T s = T(0);
        for (size_t t = 0; t < dh; ++t) s += qi[t] * kj[t];
        srow[j] = s * inv_sqrt;
        if (srow[j] > mx) mx = srow[j];
      }
      require(mx > -std::numeric_limits<T>::infinity(),
              "attention: query row with no admissible keys");
      T denom = T(0);
      T* prow = probs.row(h * tq + i);
      for (size_t j = 0; j < tk; ++j) {
        T e = allowed[i * tk + j] ? std::exp(srow[j] - mx) : T(0);
        prow[j] = e;
        denom += e;
      }
      for (size_t j = 0; j < tk; ++j) prow[j] /= denom;
    }
  }
  // dropout on the attention weights
  TensorT<T> probs_used = probs;
  std::vector<uint8_t> mask;
  dropout_forward(probs_used, drop_rate, drop_seed, mask);
  TensorT<T> ctx(tq, d);
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t off = h * dh;
    for (size_t i = 0; i < tq; ++i) {
      const T* prow = probs_used.row(h * tq + i);
      T* ci = ctx.row(i) + off;
      for (size_t j = 0; j < tk; ++j) {
        T p = prow[j];
        if (p == T(0)) continue;
        const T* vj = v.row(j) + off;
        for (size_t t = 0; t < dh; ++t) ci[t] += p * vj[t];
      }
    }
  }
  if (cache) {
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->drop_mask = std::move(mask);
    cache->ctx = ctx;
  }
  return kernels::matmul(ctx, wo);
}

template <class T>
void mha_backward(const AttnCache<T>& cache, const TensorT<T>& q_in, const TensorT<T>& kv_in,
                  const TensorT<T>& wq, const TensorT<T>& wk, const TensorT<T>& wv,
                  const TensorT<T>& wo, size_t n_heads, double drop_rate, const TensorT<T>& dout,
                  TensorT<T>& dq_in, TensorT<T>& dkv_in, TensorT<T>& dwq, TensorT<T>& dwk,
                  TensorT<T>& dwv, TensorT<T>& dwo) {
  const size_t tq = q_in.rows, tk = kv_in.rows, d = q_in.cols, dh = d / n_heads;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  accumulate(dwo, kernels::matmul_tn(cache.ctx, dout));
  TensorT<T> dctx = kernels::matmul_nt(dout, wo);
  TensorT<T> dq(tq, d), dk(tk, d), dv(tk, d);
  const T drop_scale = drop_rate > 0.0 ? static_cast<T>(1.0 / (1.0 - drop_rate)) : T(1);
  std::vector<T> dprow(tk);
  for (size_t h = 0; h < n_heads; ++h) {
    const size_t off = h * dh;
    for (size_t i = 0; i < tq; ++i) {
      const T* prow = cache.probs.row(h * tq + i);
      const T* dci = dctx.row(i) + off;
      // through the weighted sum of values (dropout-adjusted weights)
      for (size_t j = 0; j < tk; ++j) {
        T keep = cache.drop_mask.empty() || cache.drop_mask[(h * tq + i) * tk + j] ? T(1) : T(0);
        T p_used = prow[j] * keep * drop_scale;
        const T* vj = cache.v.row(j) + off;
        T acc = T(0);
        for (size_t t = 0; t < dh; ++t) acc += dci[t] * vj[t];
        dprow[j] = acc * keep * drop_scale;  // grad w.r.t. pre-dropout prob
        if (p_used != T(0)) {
          T* dvj = dv.row(j) + off;
          for (size_t t = 0; t < dh; ++t) dvj[t] += p_used * dci[t];
        }
      }
      // softmax backward
      T dot = T(0);
      for (size_t j = 0; j < tk; ++j) dot += prow[j] * dprow[j];
      T* dqi = dq.row(i) + off;
      for (size_t j = 0; j < tk; ++j) {
        T ds = prow[j] * (dprow[j] - dot);
        if (ds == T(0)) continue;
        ds *= inv_sqrt;
        const T* kj = cache.k.row(j) + off;
        const T* qi = cache.q.row(i) + off;
        T* dkj = dk.row(j) + off;
        for (size_t t = 0; t < dh; ++t) {
          dqi[t] += ds * kj[t];
          dkj[t] += ds * qi[t];
        }
      }
    }
  }
  accumulate(dwq, kernels::matmul_tn(q_in, dq));
  accumulate(dwk, kernels::matmul_tn(kv_in, dk));
  accumulate(dwv, kernels::matmul_tn(kv_in, dv));
  accumulate(dq_in, kernels::matmul_nt(dq, wq));
  accumulate(dkv_in, kernels::matmul_nt(dk, wk));
  accumulate(dkv_in, kernels::matmul_nt(dv, wv));
}

template <class T>
struct FfnCache {
  TensorT<T> x_in;    // layernormed input
  TensorT<T> h_pre;   // before relu
  TensorT<T> h_act;   // after relu + dropout
  std::vector<uint8_t> drop_mask;
};

template <class T>
TensorT<T> ffn_forward(const TensorT<T>& x, const TensorT<T>& w1, const TensorT<T>& b1,
                       const TensorT<T>& w2, const TensorT<T>& b2, double drop_rate,
                       uint64_t drop_seed, FfnCache<T>* cache) {
  TensorT<T> h = kernels::matmul(x, w1);
  for (size_t i = 0; i < h.rows; ++i)
    for (size_t j = 0; j < h.cols; ++j) h.at(i, j) += b1.data[j];
  TensorT<T> h_pre = h;
  for (T& v : h.data) v = v > T(0) ? v : T(0);
  std::vector<uint8_t> mask;
  dropout_forward(h, drop_rate, drop_seed, mask);
  TensorT<T> y = kernels::matmul(h, w2);
  for (size_t i = 0; i < y.rows; ++i)
    for (size_t j = 0; j < y.cols; ++j) y.at(i, j) += b2.data[j];
  if (cache) {
    cache->x_in = x;
    cache->h_pre = std::move(h_pre);
    cache->h_act = std::move(h);
    cache->drop_mask = std::move(mask);
  }
  return y;
}

template <class T>
void ffn_backward(const FfnCache<T>& cache, const TensorT<T>& w1, const TensorT<T>& w2,
                  double drop_rate, const TensorT<T>& dy, TensorT<T>& dx_accum, TensorT<T>& dw1,
                  TensorT<T>& db1, TensorT<T>& dw2, TensorT<T>& db2) {
  accumulate(dw2, kernels::matmul_tn(cache.h_act, dy));
  for (size_t i = 0; i < dy.rows; ++i)
    for (size_t j = 0; j < dy.cols; ++j) db2.data[j] += dy.at(i, j);
  TensorT<T> dh = kernels::matmul_nt(dy, w2);
  dropout_backward(dh, drop_rate, cache.drop_mask);
  for (size_t i = 0; i < dh.data.size(); ++i)
    if (cache.h_pre.data[i] <= T(0)) dh.data[i] = T(0);
  accumulate(dw1, kernels::matmul_tn(cache.x_in, dh));
  for (size_t i = 0; i < dh.rows; ++i)
    for (size_t j = 0; j < dh.cols; ++j) db1.data[j] += dh.at(i, j);
  accumulate(dx_accum, kernels::matmul_nt(dh, w1));
}

template <class T>
void add_positional(TensorT<T>& x) {
  const size_t d = x.cols;
  for (size_t pos = 0; pos < x.rows; ++pos) {
    T* xi = x.row(pos);
    for (size_t j = 0; j < d; j += 2) {
      double angle = static_cast<double>(pos) /
                     std::pow(10000.0, static_cast<double>(j) / static_cast<double>(d));
      xi[j] += static_cast<T>(std::sin(angle));
      if (j + 1 < d) xi[j + 1] += static_cast<T>(std::cos(angle));
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// caches for the full network

namespace detail {

template <class T>
struct EncLayerCache {
  TensorT<T> x_in;
  LnCache<T> ln1;
  TensorT<T> ln1_out;
  AttnCache<T> attn;
  TensorT<T> x_mid;
  LnCache<T> ln2;
  TensorT<T> ln2_out;
  FfnCache<T> ffn;
};

template <class T>
struct DecLayerCache {
  TensorT<T> x_in;
  LnCache<T> ln1;
  TensorT<T> ln1_out;
  AttnCache<T> self_attn;
  TensorT<T> x_mid1;
  LnCache<T> ln2;
  TensorT<T> ln2_out;
  AttnCache<T> cross_attn;
  TensorT<T> x_mid2;
  LnCache<T> ln3;
  TensorT<T> ln3_out;
  FfnCache<T> ffn;
};

template <class T>
struct GraphIterCache {
  TensorT<T> h_in;                       // node states entering this iteration
  TensorT<T> q, k, v;                    // per-node projections
  std::map<RelationId, TensorT<T>> rproj;  // W_r R[r] per relation in use
  std::vector<T> z;                      // per edge, pre-leaky-relu score
  std::vector<T> alpha;                  // per edge, post-softmax weight
  TensorT<T> u;                          // aggregated messages, pre-relu
  TensorT<T> h_prime;                    // post-relu
  LnCache<T> ln;
};

template <class T>
struct ForwardCache {
  // encoder side
  std::vector<TokenId> input_ids;
  TensorT<T> enc_embed;  // embeddings + positions (stack input)
  std::vector<EncLayerCache<T>> enc_layers;
  LnCache<T> enc_final_ln;
  TensorT<T> enc_final;  // token states after the final encoder layernorm

  // graph side
  GraphInput graph;
  std::vector<std::vector<uint32_t>> in_edges;  // per node, incoming edge indices
  TensorT<T> node0;
  std::vector<GraphIterCache<T>> graph_iters;
  TensorT<T> nodes_final;

  // fusion
  std::vector<int32_t> token_node;  // per input position: node index or -1
  TensorT<T> gates;                 // S x d; meaningful on fused rows
  TensorT<T> fused;

  // memory fed to the decoder
  TensorT<T> memory;
  std::vector<uint8_t> mem_key_ok;

  // decoder side
  std::vector<TokenId> dec_ids;
  TensorT<T> dec_embed;
  std::vector<DecLayerCache<T>> dec_layers;
  LnCache<T> dec_final_ln;
  TensorT<T> dec_final;
};

}  // namespace detail

// encoder + graph + fusion output, sufficient to run the decoder many times
template <class T>
struct EncodeOut {
  TensorT<T> memory;
  std::vector<uint8_t> mem_key_ok;  // per memory row, 1 = attendable
};

template <class T>
EncodeOut<T> encode(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                    const GraphInput& graph, const RunMode& mode,
                    detail::ForwardCache<T>* cache = nullptr);

template <class T>
TensorT<T> decode_logits(const Parameters<T>& params, const EncodeOut<T>& enc,
                         const std::vector<TokenId>& dec_ids, const RunMode& mode,
                         detail::ForwardCache<T>* cache = nullptr);

template <class T>
struct ForwardResult {
  TensorT<T> logits;  // dec_len x vocab
  std::shared_ptr<detail::ForwardCache<T>> cache;
};

template <class T>
ForwardResult<T> forward(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                         const std::vector<TokenId>& dec_ids, const GraphInput& graph,
                         const RunMode& mode, bool keep_cache);

// Label-smoothed token-level cross entropy, averaged over non-PAD targets.
template <class T>
T cross_entropy(const TensorT<T>& logits, const std::vector<TokenId>& gold,
                double label_smoothing);

template <class T>
struct LossGrads {
  T loss_sum = T(0);   // summed over non-PAD target positions
  size_t n_tokens = 0;
  ParamMap<T> grads;   // gradient of loss_sum
};

template <class T>
LossGrads<T> loss_and_gradients(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                                const std::vector<TokenId>& dec_ids,
                                const std::vector<TokenId>& gold, const GraphInput& graph,
                                double label_smoothing, const RunMode& mode);

template <class T>
ParamMap<T> zero_like(const Parameters<T>& params);

// ---------------------------------------------------------------------------
// implementation

namespace detail {

template <class T>
void embed_tokens(const TensorT<T>& table, const std::vector<TokenId>& ids, TensorT<T>& out) {
  out = TensorT<T>(ids.size(), table.cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && static_cast<size_t>(ids[i]) < table.rows,
            "token id outside the embedding table");
    const T* src = table.row(static_cast<size_t>(ids[i]));
    std::copy(src, src + table.cols, out.row(i));
  }
}

inline std::vector<uint8_t> pad_key_mask(size_t tq, const std::vector<uint8_t>& key_ok) {
  std::vector<uint8_t> allowed(tq * key_ok.size());
  for (size_t i = 0; i < tq; ++i)
    for (size_t j = 0; j < key_ok.size(); ++j) allowed[i * key_ok.size() + j] = key_ok[j];
  return allowed;
}

inline std::vector<uint8_t> causal_mask(size_t t) {
  std::vector<uint8_t> allowed(t * t, 0);
  for (size_t i = 0; i < t; ++i)
    for (size_t j = 0; j <= i; ++j) allowed[i * t + j] = 1;
  return allowed;
}

}  // namespace detail

template <class T>
EncodeOut<T> encode(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                    const GraphInput& graph, const RunMode& mode,
                    detail::ForwardCache<T>* cache) {
  using namespace detail;
  const ModelConfig& cfg = params.config;
  require(!input_ids.empty(), "encode: empty input");
  require(input_ids.size() <= cfg.max_len, "encode: input longer than max_len");
  require(graph.n_nodes >= 1, "encode: graph must have at least one node");
  for (const SubgraphEdge& e : graph.edges)
    require(e.relation < cfg.n_relations, "encode: edge relation id outside the registry");
  const size_t S = input_ids.size(), d = cfg.d_model, N = graph.n_nodes;
  const double rate = mode.training ? cfg.dropout : 0.0;
  uint64_t site = 0;  // dropout site counter, advanced in forward order
  auto next_drop_seed = [&]() { return mix_seed(mode.dropout_seed, site++); };

  const TensorT<T>& E = params.at("embed.token");
  TensorT<T> x;
  embed_tokens(E, input_ids, x);
  add_positional(x);
  if (cache) {
    cache->input_ids = input_ids;
    cache->enc_embed = x;
    cache->graph = graph;
    cache->enc_layers.resize(cfg.enc_layers);
  }

  std::vector<uint8_t> key_ok(S);
  for (size_t j = 0; j < S; ++j) key_ok[j] = input_ids[j] != Vocabulary::kPad;
  std::vector<uint8_t> self_mask = pad_key_mask(S, key_ok);

  for (size_t l = 0; l < cfg.enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l);
    EncLayerCache<T>* lc = cache ? &cache->enc_layers[l] : nullptr;
    if (lc) lc->x_in = x;
    TensorT<T> ln1;
    ln_forward(x, params.at(p + ".ln1.gamma"), params.at(p + ".ln1.beta"), ln1,
               lc ? &lc->ln1 : nullptr);
    if (lc) lc->ln1_out = ln1;
    TensorT<T> attn = mha_forward(ln1, ln1, params.at(p + ".attn.wq"), params.at(p + ".attn.wk"),
                                  params.at(p + ".attn.wv"), params.at(p + ".attn.wo"),
                                  cfg.n_heads, self_mask, rate, next_drop_seed(),
                                  lc ? &lc->attn : nullptr);
    accumulate(x, attn);
    if (lc) lc->x_mid = x;
    TensorT<T> ln2;
    ln_forward(x, params.at(p + ".ln2.gamma"), params.at(p + ".ln2.beta"), ln2,
               lc ? &lc->ln2 : nullptr);
    if (lc) lc->ln2_out = ln2;
    TensorT<T> f = ffn_forward(ln2, params.at(p + ".ffn.w1"), params.at(p + ".ffn.b1"),
                               params.at(p + ".ffn.w2"), params.at(p + ".ffn.b2"), rate,
                               next_drop_seed(), lc ? &lc->ffn : nullptr);
    accumulate(x, f);
  }
  TensorT<T> enc_final;
  ln_forward(x, params.at("enc.final_ln.gamma"), params.at("enc.final_ln.beta"), enc_final,
             cache ? &cache->enc_final_ln : nullptr);
  if (cache) cache->enc_final = enc_final;

  // --- node initialization ---
  TensorT<T> nodes(N, d);
  for (size_t n = 0; n < N; ++n) {
    const TokenSpan& span = n < graph.spans.size() ? graph.spans[n] : TokenSpan{};
    T* dst = nodes.row(n);
    if (!span.empty() && static_cast<size_t>(span.end) < S) {
      const T inv = T(1) / static_cast<T>(span.length());
      for (int32_t t = span.begin; t <= span.end; ++t) {
        const T* src = enc_final.row(static_cast<size_t>(t));
        for (size_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
      }
    } else {
      const std::vector<TokenId>& toks = graph.node_token_ids[n];
      require(!toks.empty(), "encode: node has no surface tokens");
      const T inv = T(1) / static_cast<T>(toks.size());
      for (TokenId t : toks) {
        require(t >= 0 && static_cast<size_t>(t) < E.rows, "encode: node token id out of range");
        const T* src = E.row(static_cast<size_t>(t));
        for (size_t j = 0; j < d; ++j) dst[j] += src[j] * inv;
      }
    }
  }
  if (cache) cache->node0 = nodes;

  // --- relation-aware graph attention, shared weights across iterations ---
  std::vector<std::vector<uint32_t>> in_edges(N);
  for (size_t e = 0; e < graph.edges.size(); ++e)
    in_edges[graph.edges[e].dst].push_back(static_cast<uint32_t>(e));
  if (cache) {
    cache->in_edges = in_edges;
    cache->graph_iters.resize(cfg.graph_layers);
  }
  const TensorT<T>& wq = params.at("graph.wq");
  const TensorT<T>& wk = params.at("graph.wk");
  const TensorT<T>& wv = params.at("graph.wv");
  const TensorT<T>& wr = params.at("graph.wr");
  const TensorT<T>& avec = params.at("graph.attn_vec");
  const TensorT<T>& R = params.at("embed.relation");
  const size_t n_edges = graph.edges.size();

  for (size_t g = 0; g < cfg.graph_layers; ++g) {
    GraphIterCache<T>* gc = cache ? &cache->graph_iters[g] : nullptr;
    if (gc) gc->h_in = nodes;
    TensorT<T> q = kernels::matmul(nodes, wq);
    TensorT<T> k = kernels::matmul(nodes, wk);
    TensorT<T> v = kernels::matmul(nodes, wv);
    std::map<RelationId, TensorT<T>> rproj;
    for (const SubgraphEdge& e : graph.edges)
      if (!rproj.count(e.relation)) {
        TensorT<T> rrow(1, d);
        std::copy(R.row(e.relation), R.row(e.relation) + d, rrow.row(0));
        rproj.emplace(e.relation, kernels::matmul(rrow, wr));
      }
    std::vector<T> z(n_edges, T(0)), score(n_edges, T(0)), alpha(n_edges, T(0));
    for (size_t e = 0; e < n_edges; ++e) {
      const SubgraphEdge& ed = graph.edges[e];
      const T* qi = q.row(ed.dst);
      const T* kj = k.row(ed.src);
      const T* rp = rproj.at(ed.relation).row(0);
      T s = T(0);
      for (size_t j = 0; j < d; ++j) s += avec.data[j] * qi[j];
      for (size_t j = 0; j < d; ++j) s += avec.data[d + j] * kj[j];
      for (size_t j = 0; j < d; ++j) s += avec.data[2 * d + j] * rp[j];
      z[e] = s;
      score[e] = s > T(0) ? s : static_cast<T>(kLeakySlope) * s;
    }
    for (size_t n = 0; n < N; ++n) {
      const auto& inc = in_edges[n];
      if (inc.empty()) continue;
      T mx = -std::numeric_limits<T>::infinity();
      for (uint32_t e : inc) mx = std::max(mx, score[e]);
      T denom = T(0);
      for (uint32_t e : inc) denom += std::exp(score[e] - mx);
      for (uint32_t e : inc) alpha[e] = std::exp(score[e] - mx) / denom;
    }
    TensorT<T> u(N, d);
    for (size_t e = 0; e < n_edges; ++e) {
      const SubgraphEdge& ed = graph.edges[e];
      const T* vj = v.row(ed.src);
      const T* rp = rproj.at(ed.relation).row(0);
      T* un = u.row(ed.dst);
      const T a = alpha[e];
      for (size_t j = 0; j < d; ++j) un[j] += a * (vj[j] + rp[j]);
    }
    TensorT<T> h_prime = u;
    for (T& x2 : h_prime.data) x2 = x2 > T(0) ? x2 : T(0);
    TensorT<T> residual = nodes;
    accumulate(residual, h_prime);
    TensorT<T> ln_out;
    ln_forward(residual, params.at("graph.ln.gamma"), params.at("graph.ln.beta"), ln_out,
               gc ? &gc->ln : nullptr);
    if (gc) {
      gc->q = std::move(q);
      gc->k = std::move(k);
      gc->v = std::move(v);
      gc->rproj = std::move(rproj);
      gc->z = std::move(z);
      gc->alpha = std::move(alpha);
      gc->u = std::move(u);
      gc->h_prime = std::move(h_prime);
    }
    nodes = std::move(ln_out);
  }
  if (cache) cache->nodes_final = nodes;

  // --- gated fusion of concept-node states back into their token spans ---
  std::vector<int32_t> token_node(S, -1);
  for (size_t n = 0; n < N; ++n) {
    const TokenSpan& span = n < graph.spans.size() ? graph.spans[n] : TokenSpan{};
    if (span.empty() || static_cast<size_t>(span.end) >= S) continue;
    for (int32_t t = span.begin; t <= span.end; ++t) {
      require(token_node[static_cast<size_t>(t)] == -1, "fuse: overlapping concept spans");
      token_node[static_cast<size_t>(t)] = static_cast<int32_t>(n);
    }
  }
  const TensorT<T>& wg = params.at("graph.gate.w");
  TensorT<T> gates(S, d);
  TensorT<T> fused = enc_final;
  TensorT<T> cat(1, 2 * d);
  for (size_t p = 0; p < S; ++p) {
    if (token_node[p] < 0) continue;
    const T* hp = enc_final.row(p);
    const T* nk = nodes.row(static_cast<size_t>(token_node[p]));
    std::copy(hp, hp + d, cat.row(0));
    std::copy(nk, nk + d, cat.row(0) + d);
    TensorT<T> zrow = kernels::matmul(cat, wg);
    T* grow = gates.row(p);
    T* frow = fused.row(p);
    for (size_t j = 0; j < d; ++j) {
      T gv = T(1) / (T(1) + std::exp(-zrow.data[j]));
      grow[j] = gv;
      frow[j] = gv * hp[j] + (T(1) - gv) * nk[j];
    }
  }

  EncodeOut<T> out;
  out.memory = TensorT<T>(S + N, d);
  for (size_t i = 0; i < S; ++i)
    std::copy(fused.row(i), fused.row(i) + d, out.memory.row(i));
  for (size_t n = 0; n < N; ++n)
    std::copy(nodes.row(n), nodes.row(n) + d, out.memory.row(S + n));
  out.mem_key_ok.assign(S + N, 1);
  for (size_t j = 0; j < S; ++j) out.mem_key_ok[j] = key_ok[j];
  if (cache) {
    cache->token_node = std::move(token_node);
    cache->gates = std::move(gates);
    cache->fused = std::move(fused);
    cache->memory = out.memory;
    cache->mem_key_ok = out.mem_key_ok;
  }
  return out;
}

template <class T>
TensorT<T> decode_logits(const Parameters<T>& params, const EncodeOut<T>& enc,
                         const std::vector<TokenId>& dec_ids, const RunMode& mode,
                         detail::ForwardCache<T>* cache) {
  using namespace detail;
  const ModelConfig& cfg = params.config;
  require(!dec_ids.empty(), "decode: empty decoder input");
  require(dec_ids.size() <= cfg.max_len, "decode: decoder input longer than max_len");
  const size_t Td = dec_ids.size();
  const double rate = mode.training ? cfg.dropout : 0.0;
  uint64_t site = 1'000'000;  // decoder dropout sites live in their own range
  auto next_drop_seed = [&]() { return mix_seed(mode.dropout_seed, site++); };

  const TensorT<T>& E = params.at("embed.token");
  TensorT<T> x;
  embed_tokens(E, dec_ids, x);
  add_positional(x);
  if (cache) {
    cache->dec_ids = dec_ids;
    cache->dec_embed = x;
    cache->dec_layers.resize(cfg.dec_layers);
  }
  std::vector<uint8_t> self_mask = causal_mask(Td);
  std::vector<uint8_t> cross_mask = pad_key_mask(Td, enc.mem_key_ok);

  for (size_t l = 0; l < cfg.dec_layers; ++l) {
    const std::string p = "dec." + std::to_string(l);
    DecLayerCache<T>* lc = cache ? &cache->dec_layers[l] : nullptr;
    if (lc) lc->x_in = x;
    TensorT<T> ln1;
    ln_forward(x, params.at(p + ".ln1.gamma"), params.at(p + ".ln1.beta"), ln1,
               lc ? &lc->ln1 : nullptr);
    if (lc) lc->ln1_out = ln1;
    TensorT<T> self_out = mha_forward(ln1, ln1, params.at(p + ".self.wq"),
                                      params.at(p + ".self.wk"), params.at(p + ".self.wv"),
                                      params.at(p + ".self.wo"), cfg.n_heads, self_mask, rate,
                                      next_drop_seed(), lc ? &lc->self_attn : nullptr);
    accumulate(x, self_out);
    if (lc) lc->x_mid1 = x;
    TensorT<T> ln2;
    ln_forward(x, params.at(p + ".ln2.gamma"), params.at(p + ".ln2.beta"), ln2,
               lc ? &lc->ln2 : nullptr);
    if (lc) lc->ln2_out = ln2;
    TensorT<T> cross_out = mha_forward(ln2, enc.memory, params.at(p + ".cross.wq"),
                                       params.at(p + ".cross.wk"), params.at(p + ".cross.wv"),
                                       params.at(p + ".cross.wo"), cfg.n_heads, cross_mask, rate,
                                       next_drop_seed(), lc ? &lc->cross_attn : nullptr);
    accumulate(x, cross_out);
    if (lc) lc->x_mid2 = x;
    TensorT<T> ln3;
    ln_forward(x, params.at(p + ".ln3.gamma"), params.at(p + ".ln3.beta"), ln3,
               lc ? &lc->ln3 : nullptr);
    if (lc) lc->ln3_out = ln3;
    TensorT<T> f = ffn_forward(ln3, params.at(p + ".ffn.w1"), params.at(p + ".ffn.b1"),
                               params.at(p + ".ffn.w2"), params.at(p + ".ffn.b2"), rate,
                               next_drop_seed(), lc ? &lc->ffn : nullptr);
    accumulate(x, f);
  }
  TensorT<T> dec_final;
  ln_forward(x, params.at("dec.final_ln.gamma"), params.at("dec.final_ln.beta"), dec_final,
             cache ? &cache->dec_final_ln : nullptr);
  if (cache) cache->dec_final = dec_final;
  // tied output projection: logits = H E^T
  return kernels::matmul_nt(dec_final, E);
}

template <class T>
ForwardResult<T> forward(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                         const std::vector<TokenId>& dec_ids, const GraphInput& graph,
                         const RunMode& mode, bool keep_cache) {
  ForwardResult<T> res;
  std::shared_ptr<detail::ForwardCache<T>> cache;
  if (keep_cache) cache = std::make_shared<detail::ForwardCache<T>>();
  EncodeOut<T> enc = encode(params, input_ids, graph, mode, cache.get());
  res.logits = decode_logits(params, enc, dec_ids, mode, cache.get());
  res.cache = std::move(cache);
  return res;
}

template <class T>
T cross_entropy(const TensorT<T>& logits, const std::vector<TokenId>& gold,
                double label_smoothing) {
  require(logits.rows == gold.size(), "cross_entropy: logits/target length mismatch");
  require(label_smoothing >= 0.0 && label_smoothing < 1.0,
          "cross_entropy: label smoothing must be in [0, 1)");
  const size_t V = logits.cols;
  T total = T(0);
  size_t n = 0;
  std::vector<T> logp(V);
  for (size_t t = 0; t < gold.size(); ++t) {
    if (gold[t] == Vocabulary::kPad) continue;
    require(gold[t] >= 0 && static_cast<size_t>(gold[t]) < V,
            "cross_entropy: target id out of range");
    const T* row = logits.row(t);
    T mx = row[0];
    for (size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    T lse = T(0);
    for (size_t v = 0; v < V; ++v) lse += std::exp(row[v] - mx);
    lse = mx + std::log(lse);
    T sum_logp = T(0);
    for (size_t v = 0; v < V; ++v) {
      logp[v] = row[v] - lse;
      sum_logp += logp[v];
    }
    const T ls = static_cast<T>(label_smoothing);
    total += -(T(1) - ls) * logp[static_cast<size_t>(gold[t])] -
             ls / static_cast<T>(V) * sum_logp;
    ++n;
  }
  require(n > 0, "cross_entropy: every target position is PAD");
  return total / static_cast<T>(n);
}

template <class T>
ParamMap<T> zero_like(const Parameters<T>& params) {
  ParamMap<T> g;
  for (const auto& [name, t] : params.tensors) g.emplace(name, TensorT<T>(t.rows, t.cols));
  return g;
}

namespace detail {

// dlogits for the SUM of per-token losses (no 1/n scaling)
template <class T>
void ce_backward_sum(const TensorT<T>& logits, const std::vector<TokenId>& gold,
                     double label_smoothing, TensorT<T>& dlogits, T& loss_sum, size_t& n_tokens) {
  const size_t V = logits.cols;
  dlogits = TensorT<T>(logits.rows, V);
  loss_sum = T(0);
  n_tokens = 0;
  std::vector<T> p(V);
  const T ls = static_cast<T>(label_smoothing);
  for (size_t t = 0; t < gold.size(); ++t) {
    if (gold[t] == Vocabulary::kPad) continue;
    require(gold[t] >= 0 && static_cast<size_t>(gold[t]) < V,
            "cross_entropy: target id out of range");
    const T* row = logits.row(t);
    T mx = row[0];
    for (size_t v = 1; v < V; ++v) mx = std::max(mx, row[v]);
    T denom = T(0);
    for (size_t v = 0; v < V; ++v) denom += std::exp(row[v] - mx);
    const T lse = mx + std::log(denom);
    T* drow = dlogits.row(t);
    T sum_logp = T(0);
    for (size_t v = 0; v < V; ++v) {
      T logp = row[v] - lse;
      sum_logp += logp;
      p[v] = std::exp(logp);
      drow[v] = p[v] - ls / static_cast<T>(V);  // p - q, uniform part
    }
    drow[static_cast<size_t>(gold[t])] -= (T(1) - ls);
    loss_sum += -(T(1) - ls) * (row[static_cast<size_t>(gold[t])] - lse) -
                ls / static_cast<T>(V) * sum_logp;
    ++n_tokens;
  }
  require(n_tokens > 0, "cross_entropy: every target position is PAD");
}

template <class T>
void scatter_embedding_grad(TensorT<T>& dE, const std::vector<TokenId>& ids,
                            const TensorT<T>& dx) {
  for (size_t i = 0; i < ids.size(); ++i) {
    T* dst = dE.row(static_cast<size_t>(ids[i]));
    const T* src = dx.row(i);
    for (size_t j = 0; j < dE.cols; ++j) dst[j] += src[j];
  }
}

}  // namespace detail

template <class T>
LossGrads<T> loss_and_gradients(const Parameters<T>& params, const std::vector<TokenId>& input_ids,
                                const std::vector<TokenId>& dec_ids,
                                const std::vector<TokenId>& gold, const GraphInput& graph,
                                double label_smoothing, const RunMode& mode) {
  using namespace detail;
  const ModelConfig& cfg = params.config;
  require(dec_ids.size() == gold.size(), "loss: decoder input and target lengths differ");
  ForwardResult<T> fwd = forward(params, input_ids, dec_ids, graph, mode, /*keep_cache=*/true);
  ForwardCache<T>& c = *fwd.cache;
  const size_t S = input_ids.size(), Td = dec_ids.size(), d = cfg.d_model;
  const size_t N = graph.n_nodes;
  const double rate = mode.training ? cfg.dropout : 0.0;

  LossGrads<T> out;
  out.grads = zero_like(params);
  TensorT<T> dlogits;
  ce_backward_sum(fwd.logits, gold, label_smoothing, dlogits, out.loss_sum, out.n_tokens);

  TensorT<T>& dE = out.grads.at("embed.token");
  const TensorT<T>& E = params.at("embed.token");

  // logits = dec_final E^T
  TensorT<T> dx = kernels::matmul(dlogits, E);              // Td x d
  accumulate(dE, kernels::matmul_tn(dlogits, c.dec_final));  // V x d

  // decoder final layernorm
  TensorT<T> dx_pre(Td, d);
  ln_backward(c.dec_final_ln, params.at("dec.final_ln.gamma"), dx, dx_pre,
              out.grads.at("dec.final_ln.gamma"), out.grads.at("dec.final_ln.beta"));
  dx = std::move(dx_pre);

  TensorT<T> dmemory(S + N, d);
  for (size_t l = cfg.dec_layers; l-- > 0;) {
    const std::string p = "dec." + std::to_string(l);
    DecLayerCache<T>& lc = c.dec_layers[l];
    // ffn residual: x_out = x_mid2 + ffn(ln3(x_mid2))
    TensorT<T> dln3(Td, d);
    ffn_backward(lc.ffn, params.at(p + ".ffn.w1"), params.at(p + ".ffn.w2"), rate, dx, dln3,
                 out.grads.at(p + ".ffn.w1"), out.grads.at(p + ".ffn.b1"),
                 out.grads.at(p + ".ffn.w2"), out.grads.at(p + ".ffn.b2"));
    ln_backward(lc.ln3, params.at(p + ".ln3.gamma"), dln3, dx, out.grads.at(p + ".ln3.gamma"),
                out.grads.at(p + ".ln3.beta"));
    // cross attention residual
    TensorT<T> dln2(Td, d);
    mha_backward(lc.cross_attn, lc.ln2_out, c.memory, params.at(p + ".cross.wq"),
                 params.at(p + ".cross.wk"), params.at(p + ".cross.wv"),
                 params.at(p + ".cross.wo"), cfg.n_heads, rate, dx, dln2, dmemory,
                 out.grads.at(p + ".cross.wq"), out.grads.at(p + ".cross.wk"),
                 out.grads.at(p + ".cross.wv"), out.grads.at(p + ".cross.wo"));
    ln_backward(lc.ln2, params.at(p + ".ln2.gamma"), dln2, dx, out.grads.at(p + ".ln2.gamma"),
                out.grads.at(p + ".ln2.beta"));
    // self attention residual
    TensorT<T> dln1(Td, d);
    mha_backward(lc.self_attn, lc.ln1_out, lc.ln1_out, params.at(p + ".self.wq"),
                 params.at(p + ".self.wk"), params.at(p + ".self.wv"), params.at(p + ".self.wo"),
                 cfg.n_heads, rate, dx, dln1, dln1, out.grads.at(p + ".self.wq"),
                 out.grads.at(p + ".self.wk"), out.grads.at(p + ".self.wv"),
                 out.grads.at(p + ".self.wo"));
    ln_backward(lc.ln1, params.at(p + ".ln1.gamma"), dln1, dx, out.grads.at(p + ".ln1.gamma"),
                out.grads.at(p + ".ln1.beta"));
  }
  scatter_embedding_grad(dE, dec_ids, dx);

  // split memory gradient into fused-token and node parts
  TensorT<T> dfused(S, d), dnodes(N, d);
  for (size_t i = 0; i < S; ++i)
    std::copy(dmemory.row(i), dmemory.row(i) + d, dfused.row(i));
  for (size_t n = 0; n < N; ++n)
    std::copy(dmemory.row(S + n), dmemory.row(S + n) + d, dnodes.row(n));

  // fusion backward
  TensorT<T> denc_final(S, d);
  {
    const TensorT<T>& wg = params.at("graph.gate.w");
    TensorT<T>& dwg = out.grads.at("graph.gate.w");
    TensorT<T> cat(1, 2 * d), dz(1, d);
    for (size_t p = 0; p < S; ++p) {
      const T* df = dfused.row(p);
      if (c.token_node[p] < 0) {
        T* de = denc_final.row(p);
        for (size_t j = 0; j < d; ++j) de[j] += df[j];
        continue;
      }
      const size_t k = static_cast<size_t>(c.token_node[p]);
      const T* hp = c.enc_final.row(p);
      const T* nk = c.nodes_final.row(k);
      const T* g = c.gates.row(p);
      T* de = denc_final.row(p);
      T* dn = dnodes.row(k);
      std::copy(hp, hp + d, cat.row(0));
      std::copy(nk, nk + d, cat.row(0) + d);
      for (size_t j = 0; j < d; ++j) {
        T dg = df[j] * (hp[j] - nk[j]);
        dz.data[j] = dg * g[j] * (T(1) - g[j]);
        de[j] += df[j] * g[j];
        dn[j] += df[j] * (T(1) - g[j]);
      }
      accumulate(dwg, kernels::matmul_tn(cat, dz));
      TensorT<T> dcat = kernels::matmul_nt(dz, wg);
      for (size_t j = 0; j < d; ++j) {
        de[j] += dcat.data[j];
        dn[j] += dcat.data[d + j];
      }
    }
  }

  // graph attention backward, iterations reversed, shared weights accumulate
  {
    const TensorT<T>& wq = params.at("graph.wq");
    const TensorT<T>& wk = params.at("graph.wk");
    const TensorT<T>& wv = params.at("graph.wv");
    const TensorT<T>& wr = params.at("graph.wr");
    const TensorT<T>& avec = params.at("graph.attn_vec");
    TensorT<T>& dwq = out.grads.at("graph.wq");
    TensorT<T>& dwk = out.grads.at("graph.wk");
    TensorT<T>& dwv = out.grads.at("graph.wv");
    TensorT<T>& dwr = out.grads.at("graph.wr");
    TensorT<T>& davec = out.grads.at("graph.attn_vec");
    TensorT<T>& dR = out.grads.at("embed.relation");
    const TensorT<T>& R = params.at("embed.relation");
    const size_t n_edges = c.graph.edges.size();

    for (size_t g = cfg.graph_layers; g-- > 0;) {
      GraphIterCache<T>& gc = c.graph_iters[g];
      TensorT<T> dresidual(N, d);
      ln_backward(gc.ln, params.at("graph.ln.gamma"), dnodes, dresidual,
                  out.grads.at("graph.ln.gamma"), out.grads.at("graph.ln.beta"));
      TensorT<T> dh_in = dresidual;  // residual: h + h'
      TensorT<T> du = dresidual;
      for (size_t i = 0; i < du.data.size(); ++i)
        if (gc.u.data[i] <= T(0)) du.data[i] = T(0);  // relu'

      std::vector<T> dalpha(n_edges, T(0));
      TensorT<T> dq(N, d), dk(N, d), dv(N, d);
      std::map<RelationId, TensorT<T>> drproj;
      for (const auto& [rid, t] : gc.rproj) drproj.emplace(rid, TensorT<T>(1, d));
      // message path
      for (size_t e = 0; e < n_edges; ++e) {
        const SubgraphEdge& ed = c.graph.edges[e];
        const T* dun = du.row(ed.dst);
        const T* vj = gc.v.row(ed.src);
        const T* rp = gc.rproj.at(ed.relation).row(0);
        T* dvj = dv.row(ed.src);
        T* drp = drproj.at(ed.relation).row(0);
        const T a = gc.alpha[e];
        T acc = T(0);
        for (size_t j = 0; j < d; ++j) {
          acc += dun[j] * (vj[j] + rp[j]);
          dvj[j] += a * dun[j];
          drp[j] += a * dun[j];
        }
        dalpha[e] = acc;
      }
      // softmax over incoming edges, then leaky relu, then the score concat
      for (size_t n = 0; n < N; ++n) {
        const auto& inc = c.in_edges[n];
        if (inc.empty()) continue;
        T dot = T(0);
        for (uint32_t e : inc) dot += gc.alpha[e] * dalpha[e];
        for (uint32_t e : inc) {
          T ds = gc.alpha[e] * (dalpha[e] - dot);
          T dz = ds * (gc.z[e] > T(0) ? T(1) : static_cast<T>(kLeakySlope));
          if (dz == T(0)) continue;
          const SubgraphEdge& ed = c.graph.edges[e];
          const T* qi = gc.q.row(ed.dst);
          const T* kj = gc.k.row(ed.src);
          const T* rp = gc.rproj.at(ed.relation).row(0);
          T* dqi = dq.row(ed.dst);
          T* dkj = dk.row(ed.src);
          T* drp = drproj.at(ed.relation).row(0);
          for (size_t j = 0; j < d; ++j) {
            davec.data[j] += dz * qi[j];
            davec.data[d + j] += dz * kj[j];
            davec.data[2 * d + j] += dz * rp[j];
            dqi[j] += dz * avec.data[j];
            dkj[j] += dz * avec.data[d + j];
            drp[j] += dz * avec.data[2 * d + j];
          }
        }
      }
      // projections back to node states and relation rows
      accumulate(dwq, kernels::matmul_tn(gc.h_in, dq));
      accumulate(dwk, kernels::matmul_tn(gc.h_in, dk));
      accumulate(dwv, kernels::matmul_tn(gc.h_in, dv));
      accumulate(dh_in, kernels::matmul_nt(dq, wq));
      accumulate(dh_in, kernels::matmul_nt(dk, wk));
      accumulate(dh_in, kernels::matmul_nt(dv, wv));
      for (auto& [rid, drp] : drproj) {
        TensorT<T> rrow(1, d);
        std::copy(R.row(rid), R.row(rid) + d, rrow.row(0));
        accumulate(dwr, kernels::matmul_tn(rrow, drp));
        TensorT<T> drrow = kernels::matmul_nt(drp, wr);
        T* dst = dR.row(rid);
        for (size_t j = 0; j < d; ++j) dst[j] += drrow.data[j];
      }
      dnodes = std::move(dh_in);
    }
  }

  // node init backward
  for (size_t n = 0; n < N; ++n) {
    const TokenSpan& span = n < c.graph.spans.size() ? c.graph.spans[n] : TokenSpan{};
    const T* dn = dnodes.row(n);
    if (!span.empty() && static_cast<size_t>(span.end) < S) {
      const T inv = T(1) / static_cast<T>(span.length());
      for (int32_t t = span.begin; t <= span.end; ++t) {
        T* dst = denc_final.row(static_cast<size_t>(t));
        for (size_t j = 0; j < d; ++j) dst[j] += dn[j] * inv;
      }
    } else {
      const std::vector<TokenId>& toks = c.graph.node_token_ids[n];
      const T inv = T(1) / static_cast<T>(toks.size());
      for (TokenId t : toks) {
        T* dst = dE.row(static_cast<size_t>(t));
        for (size_t j = 0; j < d; ++j) dst[j] += dn[j] * inv;
      }
    }
  }

  // encoder final layernorm, then the stack in reverse
  TensorT<T> dxe(S, d);
  ln_backward(c.enc_final_ln, params.at("enc.final_ln.gamma"), denc_final, dxe,
              out.grads.at("enc.final_ln.gamma"), out.grads.at("enc.final_ln.beta"));
  for (size_t l = cfg.enc_layers; l-- > 0;) {
    const std::string p = "enc." + std::to_string(l);
    EncLayerCache<T>& lc = c.enc_layers[l];
    TensorT<T> dln2(S, d);
    ffn_backward(lc.ffn, params.at(p + ".ffn.w1"), params.at(p + ".ffn.w2"), rate, dxe, dln2,
                 out.grads.at(p + ".ffn.w1"), out.grads.at(p + ".ffn.b1"),
                 out.grads.at(p + ".ffn.w2"), out.grads.at(p + ".ffn.b2"));
    ln_backward(lc.ln2, params.at(p + ".ln2.gamma"), dln2, dxe, out.grads.at(p + ".ln2.gamma"),
                out.grads.at(p + ".ln2.beta"));
    TensorT<T> dln1(S, d);
    mha_backward(lc.attn, lc.ln1_out, lc.ln1_out, params.at(p + ".attn.wq"),
                 params.at(p + ".attn.wk"), params.at(p + ".attn.wv"), params.at(p + ".attn.wo"),
                 cfg.n_heads, rate, dxe, dln1, dln1, out.grads.at(p + ".attn.wq"),
                 out.grads.at(p + ".attn.wk"), out.grads.at(p + ".attn.wv"),
                 out.grads.at(p + ".attn.wo"));
    ln_backward(lc.ln1, params.at(p + ".ln1.gamma"), dln1, dxe, out.grads.at(p + ".ln1.gamma"),
                out.grads.at(p + ".ln1.beta"));
  }
  scatter_embedding_grad(dE, input_ids, dxe);

  return out;
}

}  // namespace kgcg
