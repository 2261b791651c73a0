#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "kgcg/data.hpp"
#include "kgcg/error.hpp"
#include "kgcg/model.hpp"
#include "kgcg/rng.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace kgcg {

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  size_t batch_size = 8;
  size_t max_steps = 1000;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  double label_smoothing = 0.0;
  uint64_t seed = 0;
  size_t eval_every = 100;

  void validate() const {
    require(learning_rate > 0.0, "train config: learning_rate must be positive");
    require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
            "train config: betas must be in [0, 1)");
    require(epsilon > 0.0, "train config: epsilon must be positive");
    require(batch_size >= 1, "train config: batch_size must be positive");
    require(label_smoothing >= 0.0 && label_smoothing < 1.0,
            "train config: label_smoothing must be in [0, 1)");
    require(eval_every >= 1, "train config: eval_every must be positive");
  }
};

struct GroundingConfig {
  size_t node_budget = 8;
  size_t fanout = 2;

  void validate() const {
    require(node_budget >= 1, "grounding config: node_budget must be positive");
  }
};

template <class T>
struct AdamState {
  ParamMap<T> m, v;
  uint64_t t = 0;
};

template <class T>
AdamState<T> make_adam_state(const Parameters<T>& params) {
  AdamState<T> s;
  s.m = zero_like(params);
  s.v = zero_like(params);
  return s;
}

template <class T>
double global_grad_norm(const ParamMap<T>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

// rescales in place so the global norm is at most max_norm
template <class T>
double clip_global_norm(ParamMap<T>& grads, double max_norm) {
  double norm = global_grad_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads)
      for (T& v : g.data) v = static_cast<T>(static_cast<double>(v) * scale);
  }
  return norm;
}

// one update with bias correction; arithmetic runs in double and rounds
// back to T, so float and double trainings share the same update rule
template <class T>
void adam_step(Parameters<T>& params, const ParamMap<T>& grads, AdamState<T>& state,
               const TrainConfig& cfg) {
  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, theta] : params.tensors) {
    auto git = grads.find(name);
    require(git != grads.end(), "adam: gradient missing for tensor " + name);
    const TensorT<T>& g = git->second;
    require(g.same_shape(theta), "adam: gradient shape mismatch for tensor " + name);
    TensorT<T>& m = state.m.at(name);
    TensorT<T>& v = state.v.at(name);
    for (size_t i = 0; i < theta.data.size(); ++i) {
      const double gi = static_cast<double>(g.data[i]);
      const double mi = cfg.beta1 * static_cast<double>(m.data[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v.data[i]) + (1.0 - cfg.beta2) * gi * gi;
      m.data[i] = static_cast<T>(mi);
      v.data[i] = static_cast<T>(vi);
      const double update = cfg.learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon);
      theta.data[i] = static_cast<T>(static_cast<double>(theta.data[i]) - update);
    }
  }
}

// teacher forcing split: decoder sees target[:-1], predicts target[1:]
inline std::pair<std::vector<TokenId>, std::vector<TokenId>> teacher_pair(
    const std::vector<TokenId>& target) {
  require(target.size() >= 2, "teacher_pair: target must hold BOS plus at least one token");
  std::vector<TokenId> dec(target.begin(), target.end() - 1);
  std::vector<TokenId> gold(target.begin() + 1, target.end());
  return {std::move(dec), std::move(gold)};
}

struct TrainItem {
  EncodedExample enc;
  GraphInput graph;
};

// corpus -> vocabulary + grounded, encoded training items
struct PreparedData {
  Vocabulary vocab;
  std::vector<TrainItem> items;
  size_t n_relations = 1;
};

PreparedData prepare_data(const Corpus& corpus, const KnowledgeGraph& graph,
                          const GroundingConfig& gcfg, size_t max_len, bool strip_graph = false,
                          const Vocabulary* fixed_vocab = nullptr);

template <class T>
struct TrainResult {
  Parameters<T> params;
  AdamState<T> adam;
  std::vector<double> loss_trace;  // token-mean loss per executed step
};

// Deterministic training: epoch orders, dropout masks and init depend only
// on the configs and seed. Resuming with (params, adam, start_step) from a
// checkpoint replays the remaining steps exactly. Batch members run in
// parallel; gradients reduce in slot order, so results do not depend on the
// thread count.
template <class T>
TrainResult<T> train_loop(const std::vector<TrainItem>& items, const ModelConfig& mcfg,
                          const TrainConfig& tcfg, const Parameters<T>* init_override = nullptr,
                          const AdamState<T>* adam_override = nullptr, uint64_t start_step = 0,
                          bool parallel = true) {
  mcfg.validate();
  tcfg.validate();
  require(!items.empty(), "train: no training items");
  require((init_override == nullptr) == (adam_override == nullptr),
          "train: resume needs both parameters and optimizer state");
  require(start_step <= tcfg.max_steps, "train: start step beyond max_steps");

  TrainResult<T> res;
  res.params = init_override ? *init_override : init_params<T>(mcfg, tcfg.seed);
  res.adam = adam_override ? *adam_override : make_adam_state(res.params);
  require(res.adam.t == start_step, "train: optimizer step count does not match start step");

  const size_t n = items.size();
  std::vector<size_t> order(n);
  size_t epoch = 0, pos = 0;
  auto reshuffle = [&] {
    for (size_t i = 0; i < n; ++i) order[i] = i;
    Rng r(mix_seed(tcfg.seed, fnv1a("epoch_order"), epoch));
    shuffle(order, r);
  };
  reshuffle();

  double window_loss = 0.0;
  size_t window_n = 0;
  for (uint64_t step = 0; step < tcfg.max_steps; ++step) {
    const size_t take = std::min(static_cast<size_t>(tcfg.batch_size), n - pos);
    if (step >= start_step) {
      std::vector<LossGrads<T>> slots(take);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel && take > 1)
#endif
      for (long long s = 0; s < static_cast<long long>(take); ++s) {
        const TrainItem& item = items[order[pos + static_cast<size_t>(s)]];
        auto [dec, gold] = teacher_pair(item.enc.target_ids);
        RunMode mode;
        mode.training = true;
        mode.dropout_seed = mix_seed(tcfg.seed, fnv1a("dropout"),
                                     step * tcfg.batch_size + static_cast<uint64_t>(s));
        slots[static_cast<size_t>(s)] =
            loss_and_gradients(res.params, item.enc.input_ids, dec, gold, item.graph,
                               tcfg.label_smoothing, mode);
      }
      // reduce in slot order: bitwise identical no matter the thread count
      ParamMap<T> grads = std::move(slots[0].grads);
      T loss_sum = slots[0].loss_sum;
      size_t tokens = slots[0].n_tokens;
      for (size_t s = 1; s < take; ++s) {
        for (auto& [name, g] : grads) accumulate(g, slots[s].grads.at(name));
        loss_sum += slots[s].loss_sum;
        tokens += slots[s].n_tokens;
      }
      const T inv = T(1) / static_cast<T>(tokens);
      for (auto& [name, g] : grads)
        for (T& v : g.data) v *= inv;
      clip_global_norm(grads, tcfg.grad_clip_norm);
      adam_step(res.params, grads, res.adam, tcfg);
      const double step_loss = static_cast<double>(loss_sum) / static_cast<double>(tokens);
      res.loss_trace.push_back(step_loss);
      window_loss += step_loss;
      ++window_n;
      if ((step + 1) % tcfg.eval_every == 0) {
        log_info("step " + std::to_string(step + 1) + "/" + std::to_string(tcfg.max_steps) +
                 " loss " + std::to_string(window_loss / static_cast<double>(window_n)));
        window_loss = 0.0;
        window_n = 0;
      }
    }
    pos += take;
    if (pos >= n) {
      pos = 0;
      ++epoch;
      reshuffle();
    }
  }
  return res;
}

// Finite-difference check of the full backward pass against the mean
// cross entropy of a fixed synthetic example. Always runs in double.
struct GradCheckReport {
  double max_rel_err = 0.0;
  size_t n_checked = 0;
  std::string worst_tensor;
};

GradCheckReport grad_check(const ModelConfig& cfg, uint64_t seed, double fd_step,
                           double label_smoothing = 0.1, size_t sample_cap = 512);

}  // namespace kgcg
