#pragma once

#include <string>
#include <vector>

#include "kgcg/model.hpp"
#include "kgcg/training.hpp"

// Checkpoint container: "KGCG" magic, u32 LE version, u64 LE header length,
// JSON header (model config + tensor manifest with shapes and payload
// offsets), then all tensor payloads as little-endian f32 in manifest order.
// Optimizer state rides in a sidecar file <ckpt>.optstate using the same
// container layout.

namespace kgcg {

inline constexpr uint32_t kCheckpointVersion = 1;

// vocab_tokens (the full token list, specials first) travels in the header so
// generation and evaluation need nothing beyond the checkpoint file
void save_checkpoint(const Parameters<float>& params, const std::string& path,
                     const std::vector<std::string>& vocab_tokens = {});
Parameters<float> load_checkpoint(const std::string& path,
                                  std::vector<std::string>* vocab_tokens = nullptr);

inline std::string opt_state_path(const std::string& ckpt_path) { return ckpt_path + ".optstate"; }

void save_opt_state(const AdamState<float>& state, const ModelConfig& cfg,
                    const std::string& path);
AdamState<float> load_opt_state(const std::string& path, const ModelConfig& cfg);

// precision bridges for the --f64 path
template <class T>
Parameters<float> to_f32(const Parameters<T>& p) {
  Parameters<float> out;
  out.config = p.config;
  for (const auto& [name, t] : p.tensors) {
    TensorT<float> ft(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) ft.data[i] = static_cast<float>(t.data[i]);
    out.tensors.emplace(name, std::move(ft));
  }
  return out;
}

template <class T>
Parameters<T> from_f32(const Parameters<float>& p) {
  Parameters<T> out;
  out.config = p.config;
  for (const auto& [name, t] : p.tensors) {
    TensorT<T> tt(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) tt.data[i] = static_cast<T>(t.data[i]);
    out.tensors.emplace(name, std::move(tt));
  }
  return out;
}

template <class T>
AdamState<float> adam_to_f32(const AdamState<T>& s) {
  AdamState<float> out;
  out.t = s.t;
  for (const auto& [name, t] : s.m) {
    TensorT<float> ft(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) ft.data[i] = static_cast<float>(t.data[i]);
    out.m.emplace(name, std::move(ft));
  }
  for (const auto& [name, t] : s.v) {
    TensorT<float> ft(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) ft.data[i] = static_cast<float>(t.data[i]);
    out.v.emplace(name, std::move(ft));
  }
  return out;
}

template <class T>
AdamState<T> adam_from_f32(const AdamState<float>& s) {
  AdamState<T> out;
  out.t = s.t;
  for (const auto& [name, t] : s.m) {
    TensorT<T> tt(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) tt.data[i] = static_cast<T>(t.data[i]);
    out.m.emplace(name, std::move(tt));
  }
  for (const auto& [name, t] : s.v) {
    TensorT<T> tt(t.rows, t.cols);
    for (size_t i = 0; i < t.data.size(); ++i) tt.data[i] = static_cast<T>(t.data[i]);
    out.v.emplace(name, std::move(tt));
  }
  return out;
}

// JSON bridges shared by checkpoints and the CLI config
std::string model_config_to_json_string(const ModelConfig& cfg);
ModelConfig model_config_from_json_string(const std::string& text);

}  // namespace kgcg
