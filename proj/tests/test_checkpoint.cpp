#include <doctest.h>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kgcg/checkpoint.hpp"
#include "kgcg/error.hpp"

using namespace kgcg;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_ff = 16;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.graph_layers = 1;
  cfg.max_len = 8;
  cfg.vocab_size = 6;
  cfg.n_relations = 2;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// re-serialize the JSON header after mutating it, fixing up the length field
std::string with_header(const std::string& bytes,
                        const std::function<void(nlohmann::json&)>& mutate) {
  uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  nlohmann::json header = nlohmann::json::parse(bytes.substr(16, len));
  mutate(header);
  const std::string text = header.dump();
  std::string out = bytes.substr(0, 8);
  uint64_t new_len = text.size();
  out.append(reinterpret_cast<const char*>(&new_len), 8);
  out += text;
  out += bytes.substr(16 + len);
  return out;
}

template <class T>
bool params_equal(const Parameters<T>& a, const Parameters<T>& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !t.same_shape(it->second)) return false;
    if (std::memcmp(t.data.data(), it->second.data.data(), t.size() * sizeof(T)) != 0)
      return false;
  }
  return true;
}

struct TempPath {
  std::string path;
  explicit TempPath(const std::string& name) : path("kgcg_test_" + name) {}
  ~TempPath() {
    std::remove(path.c_str());
    std::remove(opt_state_path(path).c_str());
  }
};

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("save and load round trip bit for bit") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 21);
  TempPath tp("roundtrip.ckpt");
  save_checkpoint(params, tp.path);

  Parameters<float> loaded = load_checkpoint(tp.path);
  CHECK(params_equal(params, loaded));
  CHECK(loaded.config.d_model == cfg.d_model);
  CHECK(loaded.config.vocab_size == cfg.vocab_size);
  CHECK(loaded.config.n_relations == cfg.n_relations);
  CHECK(loaded.config.dropout == cfg.dropout);

  // saving the loaded parameters again reproduces the same file
  TempPath tp2("roundtrip2.ckpt");
  save_checkpoint(loaded, tp2.path);
  CHECK(read_file(tp.path) == read_file(tp2.path));
}

TEST_CASE("vocabulary rides in the checkpoint header") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 22);
  std::vector<std::string> vocab{"<pad>", "<bos>", "<eos>", "<unk>", "<sep>", "cat"};
  TempPath tp("vocab.ckpt");
  save_checkpoint(params, tp.path, vocab);

  std::vector<std::string> out;
  load_checkpoint(tp.path, &out);
  CHECK(out == vocab);

  // absent vocabulary loads as an empty list
  TempPath bare("novocab.ckpt");
  save_checkpoint(params, bare.path);
  out = {"stale"};
  load_checkpoint(bare.path, &out);
  CHECK(out.empty());

  std::vector<std::string> wrong_size{"<pad>", "<bos>"};
  CHECK_THROWS_WITH_AS(save_checkpoint(params, tp.path, wrong_size),
                       doctest::Contains("vocabulary size"), Error);
}

TEST_CASE("corrupt containers are rejected with specific errors") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 23);
  TempPath tp("corrupt.ckpt");
  save_checkpoint(params, tp.path);
  const std::string good = read_file(tp.path);

  CHECK_THROWS_WITH_AS(load_checkpoint("kgcg_test_missing.ckpt"),
                       doctest::Contains("cannot open"), Error);

  std::string bad = good;
  bad[0] = 'X';
  write_file(tp.path, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path), doctest::Contains("bad magic"), Error);

  bad = good;
  bad[4] = 9;
  write_file(tp.path, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("unsupported checkpoint version 9"), Error);

  bad = good;
  uint64_t huge = good.size();  // header claims to run past the end of the file
  std::memcpy(bad.data() + 8, &huge, 8);
  write_file(tp.path, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("truncated checkpoint header"), Error);

  bad = good;
  bad[16] = '!';  // first header byte, no longer valid JSON
  write_file(tp.path, bad);
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("corrupt checkpoint header"), Error);

  write_file(tp.path, with_header(good, [](nlohmann::json& h) {
               auto it = h.at("tensors").begin();
               (*it)["offset"] = it->at("offset").get<uint64_t>() + 4;
             }));
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("offset disagrees"), Error);

  write_file(tp.path, good.substr(0, good.size() - 4));
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("truncated checkpoint payload"), Error);

  write_file(tp.path, good + std::string(4, '\0'));
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("trailing bytes"), Error);

  // a config the manifest shapes no longer satisfy
  write_file(tp.path, with_header(good, [](nlohmann::json& h) {
               h.at("model")["d_ff"] = 32;
             }));
  CHECK_THROWS_WITH_AS(load_checkpoint(tp.path),
                       doctest::Contains("shape disagrees with config"), Error);
}

TEST_CASE("optimizer state round trips through the sidecar") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 24);
  AdamState<float> state = make_adam_state(params);
  state.t = 37;
  float fill = 0.25f;
  for (auto& [name, t] : state.m)
    for (float& v : t.data) v = (fill += 0.125f);
  for (auto& [name, t] : state.v)
    for (float& v : t.data) v = (fill += 0.0625f);

  TempPath tp("adam.ckpt");
  const std::string side = opt_state_path(tp.path);
  CHECK(side == tp.path + ".optstate");
  save_opt_state(state, cfg, side);

  AdamState<float> loaded = load_opt_state(side, cfg);
  CHECK(loaded.t == 37);
  for (const auto& [name, t] : state.m)
    CHECK(std::memcmp(t.data.data(), loaded.m.at(name).data.data(),
                      t.size() * sizeof(float)) == 0);
  for (const auto& [name, t] : state.v)
    CHECK(std::memcmp(t.data.data(), loaded.v.at(name).data.data(),
                      t.size() * sizeof(float)) == 0);
}

TEST_CASE("optimizer state files are validated") {
  ModelConfig cfg = tiny_config();
  Parameters<float> params = init_params<float>(cfg, 25);

  // a plain model checkpoint is not an optimizer state: no step counter
  TempPath model_file("notopt.ckpt");
  save_checkpoint(params, model_file.path);
  CHECK_THROWS_WITH_AS(load_opt_state(model_file.path, cfg),
                       doctest::Contains("step counter"), Error);

  // moments missing for one tensor
  AdamState<float> partial = make_adam_state(params);
  partial.m.erase("embed.token");
  TempPath tp("partial.ckpt");
  save_opt_state(partial, cfg, tp.path);
  CHECK_THROWS_WITH_AS(load_opt_state(tp.path, cfg),
                       doctest::Contains("missing moments"), Error);
}

TEST_CASE("precision bridges preserve values") {
  ModelConfig cfg = tiny_config();
  Parameters<double> p64 = init_params<double>(cfg, 26);
  Parameters<float> p32 = to_f32(p64);
  Parameters<double> back = from_f32<double>(p32);
  for (const auto& [name, t] : p64.tensors) {
    const TensorT<double>& b = back.tensors.at(name);
    REQUIRE(t.same_shape(b));
    for (size_t i = 0; i < t.data.size(); ++i) {
      // one float round trip: double -> float -> double
      CHECK(b.data[i] == static_cast<double>(static_cast<float>(t.data[i])));
    }
  }

  AdamState<double> s64 = make_adam_state(p64);
  s64.t = 5;
  s64.m.at("embed.token").at(0, 0) = 0.75;
  s64.v.at("embed.token").at(0, 0) = 0.5;
  AdamState<float> s32 = adam_to_f32(s64);
  AdamState<double> s_back = adam_from_f32<double>(s32);
  CHECK(s_back.t == 5);
  CHECK(s_back.m.at("embed.token").at(0, 0) == 0.75);
  CHECK(s_back.v.at("embed.token").at(0, 0) == 0.5);
}

TEST_CASE("model config JSON bridge") {
  ModelConfig cfg = tiny_config();
  cfg.dropout = 0.25;
  ModelConfig back = model_config_from_json_string(model_config_to_json_string(cfg));
  CHECK(back.d_model == cfg.d_model);
  CHECK(back.n_heads == cfg.n_heads);
  CHECK(back.d_ff == cfg.d_ff);
  CHECK(back.enc_layers == cfg.enc_layers);
  CHECK(back.dec_layers == cfg.dec_layers);
  CHECK(back.graph_layers == cfg.graph_layers);
  CHECK(back.max_len == cfg.max_len);
  CHECK(back.vocab_size == cfg.vocab_size);
  CHECK(back.n_relations == cfg.n_relations);
  CHECK(back.dropout == cfg.dropout);

  CHECK_THROWS_WITH_AS(model_config_from_json_string("{\"d_modle\": 8}"),
                       doctest::Contains("unknown key"), Error);
  CHECK_THROWS_WITH_AS(model_config_from_json_string("{nope"),
                       doctest::Contains("invalid JSON"), Error);
}

}  // TEST_SUITE
