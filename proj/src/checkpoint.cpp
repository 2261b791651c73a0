#include "kgcg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace kgcg {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'K', 'G', 'C', 'G'};

json model_config_to_json(const ModelConfig& cfg) {
  return json{{"d_model", cfg.d_model},         {"n_heads", cfg.n_heads},
              {"d_ff", cfg.d_ff},               {"enc_layers", cfg.enc_layers},
              {"dec_layers", cfg.dec_layers},   {"graph_layers", cfg.graph_layers},
              {"max_len", cfg.max_len},         {"vocab_size", cfg.vocab_size},
              {"n_relations", cfg.n_relations}, {"dropout", cfg.dropout}};
}

ModelConfig model_config_from_json(const json& j) {
  require(j.is_object(), "model config: expected a JSON object");
  ModelConfig cfg;
  for (const auto& [key, value] : j.items()) {
    if (key == "d_model") cfg.d_model = value.get<size_t>();
    else if (key == "n_heads") cfg.n_heads = value.get<size_t>();
    else if (key == "d_ff") cfg.d_ff = value.get<size_t>();
    else if (key == "enc_layers") cfg.enc_layers = value.get<size_t>();
    else if (key == "dec_layers") cfg.dec_layers = value.get<size_t>();
    else if (key == "graph_layers") cfg.graph_layers = value.get<size_t>();
    else if (key == "max_len") cfg.max_len = value.get<size_t>();
    else if (key == "vocab_size") cfg.vocab_size = value.get<size_t>();
    else if (key == "n_relations") cfg.n_relations = value.get<size_t>();
    else if (key == "dropout") cfg.dropout = value.get<double>();
    else fail("model config: unknown key \"" + key + "\"");
  }
  return cfg;
}

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_u64(std::ofstream& out, uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

// tensors serialize in map (name) order; offsets are relative to the start
// of the payload section
void write_container(const std::string& path, const ModelConfig& cfg,
                     const ParamMap<float>& tensors, const json& extra) {
  json manifest = json::object();
  uint64_t offset = 0;
  for (const auto& [name, t] : tensors) {
    manifest[name] = json{{"shape", {t.rows, t.cols}}, {"offset", offset}};
    offset += static_cast<uint64_t>(t.size()) * sizeof(float);
  }
  json header = json{{"model", model_config_to_json(cfg)}, {"tensors", manifest}};
  if (!extra.is_null()) header["extra"] = extra;
  const std::string header_text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("cannot write checkpoint file: " + path);
  out.write(kMagic, 4);
  write_u32(out, kCheckpointVersion);
  write_u64(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& [name, t] : tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * sizeof(float)));
  out.flush();
  if (!out) fail("failed writing checkpoint file: " + path);
}

struct Container {
  ModelConfig cfg;
  ParamMap<float> tensors;
  json extra;
};

Container read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint file: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail("not a model checkpoint (bad magic): " + path);
  uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion)
    fail("unsupported checkpoint version " + std::to_string(version) + ": " + path);
  uint64_t header_len;
  std::memcpy(&header_len, bytes.data() + 8, 8);
  if (16 + header_len > bytes.size()) fail("truncated checkpoint header: " + path);
  json header;
  try {
    header = json::parse(bytes.substr(16, header_len));
  } catch (const json::exception& e) {
    fail("corrupt checkpoint header: " + std::string(e.what()));
  }
  require(header.is_object() && header.contains("model") && header.contains("tensors"),
          "corrupt checkpoint header: missing model or tensor manifest");

  Container c;
  c.cfg = model_config_from_json(header.at("model"));
  if (header.contains("extra")) c.extra = header.at("extra");

  const size_t payload_off = 16 + header_len;
  const size_t payload_len = bytes.size() - payload_off;
  uint64_t expected_offset = 0;
  const json& manifest = header.at("tensors");
  require(manifest.is_object(), "corrupt checkpoint header: tensor manifest is not an object");
  for (const auto& [name, entry] : manifest.items()) {
    require(entry.contains("shape") && entry.contains("offset"),
            "checkpoint manifest entry for tensor " + name + " is incomplete");
    const auto shape = entry.at("shape").get<std::vector<uint64_t>>();
    require(shape.size() == 2, "checkpoint manifest: tensor " + name + " is not 2-d");
    const uint64_t offset = entry.at("offset").get<uint64_t>();
    if (offset != expected_offset)
      fail("checkpoint manifest mismatch for tensor " + name +
           ": offset disagrees with the declared shapes");
    const uint64_t count = shape[0] * shape[1];
    const uint64_t nbytes = count * sizeof(float);
    if (offset + nbytes > payload_len)
      fail("truncated checkpoint payload (tensor " + name + "): " + path);
    TensorT<float> t(shape[0], shape[1]);
    std::memcpy(t.data.data(), bytes.data() + payload_off + offset, nbytes);
    c.tensors.emplace(name, std::move(t));
    expected_offset = offset + nbytes;
  }
  if (expected_offset != payload_len)
    fail("checkpoint payload has trailing bytes: " + path);
  return c;
}

void check_shapes_against_config(const ParamMap<float>& tensors, const ModelConfig& cfg,
                                 const std::string& path) {
  auto expected = expected_shapes(cfg);
  for (const auto& [name, shape] : expected) {
    auto it = tensors.find(name);
    if (it == tensors.end())
      fail("checkpoint manifest mismatch: tensor " + name + " missing from " + path);
    if (it->second.rows != shape.first || it->second.cols != shape.second)
      fail("checkpoint manifest mismatch for tensor " + name + ": shape disagrees with config");
  }
  for (const auto& [name, t] : tensors)
    if (!expected.count(name))
      fail("checkpoint manifest mismatch: unexpected tensor " + name + " in " + path);
}

}  // namespace

void save_checkpoint(const Parameters<float>& params, const std::string& path,
                     const std::vector<std::string>& vocab_tokens) {
  params.config.validate();
  json extra;
  if (!vocab_tokens.empty()) {
    require(vocab_tokens.size() == params.config.vocab_size,
            "checkpoint vocabulary size does not match the model config");
    extra = json{{"vocab", vocab_tokens}};
  }
  write_container(path, params.config, params.tensors, extra);
  log_info("wrote checkpoint " + path + " (" + std::to_string(params.scalar_count()) +
           " parameters)");
}

Parameters<float> load_checkpoint(const std::string& path,
                                  std::vector<std::string>* vocab_tokens) {
  Container c = read_container(path);
  c.cfg.validate();
  check_shapes_against_config(c.tensors, c.cfg, path);
  if (vocab_tokens) {
    vocab_tokens->clear();
    if (c.extra.is_object() && c.extra.contains("vocab")) {
      *vocab_tokens = c.extra.at("vocab").get<std::vector<std::string>>();
      require(vocab_tokens->size() == c.cfg.vocab_size,
              "checkpoint vocabulary size does not match the model config: " + path);
    }
  }
  Parameters<float> p;
  p.config = c.cfg;
  p.tensors = std::move(c.tensors);
  return p;
}

void save_opt_state(const AdamState<float>& state, const ModelConfig& cfg,
                    const std::string& path) {
  ParamMap<float> tensors;
  for (const auto& [name, t] : state.m) tensors.emplace("m." + name, t);
  for (const auto& [name, t] : state.v) tensors.emplace("v." + name, t);
  write_container(path, cfg, tensors, json{{"step", state.t}});
}

AdamState<float> load_opt_state(const std::string& path, const ModelConfig& cfg) {
  Container c = read_container(path);
  require(c.extra.is_object() && c.extra.contains("step"),
          "optimizer state file is missing the step counter: " + path);
  AdamState<float> s;
  s.t = c.extra.at("step").get<uint64_t>();
  auto expected = expected_shapes(cfg);
  for (auto& [name, t] : c.tensors) {
    if (name.rfind("m.", 0) == 0)
      s.m.emplace(name.substr(2), std::move(t));
    else if (name.rfind("v.", 0) == 0)
      s.v.emplace(name.substr(2), std::move(t));
    else
      fail("optimizer state holds an unexpected tensor " + name + ": " + path);
  }
  for (const auto& [name, shape] : expected) {
    require(s.m.count(name) && s.v.count(name),
            "optimizer state is missing moments for tensor " + name + ": " + path);
    require(s.m.at(name).rows == shape.first && s.m.at(name).cols == shape.second &&
                s.v.at(name).rows == shape.first && s.v.at(name).cols == shape.second,
            "optimizer state shape mismatch for tensor " + name + ": " + path);
  }
  require(s.m.size() == expected.size() && s.v.size() == expected.size(),
          "optimizer state holds tensors unknown to the model: " + path);
  return s;
}

std::string model_config_to_json_string(const ModelConfig& cfg) {
  return model_config_to_json(cfg).dump();
}

ModelConfig model_config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail("model config: invalid JSON: " + std::string(e.what()));
  }
  return model_config_from_json(j);
}

}  // namespace kgcg
