#include "kgcg/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include "kgcg/error.hpp"
#include "kgcg/rng.hpp"
#include "kgcg/text.hpp"

#include <json.hpp>

namespace kgcg {

using nlohmann::json;

namespace {

std::string line_err(size_t line_no, const std::string& what) {
  return "data line " + std::to_string(line_no) + ": " + what;
}

std::vector<std::string> parse_string_array(const json& j, const char* key, size_t line_no) {
  if (!j.contains(key)) fail(line_err(line_no, std::string("missing key \"") + key + "\""));
  const json& arr = j.at(key);
  if (!arr.is_array()) fail(line_err(line_no, std::string("\"") + key + "\" is not an array"));
  if (arr.empty()) fail(line_err(line_no, std::string("\"") + key + "\" is empty"));
  std::vector<std::string> out;
  out.reserve(arr.size());
  for (const json& v : arr) {
    if (!v.is_string()) fail(line_err(line_no, std::string("\"") + key + "\" holds a non-string"));
    std::string s = v.get<std::string>();
    if (s.empty()) fail(line_err(line_no, std::string("\"") + key + "\" holds an empty string"));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

Corpus load_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open corpus file: " + path);
  Corpus corpus;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool blank = line.find_first_not_of(" \t") == std::string::npos;
    if (blank) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      fail(line_err(line_no, std::string("invalid JSON: ") + e.what()));
    }
    if (!j.is_object()) fail(line_err(line_no, "line is not a JSON object"));
    Example ex;
    std::vector<std::string> raw_concepts = parse_string_array(j, "concept_set", line_no);
    try {
      ex.concepts = make_concept_set(raw_concepts);
    } catch (const Error& e) {
      fail(line_err(line_no, e.what()));
    }
    ex.references = parse_string_array(j, "references", line_no);
    corpus.push_back(std::move(ex));
  }
  if (corpus.empty()) fail("corpus file has no examples: " + path);
  return corpus;
}

void save_jsonl(const Corpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write corpus file: " + path);
  for (const Example& ex : corpus) {
    json j;
    j["concept_set"] = ex.concepts.concepts;
    j["references"] = ex.references;
    out << j.dump() << '\n';
  }
  if (!out) fail("failed writing corpus file: " + path);
}

std::vector<std::string> tokenize(std::string_view text) {
  std::string norm = normalize(text);
  std::vector<std::string> tokens;
  size_t pos = 0;
  while (pos < norm.size()) {
    size_t sp = norm.find(' ', pos);
    size_t end = (sp == std::string::npos) ? norm.size() : sp;
    if (end > pos) {
      std::vector<uint32_t> cps = utf8_decode(std::string_view(norm).substr(pos, end - pos));
      size_t lo = 0, hi = cps.size();
      while (lo < hi && is_punctuation_cp(cps[lo])) ++lo;
      while (hi > lo && is_punctuation_cp(cps[hi - 1])) --hi;
      for (size_t i = 0; i < lo; ++i) tokens.push_back(utf8_encode({cps[i]}));
      if (hi > lo) tokens.push_back(utf8_encode({cps.begin() + lo, cps.begin() + hi}));
      for (size_t i = hi; i < cps.size(); ++i) tokens.push_back(utf8_encode({cps[i]}));
    }
    pos = end + 1;
  }
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() {
  push("<pad>");
  push("<bos>");
  push("<eos>");
  push("<unk>");
  push("<sep>");
}

void Vocabulary::push(std::string tok) {
  index_.emplace(tok, static_cast<TokenId>(tokens_.size()));
  tokens_.push_back(std::move(tok));
}

Vocabulary Vocabulary::build(const Corpus& corpus, size_t min_freq) {
  require(min_freq >= 1, "vocabulary min_freq must be at least 1");
  // std::map keeps candidate order byte-lexicographic for the frequency ties
  std::map<std::string, size_t> freq;
  for (const Example& ex : corpus) {
    for (const std::string& c : ex.concepts.concepts)
      for (std::string& t : tokenize(c)) ++freq[std::move(t)];
    for (const std::string& r : ex.references)
      for (std::string& t : tokenize(r)) ++freq[std::move(t)];
  }
  std::vector<std::pair<std::string, size_t>> ranked;
  ranked.reserve(freq.size());
  for (auto& [tok, n] : freq)
    if (n >= min_freq) ranked.emplace_back(tok, n);
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  Vocabulary v;
  for (auto& [tok, n] : ranked) v.push(tok);
  return v;
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  require(tokens.size() >= kNumSpecials, "vocabulary token list is missing the special tokens");
  for (size_t i = 0; i < kNumSpecials; ++i)
    require(tokens[i] == v.tokens_[i],
            "vocabulary token list does not start with the special tokens");
  for (size_t i = kNumSpecials; i < tokens.size(); ++i) {
    require(!v.index_.count(tokens[i]), "vocabulary token list has a duplicate: " + tokens[i]);
    v.push(tokens[i]);
  }
  return v;
}

TokenId Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(TokenId id) const {
  require(id >= 0 && static_cast<size_t>(id) < tokens_.size(),
          "token id out of range: " + std::to_string(id));
  return tokens_[static_cast<size_t>(id)];
}

std::vector<TokenId> Vocabulary::ids(const std::vector<std::string>& tokens) const {
  std::vector<TokenId> out;
  out.reserve(tokens.size());
  for (const std::string& t : tokens) out.push_back(id(t));
  return out;
}

EncodedExample encode_example(const Example& ex, const ConceptSubgraph& sg,
                              const Vocabulary& vocab, size_t max_len) {
  require(max_len >= 4, "encode_example: max_len must be at least 4");
  const size_t n_concepts = ex.concepts.concepts.size();
  require(sg.nodes.size() >= n_concepts, "encode_example: subgraph/example mismatch");
  for (size_t i = 0; i < n_concepts; ++i)
    require(sg.nodes[i].origin == NodeOrigin::concept_node &&
                sg.nodes[i].surface == ex.concepts.concepts[i],
            "encode_example: subgraph concept nodes do not match the example");

  EncodedExample enc;
  enc.input_ids.push_back(Vocabulary::kBos);
  std::vector<TokenSpan> spans_by_concept(n_concepts);
  for (size_t i = 0; i < n_concepts; ++i) {
    if (i) enc.input_ids.push_back(Vocabulary::kSep);
    int32_t begin = static_cast<int32_t>(enc.input_ids.size());
    for (TokenId t : vocab.ids(tokenize(ex.concepts.concepts[i]))) enc.input_ids.push_back(t);
    int32_t end = static_cast<int32_t>(enc.input_ids.size()) - 1;
    spans_by_concept[i] = TokenSpan{begin, end};
  }
  enc.input_ids.push_back(Vocabulary::kEos);
  if (enc.input_ids.size() > max_len) enc.input_ids.resize(max_len);

  // clamp spans to the surviving range
  const int32_t limit = static_cast<int32_t>(enc.input_ids.size()) - 1;
  for (TokenSpan& s : spans_by_concept) {
    if (s.begin > limit || s.empty())
      s = TokenSpan{};  // fully truncated: fall back to surface-token embeddings
    else
      s.end = std::min(s.end, limit);
  }

  enc.target_ids.push_back(Vocabulary::kBos);
  require(!ex.references.empty(), "encode_example: example has no references");
  for (TokenId t : vocab.ids(tokenize(ex.references[0]))) enc.target_ids.push_back(t);
  enc.target_ids.push_back(Vocabulary::kEos);
  if (enc.target_ids.size() > max_len) enc.target_ids.resize(max_len);

  enc.concept_spans.reserve(sg.nodes.size());
  enc.node_token_ids.reserve(sg.nodes.size());
  for (const SubgraphNode& node : sg.nodes) {
    if (node.origin == NodeOrigin::concept_node && node.source_concept &&
        *node.source_concept < n_concepts)
      enc.concept_spans.push_back(spans_by_concept[*node.source_concept]);
    else
      enc.concept_spans.push_back(TokenSpan{});
    std::vector<TokenId> ids = vocab.ids(tokenize(node.surface));
    if (ids.empty()) ids.push_back(Vocabulary::kUnk);
    enc.node_token_ids.push_back(std::move(ids));
  }
  return enc;
}

SynthData synth_corpus(size_t n_entities, size_t n_relations, size_t n_examples, uint64_t seed) {
  require(n_entities >= 2, "synth_corpus: need at least 2 entities");
  require(n_relations >= 1, "synth_corpus: need at least 1 relation");
  require(n_examples >= 1, "synth_corpus: need at least 1 example");

  SynthData out{KnowledgeGraph(RelationRegistry::Preset::self_only), {}};
  std::vector<std::string> ents(n_entities), rels(n_relations);
  for (size_t i = 0; i < n_entities; ++i) ents[i] = "e" + std::to_string(i);
  for (size_t k = 0; k < n_relations; ++k) rels[k] = "rel" + std::to_string(k);

  Rng rng(mix_seed(seed, fnv1a("synth_corpus")));
  const size_t pair_space = n_entities * (n_entities - 1);
  std::unordered_map<uint64_t, size_t> pair_relation;  // (i<<32|j) -> relation index
  size_t distinct_used = 0;

  out.corpus.reserve(n_examples);
  for (size_t ex_idx = 0; ex_idx < n_examples; ++ex_idx) {
    size_t i = 0, j = 0;
    uint64_t key = 0;
    // prefer unseen ordered pairs while any remain
    for (int attempt = 0; attempt < 4096; ++attempt) {
      i = static_cast<size_t>(rng.below(n_entities));
      j = static_cast<size_t>(rng.below(n_entities - 1));
      if (j >= i) ++j;
      key = (static_cast<uint64_t>(i) << 32) | j;
      if (distinct_used >= pair_space || !pair_relation.count(key)) break;
    }
    auto it = pair_relation.find(key);
    size_t rel;
    if (it == pair_relation.end()) {
      rel = static_cast<size_t>(rng.below(n_relations));
      pair_relation.emplace(key, rel);
      ++distinct_used;
      out.graph.add_triple(ents[i], rels[rel], ents[j]);
    } else {
      rel = it->second;  // pair seen before: keep its relation consistent
    }
    Example ex;
    ex.concepts = make_concept_set({ents[i], ents[j]});
    ex.references.push_back(ents[i] + " " + rels[rel] + " " + ents[j] + " .");
    out.corpus.push_back(std::move(ex));
  }
  return out;
}

}  // namespace kgcg
