#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "kgcg/grounding.hpp"
#include "kgcg/kg.hpp"

namespace kgcg {

using TokenId = int32_t;

struct Example {
  ConceptSet concepts;
  std::vector<std::string> references;  // raw text; tokenized on demand
};

using Corpus = std::vector<Example>;

// {"concept_set": [...], "references": [...]} per line; blank lines skipped;
// malformed lines rejected with their line number.
Corpus load_jsonl(const std::string& path);
void save_jsonl(const Corpus& corpus, const std::string& path);

// normalize, split on whitespace, then peel leading/trailing punctuation
// codepoints off each word as separate tokens.
std::vector<std::string> tokenize(std::string_view text);
std::string detokenize(const std::vector<std::string>& tokens);

class Vocabulary {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr TokenId kSep = 4;
  static constexpr size_t kNumSpecials = 5;

  Vocabulary();  // specials only

  // tokens ranked by (frequency desc, byte order asc); freq < min_freq dropped
  static Vocabulary build(const Corpus& corpus, size_t min_freq = 1);

  // rebuild from a full token list (as returned by all_tokens); the list must
  // start with the special tokens and contain no duplicates
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  TokenId id(std::string_view token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  size_t size() const { return tokens_.size(); }

  std::vector<TokenId> ids(const std::vector<std::string>& tokens) const;

  const std::vector<std::string>& all_tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  void push(std::string tok);
};

// inclusive token range in the encoder input; empty when begin > end
struct TokenSpan {
  int32_t begin = 0;
  int32_t end = -1;
  bool empty() const { return begin > end; }
  int32_t length() const { return empty() ? 0 : end - begin + 1; }
};

struct EncodedExample {
  std::vector<TokenId> input_ids;   // BOS c1 SEP c2 ... EOS, truncated to max_len
  std::vector<TokenId> target_ids;  // BOS ref0-tokens EOS, truncated to max_len
  std::vector<TokenSpan> concept_spans;            // one per subgraph node (empty unless CONCEPT in range)
  std::vector<std::vector<TokenId>> node_token_ids;  // surface tokens per node, for embedding-based init
};

EncodedExample encode_example(const Example& ex, const ConceptSubgraph& sg,
                              const Vocabulary& vocab, size_t max_len);

// Synthetic relation-completion corpus: entities e0..e{n-1}, relations
// rel0..rel{k-1}; each example pairs two distinct entities whose relation is
// fixed the first time the ordered pair is drawn, reference "ei relk ej .".
// Pairs are distinct across examples while the pair space allows it.
struct SynthData {
  KnowledgeGraph graph;
  Corpus corpus;
};
SynthData synth_corpus(size_t n_entities, size_t n_relations, size_t n_examples, uint64_t seed);

}  // namespace kgcg
