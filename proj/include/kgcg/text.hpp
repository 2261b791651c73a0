#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace kgcg {

// UTF-8 <-> codepoint helpers. Invalid byte sequences decode to U+FFFD,
// one replacement per offending byte, so normalization is total.
std::vector<uint32_t> utf8_decode(std::string_view text);
void utf8_append(std::string& out, uint32_t cp);
std::string utf8_encode(const std::vector<uint32_t>& cps);

// Canonical composition (NFC) over codepoints: canonical decomposition,
// canonical ordering, then primary composition. Hangul is handled
// algorithmically; other scripts use tables generated from Unicode 13 data.
std::vector<uint32_t> nfc(const std::vector<uint32_t>& cps);

// Canonical text form used for entity interning, concept matching and
// tokenization: NFC, outer whitespace trimmed, inner whitespace runs
// collapsed to one space, Latin letters (ASCII + Latin-1) lowercased.
std::string normalize(std::string_view text);

// Levenshtein distance over codepoints.
size_t edit_distance(std::string_view a, std::string_view b);

bool is_whitespace_cp(uint32_t cp);
bool is_punctuation_cp(uint32_t cp);

}  // namespace kgcg
