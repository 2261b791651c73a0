#include "kgcg/text.hpp"

#include <algorithm>

namespace kgcg {

namespace {

struct CanonDecomp {
  uint32_t cp;
  uint32_t first;
  uint32_t second;  // 0 for singleton decompositions
};

struct CombiningClass {
  uint32_t cp;
  uint8_t ccc;
};

struct CanonComp {
  uint32_t first;
  uint32_t second;
  uint32_t composed;
};

#include "unicode_tables.inc"

constexpr uint32_t kReplacement = 0xFFFD;

// Hangul composition constants from the Unicode standard, chapter 3.12.
constexpr uint32_t kHangulSBase = 0xAC00;
constexpr uint32_t kHangulLBase = 0x1100;
constexpr uint32_t kHangulVBase = 0x1161;
constexpr uint32_t kHangulTBase = 0x11A7;
constexpr uint32_t kHangulLCount = 19;
constexpr uint32_t kHangulVCount = 21;
constexpr uint32_t kHangulTCount = 28;
constexpr uint32_t kHangulNCount = kHangulVCount * kHangulTCount;
constexpr uint32_t kHangulSCount = kHangulLCount * kHangulNCount;

const CanonDecomp* find_decomp(uint32_t cp) {
  auto it = std::lower_bound(std::begin(kCanonDecomp), std::end(kCanonDecomp), cp,
                             [](const CanonDecomp& d, uint32_t c) { return d.cp < c; });
  return (it != std::end(kCanonDecomp) && it->cp == cp) ? &*it : nullptr;
}

uint8_t combining_class(uint32_t cp) {
  auto it = std::lower_bound(std::begin(kCombiningClass), std::end(kCombiningClass), cp,
                             [](const CombiningClass& c, uint32_t x) { return c.cp < x; });
  return (it != std::end(kCombiningClass) && it->cp == cp) ? it->ccc : 0;
}

uint32_t find_composition(uint32_t first, uint32_t second) {
  auto it = std::lower_bound(
      std::begin(kCanonComp), std::end(kCanonComp), std::pair<uint32_t, uint32_t>{first, second},
      [](const CanonComp& c, const std::pair<uint32_t, uint32_t>& key) {
        return c.first != key.first ? c.first < key.first : c.second < key.second;
      });
  return (it != std::end(kCanonComp) && it->first == first && it->second == second)
             ? it->composed
             : 0;
}

void decompose_into(uint32_t cp, std::vector<uint32_t>& out) {
  if (cp >= kHangulSBase && cp < kHangulSBase + kHangulSCount) {
    uint32_t index = cp - kHangulSBase;
    out.push_back(kHangulLBase + index / kHangulNCount);
    out.push_back(kHangulVBase + (index % kHangulNCount) / kHangulTCount);
    uint32_t t = index % kHangulTCount;
    if (t != 0) out.push_back(kHangulTBase + t);
    return;
  }
  if (const CanonDecomp* d = find_decomp(cp)) {
    decompose_into(d->first, out);
    if (d->second != 0) decompose_into(d->second, out);
    return;
  }
  out.push_back(cp);
}

}  // namespace

std::vector<uint32_t> utf8_decode(std::string_view text) {
  std::vector<uint32_t> out;
  out.reserve(text.size());
  size_t i = 0;
  const auto* bytes = reinterpret_cast<const unsigned char*>(text.data());
  while (i < text.size()) {
    unsigned char b = bytes[i];
    uint32_t cp = 0;
    size_t len = 0;
    if (b < 0x80) {
      cp = b;
      len = 1;
    } else if ((b & 0xE0) == 0xC0) {
      cp = b & 0x1F;
      len = 2;
    } else if ((b & 0xF0) == 0xE0) {
      cp = b & 0x0F;
      len = 3;
    } else if ((b & 0xF8) == 0xF0) {
      cp = b & 0x07;
      len = 4;
    } else {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    if (i + len > text.size()) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    bool ok = true;
    for (size_t k = 1; k < len; ++k) {
      unsigned char cont = bytes[i + k];
      if ((cont & 0xC0) != 0x80) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cont & 0x3F);
    }
    if (!ok || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF) ||
        (len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000)) {
      out.push_back(kReplacement);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

void utf8_append(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::string utf8_encode(const std::vector<uint32_t>& cps) {
  std::string out;
  out.reserve(cps.size());
  for (uint32_t cp : cps) utf8_append(out, cp);
  return out;
}

std::vector<uint32_t> nfc(const std::vector<uint32_t>& cps) {
  // 1. full canonical decomposition
  std::vector<uint32_t> buf;
  buf.reserve(cps.size() + 8);
  for (uint32_t cp : cps) decompose_into(cp, buf);

  // 2. canonical ordering: stable-sort runs of nonzero combining class
  for (size_t i = 0; i < buf.size();) {
    if (combining_class(buf[i]) == 0) {
      ++i;
      continue;
    }
    size_t j = i;
    while (j < buf.size() && combining_class(buf[j]) != 0) ++j;
    std::stable_sort(buf.begin() + i, buf.begin() + j,
                     [](uint32_t a, uint32_t b) { return combining_class(a) < combining_class(b); });
    i = j;
  }

  // 3. canonical composition
  std::vector<uint32_t> out;
  out.reserve(buf.size());
  ptrdiff_t last_starter = -1;
  for (uint32_t cp : buf) {
    uint8_t cc = combining_class(cp);
    if (last_starter >= 0) {
      // C is blocked from the starter when some character sits between them
      // with ccc >= ccc(C); the marks kept since the starter stay in
      // non-decreasing ccc order, so checking the previous one suffices.
      // Starters (cc == 0) compose only when directly adjacent.
      bool adjacent = last_starter == static_cast<ptrdiff_t>(out.size()) - 1;
      bool blocked = !adjacent && (cc == 0 || combining_class(out.back()) >= cc);
      if (!blocked) {
        uint32_t starter = out[static_cast<size_t>(last_starter)];
        uint32_t composed = 0;
        if (starter >= kHangulLBase && starter < kHangulLBase + kHangulLCount &&
            cp >= kHangulVBase && cp < kHangulVBase + kHangulVCount) {
          uint32_t l = starter - kHangulLBase;
          uint32_t v = cp - kHangulVBase;
          composed = kHangulSBase + (l * kHangulVCount + v) * kHangulTCount;
        } else if (starter >= kHangulSBase && starter < kHangulSBase + kHangulSCount &&
                   (starter - kHangulSBase) % kHangulTCount == 0 && cp > kHangulTBase &&
                   cp < kHangulTBase + kHangulTCount) {
          composed = starter + (cp - kHangulTBase);
        } else {
          composed = find_composition(starter, cp);
        }
        if (composed != 0) {
          out[static_cast<size_t>(last_starter)] = composed;
          continue;
        }
      }
    }
    if (cc == 0) last_starter = static_cast<ptrdiff_t>(out.size());
    out.push_back(cp);
  }
  return out;
}

bool is_whitespace_cp(uint32_t cp) {
  switch (cp) {
    case 0x09:
    case 0x0A:
    case 0x0B:
    case 0x0C:
    case 0x0D:
    case 0x20:
    case 0x85:
    case 0xA0:
    case 0x2028:
    case 0x2029:
    case 0x3000:
      return true;
    default:
      return (cp >= 0x2000 && cp <= 0x200A);
  }
}

bool is_punctuation_cp(uint32_t cp) {
  if (cp < 0x80) {
    return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) ||
           (cp >= 0x5B && cp <= 0x60) || (cp >= 0x7B && cp <= 0x7E);
  }
  switch (cp) {
    case 0x00B7:  // middle dot, used in Korean lists
    case 0x2018:
    case 0x2019:
    case 0x201C:
    case 0x201D:
    case 0x2026:
    case 0x3001:  // ideographic comma
    case 0x3002:  // ideographic full stop
    case 0x300C:
    case 0x300D:
    case 0x300E:
    case 0x300F:
    case 0x3008:
    case 0x3009:
    case 0x300A:
    case 0x300B:
    case 0xFF01:
    case 0xFF08:
    case 0xFF09:
    case 0xFF0C:
    case 0xFF0E:
    case 0xFF1A:
    case 0xFF1B:
    case 0xFF1F:
      return true;
    default:
      return false;
  }
}

std::string normalize(std::string_view text) {
  std::vector<uint32_t> cps = nfc(utf8_decode(text));
  std::vector<uint32_t> out;
  out.reserve(cps.size());
  bool pending_space = false;
  for (uint32_t cp : cps) {
    if (is_whitespace_cp(cp)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    // ASCII A-Z and Latin-1 uppercase letters
    if (cp >= 'A' && cp <= 'Z') {
      cp += 0x20;
    } else if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) {
      cp += 0x20;
    }
    out.push_back(cp);
  }
  return utf8_encode(out);
}

size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<uint32_t> ca = utf8_decode(a);
  std::vector<uint32_t> cb = utf8_decode(b);
  if (ca.size() < cb.size()) std::swap(ca, cb);
  std::vector<size_t> row(cb.size() + 1);
  for (size_t j = 0; j <= cb.size(); ++j) row[j] = j;
  for (size_t i = 1; i <= ca.size(); ++i) {
    size_t diag = row[0];
    row[0] = i;
    for (size_t j = 1; j <= cb.size(); ++j) {
      size_t next_diag = row[j];
      size_t cost = (ca[i - 1] == cb[j - 1]) ? 0 : 1;
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + cost});
      diag = next_diag;
    }
  }
  return row[cb.size()];
}

}  // namespace kgcg
