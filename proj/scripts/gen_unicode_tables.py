#!/usr/bin/env python3
"""Generates src/unicode_tables.inc from Python's unicodedata.

The tables drive the NFC normalizer in src/text.cpp:
  - canonical (non-compatibility) decomposition pairs/singletons
  - canonical combining classes
  - primary composition pairs (exclusions handled by round-tripping
    through unicodedata.normalize)

Hangul syllables (U+AC00..U+D7A3) are composed algorithmically at
runtime and are deliberately left out of the tables.

Run from the repository root:  python3 scripts/gen_unicode_tables.py
"""

import sys
import unicodedata

HANGUL_S_BASE = 0xAC00
HANGUL_S_COUNT = 11172


def is_hangul_syllable(cp: int) -> bool:
    return HANGUL_S_BASE <= cp < HANGUL_S_BASE + HANGUL_S_COUNT


def main() -> None:
    decomp = []   # (cp, first, second) second == 0 for singleton decompositions
    ccc = []      # (cp, combining class)
    comp = []     # (first, second, composed)

    for cp in range(0x110000):
        if 0xD800 <= cp <= 0xDFFF or is_hangul_syllable(cp):
            continue
        ch = chr(cp)

        cc = unicodedata.combining(ch)
        if cc:
            ccc.append((cp, cc))

        d = unicodedata.decomposition(ch)
        if not d or d.startswith("<"):
            continue  # no decomposition, or compatibility-only
        parts = [int(p, 16) for p in d.split()]
        if len(parts) == 1:
            decomp.append((cp, parts[0], 0))
        elif len(parts) == 2:
            decomp.append((cp, parts[0], parts[1]))
            # Primary composite iff NFC maps the pair back to cp.
            if unicodedata.normalize("NFC", chr(parts[0]) + chr(parts[1])) == ch:
                comp.append((parts[0], parts[1], cp))
        else:
            raise AssertionError(f"canonical decomposition longer than 2: U+{cp:04X}")

    comp.sort()
    out = sys.stdout
    out.write("// Generated by scripts/gen_unicode_tables.py -- do not edit.\n")
    out.write(f"// Unicode data version {unicodedata.unidata_version}\n\n")

    out.write(f"static const CanonDecomp kCanonDecomp[{len(decomp)}] = {{\n")
    for cp, a, b in decomp:
        out.write(f"  {{0x{cp:X}, 0x{a:X}, 0x{b:X}}},\n")
    out.write("};\n\n")

    out.write(f"static const CombiningClass kCombiningClass[{len(ccc)}] = {{\n")
    for cp, cc in ccc:
        out.write(f"  {{0x{cp:X}, {cc}}},\n")
    out.write("};\n\n")

    out.write(f"static const CanonComp kCanonComp[{len(comp)}] = {{\n")
    for a, b, c in comp:
        out.write(f"  {{0x{a:X}, 0x{b:X}, 0x{c:X}}},\n")
    out.write("};\n")


if __name__ == "__main__":
    main()
