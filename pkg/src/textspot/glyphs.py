"""Fixed 5x7 dot-matrix glyphs and the character set used throughout.

The padding symbol has no bitmap; it only exists as the final class index so
recognition targets can be padded to the character-query count.
"""

from __future__ import annotations

import numpy as np

_GLYPH_ROWS = {
    "A": (".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "B": ("####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."),
    "C": (".####", "#....", "#....", "#....", "#....", "#....", ".####"),
    "E": ("#####", "#....", "#....", "####.", "#....", "#....", "#####"),
    "H": ("#...#", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"),
    "K": ("#...#", "#..#.", "#.#..", "##...", "#.#..", "#..#.", "#...#"),
    "L": ("#....", "#....", "#....", "#....", "#....", "#....", "#####"),
    "T": ("#####", "..#..", "..#..", "..#..", "..#..", "..#..", "..#.."),
    "U": ("#...#", "#...#", "#...#", "#...#", "#...#", "#...#", ".###."),
    "Y": ("#...#", "#...#", ".#.#.", "..#..", "..#..", "..#..", "..#.."),
    "0": (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
}

GLYPH_H, GLYPH_W = 7, 5

PAD = "<pad>"


class Charset:
    """Ordered symbols plus a trailing padding index."""

    def __init__(self, symbols="ABCEHKLTUY0"):
        symbols = str(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError(f"duplicate symbols in charset {symbols!r}")
        unknown = [c for c in symbols if c not in _GLYPH_ROWS]
        if unknown:
            raise ValueError(f"no glyph for symbols {unknown}; available: {sorted(_GLYPH_ROWS)}")
        self.symbols = symbols
        self._index = {c: i for i, c in enumerate(symbols)}

    @property
    def size(self):
        """Number of classes including padding."""
        return len(self.symbols) + 1

    @property
    def pad_index(self):
        return len(self.symbols)

    def encode(self, text, length=None):
        """Text -> integer indices, optionally right-padded to ``length``."""
        try:
            idx = [self._index[c] for c in text]
        except KeyError as err:
            raise ValueError(f"character {err.args[0]!r} not in charset {self.symbols!r}") from None
        if length is not None:
            if len(idx) > length:
                raise ValueError(f"text {text!r} longer than {length}")
            idx = idx + [self.pad_index] * (length - len(idx))
        return np.array(idx, dtype=np.int64)

    def decode(self, indices):
        """Indices -> text, truncated at the first padding index."""
        chars = []
        for i in np.asarray(indices).ravel():
            if i == self.pad_index:
                break
            if not 0 <= i < len(self.symbols):
                raise ValueError(f"index {int(i)} outside charset of {len(self.symbols)} symbols")
            chars.append(self.symbols[int(i)])
        return "".join(chars)

    def glyph(self, char):
        """(7, 5) boolean bitmap for one symbol."""
        rows = _GLYPH_ROWS.get(char)
        if rows is None or char not in self._index:
            raise ValueError(f"no glyph for {char!r}")
        return np.array([[c == "#" for c in row] for row in rows], dtype=bool)


DEFAULT_CHARSET = Charset()
