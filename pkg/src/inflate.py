"""
Raw DEFLATE decoder with exact input accounting.

Unlike a general-purpose decompressor, every failure reports the number of
input bits that influenced the decision. The repair engine relies on that
figure to prune flip positions, so it must never be smaller than the true
dependency (larger is merely slower).

Acceptance rules track zlib's inflate so the C screen used in the search
hot loop and this decoder agree on which streams are well formed.
"""

from typing import List, Optional, Sequence, Tuple


class DeflateError(Exception):
    """Stream is malformed. `touched_bits` counts input bits read before the decision."""

    def __init__(self, reason: str, touched_bits: int):
        super().__init__(reason)
        self.reason = reason
        self.touched_bits = touched_bits


class OutputLimitError(DeflateError):
    """Decoded output would exceed the caller's cap."""


# ─── Bit input ────────────────────────────────────────────────────────────────

class BitReader:

    """LSB-first bit cursor over an immutable byte buffer."""

    __slots__ = ("_data", "_nbits", "pos")

    def __init__(self, data: bytes):
        self._data = data
        self._nbits = len(data) * 8
        self.pos = 0

    @property
    def nbits(self) -> int:
        return self._nbits

    def peek(self, n: int) -> int:
        """Next n bits (n <= 25), zero-padded past the end of input."""
        i = self.pos >> 3
        word = int.from_bytes(self._data[i:i + 4], "little")
        return (word >> (self.pos & 7)) & ((1 << n) - 1)

    def read(self, n: int) -> int:
        if n == 0:
            return 0
        if self.pos + n > self._nbits:
            raise DeflateError("unexpected end of stream", self._nbits)
        value = self.peek(n)
        self.pos += n
        return value

    def align(self) -> None:
        self.pos = (self.pos + 7) & ~7

    def read_bytes(self, count: int) -> bytes:
        """Byte-aligned copy used by stored blocks."""
        start = self.pos >> 3
        if start + count > len(self._data):
            raise DeflateError("stored block runs past end of stream", self._nbits)
        self.pos += count * 8
        return self._data[start:start + count]


# ─── Huffman tables ───────────────────────────────────────────────────────────

CODE_LENGTHS = "code-lengths"
LITERALS = "literal/length"
DISTANCES = "distance"


class HuffmanTable:

    """Canonical Huffman code decoded through a single flat lookup table.

    Entries pack (symbol << 4) | code length; -1 marks a bit pattern with no
    code, which only exists for the incomplete sets zlib tolerates.
    """

    __slots__ = ("_table", "_max_len")

    def __init__(self, lengths: Sequence[int], kind: str, touched_bits: int):
        max_len = max(lengths) if lengths else 0
        if max_len == 0:
            # zlib accepts an empty distance code; any length symbol then fails on lookup.
            if kind != DISTANCES:
                raise DeflateError(f"empty {kind} code", touched_bits)
            self._max_len = 1
            self._table = [-1, -1]
            return

        counts = [0] * (max_len + 1)
        for length in lengths:
            counts[length] += 1
        counts[0] = 0

        left = 1
        for length in range(1, max_len + 1):
            left = (left << 1) - counts[length]
            if left < 0:
                raise DeflateError(f"over-subscribed {kind} code", touched_bits)
        if left > 0 and (kind == CODE_LENGTHS or max_len != 1):
            raise DeflateError(f"incomplete {kind} code", touched_bits)

        next_code = [0] * (max_len + 2)
        code = 0
        for length in range(1, max_len + 1):
            code = (code + counts[length - 1]) << 1
            next_code[length] = code

        size = 1 << max_len
        table = [-1] * size
        for symbol, length in enumerate(lengths):
            if length == 0:
                continue
            code = next_code[length]
            next_code[length] += 1
            reversed_code = int(format(code, f"0{length}b")[::-1], 2)
            entry = (symbol << 4) | length
            for index in range(reversed_code, size, 1 << length):
                table[index] = entry
        self._table = table
        self._max_len = max_len

    def decode(self, reader: BitReader) -> int:
        entry = self._table[reader.peek(self._max_len)]
        if entry < 0:
            raise DeflateError("invalid Huffman code", min(reader.pos + self._max_len, reader.nbits))
        length = entry & 15
        if reader.pos + length > reader.nbits:
            raise DeflateError("unexpected end of stream", reader.nbits)
        reader.pos += length
        return entry >> 4


def _fixed_tables() -> Tuple[HuffmanTable, HuffmanTable]:
    lit = [8] * 144 + [9] * 112 + [7] * 24 + [8] * 8
    dist = [5] * 32
    return HuffmanTable(lit, LITERALS, 0), HuffmanTable(dist, DISTANCES, 0)


FIXED_LITERALS, FIXED_DISTANCES = _fixed_tables()

# RFC 1951 base values and extra bit counts.
LENGTH_BASE = [3, 4, 5, 6, 7, 8, 9, 10, 11, 13, 15, 17, 19, 23, 27, 31,
               35, 43, 51, 59, 67, 83, 99, 115, 131, 163, 195, 227, 258]
LENGTH_EXTRA = [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2,
                3, 3, 3, 3, 4, 4, 4, 4, 5, 5, 5, 5, 0]
DIST_BASE = [1, 2, 3, 4, 5, 7, 9, 13, 17, 25, 33, 49, 65, 97, 129, 193,
             257, 385, 513, 769, 1025, 1537, 2049, 3073, 4097, 6145,
             8193, 12289, 16385, 24577]
DIST_EXTRA = [0, 0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6,
              7, 7, 8, 8, 9, 9, 10, 10, 11, 11, 12, 12, 13, 13]
CODE_LENGTH_ORDER = [16, 17, 18, 0, 8, 7, 9, 6, 10, 5, 11, 4, 12, 3, 13, 2, 14, 1, 15]

# zlib only bounds distances by the 32 KiB maximum, whatever window CINFO declares
WINDOW_MAX = 32768


# ─── Decoder ──────────────────────────────────────────────────────────────────

class Inflater:

    """Decodes one raw DEFLATE stream into a bounded output buffer."""

    def __init__(self, data: bytes, max_len: int):
        self._reader = BitReader(data)
        self._max_len = max_len
        self._out = bytearray()

    def run(self) -> Tuple[bytes, int]:
        """Return (payload, bits consumed by the deflate stream)."""
        reader = self._reader
        while True:
            final = reader.read(1)
            btype = reader.read(2)
            if btype == 0:
                self._stored_block()
            elif btype == 1:
                self._huffman_block(FIXED_LITERALS, FIXED_DISTANCES)
            elif btype == 2:
                lit, dist = self._dynamic_tables()
                self._huffman_block(lit, dist)
            else:
                raise DeflateError("reserved block type", reader.pos)
            if final:
                return bytes(self._out), reader.pos

    def _emit_check(self, count: int) -> None:
        if len(self._out) + count > self._max_len:
            raise OutputLimitError("output exceeds length cap", self._reader.pos)

    def _stored_block(self) -> None:
        reader = self._reader
        reader.align()
        length = reader.read(16)
        nlength = reader.read(16)
        if length ^ 0xFFFF != nlength:
            raise DeflateError("stored block length check failed", reader.pos)
        self._emit_check(length)
        self._out += reader.read_bytes(length)

    def _dynamic_tables(self) -> Tuple[HuffmanTable, HuffmanTable]:
        reader = self._reader
        nlen = reader.read(5) + 257
        ndist = reader.read(5) + 1
        ncode = reader.read(4) + 4
        if nlen > 286 or ndist > 30:
            raise DeflateError("too many length or distance symbols", reader.pos)

        code_lengths = [0] * 19
        for i in range(ncode):
            code_lengths[CODE_LENGTH_ORDER[i]] = reader.read(3)
        clc = HuffmanTable(code_lengths, CODE_LENGTHS, reader.pos)

        lengths: List[int] = []
        total = nlen + ndist
        while len(lengths) < total:
            sym = clc.decode(reader)
            if sym < 16:
                lengths.append(sym)
                continue
            if sym == 16:
                if not lengths:
                    raise DeflateError("repeat with no previous length", reader.pos)
                value = lengths[-1]
                run = reader.read(2) + 3
            elif sym == 17:
                value, run = 0, reader.read(3) + 3
            else:
                value, run = 0, reader.read(7) + 11
            if len(lengths) + run > total:
                raise DeflateError("invalid bit length repeat", reader.pos)
            lengths.extend([value] * run)

        lit_lengths = lengths[:nlen]
        if lit_lengths[256] == 0:
            raise DeflateError("missing end-of-block code", reader.pos)
        lit = HuffmanTable(lit_lengths, LITERALS, reader.pos)
        dist = HuffmanTable(lengths[nlen:], DISTANCES, reader.pos)
        return lit, dist

    def _huffman_block(self, lit: HuffmanTable, dist: Optional[HuffmanTable]) -> None:
        reader = self._reader
        out = self._out
        while True:
            sym = lit.decode(reader)
            if sym < 256:
                self._emit_check(1)
                out.append(sym)
                continue
            if sym == 256:
                return
            sym -= 257
            if sym >= 29:
                raise DeflateError("invalid literal/length symbol", reader.pos)
            run = LENGTH_BASE[sym] + reader.read(LENGTH_EXTRA[sym])
            dsym = dist.decode(reader)
            if dsym >= 30:
                raise DeflateError("invalid distance symbol", reader.pos)
            distance = DIST_BASE[dsym] + reader.read(DIST_EXTRA[dsym])
            if distance > len(out) or distance > WINDOW_MAX:
                raise DeflateError("invalid distance too far back", reader.pos)
            self._emit_check(run)
            start = len(out) - distance
            if distance >= run:
                out += out[start:start + run]
            else:
                chunk = out[start:]
                out += (chunk * (run // distance + 1))[:run]


def inflate_raw(data: bytes, max_len: int) -> Tuple[bytes, int]:
    """Inflate a raw DEFLATE stream; returns (payload, bits consumed).

    Raises DeflateError (or OutputLimitError) carrying the touched bit count.
    """
    return Inflater(data, max_len).run()
