"""
Length filtering and three-valued merging of target candidates.

A TernaryBuffer stores two bitmaps: `value` (the bit, or 0 when unknown) and
`known` (1 where every target agrees). Merging is AND/OR over the targets:
known = ~(AND ^ OR), value = AND.
"""

import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from bitflip_search import TargetSet
from errors import LengthMismatchError, MergeError, NoAdmissibleLengthsError
from models import MaskModel, MaskRun, hex_offset
from squashfs_model import FragmentRecord

logger = logging.getLogger(__name__)

MAX_SUBSET_UNITS = 64


# ─── Ternary buffer ───────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TernaryBuffer:
    value: np.ndarray
    known: np.ndarray

    @classmethod
    def from_payload(cls, payload: bytes) -> "TernaryBuffer":
        value = np.frombuffer(payload, dtype=np.uint8).copy()
        return cls(value, np.full(value.shape, 0xFF, dtype=np.uint8))

    @property
    def length(self) -> int:
        return int(self.value.size)

    @property
    def indeterminate_bits(self) -> int:
        return int(np.unpackbits(~self.known).sum())

    @property
    def indeterminate_bytes(self) -> int:
        return int(np.count_nonzero(self.known != 0xFF))

    def trit(self, bit: int) -> Optional[bool]:
        """True / False, or None when indeterminate."""
        byte, mask = bit >> 3, 1 << (bit & 7)
        if not self.known[byte] & mask:
            return None
        return bool(self.value[byte] & mask)

    def combine(self, other: "TernaryBuffer") -> "TernaryBuffer":
        """Merge of two merged buffers; equals merging the union of their targets."""
        if self.length != other.length:
            raise LengthMismatchError(f"cannot merge {self.length} and {other.length} bytes")
        known = self.known & other.known & ~(self.value ^ other.value)
        return TernaryBuffer(self.value & other.value & known, known)

    def compatible(self, payload: bytes) -> bool:
        """True when `payload` agrees with every known bit."""
        if len(payload) != self.length:
            return False
        other = np.frombuffer(payload, dtype=np.uint8)
        return not np.any((other ^ self.value) & self.known)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TernaryBuffer):
            return NotImplemented
        return np.array_equal(self.value, other.value) and np.array_equal(self.known, other.known)

    def __hash__(self) -> int:
        return hash((self.value.tobytes(), self.known.tobytes()))


def merge_targets(payloads: Sequence[bytes]) -> TernaryBuffer:
    if not payloads:
        raise MergeError("no targets to merge")
    lengths = {len(p) for p in payloads}
    if len(lengths) > 1:
        raise LengthMismatchError(f"targets differ in length: {sorted(lengths)}")
    stack = np.vstack([np.frombuffer(p, dtype=np.uint8) for p in payloads])
    all_ones = np.bitwise_and.reduce(stack, axis=0)
    any_ones = np.bitwise_or.reduce(stack, axis=0)
    known = ~(all_ones ^ any_ones)
    return TernaryBuffer(all_ones, known)


def emit_variants(buffer: TernaryBuffer) -> Tuple[bytes, bytes]:
    """(all indeterminate bits set, all indeterminate bits clear)."""
    all_true = buffer.value | ~buffer.known
    all_false = buffer.value & buffer.known
    return all_true.tobytes(), all_false.tobytes()


# ─── Indeterminacy accounting ─────────────────────────────────────────────────

@dataclass(frozen=True)
class IndeterminacyTotals:
    total_bytes: int
    indeterminate_bits: int
    indeterminate_bytes: int

    @property
    def total_bits(self) -> int:
        return 8 * self.total_bytes

    @property
    def bit_ratio(self) -> float:
        return self.indeterminate_bits / self.total_bits if self.total_bytes else 0.0

    @property
    def byte_ratio(self) -> float:
        return self.indeterminate_bytes / self.total_bytes if self.total_bytes else 0.0


def indeterminacy_report(buffers: Iterable[TernaryBuffer]) -> IndeterminacyTotals:
    total = bits = nbytes = 0
    for buffer in buffers:
        total += buffer.length
        bits += buffer.indeterminate_bits
        nbytes += buffer.indeterminate_bytes
    return IndeterminacyTotals(total, bits, nbytes)


def mask_runs(buffer: TernaryBuffer) -> List[Tuple[int, bytes]]:
    """Runs of consecutive indeterminate bytes as (start, per-byte masks of unknown bits)."""
    unknown = (~buffer.known).astype(np.uint8)
    flagged = np.flatnonzero(unknown)
    runs: List[Tuple[int, bytes]] = []
    if flagged.size == 0:
        return runs
    breaks = np.flatnonzero(np.diff(flagged) != 1) + 1
    for group in np.split(flagged, breaks):
        start, stop = int(group[0]), int(group[-1]) + 1
        runs.append((start, unknown[start:stop].tobytes()))
    return runs


def mask_model(path: str, buffer: TernaryBuffer) -> MaskModel:
    return MaskModel(
        file=path,
        length=buffer.length,
        indeterminate_bits=buffer.indeterminate_bits,
        indeterminate_bytes=buffer.indeterminate_bytes,
        runs=[MaskRun(start=hex_offset(start), length=len(masks), masks=masks.hex())
              for start, masks in mask_runs(buffer)],
    )


# ─── Length constraints ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class FilterOutcome:
    targets: TargetSet
    escalate: bool  # filter emptied a nonempty set; the length assumption is suspect


@dataclass(frozen=True)
class ExpectedLength:
    length: Optional[int]
    conflict: Optional[str] = None


def expected_unit_length(unit: FragmentRecord, block_size: int) -> ExpectedLength:
    """
    Decompressed length the owners imply. Data blocks hold min(block_size,
    remaining file bytes); fragment blocks end at the furthest owner tail.
    """
    if not unit.owners:
        return ExpectedLength(None)
    if unit.kind == "block":
        lengths = {o.length for o in unit.owners}
        if len(lengths) > 1:
            return ExpectedLength(None, f"owners disagree on block length: {sorted(lengths)}")
        return ExpectedLength(lengths.pop())

    spans = sorted({(o.offset, o.offset + o.length) for o in unit.owners})
    for (a_start, a_end), (b_start, b_end) in zip(spans, spans[1:]):
        if b_start < a_end and (a_start, a_end) != (b_start, b_end):
            return ExpectedLength(max(end for _s, end in spans),
                                  f"tails overlap: [{a_start}, {a_end}) and [{b_start}, {b_end})")
    end = max(end for _s, end in spans)
    if end > block_size:
        return ExpectedLength(None, f"owner tail ends at {end}, beyond the {block_size}-byte block")
    return ExpectedLength(end)


def length_filter(targets: TargetSet, expected_len: int) -> FilterOutcome:
    kept = [t for t in targets.targets if len(t.payload) == expected_len]
    escalate = bool(targets.targets) and not kept
    if escalate:
        lengths = sorted({len(t.payload) for t in targets.targets})
        logger.warning(
            f"[unit {targets.fragment_index}] no target has length {expected_len} (saw {lengths})"
        )
    return FilterOutcome(replace(targets, targets=kept), escalate)


def subset_sum_filter(length_sets: Sequence[Iterable[int]], file_size: int) -> List[Tuple[int, ...]]:
    """Every choice of one length per unit summing to file_size; exhaustive DFS with bound pruning."""
    options = [sorted(set(s)) for s in length_sets]
    if len(options) > MAX_SUBSET_UNITS:
        raise MergeError(f"{len(options)} units exceed the {MAX_SUBSET_UNITS}-unit limit")
    if any(not s for s in options):
        raise MergeError("every unit needs at least one candidate length")

    # suffix bounds: min/max total still reachable from position i onward
    suffix_min = [0] * (len(options) + 1)
    suffix_max = [0] * (len(options) + 1)
    for i in range(len(options) - 1, -1, -1):
        suffix_min[i] = suffix_min[i + 1] + options[i][0]
        suffix_max[i] = suffix_max[i + 1] + options[i][-1]

    found: List[Tuple[int, ...]] = []
    chosen: List[int] = []

    def dfs(i: int, total: int) -> None:
        remaining = file_size - total
        if remaining < suffix_min[i] or remaining > suffix_max[i]:
            return
        if i == len(options):
            found.append(tuple(chosen))
            return
        for length in options[i]:
            if length > remaining:
                break
            chosen.append(length)
            dfs(i + 1, total + length)
            chosen.pop()

    dfs(0, 0)
    if not found:
        raise NoAdmissibleLengthsError(f"no combination of unit lengths sums to {file_size}")
    return found


def admissible_lengths(tuples: Sequence[Tuple[int, ...]], position: int) -> set:
    return {t[position] for t in tuples}


def merge_target_set(targets: TargetSet) -> Optional[TernaryBuffer]:
    """Merged buffer of a filtered set, None when nothing survived."""
    if not targets.targets:
        return None
    return merge_targets(targets.payloads)
