"""
Validity oracle for repair candidates.

check_candidate() frames a zlib stream (RFC 1950) around the project's own
raw inflater so that every verdict carries the exact number of input bytes
read before the decision. quick_check() is the C-zlib screen used inside the
brute-force loop; it accepts the same streams but reports nothing on failure.

SquashFS labels this compressor "gzip", but what it stores is zlib framing:
2-byte header, DEFLATE blocks, big-endian Adler-32 of the payload.
"""

import enum
import zlib
from dataclasses import dataclass
from typing import Optional

from inflate import DeflateError, OutputLimitError, inflate_raw

ZLIB_HEADER_LEN = 2
ADLER_LEN = 4


class Status(str, enum.Enum):
    VALID = "Valid"
    BAD_DEFLATE = "BadDeflate"
    ADLER_MISMATCH = "AdlerMismatch"
    TOO_LONG = "TooLong"
    BAD_HEADER = "BadHeader"


@dataclass(frozen=True)
class OracleVerdict:
    status: Status
    consumed: int
    payload: Optional[bytes] = None
    computed_checksum: Optional[int] = None
    stored_checksum: Optional[int] = None
    reason: str = ""

    @property
    def valid(self) -> bool:
        return self.status is Status.VALID


def adler32(data: bytes) -> int:
    """Standard Adler-32 (initial value 1)."""
    return zlib.adler32(data, 1) & 0xFFFFFFFF


def _check_header(candidate: bytes) -> Optional[str]:
    if len(candidate) < ZLIB_HEADER_LEN:
        return "stream shorter than zlib header"
    cmf, flg = candidate[0], candidate[1]
    if cmf & 0x0F != 8:
        return "compression method is not deflate"
    if cmf >> 4 > 7:
        return "window size exceeds 32KiB"
    if (cmf << 8 | flg) % 31:
        return "header check bits do not match"
    if flg & 0x20:
        return "preset dictionary requested"
    return None


def check_candidate(candidate: bytes, max_len: int, strict: bool = False) -> OracleVerdict:
    """Inflate a zlib candidate under a length cap; total, never raises on bad input."""
    if max_len <= 0:
        raise ValueError("max_len must be positive")

    problem = _check_header(candidate)
    if problem:
        return OracleVerdict(Status.BAD_HEADER, min(len(candidate), ZLIB_HEADER_LEN), reason=problem)

    try:
        payload, bits = inflate_raw(candidate[ZLIB_HEADER_LEN:], max_len)
    except OutputLimitError as exc:
        consumed = ZLIB_HEADER_LEN + (exc.touched_bits + 7) // 8
        return OracleVerdict(Status.TOO_LONG, consumed, reason=exc.reason)
    except DeflateError as exc:
        consumed = ZLIB_HEADER_LEN + (exc.touched_bits + 7) // 8
        return OracleVerdict(Status.BAD_DEFLATE, consumed, reason=exc.reason)

    deflate_end = ZLIB_HEADER_LEN + (bits + 7) // 8
    if deflate_end + ADLER_LEN > len(candidate):
        return OracleVerdict(Status.BAD_DEFLATE, len(candidate), reason="checksum truncated")

    consumed = deflate_end + ADLER_LEN
    stored = int.from_bytes(candidate[deflate_end:consumed], "big")
    computed = adler32(payload)
    if stored != computed:
        return OracleVerdict(
            Status.ADLER_MISMATCH,
            consumed,
            computed_checksum=computed,
            stored_checksum=stored,
            reason="Adler-32 mismatch",
        )
    if strict and consumed < len(candidate):
        return OracleVerdict(Status.BAD_DEFLATE, consumed, reason="trailing data after checksum")
    return OracleVerdict(Status.VALID, consumed, payload=payload)


def quick_check(candidate: bytes, max_len: int, strict: bool = False) -> Optional[bytes]:
    """Fast accept/reject through C zlib. Returns the payload when the stream is valid."""
    decompressor = zlib.decompressobj()
    try:
        payload = decompressor.decompress(candidate, max_len + 1)
    except zlib.error:
        return None
    if not decompressor.eof or len(payload) > max_len:
        return None
    if strict and decompressor.unused_data:
        return None
    return payload


def describe(verdict: OracleVerdict) -> dict:
    """Flat dict for the `check` triage subcommand."""
    info = {
        "status": verdict.status.value,
        "consumed": verdict.consumed,
        "reason": verdict.reason,
    }
    if verdict.payload is not None:
        info["payload_len"] = len(verdict.payload)
        info["payload_adler32"] = f"0x{adler32(verdict.payload):08x}"
    if verdict.status is Status.ADLER_MISMATCH:
        info["computed_checksum"] = f"0x{verdict.computed_checksum:08x}"
        info["stored_checksum"] = f"0x{verdict.stored_checksum:08x}"
    return info
