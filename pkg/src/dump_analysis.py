"""
Raw NAND dump handling: spare-byte stripping, windowed entropy segmentation
and bitflip-rate measurement from two copies of the same region.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from config import settings
from errors import DumpError
from models import BitflipDiffModel, SegmentMap, SegmentModel, hex_offset

logger = logging.getLogger(__name__)

NULL = "null"
ENCRYPTED = "encrypted"
COMPRESSED = "compressed"
UNKNOWN = "unknown"


# ─── Types ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class PageGeometry:
    page_total: int
    page_data: int

    def __post_init__(self):
        if self.page_data <= 0 or self.page_total < self.page_data:
            raise DumpError(f"invalid page geometry {self.page_total}/{self.page_data}")

    @property
    def page_spare(self) -> int:
        return self.page_total - self.page_data

    @classmethod
    def default(cls) -> "PageGeometry":
        return cls(settings.PAGE_TOTAL, settings.PAGE_DATA)


@dataclass(frozen=True)
class EntropySeries:
    window_size: int
    stride: int
    values: List[float]
    distinct: List[int] = field(default_factory=list)  # distinct byte values per window

    def corrected(self) -> List[float]:
        """Miller-Madow corrected values, normalized and clamped to 1.0."""
        if len(self.distinct) != len(self.values):
            return list(self.values)
        bias = 1.0 / (2.0 * self.window_size * math.log(2) * 8.0)
        return [min(1.0, v + (k - 1) * bias) for v, k in zip(self.values, self.distinct)]


@dataclass(frozen=True)
class SegmentLabel:
    start: int
    end: int
    kind: str


@dataclass(frozen=True)
class Thresholds:
    encrypted: float = field(default_factory=lambda: settings.ENCRYPTED_THRESHOLD)
    compressed: float = field(default_factory=lambda: settings.COMPRESSED_THRESHOLD)
    floor: float = field(default_factory=lambda: settings.HIGH_ENTROPY_FLOOR)

    @classmethod
    def parse(cls, text: str) -> "Thresholds":
        """"0.9998,0.998" or "0.9998,0.998,0.95" as given on the command line."""
        try:
            parts = [float(p) for p in text.split(",")]
        except ValueError as exc:
            raise DumpError(f"bad thresholds {text!r}") from exc
        if len(parts) not in (2, 3):
            raise DumpError(f"expected 2 or 3 thresholds, got {text!r}")
        return cls(*parts)


@dataclass(frozen=True)
class BitflipDiff:
    length: int
    positions: List[int]

    @property
    def count(self) -> int:
        return len(self.positions)

    @property
    def bytes_per_flip(self) -> Optional[float]:
        # both copies are exposed to flips, hence 2 x length
        return 2 * self.length / self.count if self.positions else None

    def to_model(self) -> BitflipDiffModel:
        return BitflipDiffModel(
            length=self.length, count=self.count,
            positions=self.positions, bytes_per_flip=self.bytes_per_flip,
        )


# ─── Operations ───────────────────────────────────────────────────────────────

def strip_spare(raw: bytes, geom: Optional[PageGeometry] = None) -> bytes:
    geom = geom or PageGeometry.default()
    if not raw or len(raw) % geom.page_total:
        raise DumpError(
            f"dump length {len(raw)} is not a positive multiple of the {geom.page_total}-byte page"
        )
    pages = np.frombuffer(raw, dtype=np.uint8).reshape(-1, geom.page_total)
    logger.info(f"[strip] {pages.shape[0]} pages, dropping {geom.page_spare} spare bytes each")
    return pages[:, :geom.page_data].tobytes()


def _window_entropy(window: np.ndarray) -> tuple:
    counts = np.bincount(window, minlength=256)
    nonzero = counts[counts > 0]
    q = nonzero / window.size
    h = float(-(q * np.log2(q)).sum())
    return min(1.0, max(0.0, h / 8.0)), int(nonzero.size)


def entropy_scan(image: bytes, window_size: Optional[int] = None, stride: Optional[int] = None) -> EntropySeries:
    window_size = settings.ENTROPY_WINDOW if window_size is None else window_size
    stride = settings.ENTROPY_STRIDE if stride is None else stride
    if window_size < 256 or stride < 1:
        raise DumpError(f"window {window_size} must be >= 256 and stride {stride} >= 1")
    if len(image) < window_size:
        raise DumpError(f"image of {len(image)} bytes is shorter than the {window_size}-byte window")

    data = np.frombuffer(image, dtype=np.uint8)
    count = (len(image) - window_size) // stride + 1
    values, distinct = [], []
    for i in range(count):
        h, k = _window_entropy(data[i * stride:i * stride + window_size])
        values.append(h)
        distinct.append(k)
    return EntropySeries(window_size, stride, values, distinct)


def classify_segments(series: EntropySeries, image: bytes, thresholds: Optional[Thresholds] = None,
                      bias_correction: bool = True) -> List[SegmentLabel]:
    """
    Label contiguous runs. Window i owns [i*stride, (i+1)*stride); the last
    window also owns everything up to the end of the image.
    """
    thresholds = thresholds or Thresholds()
    total = len(image)
    if total == 0:
        return []
    if not series.values:
        return [SegmentLabel(0, total, UNKNOWN)]

    data = np.frombuffer(image, dtype=np.uint8)
    scores = series.corrected() if bias_correction else list(series.values)
    n = len(scores)

    cells = []
    for i, score in enumerate(scores):
        start = i * series.stride
        end = total if i == n - 1 else min(total, (i + 1) * series.stride)
        if start >= end:
            continue
        if not data[start:end].any():
            tag = NULL
        elif score >= thresholds.floor:
            tag = "high"
        else:
            tag = UNKNOWN
        cells.append((start, end, tag, score))

    labels: List[SegmentLabel] = []
    i = 0
    while i < len(cells):
        j = i
        while j + 1 < len(cells) and cells[j + 1][2] == cells[i][2]:
            j += 1
        start, end, tag = cells[i][0], cells[j][1], cells[i][2]
        if tag == "high":
            run = [c[3] for c in cells[i:j + 1]]
            if min(run) >= thresholds.encrypted:
                tag = ENCRYPTED
            elif sum(run) / len(run) >= thresholds.compressed and min(run) <= thresholds.compressed:
                tag = COMPRESSED
            else:
                tag = UNKNOWN
        if labels and labels[-1].kind == tag:
            labels[-1] = SegmentLabel(labels[-1].start, end, tag)
        else:
            labels.append(SegmentLabel(start, end, tag))
        i = j + 1
    return labels


def segment_map(series: EntropySeries, labels: List[SegmentLabel], image_len: int,
                thresholds: Optional[Thresholds] = None) -> SegmentMap:
    thresholds = thresholds or Thresholds()
    return SegmentMap(
        image_len=image_len,
        window_size=series.window_size,
        stride=series.stride,
        encrypted_threshold=thresholds.encrypted,
        compressed_threshold=thresholds.compressed,
        segments=[SegmentModel(start=hex_offset(s.start), end=hex_offset(s.end), kind=s.kind) for s in labels],
        entropy=[round(v, 6) for v in series.values],
    )


def diff_bitflips(a: bytes, b: bytes) -> BitflipDiff:
    """Bit index = byte * 8 + bit, bit 0 being the least significant."""
    if len(a) != len(b):
        raise DumpError(f"regions differ in length: {len(a)} vs {len(b)}")
    xor = np.bitwise_xor(np.frombuffer(a, dtype=np.uint8), np.frombuffer(b, dtype=np.uint8))
    positions = np.flatnonzero(np.unpackbits(xor, bitorder="little"))
    return BitflipDiff(len(a), [int(p) for p in positions])
