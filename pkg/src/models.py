"""
Pydantic models for every JSON artifact the stages exchange.
All artifacts carry schema_version; byte offsets are hex strings.
"""

from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field

from config import settings

SCHEMA_VERSION = 1


def hex_offset(value: int) -> str:
    return f"{value:#x}"


def parse_offset(value: str) -> int:
    """Accept "0xb60000", "11927552" or "0o..." notations."""
    return int(value, 0)


# ─── Dump analysis ────────────────────────────────────────────────────────────

class SegmentModel(BaseModel):
    start: str
    end: str
    kind: Literal["null", "encrypted", "compressed", "unknown"]


class SegmentMap(BaseModel):
    schema_version: int = SCHEMA_VERSION
    image_len: int
    window_size: int
    stride: int
    encrypted_threshold: float
    compressed_threshold: float
    segments: List[SegmentModel] = Field(default_factory=list)
    entropy: List[float] = Field(default_factory=list)


class BitflipDiffModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    length: int
    count: int
    positions: List[int] = Field(default_factory=list)
    bytes_per_flip: Optional[float] = None


# ─── Inventory ────────────────────────────────────────────────────────────────

class OwnerModel(BaseModel):
    inode: int
    path: str
    role: str
    offset: int
    length: int


class UnitModel(BaseModel):
    index: int
    kind: Literal["fragment", "block"]
    start: str
    compressed_len: int
    is_compressed: bool
    max_decompressed_len: int
    sha256: str
    baseline: str
    consumed: int
    owners: List[OwnerModel] = Field(default_factory=list)


class FileModel(BaseModel):
    inode: int
    path: str
    size: int
    kind: str
    units: List[int] = Field(default_factory=list)


class InventoryModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    image: str
    offset: str = "0x0"
    length: int
    block_size: int
    superblock: Dict[str, int] = Field(default_factory=dict)
    fragment_blocks: int = 0
    data_blocks: int = 0
    units: List[UnitModel] = Field(default_factory=list)
    files: List[FileModel] = Field(default_factory=list)
    corrupted: List[int] = Field(default_factory=list)


# ─── Search ───────────────────────────────────────────────────────────────────

class HitModel(BaseModel):
    flips: List[int]
    sha256: str
    length: int


class CheckpointModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    fragment: int
    fragment_sha256: str
    shard: Tuple[int, int]
    resume_position: int  # first first-flip position not yet fully evaluated
    end_position: int
    complete: bool = False
    hits: List[HitModel] = Field(default_factory=list)


class TargetSetModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    fragment: int
    fragment_id: str
    model: Literal["1flip", "2flip"]
    baseline: str
    prefix_limit: int
    search_budget: Dict[str, int] = Field(default_factory=dict)
    shard_total: int = 1
    shards_completed: List[int] = Field(default_factory=list)
    targets: List[HitModel] = Field(default_factory=list)


# ─── Statistics ───────────────────────────────────────────────────────────────

class RateModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    fragments: int
    corrupted: int
    length_unit: Literal["bits", "bytes"]
    p: float
    p_lo: float
    p_hi: float
    t: float
    confidence: float
    bytes_per_flip: Optional[float] = None
    bytes_per_flip_range: Tuple[Optional[float], Optional[float]] = (None, None)
    expected_counts: Dict[str, float] = Field(default_factory=dict)
    chebyshev_t: Optional[float] = None
    chebyshev_interval: Optional[Tuple[float, float]] = None


# ─── Merge / report ───────────────────────────────────────────────────────────

class MaskRun(BaseModel):
    start: str
    length: int
    masks: str  # hex, one byte per indeterminate byte, set bits = indeterminate


class MaskModel(BaseModel):
    schema_version: int = SCHEMA_VERSION
    file: str
    length: int
    indeterminate_bits: int
    indeterminate_bytes: int
    runs: List[MaskRun] = Field(default_factory=list)


class UnitReport(BaseModel):
    id: str
    index: int
    kind: str
    start: str
    baseline: str
    model: Optional[str] = None
    shards_completed: List[int] = Field(default_factory=list)
    n_targets_pre: int = 0
    n_targets_post: int = 0
    escalated: bool = False
    indet_bits: int = 0
    indet_bytes: int = 0
    conflict: Optional[str] = None
    error: Optional[str] = None


class AmbiguityRow(BaseModel):
    """One row of the multiple-target listing: file, unit id, targets, indeterminacy."""
    file: str
    fragment_id: str
    n_targets: int
    indet_bits: int
    indet_bytes: int


class RatioRow(BaseModel):
    method: str
    bits: int
    bits_ratio: float
    bytes: int
    bytes_ratio: float
    files: int
    files_ratio: float


class RepairReport(BaseModel):
    schema_version: int = SCHEMA_VERSION
    image: str
    files_total: int = 0
    files_corrupt: int = 0
    files_repaired: int = 0
    total_bits: int = 0
    total_bytes: int = 0
    indeterminate_bits: int = 0
    indeterminate_bytes: int = 0
    fragment_blocks: int = 0
    data_blocks: int = 0
    corrupt_fragment_blocks: int = 0
    corrupt_data_blocks: int = 0
    metadata_repairs: List[str] = Field(default_factory=list)
    units: List[UnitReport] = Field(default_factory=list)
    ambiguous: List[AmbiguityRow] = Field(default_factory=list)
    ratios: List[RatioRow] = Field(default_factory=list)
    rate: Optional[RateModel] = None
    complete: bool = True


# ─── Corpus ───────────────────────────────────────────────────────────────────

class ManifestFile(BaseModel):
    path: str
    size: int
    sha256: str
    units: List[int] = Field(default_factory=list)


class ManifestUnit(BaseModel):
    index: int
    kind: str
    start: str
    compressed_len: int
    sha256: str
    payload_sha256: str


class InjectionModel(BaseModel):
    prng: str
    seed: int
    p: Optional[float] = None
    k: Optional[int] = None
    fragment: Optional[int] = None
    regions: List[Tuple[str, str]] = Field(default_factory=list)
    flips: List[Tuple[int, int]] = Field(default_factory=list)  # (byte offset, bit index)
    still_valid: Optional[bool] = None


class Manifest(BaseModel):
    schema_version: int = SCHEMA_VERSION
    builder: str
    block_size: int
    image_sha256: str
    files: List[ManifestFile] = Field(default_factory=list)
    fragments: List[ManifestUnit] = Field(default_factory=list)
    injections: List[InjectionModel] = Field(default_factory=list)


# ─── Run configuration ────────────────────────────────────────────────────────

class PipelineConfig(BaseModel):
    image: str
    out_dir: str
    offset: int = 0
    length: Optional[int] = None
    model: Literal["1flip", "2flip"] = "1flip"
    jobs: int = Field(default_factory=lambda: settings.JOBS)
    shard: Tuple[int, int] = (0, 1)
    checkpoint_dir: Optional[str] = None
    length_unit: Literal["bits", "bytes"] = Field(default_factory=lambda: settings.LENGTH_UNIT)
    tail_prob: float = Field(default_factory=lambda: settings.TAIL_PROB)
    strict: bool = False
    prefix_2flip: bool = False
    progress: bool = False
