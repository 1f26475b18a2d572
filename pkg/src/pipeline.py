"""
Repair pipeline: inventory -> estimate -> repair -> filter/merge -> extract -> report.

Each stage is a plain function over in-memory state so the CLI can run them
one at a time (exchanging JSON artifacts through a shared directory) or all
at once through run_pipeline(). A failure inside one unit is logged and
recorded in the report; only an unreadable superblock or fragment table
stops the run.
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from bitflip_search import TWO_FLIP, TargetSet, apply_flips, fragment_id, repair_fragment, union_target_sets
from bitflip_stats import RateEstimate, summarize
from config import settings
from errors import MergeError, MetadataError, NoAdmissibleLengthsError, SquashfixError, SquashfsError
from merge import (
    TernaryBuffer,
    admissible_lengths,
    emit_variants,
    expected_unit_length,
    length_filter,
    mask_model,
    merge_target_set,
    subset_sum_filter,
)
from models import (
    AmbiguityRow,
    FileModel,
    InventoryModel,
    OwnerModel,
    PipelineConfig,
    RatioRow,
    RepairReport,
    TargetSetModel,
    UnitModel,
    UnitReport,
    hex_offset,
)
from squashfs_model import (
    METADATA_SIZE,
    FragmentRecord,
    InodeSummary,
    Inventory,
    build_inventory,
    load_fragment_table,
    parse_superblock,
    unit_bytes,
)
from zlib_oracle import OracleVerdict, Status, check_candidate, quick_check

logger = logging.getLogger(__name__)

STORED = "Stored"
MAX_METADATA_REPAIRS = 64


# ─── Image & inventory ────────────────────────────────────────────────────────

def open_image(path: str, offset: int = 0, length: Optional[int] = None) -> bytes:
    """The SquashFS sub-range of a file; table offsets are relative to its start."""
    data = Path(path).read_bytes()
    if offset < 0 or offset > len(data):
        raise SquashfsError(f"offset {offset:#x} outside {path} ({len(data):#x} bytes)")
    end = len(data) if length is None else offset + length
    if end > len(data):
        raise SquashfsError(f"range [{offset:#x}, {end:#x}) runs past the end of {path}")
    return data[offset:end]


@dataclass
class InventoryState:
    image: bytes  # after metadata repairs
    inventory: Inventory
    baselines: Dict[int, OracleVerdict] = field(default_factory=dict)  # compressed units only
    metadata_repairs: List[str] = field(default_factory=list)
    walk_error: Optional[str] = None

    @property
    def corrupted(self) -> List[int]:
        return sorted(i for i, v in self.baselines.items() if not v.valid)

    def unit(self, index: int) -> FragmentRecord:
        return self.inventory.units[index]

    def intact_payload(self, index: int) -> Optional[bytes]:
        unit = self.unit(index)
        if not unit.is_compressed:
            return unit_bytes(self.image, unit)
        verdict = self.baselines.get(index)
        return verdict.payload if verdict is not None and verdict.valid else None


def baseline_verdict(raw: bytes, max_len: int, strict: bool = False) -> OracleVerdict:
    """C-zlib fast path for intact units, the exact oracle for the rest."""
    payload = quick_check(raw, max_len, strict)
    if payload is not None:
        return OracleVerdict(Status.VALID, len(raw), payload=payload)
    return check_candidate(raw, max_len, strict)


def repair_metadata(image: bytes, model: str = "1flip", jobs: Optional[int] = None,
                    strict: bool = False) -> Tuple[bytes, Inventory, List[str]]:
    """Build the inventory, repairing corrupted metadata blocks on the way when a repair is unique."""
    notes: List[str] = []
    for _attempt in range(MAX_METADATA_REPAIRS):
        try:
            return image, build_inventory(image), notes
        except MetadataError as exc:
            offset = exc.block_offset
            length = int.from_bytes(image[offset:offset + 2], "little") & 0x7FFF
            raw = image[offset + 2:offset + 2 + length]
            logger.warning(f"[metadata {offset:#x}] {exc}; attempting repair")
            result = repair_fragment(raw, METADATA_SIZE, model, fragment_index=-1, jobs=jobs, strict=strict)
            if len(result.targets) != 1:
                raise MetadataError(
                    f"metadata block at {offset:#x} has {len(result.targets)} repairs, cannot continue walk",
                    offset,
                ) from exc
            flips = result.targets[0].flips
            patched = apply_flips(raw, flips)
            image = image[:offset + 2] + patched + image[offset + 2 + length:]
            notes.append(f"{offset:#x}: flips {list(flips)}")
            logger.info(f"[metadata {offset:#x}] repaired with flips {list(flips)}")
    raise SquashfsError(f"more than {MAX_METADATA_REPAIRS} corrupted metadata blocks")


def load_inventory(image: bytes, model: str = "1flip", jobs: Optional[int] = None,
                   strict: bool = False) -> InventoryState:
    sb = parse_superblock(image)
    walk_error = None
    notes: List[str] = []
    try:
        image, inventory, notes = repair_metadata(image, model, jobs, strict)
    except SquashfsError as exc:
        # Without inodes the fragment blocks can still be repaired, just not filtered or extracted.
        logger.error(f"[inventory] inode walk failed, continuing with fragment blocks only: {exc}")
        walk_error = str(exc)
        fragments = load_fragment_table(image, sb)
        inventory = Inventory(sb, fragments, [], fragment_blocks=len(fragments), data_blocks=0)

    state = InventoryState(image, inventory, metadata_repairs=notes, walk_error=walk_error)
    for unit in inventory.units:
        if unit.is_compressed:
            state.baselines[unit.index] = baseline_verdict(unit_bytes(image, unit), unit.max_decompressed_len, strict)
    logger.info(
        f"[inventory] {len(inventory.units)} units, {len(state.corrupted)} fail the oracle"
    )
    return state


def inventory_model(state: InventoryState, image_name: str, offset: int = 0) -> InventoryModel:
    sb = state.inventory.superblock
    units = []
    for unit in state.inventory.units:
        verdict = state.baselines.get(unit.index)
        units.append(UnitModel(
            index=unit.index, kind=unit.kind, start=hex_offset(unit.start),
            compressed_len=unit.compressed_len, is_compressed=unit.is_compressed,
            max_decompressed_len=unit.max_decompressed_len,
            sha256=fragment_id(unit_bytes(state.image, unit)),
            baseline=verdict.status.value if verdict else STORED,
            consumed=verdict.consumed if verdict else unit.compressed_len,
            owners=[OwnerModel(inode=o.inode_number, path=o.path, role=o.role, offset=o.offset, length=o.length)
                    for o in unit.owners],
        ))
    return InventoryModel(
        image=image_name,
        offset=hex_offset(offset),
        length=len(state.image),
        block_size=sb.block_size,
        superblock={k: v for k, v in vars(sb).items()},
        fragment_blocks=state.inventory.fragment_blocks,
        data_blocks=state.inventory.data_blocks,
        units=units,
        files=[FileModel(inode=f.inode_number, path=f.file_path, size=f.file_size, kind=f.kind,
                         units=list(f.unit_ids)) for f in state.inventory.files],
        corrupted=state.corrupted,
    )


# ─── Estimate ─────────────────────────────────────────────────────────────────

def estimate(state: InventoryState, tail_prob: Optional[float] = None,
             length_unit: Optional[str] = None) -> Optional[RateEstimate]:
    lengths = [state.unit(i).compressed_len for i in sorted(state.baselines)]
    if not lengths:
        return None
    return summarize(lengths, len(state.corrupted), tail_prob, length_unit)


def estimate_from_inventory(model: InventoryModel, tail_prob: Optional[float] = None,
                            length_unit: Optional[str] = None) -> RateEstimate:
    lengths = [u.compressed_len for u in model.units if u.is_compressed]
    if not lengths:
        raise SquashfixError("inventory has no compressed units")
    return summarize(lengths, len(model.corrupted), tail_prob, length_unit)


# ─── Repair ───────────────────────────────────────────────────────────────────

def repair_units(state: InventoryState, units: Optional[Iterable[int]] = None, model: str = "1flip",
                 shard: Tuple[int, int] = (0, 1), jobs: Optional[int] = None,
                 checkpoint_dir: Optional[str] = None, strict: bool = False, prefix_2flip: bool = False,
                 progress: bool = False) -> Tuple[Dict[int, TargetSet], Dict[int, str]]:
    """Target sets per corrupted unit, plus the error of every unit that could not be searched."""
    results: Dict[int, TargetSet] = {}
    errors: Dict[int, str] = {}
    for index in (state.corrupted if units is None else units):
        unit = state.unit(index)
        try:
            results[index] = repair_fragment(
                unit_bytes(state.image, unit), unit.max_decompressed_len, model, fragment_index=index,
                shard=shard, jobs=jobs, checkpoint_dir=checkpoint_dir, strict=strict,
                prefix_2flip=prefix_2flip, progress=progress,
            )
        except SquashfixError as exc:
            logger.error(f"[unit {index}] repair failed: {exc}", exc_info=True)
            errors[index] = str(exc)
    return results, errors


def target_path(directory: Path, result: TargetSet) -> Path:
    if result.model == TWO_FLIP and result.shard_total > 1:
        shard = result.shards_completed[0] if result.shards_completed else 0
        return directory / f"unit-{result.fragment_index}-shard-{shard}-of-{result.shard_total}.json"
    return directory / f"unit-{result.fragment_index}.json"


def save_target_sets(directory: str, results: Dict[int, TargetSet]) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for result in results.values():
        target_path(out, result).write_text(result.to_model().model_dump_json(indent=2))


def load_target_sets(directory: str, state: InventoryState) -> Dict[int, TargetSet]:
    """Read every target file, rebuild payloads and union shards of the same unit."""
    grouped: Dict[int, List[TargetSet]] = {}
    for path in sorted(Path(directory).glob("unit-*.json")):
        model = TargetSetModel.model_validate_json(path.read_text())
        unit = state.unit(model.fragment)
        grouped.setdefault(model.fragment, []).append(
            TargetSet.from_model(model, unit_bytes(state.image, unit), unit.max_decompressed_len)
        )
    return {index: union_target_sets(sets) for index, sets in sorted(grouped.items())}


# ─── Filter & merge ───────────────────────────────────────────────────────────

@dataclass
class UnitOutcome:
    index: int
    target_set: Optional[TargetSet]
    n_pre: int = 0
    n_post: int = 0
    escalated: bool = False
    conflict: Optional[str] = None
    error: Optional[str] = None
    buffer: Optional[TernaryBuffer] = None

    @property
    def repaired(self) -> bool:
        return self.buffer is not None and self.target_set is not None and self.target_set.complete


def _file_length_sets(state: InventoryState, summary: InodeSummary, unit_index: int,
                      candidate_lengths: set, results: Dict[int, TargetSet]) -> Tuple[List[set], int, int]:
    """Candidate length sets per stored part of the file, the unit's position among them, and sparse bytes."""
    bs = state.inventory.superblock.block_size
    sets, position = [], -1
    for number, index in enumerate(summary.unit_ids[:len([b for b in summary.blocks if not b.sparse])]):
        if index == unit_index and position < 0:
            position = number
            sets.append(set(candidate_lengths))
            continue
        payload = state.intact_payload(index)
        if payload is not None:
            sets.append({len(payload)})
        elif index in results and results[index].targets:
            sets.append({len(p) for p in results[index].payloads})
        else:
            sets.append({bs})
    sparse_bytes = 0
    remaining = summary.file_size
    for ref in summary.blocks:
        take = min(bs, remaining)
        remaining -= take
        if ref.sparse:
            sparse_bytes += take
    if summary.tail is not None:
        sets.append({summary.tail.length})
    return sets, position, sparse_bytes


def _escalate(state: InventoryState, unit: FragmentRecord, targets: TargetSet,
              results: Dict[int, TargetSet]) -> Tuple[TargetSet, Optional[str]]:
    """Subset-sum check over every owning file when the plain length filter rejects everything."""
    if unit.kind != "block":
        return replace(targets, targets=[]), "tail lengths are fixed by the inode; no target fits"
    lengths = {len(p) for p in targets.payloads}
    allowed = set(lengths)
    for owner in unit.owners:
        summary = next(f for f in state.inventory.files if f.inode_number == owner.inode_number)
        sets, position, sparse = _file_length_sets(state, summary, unit.index, lengths, results)
        try:
            tuples = subset_sum_filter(sets, summary.file_size - sparse)
        except (NoAdmissibleLengthsError, MergeError) as exc:
            return replace(targets, targets=[]), f"{owner.path}: {exc}"
        allowed &= admissible_lengths(tuples, position)
    return replace(targets, targets=[t for t in targets.targets if len(t.payload) in allowed]), None


def merge_units(state: InventoryState, results: Dict[int, TargetSet],
                errors: Optional[Dict[int, str]] = None) -> Dict[int, UnitOutcome]:
    errors = errors or {}
    bs = state.inventory.superblock.block_size
    outcomes: Dict[int, UnitOutcome] = {}
    for index in state.corrupted:
        unit = state.unit(index)
        targets = results.get(index)
        outcome = UnitOutcome(index, targets, error=errors.get(index))
        outcomes[index] = outcome
        if targets is None:
            outcome.error = outcome.error or "not searched"
            continue
        outcome.n_pre = len(targets)

        expected = expected_unit_length(unit, bs)
        outcome.conflict = expected.conflict
        filtered = targets
        if expected.length is not None and not expected.conflict:
            filtered_outcome = length_filter(targets, expected.length)
            filtered = filtered_outcome.targets
            if filtered_outcome.escalate:
                outcome.escalated = True
                filtered, outcome.conflict = _escalate(state, unit, targets, results)
        outcome.n_post = len(filtered)
        try:
            outcome.buffer = merge_target_set(filtered)
        except MergeError as exc:
            logger.error(f"[unit {index}] merge failed: {exc}")
            outcome.error = str(exc)
        if outcome.buffer is not None:
            logger.info(
                f"[unit {index}] {outcome.n_pre} -> {outcome.n_post} targets, "
                f"{outcome.buffer.indeterminate_bits} indeterminate bits"
            )
    return outcomes


# ─── Extract ──────────────────────────────────────────────────────────────────

@dataclass
class FileResult:
    path: str
    size: int
    corrupt: bool
    baseline_bytes: int  # bytes coming from units that were intact before repair
    buffer: TernaryBuffer


def _span(buffer: Optional[TernaryBuffer], start: int, length: int) -> Tuple[np.ndarray, np.ndarray]:
    """`length` bytes of buffer from `start`, unknown wherever the buffer has nothing."""
    value = np.zeros(length, dtype=np.uint8)
    known = np.zeros(length, dtype=np.uint8)
    if buffer is not None and start < buffer.length:
        n = min(length, buffer.length - start)
        value[:n] = buffer.value[start:start + n]
        known[:n] = buffer.known[start:start + n]
    return value, known


def unit_buffers(state: InventoryState, outcomes: Dict[int, UnitOutcome]) -> Dict[int, Optional[TernaryBuffer]]:
    buffers: Dict[int, Optional[TernaryBuffer]] = {}
    for unit in state.inventory.units:
        payload = state.intact_payload(unit.index)
        if payload is not None:
            buffers[unit.index] = TernaryBuffer.from_payload(payload)
        else:
            outcome = outcomes.get(unit.index)
            buffers[unit.index] = outcome.buffer if outcome else None
    return buffers


def assemble_files(state: InventoryState, outcomes: Dict[int, UnitOutcome]) -> List[FileResult]:
    buffers = unit_buffers(state, outcomes)
    corrupted = set(state.corrupted)
    bs = state.inventory.superblock.block_size
    files = []
    for summary in state.inventory.files:
        if summary.kind != "file":
            continue
        values, knowns = [], []
        baseline = 0
        is_corrupt = False
        ids = iter(summary.unit_ids)
        remaining = summary.file_size
        for ref in summary.blocks:
            take = min(bs, remaining)
            remaining -= take
            if ref.sparse:
                values.append(np.zeros(take, dtype=np.uint8))
                knowns.append(np.full(take, 0xFF, dtype=np.uint8))
                baseline += take
                continue
            index = next(ids)
            value, known = _span(buffers[index], 0, take)
            values.append(value)
            knowns.append(known)
            if index in corrupted:
                is_corrupt = True
            else:
                baseline += take
        if summary.tail is not None:
            index = next(ids)
            value, known = _span(buffers[index], summary.tail.offset, summary.tail.length)
            values.append(value)
            knowns.append(known)
            if index in corrupted:
                is_corrupt = True
            else:
                baseline += summary.tail.length
        buffer = TernaryBuffer(
            np.concatenate(values) if values else np.zeros(0, dtype=np.uint8),
            np.concatenate(knowns) if knowns else np.zeros(0, dtype=np.uint8),
        )
        files.append(FileResult(summary.file_path, summary.file_size, is_corrupt, baseline, buffer))
    return files


def write_tree(files: List[FileResult], out_dir: str) -> None:
    """all_true/ and all_false/ trees plus an RLE mask per file with indeterminate bytes."""
    root = Path(out_dir)
    for result in files:
        relative = result.path.lstrip("/")
        all_true, all_false = emit_variants(result.buffer)
        for variant, content in (("all_true", all_true), ("all_false", all_false)):
            target = root / variant / relative
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
        if result.buffer.indeterminate_bits:
            mask_path = root / "masks" / f"{relative}.mask.json"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            mask_path.write_text(mask_model(result.path, result.buffer).model_dump_json(indent=2))


# ─── Report ───────────────────────────────────────────────────────────────────

def _ratio(part: int, whole: int) -> float:
    return part / whole if whole else 1.0


def _unit_size(unit: FragmentRecord, block_size: int) -> int:
    return expected_unit_length(unit, block_size).length or unit.max_decompressed_len


def build_report(image_name: str, state: InventoryState, outcomes: Dict[int, UnitOutcome],
                 files: List[FileResult], rate: Optional[RateEstimate] = None) -> RepairReport:
    total_bytes = sum(f.size for f in files)
    indet_bits = sum(f.buffer.indeterminate_bits for f in files)
    indet_bytes = sum(f.buffer.indeterminate_bytes for f in files)
    baseline_bytes = sum(f.baseline_bytes for f in files)
    baseline_files = sum(1 for f in files if not f.corrupt)
    repaired_files = sum(1 for f in files if not f.buffer.indeterminate_bits)
    corrupt_files = [f for f in files if f.corrupt]

    bs = state.inventory.superblock.block_size
    units = []
    ambiguous = []
    for index, outcome in sorted(outcomes.items()):
        unit = state.unit(index)
        verdict = state.baselines[index]
        ts = outcome.target_set
        buffer = outcome.buffer
        units.append(UnitReport(
            id=fragment_id(unit_bytes(state.image, unit)),
            index=index, kind=unit.kind, start=hex_offset(unit.start),
            baseline=verdict.status.value,
            model=ts.model if ts else None,
            shards_completed=sorted(ts.shards_completed) if ts else [],
            n_targets_pre=outcome.n_pre, n_targets_post=outcome.n_post, escalated=outcome.escalated,
            indet_bits=buffer.indeterminate_bits if buffer else 8 * _unit_size(unit, bs),
            indet_bytes=buffer.indeterminate_bytes if buffer else _unit_size(unit, bs),
            conflict=outcome.conflict, error=outcome.error,
        ))
        if buffer is not None and outcome.n_post > 1:
            for owner in unit.owners:
                value, known = _span(buffer, owner.offset, owner.length)
                view = TernaryBuffer(value, known)
                ambiguous.append(AmbiguityRow(
                    file=owner.path, fragment_id=units[-1].id, n_targets=outcome.n_post,
                    indet_bits=view.indeterminate_bits, indet_bytes=view.indeterminate_bytes,
                ))

    ratios = [
        RatioRow(method="baseline",
                 bits=8 * baseline_bytes, bits_ratio=_ratio(baseline_bytes, total_bytes),
                 bytes=baseline_bytes, bytes_ratio=_ratio(baseline_bytes, total_bytes),
                 files=baseline_files, files_ratio=_ratio(baseline_files, len(files))),
        RatioRow(method="repaired",
                 bits=8 * total_bytes - indet_bits, bits_ratio=_ratio(8 * total_bytes - indet_bits, 8 * total_bytes),
                 bytes=total_bytes - indet_bytes, bytes_ratio=_ratio(total_bytes - indet_bytes, total_bytes),
                 files=repaired_files, files_ratio=_ratio(repaired_files, len(files))),
    ]
    corrupted = [state.unit(i) for i in state.corrupted]
    return RepairReport(
        image=image_name,
        files_total=len(files),
        files_corrupt=len(corrupt_files),
        files_repaired=sum(1 for f in corrupt_files if not f.buffer.indeterminate_bits),
        total_bits=8 * total_bytes,
        total_bytes=total_bytes,
        indeterminate_bits=indet_bits,
        indeterminate_bytes=indet_bytes,
        fragment_blocks=state.inventory.fragment_blocks,
        data_blocks=state.inventory.data_blocks,
        corrupt_fragment_blocks=sum(1 for u in corrupted if u.kind == "fragment"),
        corrupt_data_blocks=sum(1 for u in corrupted if u.kind == "block"),
        metadata_repairs=list(state.metadata_repairs),
        units=units,
        ambiguous=ambiguous,
        ratios=ratios,
        rate=rate.to_model() if rate else None,
        complete=all(o.repaired for o in outcomes.values()) and state.walk_error is None,
    )


def report_ratios(report: RepairReport) -> str:
    """Recovered bits / bytes / files per method as a fixed-width table."""
    lines = [f"{'method':<10} {'bits':>14} {'ratio':>8} {'bytes':>12} {'ratio':>8} {'files':>7} {'ratio':>8}"]
    for row in report.ratios:
        lines.append(
            f"{row.method:<10} {row.bits:>14,} {row.bits_ratio:>8.2%} {row.bytes:>12,} "
            f"{row.bytes_ratio:>8.2%} {row.files:>7,} {row.files_ratio:>8.2%}"
        )
    lines.append(f"{'total':<10} {report.total_bits:>14,} {'':>8} {report.total_bytes:>12,} "
                 f"{'':>8} {report.files_total:>7,}")
    return "\n".join(lines)


def exit_code(report: RepairReport) -> int:
    """0 when every corrupted unit ended with a nonempty, fully searched target set."""
    return 0 if report.complete else 1


# ─── End to end ───────────────────────────────────────────────────────────────

def run_pipeline(config: PipelineConfig) -> Tuple[RepairReport, int]:
    image = open_image(config.image, config.offset, config.length)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    state = load_inventory(image, config.model, config.jobs, config.strict)
    (out / "inventory.json").write_text(
        inventory_model(state, config.image, config.offset).model_dump_json(indent=2))

    rate = estimate(state, config.tail_prob, config.length_unit)
    results, errors = repair_units(
        state, model=config.model, shard=config.shard, jobs=config.jobs,
        checkpoint_dir=config.checkpoint_dir or settings.CHECKPOINT_DIR, strict=config.strict,
        prefix_2flip=config.prefix_2flip, progress=config.progress,
    )
    save_target_sets(str(out / "targets"), results)

    outcomes = merge_units(state, results, errors)
    files = assemble_files(state, outcomes)
    write_tree(files, str(out))

    report = build_report(config.image, state, outcomes, files, rate)
    (out / "report.json").write_text(report.model_dump_json(indent=2))
    logger.info("[report]\n" + report_ratios(report))
    return report, exit_code(report)

