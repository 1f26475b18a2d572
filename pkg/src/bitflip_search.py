"""
Brute-force bitflip repair of a single zlib unit.

Candidates are the corrupted bytes with one or two bits inverted; each is
screened with C zlib and survivors are re-verified by the exact oracle.
Bit index = byte * 8 + bit, bit 0 being the least significant.

2-flip work is split into shards of contiguous first-flip ranges balanced on
the triangular pair count, so any shard can run on another machine and be
resumed from its checkpoint.
"""

import hashlib
import logging
import multiprocessing
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from tqdm import tqdm

from checkpoint_store import CheckpointStore, SearchProgress
from config import settings
from errors import SearchError
from models import HitModel, TargetSetModel
from zlib_oracle import OracleVerdict, check_candidate, quick_check

logger = logging.getLogger(__name__)

ONE_FLIP = "1flip"
TWO_FLIP = "2flip"
MODELS = (ONE_FLIP, TWO_FLIP)

Hit = Tuple[Tuple[int, ...], str, int]  # (flips, payload sha256, payload length)


# ─── Types ────────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CandidateSpec:
    fragment_index: int
    flip_positions: Tuple[int, ...]

    def __post_init__(self):
        if len(self.flip_positions) not in (1, 2):
            raise SearchError("a candidate flips one or two bits")
        if len(set(self.flip_positions)) != len(self.flip_positions):
            raise SearchError(f"flip positions {self.flip_positions} are not distinct")
        if min(self.flip_positions) < 0:
            raise SearchError("flip positions must be non-negative")

    def apply(self, fragment: bytes) -> bytes:
        if max(self.flip_positions) >= 8 * len(fragment):
            raise SearchError(f"flip {max(self.flip_positions)} outside a {len(fragment)}-byte unit")
        return apply_flips(fragment, self.flip_positions)


@dataclass(frozen=True)
class Target:
    flips: Tuple[int, ...]
    payload: bytes

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.payload).hexdigest()

    def to_model(self) -> HitModel:
        return HitModel(flips=list(self.flips), sha256=self.sha256, length=len(self.payload))


@dataclass
class TargetSet:
    fragment_index: int
    targets: List[Target]
    prefix_limit: int
    search_budget: Dict[str, int] = field(default_factory=lambda: {"one_flip": 0, "two_flip": 0})
    model: str = ONE_FLIP
    shard_total: int = 1
    shards_completed: List[int] = field(default_factory=list)
    fragment_id: str = ""
    baseline: str = ""

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def payloads(self) -> List[bytes]:
        return [t.payload for t in self.targets]

    @property
    def complete(self) -> bool:
        return sorted(self.shards_completed) == list(range(self.shard_total))

    def to_model(self) -> TargetSetModel:
        return TargetSetModel(
            fragment=self.fragment_index,
            fragment_id=self.fragment_id,
            model=self.model,
            baseline=self.baseline,
            prefix_limit=self.prefix_limit,
            search_budget=dict(self.search_budget),
            shard_total=self.shard_total,
            shards_completed=sorted(self.shards_completed),
            targets=[t.to_model() for t in self.targets],
        )

    @classmethod
    def from_model(cls, model: TargetSetModel, fragment: bytes, max_len: int) -> "TargetSet":
        """Rebuild payloads from the recorded flips; JSON artifacts carry only digests."""
        targets = []
        for hit in model.targets:
            payload = quick_check(apply_flips(fragment, hit.flips), max_len)
            if payload is None or hashlib.sha256(payload).hexdigest() != hit.sha256:
                raise SearchError(f"[unit {model.fragment}] flips {hit.flips} no longer reproduce their target")
            targets.append(Target(tuple(hit.flips), payload))
        return cls(
            fragment_index=model.fragment, targets=targets, prefix_limit=model.prefix_limit,
            search_budget=dict(model.search_budget), model=model.model, shard_total=model.shard_total,
            shards_completed=list(model.shards_completed), fragment_id=model.fragment_id,
            baseline=model.baseline,
        )


@dataclass(frozen=True)
class CostEstimate:
    model: str
    limit: int
    candidates: int
    predicted_work: int  # candidates x unit length, in byte-inflations


# ─── Arithmetic ───────────────────────────────────────────────────────────────

def fragment_id(fragment: bytes) -> str:
    return hashlib.sha256(fragment).hexdigest()


def apply_flips(data: bytes, flips: Iterable[int]) -> bytes:
    buf = bytearray(data)
    for pos in flips:
        buf[pos >> 3] ^= 1 << (pos & 7)
    return bytes(buf)


def pair_count(n_bits: int) -> int:
    return n_bits * (n_bits - 1) // 2 if n_bits > 1 else 0


def pairs_before(first: int, n_bits: int) -> int:
    """Number of pairs (a, b), a < b < n_bits, whose first flip a is below `first`."""
    return first * n_bits - first * (first + 1) // 2


def shard_bounds(n_bits: int, shard: Tuple[int, int]) -> Tuple[int, int]:
    """First-flip range [start, stop) of shard i of m, balanced on pair count."""
    index, total = shard
    if total < 1 or not 0 <= index < total:
        raise SearchError(f"invalid shard {index}/{total}")

    all_pairs = pair_count(n_bits)

    def boundary(i: int) -> int:
        if i == total:
            return n_bits
        goal = -(-i * all_pairs // total)
        lo, hi = 0, n_bits
        while lo < hi:
            mid = (lo + hi) // 2
            if pairs_before(mid, n_bits) >= goal:
                hi = mid
            else:
                lo = mid + 1
        return lo

    return boundary(index), boundary(index + 1)


def estimate_cost(fragment_len: int, limit: int, model: str) -> CostEstimate:
    if model not in MODELS:
        raise SearchError(f"unknown model {model!r}")
    n_bits = 8 * limit
    candidates = n_bits if model == ONE_FLIP else pair_count(n_bits)
    return CostEstimate(model, limit, candidates, candidates * fragment_len)


def prefix_limit(fragment: bytes, max_len: int, strict: bool = False,
                 verdict: Optional[OracleVerdict] = None) -> int:
    """Bytes a single repairing flip must lie in: the consumed prefix, or the whole unit."""
    verdict = verdict or check_candidate(fragment, max_len, strict)
    if verdict.valid:
        raise SearchError("unit already passes the oracle")
    return verdict.consumed if verdict.consumed < len(fragment) else len(fragment)


# ─── Scanning kernels ─────────────────────────────────────────────────────────

def _digest(payload: bytes) -> Tuple[str, int]:
    return hashlib.sha256(payload).hexdigest(), len(payload)


def _scan_singles(fragment: bytes, max_len: int, strict: bool, start: int, stop: int) -> List[Hit]:
    buf = bytearray(fragment)
    hits = []
    for pos in range(start, stop):
        i, mask = pos >> 3, 1 << (pos & 7)
        buf[i] ^= mask
        payload = quick_check(buf, max_len, strict)
        if payload is not None:
            hits.append(((pos,),) + _digest(payload))
        buf[i] ^= mask
    return hits


def _scan_pairs(fragment: bytes, max_len: int, strict: bool, start: int, stop: int, n_bits: int) -> List[Hit]:
    buf = bytearray(fragment)
    hits = []
    for a in range(start, stop):
        ia, ma = a >> 3, 1 << (a & 7)
        buf[ia] ^= ma
        for b in range(a + 1, n_bits):
            ib, mb = b >> 3, 1 << (b & 7)
            buf[ib] ^= mb
            payload = quick_check(buf, max_len, strict)
            if payload is not None:
                hits.append(((a, b),) + _digest(payload))
            buf[ib] ^= mb
        buf[ia] ^= ma
    return hits


# Per-process state; set once by the pool initializer so tasks carry only ranges.
_WORKER: Dict[str, object] = {}


def _init_worker(fragment: bytes, max_len: int, strict: bool, n_bits: int) -> None:
    _WORKER.update(fragment=fragment, max_len=max_len, strict=strict, n_bits=n_bits)


def _single_task(task: Tuple[int, int, int]) -> Tuple[int, List[Hit]]:
    number, start, stop = task
    w = _WORKER
    return number, _scan_singles(w["fragment"], w["max_len"], w["strict"], start, stop)


def _pair_task(task: Tuple[int, int, int]) -> Tuple[int, List[Hit]]:
    number, start, stop = task
    w = _WORKER
    return number, _scan_pairs(w["fragment"], w["max_len"], w["strict"], start, stop, w["n_bits"])


def _chunks(start: int, stop: int, size: int) -> List[Tuple[int, int, int]]:
    return [(n, lo, min(stop, lo + size)) for n, lo in enumerate(range(start, stop, size))]


def _run(tasks: List[Tuple[int, int, int]], task_fn: Callable, init_args: tuple, jobs: int,
         on_done: Callable[[int, List[Hit]], None], desc: str, progress: bool) -> None:
    """Runs tasks in-process (jobs == 1) or on a worker pool; results arrive in any order."""
    with tqdm(total=len(tasks), desc=desc, unit="chunk", disable=not progress, leave=False) as bar:
        if jobs <= 1 or len(tasks) <= 1:
            _init_worker(*init_args)
            for task in tasks:
                on_done(*task_fn(task))
                bar.update()
            return
        with multiprocessing.Pool(jobs, initializer=_init_worker, initargs=init_args) as pool:
            for number, hits in pool.imap_unordered(task_fn, tasks):
                on_done(number, hits)
                bar.update()


# ─── Hit collection ───────────────────────────────────────────────────────────

def _canonical(flips: Tuple[int, ...]) -> Tuple[int, Tuple[int, ...]]:
    return len(flips), flips


def collect_targets(fragment: bytes, max_len: int, hits: Iterable[Hit], strict: bool = False,
                    verify: Optional[bool] = None, fragment_index: int = 0) -> List[Target]:
    """Single-threaded dedupe by payload, keeping the smallest flip set, in canonical order."""
    verify = settings.VERIFY_HITS if verify is None else verify
    seen_flips, seen_payloads = set(), set()
    targets = []
    for flips, digest, _length in sorted(hits, key=lambda h: _canonical(h[0])):
        if flips in seen_flips or digest in seen_payloads:
            continue
        seen_flips.add(flips)
        candidate = apply_flips(fragment, flips)
        payload = quick_check(candidate, max_len, strict)
        if payload is None or hashlib.sha256(payload).hexdigest() != digest:
            raise SearchError(f"[unit {fragment_index}] hit {flips} does not reproduce")
        if verify:
            verdict = check_candidate(candidate, max_len, strict)
            if not verdict.valid or verdict.payload != payload:
                logger.warning(
                    f"[unit {fragment_index}] screen accepted flips {flips} but the oracle says "
                    f"{verdict.status.value}: {verdict.reason}"
                )
                continue
        seen_payloads.add(digest)
        targets.append(Target(flips, payload))
    return targets


def union_target_sets(sets: Sequence[TargetSet]) -> TargetSet:
    """Union of partial results for one unit (shards, or 1-flip plus 2-flip)."""
    if not sets:
        raise SearchError("nothing to combine")
    first = sets[0]
    if any(s.fragment_index != first.fragment_index for s in sets):
        raise SearchError("target sets belong to different units")
    by_payload: Dict[bytes, Target] = {}
    for target in sorted((t for s in sets for t in s.targets), key=lambda t: _canonical(t.flips)):
        by_payload.setdefault(target.payload, target)
    budget = {"one_flip": 0, "two_flip": 0}
    for s in sets:
        for key, value in s.search_budget.items():
            budget[key] = budget.get(key, 0) + value
    two = [s for s in sets if s.model == TWO_FLIP]
    return TargetSet(
        fragment_index=first.fragment_index,
        targets=sorted(by_payload.values(), key=lambda t: _canonical(t.flips)),
        prefix_limit=max(s.prefix_limit for s in sets),
        search_budget=budget,
        model=TWO_FLIP if two else ONE_FLIP,
        shard_total=two[0].shard_total if two else 1,
        shards_completed=sorted({i for s in (two or sets) for i in s.shards_completed}),
        fragment_id=first.fragment_id,
        baseline=first.baseline,
    )


# ─── Search entry points ──────────────────────────────────────────────────────

def repair_1flip(fragment: bytes, max_len: int, limit: Optional[int] = None, jobs: Optional[int] = None,
                 fragment_index: int = 0, strict: bool = False, progress: bool = False) -> TargetSet:
    limit = len(fragment) if limit is None else min(limit, len(fragment))
    jobs = jobs or settings.JOBS
    n_bits = 8 * limit
    cost = estimate_cost(len(fragment), limit, ONE_FLIP)
    logger.info(f"[unit {fragment_index}] 1-flip search over {cost.candidates} candidates")

    hits: List[Hit] = []
    tasks = _chunks(0, n_bits, settings.CHUNK_POSITIONS * 8)
    _run(tasks, _single_task, (fragment, max_len, strict, n_bits), jobs,
         lambda _n, found: hits.extend(found), f"unit {fragment_index} 1-flip", progress)

    return TargetSet(
        fragment_index=fragment_index,
        targets=collect_targets(fragment, max_len, hits, strict, fragment_index=fragment_index),
        prefix_limit=limit,
        search_budget={"one_flip": n_bits, "two_flip": 0},
        model=ONE_FLIP,
        shards_completed=[0],
        fragment_id=fragment_id(fragment),
    )


def repair_2flip(fragment: bytes, max_len: int, limit: Optional[int] = None, shard: Tuple[int, int] = (0, 1),
                 jobs: Optional[int] = None, checkpoint_dir: Optional[str] = None, fragment_index: int = 0,
                 strict: bool = False, progress: bool = False) -> TargetSet:
    """One shard of the pair search; pairs have both flips below 8 x limit."""
    limit = len(fragment) if limit is None else min(limit, len(fragment))
    jobs = jobs or settings.JOBS
    n_bits = 8 * limit
    first_start, first_stop = shard_bounds(n_bits, shard)
    evaluated = pairs_before(first_stop, n_bits) - pairs_before(first_start, n_bits)
    tag = f"[unit {fragment_index}] [shard {shard[0]}/{shard[1]}]"
    logger.info(f"{tag} 2-flip search over first flips [{first_start}, {first_stop}), {evaluated} pairs")

    unit_id = fragment_id(fragment)
    store = CheckpointStore(checkpoint_dir) if checkpoint_dir else None
    if store:
        state = store.get_or_create(fragment_index, unit_id, shard, first_start, first_stop)
    else:
        state = SearchProgress(fragment_index, unit_id, shard, first_start, first_stop, first_start)

    hits: List[Hit] = [(tuple(h.flips), h.sha256, h.length) for h in state.hits]
    if not state.complete:
        tasks = _chunks(state.resume_position, first_stop, settings.CHUNK_POSITIONS)
        done: Dict[int, int] = {}
        watermark = [0]  # count of leading tasks finished

        def on_done(number: int, found: List[Hit]) -> None:
            hits.extend(found)
            state.hits.extend(HitModel(flips=list(f), sha256=d, length=n) for f, d, n in found)
            done[number] = tasks[number][2]
            while watermark[0] in done:
                state.resume_position = done.pop(watermark[0])
                watermark[0] += 1
            if store and state.due(settings.CHECKPOINT_INTERVAL):
                store.update(state)

        _run(tasks, _pair_task, (fragment, max_len, strict, n_bits), jobs, on_done,
             f"unit {fragment_index} 2-flip {shard[0]}/{shard[1]}", progress)
        state.resume_position = first_stop
        state.complete = True
        if store:
            store.update(state)

    return TargetSet(
        fragment_index=fragment_index,
        targets=collect_targets(fragment, max_len, set(hits), strict, fragment_index=fragment_index),
        prefix_limit=limit,
        search_budget={"one_flip": 0, "two_flip": evaluated},
        model=TWO_FLIP,
        shard_total=shard[1],
        shards_completed=[shard[0]],
        fragment_id=unit_id,
    )


def repair_fragment(fragment: bytes, max_len: int, model: str = ONE_FLIP, fragment_index: int = 0,
                    shard: Tuple[int, int] = (0, 1), jobs: Optional[int] = None,
                    checkpoint_dir: Optional[str] = None, strict: bool = False,
                    prefix_2flip: bool = False, progress: bool = False) -> TargetSet:
    """
    Baseline check, 1-flip search over the consumed prefix, then (2flip model
    only, and only when 1-flip found nothing) the requested 2-flip shard.
    """
    if model not in MODELS:
        raise SearchError(f"unknown model {model!r}")
    verdict = check_candidate(fragment, max_len, strict)
    if verdict.valid:
        return TargetSet(
            fragment_index=fragment_index, targets=[Target((), verdict.payload)], prefix_limit=0,
            search_budget={"one_flip": 0, "two_flip": 0}, model=model, shards_completed=[shard[0]],
            shard_total=shard[1] if model == TWO_FLIP else 1,
            fragment_id=fragment_id(fragment), baseline=verdict.status.value,
        )

    limit = prefix_limit(fragment, max_len, strict, verdict)
    if limit < len(fragment):
        logger.info(f"[unit {fragment_index}] {verdict.status.value} after {limit} of {len(fragment)} bytes")
    result = repair_1flip(fragment, max_len, limit, jobs, fragment_index, strict, progress)
    if model == TWO_FLIP and not result.targets:
        pair_limit = limit if prefix_2flip else len(fragment)
        two = repair_2flip(fragment, max_len, pair_limit, shard, jobs, checkpoint_dir,
                           fragment_index, strict, progress)
        result = union_target_sets([result, two])
    result.baseline = verdict.status.value
    logger.info(f"[unit {fragment_index}] {len(result.targets)} target(s) under {result.model}")
    return result

