"""
Multi-Scenario Repair Test Script
=================================
Builds a ground-truthed corpus per scenario, injects bitflips, runs the
repair stages and scores the outcome against the original tree.

Scoring (100 points per scenario):
  1. Exit code:       20 pts (matches the expected completeness)
  2. Content:         50 pts (share of files whose determinate bits match ground truth)
  3. Recovery:        20 pts (repaired ratio reaches the expected level)
  4. Report:          10 pts (counts and ratios are internally consistent)

The "cost" scenario instead times full-range 2-flip searches on fragments of
256 to 2048 bytes and checks that log time grows with slope 3 in log length.

Usage:
    python repair_scenarios.py
    python repair_scenarios.py --scenario one_flip
    python repair_scenarios.py --jobs 4
"""

import argparse
import logging
import tempfile
import time
import zlib
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from bitflip_search import ONE_FLIP, TWO_FLIP, repair_2flip
from config import settings
from corpus import build_image, generate_tree, inject_exact
from models import PipelineConfig, RepairReport
from pipeline import (
    assemble_files,
    build_report,
    exit_code,
    load_inventory,
    load_target_sets,
    merge_units,
    open_image,
    repair_units,
    report_ratios,
    run_pipeline,
    save_target_sets,
    write_tree,
)
from squashfs_model import build_inventory

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096


# ═══════════════════════════════════════════════════════════════════════════════
# SCENARIOS
# `flips` maps unit index -> number of injected flips. Small files keep the
# 2-flip scenarios fast enough for a laptop.
# ═══════════════════════════════════════════════════════════════════════════════

SCENARIOS = [
    {
        "name": "Clean image",
        "key": "clean",
        "seed": 1,
        "files": 12,
        "sizes": (200, 3000),
        "flips": {},
        "model": ONE_FLIP,
        "expect_code": 0,
        "expect_ratio": 1.0,
    },
    {
        "name": "Single flips",
        "key": "one_flip",
        "seed": 2,
        "files": 16,
        "sizes": (500, 6000),
        "flips": {0: 1, 2: 1, 4: 1},
        "model": ONE_FLIP,
        "expect_code": 0,
        "expect_ratio": 0.999,
    },
    {
        "name": "Double flip",
        "key": "two_flip",
        "seed": 3,
        "files": 3,
        "sizes": (60, 120),
        "flips": {0: 2},
        "model": TWO_FLIP,
        "expect_code": 0,
        "expect_ratio": 0.999,
    },
    {
        "name": "Double flip over two shards",
        "key": "shard_union",
        "seed": 4,
        "files": 3,
        "sizes": (60, 120),
        "flips": {0: 2},
        "model": TWO_FLIP,
        "shards": 2,
        "expect_code": 0,
        "expect_ratio": 0.999,
    },
    {
        "name": "Triple flip (unrepairable)",
        "key": "three_flip",
        "seed": 5,
        "files": 3,
        "sizes": (60, 120),
        "flips": {0: 3},
        "model": TWO_FLIP,
        "expect_code": 1,
        "expect_ratio": 0.0,
    },
]


# ═══════════════════════════════════════════════════════════════════════════════
# SCORING
# ═══════════════════════════════════════════════════════════════════════════════

def _matches(tree: Path, truth: Dict[str, bytes]) -> int:
    """Files whose all_true and all_false variants agree with ground truth on every determinate bit."""
    good = 0
    for path, content in truth.items():
        relative = path.lstrip("/")
        hi = tree / "all_true" / relative
        lo = tree / "all_false" / relative
        if not hi.exists() or not lo.exists():
            continue
        hi_bytes = np.frombuffer(hi.read_bytes(), dtype=np.uint8)
        lo_bytes = np.frombuffer(lo.read_bytes(), dtype=np.uint8)
        want = np.frombuffer(content, dtype=np.uint8)
        if hi_bytes.size != want.size or lo_bytes.size != want.size:
            continue
        known = ~(hi_bytes ^ lo_bytes)
        if not np.any((want ^ lo_bytes) & known):
            good += 1
    return good


def score_outcome(scenario: dict, report: RepairReport, code: int, tree: Path,
                  truth: Dict[str, bytes]) -> Dict[str, int]:
    repaired = next((r for r in report.ratios if r.method == "repaired"), None)
    ratio = repaired.bits_ratio if repaired else 0.0
    corrupted_files = report.files_corrupt

    score = {"exitCode": 20 if code == scenario["expect_code"] else 0}

    good = _matches(tree, truth)
    score["content"] = round(50 * good / len(truth)) if truth else 50

    if scenario["expect_ratio"] == 0.0:
        score["recovery"] = 20 if report.files_repaired < corrupted_files or not corrupted_files else 0
    else:
        score["recovery"] = 20 if ratio >= scenario["expect_ratio"] else round(20 * ratio)

    consistent = (
        report.files_repaired <= report.files_corrupt <= report.files_total
        and report.total_bits == 8 * report.total_bytes
        and all(0.0 <= r.bits_ratio <= 1.0 and 0.0 <= r.files_ratio <= 1.0 for r in report.ratios)
    )
    score["report"] = 10 if consistent else 0
    score["total"] = sum(score.values())
    return score


# ═══════════════════════════════════════════════════════════════════════════════
# RUNNERS
# ═══════════════════════════════════════════════════════════════════════════════

def _corrupt(image: bytes, flips: Dict[int, int], seed: int) -> bytes:
    inventory = build_inventory(image)
    for offset, (index, k) in enumerate(sorted(flips.items())):
        image, record = inject_exact(image, k, index, seed + offset, inventory)
        print(f"  │ unit {index}: flipped bits {record.bit_positions} (still valid: {record.still_valid})")
    return image


def _sharded(scenario: dict, image_path: Path, work: Path, jobs: int):
    """Each shard searched as if on its own machine, then merged from the shared directory."""
    shards = scenario["shards"]
    state = load_inventory(open_image(str(image_path)), scenario["model"], jobs)
    for i in range(shards):
        results, _errors = repair_units(state, model=scenario["model"], shard=(i, shards), jobs=jobs,
                                        checkpoint_dir=str(work / "checkpoints"))
        save_target_sets(str(work / "targets"), results)
        print(f"  │ shard {i}/{shards}: {sum(len(r) for r in results.values())} targets")
    results = load_target_sets(str(work / "targets"), state)
    outcomes = merge_units(state, results)
    files = assemble_files(state, outcomes)
    write_tree(files, str(work))
    report = build_report(str(image_path), state, outcomes, files)
    return report, exit_code(report)


def run_scenario(scenario: dict, jobs: int) -> dict:
    name = scenario["name"]
    print(f"\n{'━' * 70}")
    print(f"  Scenario: {name}  |  seed {scenario['seed']}  |  model {scenario['model']}")
    print(f"{'━' * 70}")

    start = time.time()
    truth = generate_tree(scenario["seed"], scenario["files"], *scenario["sizes"], n_dirs=2)
    image, manifest = build_image(truth, BLOCK_SIZE, builder="builtin")
    print(f"  ┌─ {len(manifest.files)} files, {len(manifest.fragments)} units, {len(image)} bytes")
    image = _corrupt(image, scenario["flips"], scenario["seed"])

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(tmp)
        image_path = work / "image.sqfs"
        image_path.write_bytes(image)
        if scenario.get("shards", 1) > 1:
            report, code = _sharded(scenario, image_path, work, jobs)
        else:
            config = PipelineConfig(image=str(image_path), out_dir=str(work), model=scenario["model"], jobs=jobs,
                                    checkpoint_dir=str(work / "checkpoints"))
            report, code = run_pipeline(config)
        score = score_outcome(scenario, report, code, work, truth)

    for line in report_ratios(report).splitlines():
        print(f"  │ {line}")
    print(f"  └─ exit {code}, {report.files_corrupt} corrupt / {report.files_repaired} repaired files, "
          f"score {score['total']}/100")
    return {"scenario": scenario["key"], "score": score, "duration": time.time() - start}


COST_SIZES = (256, 512, 1024, 2048)
COST_SLOPE, COST_TOLERANCE = 3.0, 0.3


def _sized_fragment(length: int, rng: np.random.Generator) -> tuple:
    """A zlib stream of at least `length` bytes over seeded text, with two flips."""
    words = [b"block", b"inode", b"fragment", b"page", b"spare", b"flash", b"table", b"entry"]
    text = b" ".join(words[i] for i in rng.integers(0, len(words), 8 * length))
    n = length
    while len(zlib.compress(text[:n])) < length and n < len(text):
        n += 16
    payload = text[:n]
    fragment = bytearray(zlib.compress(payload))
    for pos in map(int, rng.choice(8 * len(fragment), size=2, replace=False)):
        fragment[pos >> 3] ^= 1 << (pos & 7)
    return bytes(fragment), len(payload)


def run_cost_scenario(jobs: int, seed: int = 7, sizes=COST_SIZES) -> dict:
    """Time full-range 2-flip searches over growing fragments and fit log t against log L."""
    print(f"\n{'━' * 70}")
    print(f"  Scenario: 2-flip cost curve  |  seed {seed}")
    print(f"{'━' * 70}")
    rng = np.random.Generator(np.random.Philox(seed))

    lengths, timings = [], []
    for size in sizes:
        fragment, max_len = _sized_fragment(size, rng)
        t0 = time.perf_counter()
        repair_2flip(fragment, max_len, jobs=jobs)
        timings.append(time.perf_counter() - t0)
        lengths.append(len(fragment))
        print(f"  │ fragment {len(fragment):>5} bytes: {timings[-1]:.3f}s")

    slope, _intercept = np.polyfit(np.log(lengths), np.log(timings), 1)
    ok = abs(slope - COST_SLOPE) <= COST_TOLERANCE
    print(f"  └─ log-log slope {slope:.3f} (want {COST_SLOPE} ± {COST_TOLERANCE})")
    total = 100 if ok else max(0, round(100 * (1.0 - abs(slope - COST_SLOPE) / COST_SLOPE)))
    return {"scenario": "cost", "slope": float(slope),
            "score": {"exitCode": 0, "content": 0, "recovery": 0, "report": 0, "total": total},
            "duration": float(sum(timings))}


def run_all(scenario_filter: Optional[str] = None, jobs: int = 1) -> List[dict]:
    scenarios = SCENARIOS
    if scenario_filter:
        scenarios = [s for s in SCENARIOS if scenario_filter in (s["key"], s["name"])]

    print("\n" + "═" * 70)
    print(f"  SQUASHFIX REPAIR SCENARIOS")
    print(f"  Scoring: Exit(20) + Content(50) + Recovery(20) + Report(10) = 100")
    print("═" * 70)

    results = [run_scenario(s, jobs) for s in scenarios]
    if scenario_filter in (None, "cost"):
        results.append(run_cost_scenario(jobs))
    if not results:
        print(f"\n  No scenario matches {scenario_filter!r}")
        return results

    print("\n\n" + "═" * 70)
    print("  FINAL REPORT")
    print("═" * 70)
    print(f"  {'Scenario':<14} {'Exit':>6} {'Content':>8} {'Recov':>6} {'Report':>7} {'TOTAL':>8} {'Time':>7}")
    print(f"  {'─' * 62}")
    for r in results:
        s = r["score"]
        print(f"  {r['scenario']:<14} {s['exitCode']:>3}/20 {s['content']:>5}/50 {s['recovery']:>3}/20 "
              f"{s['report']:>4}/10 {s['total']:>4}/100 {r['duration']:>6.1f}s")
    avg = sum(r["score"]["total"] for r in results) / len(results)
    print(f"  {'─' * 62}")
    print(f"  {'AVERAGE':>14} {'':>6} {'':>8} {'':>6} {'':>7} {avg:>5.1f}/100\n")
    return results


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Squashfix repair scenarios")
    parser.add_argument("--scenario", default=None, help="run only this scenario key (e.g. one_flip, cost)")
    parser.add_argument("--jobs", type=int, default=settings.JOBS)
    args = parser.parse_args()
    logging.basicConfig(level=settings.LOG_LEVEL)
    run_all(args.scenario, args.jobs)
