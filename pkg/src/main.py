"""
squashfix command line entrypoint.

Every stage reads and writes JSON artifacts inside a shared work directory,
so a 2-flip search can be split across machines with `repair --shard i/m`
and merged later by any one of them.

    python main.py inventory image.bin --offset 0xb60000 --work run/
    python main.py repair image.bin --offset 0xb60000 --work run/ --model 2flip --shard 3/8
    python main.py report image.bin --offset 0xb60000 --work run/

Exit codes: 0 complete, 1 repair incomplete, 2 error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

from bitflip_search import MODELS, ONE_FLIP
from config import settings
from corpus import build_image, generate_tree, inject, inject_exact
from dump_analysis import (
    PageGeometry,
    Thresholds,
    classify_segments,
    diff_bitflips,
    entropy_scan,
    segment_map,
    strip_spare,
)
from errors import DumpError, SquashfixError
from models import InventoryModel, Manifest, PipelineConfig, parse_offset
from pipeline import (
    InventoryState,
    assemble_files,
    build_report,
    estimate,
    estimate_from_inventory,
    exit_code,
    inventory_model,
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
from squashfs_model import unit_bytes
from zlib_oracle import check_candidate, describe

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INCOMPLETE = 1
EXIT_ERROR = 2


# ─── Argument helpers ─────────────────────────────────────────────────────────

def _offset(text: str) -> int:
    try:
        return parse_offset(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an offset: {text!r}")


def _shard(text: str) -> Tuple[int, int]:
    try:
        index, total = (int(part) for part in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shard must look like i/m, got {text!r}")
    if total < 1 or not 0 <= index < total:
        raise argparse.ArgumentTypeError(f"shard {index}/{total} out of range")
    return index, total


def _region(text: str) -> Tuple[int, Optional[int]]:
    """"0x1000:4096" or just "0x2000" (length taken from the other region)."""
    start, _sep, length = text.partition(":")
    return _offset(start), (_offset(length) if length else None)


def _units(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    logger.info(f"[cli] wrote {path}")


def _progress(args) -> bool:
    return not args.quiet and sys.stderr.isatty()


# ─── Dump stages ──────────────────────────────────────────────────────────────

def cmd_strip(args) -> int:
    geom = PageGeometry(args.page_total, args.page_data)
    data = strip_spare(Path(args.dump).read_bytes(), geom)
    Path(args.out).write_bytes(data)
    print(f"{len(data)} bytes written to {args.out}")
    return EXIT_OK


def cmd_scan(args) -> int:
    image = Path(args.image).read_bytes()
    thresholds = Thresholds.parse(args.thresholds) if args.thresholds else Thresholds()
    series = entropy_scan(image, args.window, args.stride)
    labels = classify_segments(series, image, thresholds)
    result = segment_map(series, labels, len(image), thresholds)
    for seg in result.segments:
        print(f"{seg.start:>12} {seg.end:>12}  {seg.kind}")
    if args.out:
        _write(Path(args.out), result.model_dump_json(indent=2))
    return EXIT_OK


def cmd_diff(args) -> int:
    image = Path(args.image).read_bytes()
    (a_start, a_len), (b_start, b_len) = args.a, args.b
    length = a_len if a_len is not None else b_len
    if length is None:
        raise SquashfixError("give a length on --a or --b, e.g. --a 0x1000:4096")
    for start in (a_start, b_start):
        if start + length > len(image):
            raise DumpError(
                f"range [{start:#x}, {start + length:#x}) runs past the end of the {len(image):#x}-byte image"
            )
    result = diff_bitflips(image[a_start:a_start + length], image[b_start:b_start + length])
    print(result.to_model().model_dump_json(indent=2))
    return EXIT_OK


# ─── Filesystem stages ────────────────────────────────────────────────────────

def _state(args) -> InventoryState:
    image = open_image(args.image, args.offset, args.length)
    return load_inventory(image, args.model, args.jobs, args.strict)


def cmd_inventory(args) -> int:
    state = _state(args)
    model = inventory_model(state, args.image, args.offset)
    _write(Path(args.work) / "inventory.json", model.model_dump_json(indent=2))
    print(f"{len(model.units)} units ({model.fragment_blocks} fragment blocks, "
          f"{model.data_blocks} data blocks), {len(model.corrupted)} corrupted")
    if state.walk_error:
        print(f"inode walk failed: {state.walk_error}")
    return EXIT_OK


def cmd_check(args) -> int:
    state = _state(args)
    unit = state.unit(args.unit)
    verdict = check_candidate(unit_bytes(state.image, unit), unit.max_decompressed_len, args.strict)
    print(json.dumps({"unit": unit.index, "kind": unit.kind, **describe(verdict)}, indent=2))
    return EXIT_OK if verdict.valid else EXIT_INCOMPLETE


def cmd_estimate(args) -> int:
    path = Path(args.inventory or Path(args.work) / "inventory.json")
    model = InventoryModel.model_validate_json(path.read_text())
    rate = estimate_from_inventory(model, args.tail_prob, args.length_unit).to_model()
    _write(Path(args.work) / "rate.json", rate.model_dump_json(indent=2))
    print(rate.model_dump_json(indent=2))
    return EXIT_OK


def cmd_repair(args) -> int:
    state = _state(args)
    results, errors = repair_units(
        state, units=args.units, model=args.model, shard=args.shard, jobs=args.jobs,
        checkpoint_dir=args.checkpoint_dir or settings.CHECKPOINT_DIR, strict=args.strict,
        prefix_2flip=args.prefix_2flip, progress=_progress(args),
    )
    save_target_sets(str(Path(args.work) / "targets"), results)
    for index, result in sorted(results.items()):
        print(f"unit {index}: {len(result)} targets ({result.model}, shard {args.shard[0]}/{args.shard[1]})")
    for index, error in sorted(errors.items()):
        print(f"unit {index}: {error}")
    return EXIT_OK if not errors and all(len(r) for r in results.values()) else EXIT_INCOMPLETE


def _merged(args):
    state = _state(args)
    results = load_target_sets(str(Path(args.work) / "targets"), state)
    outcomes = merge_units(state, results)
    return state, outcomes, assemble_files(state, outcomes)


def cmd_merge(args) -> int:
    state, outcomes, files = _merged(args)
    report = build_report(args.image, state, outcomes, files)
    _write(Path(args.work) / "merge.json",
           report.model_dump_json(indent=2, include={"schema_version", "units", "ambiguous"}))
    for row in report.units:
        print(f"unit {row.index} {row.id[:12]}: {row.n_targets_pre} -> {row.n_targets_post} targets, "
              f"{row.indet_bits} indeterminate bits" + (f" ({row.error})" if row.error else ""))
    return exit_code(report)


def cmd_extract(args) -> int:
    state, outcomes, files = _merged(args)
    write_tree(files, args.work)
    print(f"{len(files)} files written under {Path(args.work) / 'all_true'} and {Path(args.work) / 'all_false'}")
    return exit_code(build_report(args.image, state, outcomes, files))


def cmd_report(args) -> int:
    state, outcomes, files = _merged(args)
    rate = estimate(state, args.tail_prob, args.length_unit)
    report = build_report(args.image, state, outcomes, files, rate)
    _write(Path(args.work) / "report.json", report.model_dump_json(indent=2))
    print(report_ratios(report))
    return exit_code(report)


def cmd_run(args) -> int:
    config = PipelineConfig(
        image=args.image, out_dir=args.work, offset=args.offset, length=args.length,
        model=args.model, jobs=args.jobs or settings.JOBS, shard=args.shard,
        checkpoint_dir=args.checkpoint_dir, length_unit=args.length_unit or settings.LENGTH_UNIT,
        tail_prob=args.tail_prob or settings.TAIL_PROB, strict=args.strict,
        prefix_2flip=args.prefix_2flip, progress=_progress(args),
    )
    report, code = run_pipeline(config)
    print(report_ratios(report))
    return code


# ─── Corpus ───────────────────────────────────────────────────────────────────

def cmd_corpus_build(args) -> int:
    files = generate_tree(args.seed, args.files, args.min_size, args.max_size)
    image, manifest = build_image(files, args.block_size, args.builder)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "image.sqfs").write_bytes(image)
    for path, content in files.items():
        target = out / "tree" / path.lstrip("/")
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(content)
    _write(out / "manifest.json", manifest.model_dump_json(indent=2))
    print(f"{manifest.builder}: {len(manifest.files)} files, {len(manifest.fragments)} units, {len(image)} bytes")
    return EXIT_OK


def cmd_corpus_inject(args) -> int:
    image = Path(args.image).read_bytes()
    if args.k is not None:
        if args.fragment is None:
            raise SquashfixError("--k needs --fragment")
        corrupted, record = inject_exact(image, args.k, args.fragment, args.seed)
    elif args.p is not None:
        corrupted, record = inject(image, args.p, args.seed)
    else:
        raise SquashfixError("give --p or --k")
    Path(args.out).write_bytes(corrupted)
    if args.manifest:
        path = Path(args.manifest)
        manifest = Manifest.model_validate_json(path.read_text())
        manifest.injections.append(record.to_model())
        _write(path, manifest.model_dump_json(indent=2))
    print(f"{len(record.flips)} flips at bit positions {record.bit_positions[:16]}"
          + (" ..." if len(record.flips) > 16 else ""))
    return EXIT_OK


# ─── Parser ───────────────────────────────────────────────────────────────────

def _image_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("image", help="dump or image containing the SquashFS")
    p.add_argument("--offset", type=_offset, default=0, help="start of the SquashFS (e.g. 0xb60000)")
    p.add_argument("--length", type=_offset, default=None, help="bytes of the SquashFS region")
    p.add_argument("--work", default=".", help="work directory for JSON artifacts (default: .)")
    p.add_argument("--model", choices=MODELS, default=ONE_FLIP)
    p.add_argument("--jobs", type=int, default=None, help=f"worker processes (default: {settings.JOBS})")
    p.add_argument("--strict", action="store_true", help="reject streams with trailing bytes")


def _stats_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--length-unit", choices=("bits", "bytes"), default=None)
    p.add_argument("--tail-prob", type=float, default=None)


def _search_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--shard", type=_shard, default=(0, 1), help="i/m slice of the 2-flip pairs")
    p.add_argument("--checkpoint-dir", default=None,
                   help="checkpoint location (default: SQUASHFIX_CHECKPOINT_DIR)")
    p.add_argument("--prefix-2flip", action="store_true",
                   help="limit 2-flip pairs to the consumed prefix")
    p.add_argument("--quiet", action="store_true", help="no progress bars")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="squashfix", description="Bitflip repair for SquashFS dumps")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("strip", help="drop NAND spare bytes from a raw dump")
    p.add_argument("dump")
    p.add_argument("out")
    p.add_argument("--page-total", type=int, default=settings.PAGE_TOTAL)
    p.add_argument("--page-data", type=int, default=settings.PAGE_DATA)
    p.set_defaults(func=cmd_strip)

    p = sub.add_parser("scan", help="entropy scan and segment map")
    p.add_argument("image")
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--thresholds", default=None, help="encrypted,compressed[,floor]")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_scan)

    p = sub.add_parser("diff", help="bit positions differing between two regions")
    p.add_argument("image")
    p.add_argument("--a", type=_region, required=True, help="start[:length]")
    p.add_argument("--b", type=_region, required=True, help="start[:length]")
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("inventory", help="parse the image and list its compressed units")
    _image_args(p)
    p.set_defaults(func=cmd_inventory)

    p = sub.add_parser("check", help="oracle verdict for one unit")
    _image_args(p)
    p.add_argument("--unit", type=int, required=True)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("estimate", help="bitflip rate from an inventory")
    p.add_argument("--work", default=".")
    p.add_argument("--inventory", default=None, help="inventory JSON (default: WORK/inventory.json)")
    _stats_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("repair", help="search repairs for corrupted units")
    _image_args(p)
    _search_args(p)
    p.add_argument("--units", type=_units, default=None, help="comma separated unit indices")
    p.set_defaults(func=cmd_repair)

    for name, func, text in (("merge", cmd_merge, "filter and merge target sets"),
                             ("extract", cmd_extract, "write all_true / all_false trees and masks")):
        p = sub.add_parser(name, help=text)
        _image_args(p)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="recovery report and ratios")
    _image_args(p)
    _stats_args(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="every stage end to end")
    _image_args(p)
    _search_args(p)
    _stats_args(p)
    p.set_defaults(func=cmd_run)

    corpus = sub.add_parser("corpus", help="ground-truthed test images").add_subparsers(dest="action", required=True)
    p = corpus.add_parser("build")
    p.add_argument("out", help="output directory")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--files", type=int, default=100)
    p.add_argument("--min-size", type=int, default=200)
    p.add_argument("--max-size", type=int, default=4000)
    p.add_argument("--block-size", type=int, default=131072)
    p.add_argument("--builder", choices=("auto", "builtin", "mksquashfs"), default=None)
    p.set_defaults(func=cmd_corpus_build)

    p = corpus.add_parser("inject")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--p", type=float, default=None, help="per-bit flip probability")
    p.add_argument("--k", type=int, default=None, help="exact flips inside --fragment")
    p.add_argument("--fragment", type=int, default=None)
    p.add_argument("--manifest", default=None, help="manifest to append the injection record to")
    p.set_defaults(func=cmd_corpus_inject)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=settings.LOG_LEVEL,
        stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (SquashfixError, OSError) as exc:
        print(f"squashfix: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
