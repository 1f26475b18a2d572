import json
import struct
from pathlib import Path

import numpy as np
import pytest

from config import settings
from corpus import build_image, generate_tree, inject_exact
from errors import SquashfsError
from main import EXIT_ERROR, EXIT_INCOMPLETE, EXIT_OK, main
from models import CheckpointModel, InventoryModel, Manifest, PipelineConfig, RateModel
from pipeline import (
    load_inventory,
    load_target_sets,
    merge_units,
    open_image,
    repair_units,
    report_ratios,
    run_pipeline,
    save_target_sets,
)
from squashfs_model import build_inventory, extract_files, parse_superblock


def _write_image(tmp_path: Path, image: bytes) -> str:
    path = tmp_path / "image.sqfs"
    path.write_bytes(image)
    return str(path)


def _corrupt_units(image: bytes, units, k: int = 1) -> bytes:
    inventory = build_inventory(image)
    for n, index in enumerate(units):
        image, record = inject_exact(image, k, index, seed=100 + n, inventory=inventory)
        assert not record.still_valid
    return image


def _determinate_bits_match(out: Path, truth) -> bool:
    for path, content in truth.items():
        hi = np.frombuffer((out / "all_true" / path.lstrip("/")).read_bytes(), dtype=np.uint8)
        lo = np.frombuffer((out / "all_false" / path.lstrip("/")).read_bytes(), dtype=np.uint8)
        want = np.frombuffer(content, dtype=np.uint8)
        if hi.size != want.size or np.any((hi ^ want) & ~(hi ^ lo)):
            return False
    return True


def _run(tmp_path: Path, image: bytes, name: str = "out", model: str = "1flip"):
    out = tmp_path / name
    config = PipelineConfig(image=_write_image(tmp_path, image), out_dir=str(out), model=model, jobs=1)
    report, code = run_pipeline(config)
    return report, code, out


# ─── Image range ──────────────────────────────────────────────────────────────

def test_open_image_sub_range(tmp_path, built_image):
    image, _ = built_image
    path = tmp_path / "dump.bin"
    path.write_bytes(bytes(0x400) + image + bytes(64))
    assert open_image(str(path), 0x400, len(image)) == image
    with pytest.raises(SquashfsError):
        open_image(str(path), 0x400, len(image) + 1000)


# ─── End to end ───────────────────────────────────────────────────────────────

def test_clean_image_is_fully_recovered(tmp_path, small_tree, built_image):
    image, _ = built_image
    report, code, out = _run(tmp_path, image)
    assert code == 0 and report.complete
    assert report.files_corrupt == 0 and report.indeterminate_bits == 0
    assert all(row.bits_ratio == 1.0 and row.files_ratio == 1.0 for row in report.ratios)
    for path, content in small_tree.items():
        assert (out / "all_true" / path.lstrip("/")).read_bytes() == content
    assert not (out / "masks").exists()


def test_single_flips_are_repaired(tmp_path, small_tree, built_image):
    image, _ = built_image
    n_units = len(build_inventory(image).units)
    corrupted = _corrupt_units(image, sorted({0, n_units - 1}))
    report, code, out = _run(tmp_path, corrupted)
    assert code == 0 and report.complete
    assert report.files_corrupt >= 1
    assert len(report.units) == len({0, n_units - 1})
    assert all(u.n_targets_post >= 1 and u.n_targets_post <= u.n_targets_pre for u in report.units)
    assert _determinate_bits_match(out, small_tree)
    assert (out / "inventory.json").exists() and list((out / "targets").glob("unit-*.json"))


def test_unrepairable_unit_gives_incomplete_exit(tmp_path, small_tree, built_image):
    image, _ = built_image
    corrupted = _corrupt_units(image, [0], k=3)
    report, code, out = _run(tmp_path, corrupted)
    assert code == 1 and not report.complete
    (unit,) = report.units
    assert unit.n_targets_post == 0
    assert unit.indet_bits > 0
    assert report.files_repaired < report.files_corrupt
    assert _determinate_bits_match(out, small_tree)
    assert list((out / "masks").rglob("*.mask.json"))


def test_report_invariants(tmp_path, built_image):
    image, _ = built_image
    last = len(build_inventory(image).units) - 1
    report, _code, _out = _run(tmp_path, _corrupt_units(image, [last]))
    assert report.indeterminate_bits <= report.total_bits
    assert report.indeterminate_bytes <= report.total_bytes
    assert report.indeterminate_bytes <= report.indeterminate_bits <= 8 * report.indeterminate_bytes
    assert report.total_bits == 8 * report.total_bytes
    assert report.corrupt_fragment_blocks + report.corrupt_data_blocks == len(report.units)
    assert all(0.0 <= r.bits_ratio <= 1.0 and 0.0 <= r.files_ratio <= 1.0 for r in report.ratios)
    assert isinstance(report.rate, RateModel) and report.rate.corrupted == 1
    table = report_ratios(report)
    assert table.splitlines()[0].startswith("method")
    assert "baseline" in table and "repaired" in table


def test_runs_are_deterministic(tmp_path, built_image):
    image, _ = built_image
    corrupted = _corrupt_units(image, [0])
    first, _, out_a = _run(tmp_path, corrupted, "a")
    second, _, out_b = _run(tmp_path, corrupted, "b")
    assert first.model_dump_json() == second.model_dump_json()
    assert (out_a / "report.json").read_text() == (out_b / "report.json").read_text()


def _two_flip_image() -> bytes:
    image, _ = build_image({"/tiny.txt": b"two flips in a tiny fragment " * 2}, block_size=4096, builder="builtin")
    corrupted, record = inject_exact(image, 2, 0, seed=7)
    assert not record.still_valid
    return corrupted


def test_singleton_repairs_restore_files_exactly(tmp_path):
    truth = generate_tree(seed=3, n_files=60, min_size=2000, max_size=9000, n_dirs=3)
    image, _ = build_image(truth, block_size=4096, builder="builtin")
    inventory = build_inventory(image)
    assert len(inventory.units) >= 50
    rng = np.random.Generator(np.random.Philox(13))
    chosen = sorted(int(i) for i in rng.choice(len(inventory.units), size=20, replace=False))

    report, _code, out = _run(tmp_path, _corrupt_units(image, chosen))
    assert sorted(u.index for u in report.units) == chosen
    unresolved = {u.index for u in report.units if u.n_targets_post != 1}
    assert len(unresolved) <= 2
    touched = {o.path for i in unresolved for o in inventory.units[i].owners}
    for path, content in truth.items():
        if path not in touched:
            assert (out / "all_true" / path.lstrip("/")).read_bytes() == content


# ─── Stages ───────────────────────────────────────────────────────────────────

def test_target_sets_survive_the_disk(tmp_path, built_image):
    image, _ = built_image
    units = sorted({0, len(build_inventory(image).units) - 1})
    state = load_inventory(_corrupt_units(image, units), jobs=1)
    results, errors = repair_units(state, jobs=1)
    assert errors == {} and sorted(results) == state.corrupted
    save_target_sets(str(tmp_path / "targets"), results)
    loaded = load_target_sets(str(tmp_path / "targets"), state)
    assert {i: t.payloads for i, t in loaded.items()} == {i: t.payloads for i, t in results.items()}
    outcomes = merge_units(state, loaded)
    assert all(o.repaired for o in outcomes.values())


def test_resumed_run_gives_identical_report(tmp_path):
    corrupted = _two_flip_image()
    _fresh, _, out_fresh = _run(tmp_path, corrupted, "fresh", model="2flip")
    path = Path(settings.CHECKPOINT_DIR) / "unit-0-shard-0-of-1.json"
    checkpoint = CheckpointModel.model_validate_json(path.read_text())
    assert checkpoint.complete

    # rewind to a search interrupted halfway through its first flips
    halfway = checkpoint.end_position // 2
    path.write_text(checkpoint.model_copy(update={
        "resume_position": halfway,
        "complete": False,
        "hits": [h for h in checkpoint.hits if h.flips[0] < halfway],
    }).model_dump_json())

    _resumed, _, out_resumed = _run(tmp_path, corrupted, "resumed", model="2flip")
    assert (out_fresh / "report.json").read_text() == (out_resumed / "report.json").read_text()
    assert CheckpointModel.model_validate_json(path.read_text()).complete


def test_unsearched_unit_is_reported(built_image):
    image, _ = built_image
    state = load_inventory(_corrupt_units(image, [0]), jobs=1)
    outcomes = merge_units(state, {})
    assert outcomes[0].error == "not searched" and not outcomes[0].repaired


def test_metadata_block_is_repaired(small_tree, built_image):
    image, _ = built_image
    sb = parse_superblock(image)
    header = struct.unpack_from("<H", image, sb.inode_table_start)[0]
    if header & 0x8000:
        pytest.skip("inode table stored uncompressed")
    length = header & 0x7FFF
    pos = 8 * (sb.inode_table_start + 2 + length // 2) + 3
    damaged = bytearray(image)
    damaged[pos >> 3] ^= 1 << (pos & 7)
    state = load_inventory(bytes(damaged), jobs=1)
    if state.walk_error:
        assert "repairs" in state.walk_error
        return
    assert len(state.metadata_repairs) == 1
    assert state.image == image
    assert extract_files(state.image) == small_tree


# ─── CLI ──────────────────────────────────────────────────────────────────────

def test_cli_inventory_and_estimate(tmp_path, built_image):
    image, _ = built_image
    path = _write_image(tmp_path, _corrupt_units(image, [0]))
    work = tmp_path / "work"
    assert main(["inventory", path, "--work", str(work)]) == EXIT_OK
    model = InventoryModel.model_validate_json((work / "inventory.json").read_text())
    assert model.corrupted == [0]
    assert main(["estimate", "--work", str(work)]) == EXIT_OK
    rate = json.loads((work / "rate.json").read_text())
    assert rate["corrupted"] == 1 and rate["p"] > 0


def test_cli_run_exit_codes(tmp_path, built_image):
    image, _ = built_image
    clean = _write_image(tmp_path, image)
    assert main(["run", clean, "--work", str(tmp_path / "clean"), "--jobs", "1", "--quiet"]) == EXIT_OK
    broken = tmp_path / "broken.sqfs"
    broken.write_bytes(_corrupt_units(image, [0], k=3))
    assert main(["run", str(broken), "--work", str(tmp_path / "broken"), "--jobs", "1", "--quiet"]) == EXIT_INCOMPLETE


def test_cli_bad_image(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(bytes(4096))
    assert main(["inventory", str(path), "--work", str(tmp_path)]) == EXIT_ERROR


def test_cli_corpus_build_and_inject(tmp_path):
    out = tmp_path / "corpus"
    assert main(["corpus", "build", str(out), "--seed", "4", "--files", "5",
                 "--block-size", "4096", "--builder", "builtin"]) == EXIT_OK
    manifest = Manifest.model_validate_json((out / "manifest.json").read_text())
    assert len(manifest.files) == 5
    assert len(list((out / "tree").rglob("*.txt"))) == 5

    assert main(["corpus", "inject", str(out / "image.sqfs"), str(out / "bad.sqfs"), "--seed", "1",
                 "--k", "1", "--fragment", "0", "--manifest", str(out / "manifest.json")]) == EXIT_OK
    manifest = Manifest.model_validate_json((out / "manifest.json").read_text())
    assert manifest.injections[0].k == 1 and len(manifest.injections[0].flips) == 1
    assert main(["corpus", "inject", str(out / "image.sqfs"), str(out / "bad2.sqfs"), "--seed", "1"]) == EXIT_ERROR


def test_cli_repair_checkpoints_to_the_configured_directory(tmp_path):
    path = _write_image(tmp_path, _two_flip_image())
    checkpoints = Path(settings.CHECKPOINT_DIR)
    assert not checkpoints.exists()
    main(["repair", path, "--work", str(tmp_path / "work"), "--model", "2flip", "--jobs", "1", "--quiet"])
    assert (checkpoints / "unit-0-shard-0-of-1.json").exists()


def test_cli_diff_rejects_ranges_past_the_end(tmp_path, capsys):
    path = tmp_path / "dump.bin"
    path.write_bytes(bytes(4096))
    assert main(["diff", str(path), "--a", "0:0x800", "--b", "0x800"]) == EXIT_OK
    capsys.readouterr()
    assert main(["diff", str(path), "--a", "0:0x800", "--b", "0x900"]) == EXIT_ERROR
    assert "past the end" in capsys.readouterr().err
