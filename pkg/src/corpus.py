"""
Ground-truthed test corpora.

Builds SquashFS images from a {path: content} tree, records a content-addressed
manifest verified by the parser, and injects seeded bitflips. Every random
choice goes through numpy's Philox counter-based generator seeded with the
caller's seed, so corpora are reproducible anywhere numpy runs.
"""

import hashlib
import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import settings
from errors import CorpusError, SquashfsError
from models import InjectionModel, Manifest, ManifestFile, ManifestUnit, hex_offset
from squashfs_model import Inventory, build_inventory, decompress_unit, extract_files, unit_bytes
from squashfs_writer import build_squashfs
from zlib_oracle import quick_check

logger = logging.getLogger(__name__)

PRNG_NAME = "numpy-philox4x64-v1"

WORDS = (
    "flash page block spare inode fragment table superblock kernel module firmware "
    "config daemon socket thread mutex buffer offset length checksum header payload "
    "device driver vendor update signal timer queue record stream packet channel"
).split()


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


# ─── Tree generation ──────────────────────────────────────────────────────────

def generate_tree(seed: int, n_files: int, min_size: int = 200, max_size: int = 4000,
                  n_dirs: int = 4, noise: float = 0.05) -> Dict[str, bytes]:
    """Compressible text-like files spread over a few directories."""
    if n_files < 0 or min_size < 0 or max_size < min_size:
        raise CorpusError("bad tree parameters")
    rng = _rng(seed)
    vocab = [w.encode() for w in WORDS]
    files: Dict[str, bytes] = {}
    for i in range(n_files):
        size = int(rng.integers(min_size, max_size + 1))
        words = rng.integers(0, len(vocab), size=size // 4 + 1)
        text = np.frombuffer(b" ".join(vocab[w] for w in words)[:size], dtype=np.uint8).copy()
        n_noise = int(text.size * noise)
        if n_noise:
            where = rng.choice(text.size, size=n_noise, replace=False)
            text[where] = rng.integers(0, 256, size=n_noise, dtype=np.uint8)
        directory = f"d{int(rng.integers(0, max(1, n_dirs)))}" if n_dirs else ""
        path = f"/{directory}/f{i:04d}.txt" if directory else f"/f{i:04d}.txt"
        files[path] = text.tobytes()
    return files


# ─── Image building ───────────────────────────────────────────────────────────

def _mksquashfs(files: Dict[str, bytes], block_size: int) -> bytes:
    binary = shutil.which(settings.MKSQUASHFS)
    if binary is None:
        raise CorpusError(f"{settings.MKSQUASHFS} not found on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp) / "root"
        root.mkdir()
        for path, content in files.items():
            target = root / path.lstrip("/")
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(content)
        out = Path(tmp) / "image.sqfs"
        cmd = [binary, str(root), str(out), "-comp", "gzip", "-b", str(block_size),
               "-noappend", "-no-xattrs", "-all-root", "-no-progress"]
        env = dict(os.environ, SOURCE_DATE_EPOCH="0")
        proc = subprocess.run(cmd, capture_output=True, env=env)
        if proc.returncode != 0:
            raise CorpusError(f"mksquashfs failed: {proc.stderr.decode(errors='replace').strip()}")
        return out.read_bytes()


def manifest_for(image: bytes, files: Dict[str, bytes], builder: str,
                 inventory: Optional[Inventory] = None) -> Manifest:
    """Manifest of an intact image, checked against the tree it was built from."""
    inventory = inventory or build_inventory(image)
    try:
        extracted = extract_files(image, inventory)
    except SquashfsError as exc:
        raise CorpusError(f"freshly built image does not parse: {exc}") from exc
    expected = {"/" + p.lstrip("/"): c for p, c in files.items()}
    if extracted != expected:
        missing = sorted(set(expected) ^ set(extracted))[:5]
        raise CorpusError(f"image content differs from the tree (first paths: {missing})")

    by_path = {s.file_path: s for s in inventory.files}
    return Manifest(
        builder=builder,
        block_size=inventory.superblock.block_size,
        image_sha256=_sha(image),
        files=[ManifestFile(path=p, size=len(c), sha256=_sha(c), units=list(by_path[p].unit_ids))
               for p, c in sorted(expected.items())],
        fragments=[ManifestUnit(
            index=u.index, kind=u.kind, start=hex_offset(u.start), compressed_len=u.compressed_len,
            sha256=_sha(unit_bytes(image, u)), payload_sha256=_sha(decompress_unit(image, u) or b""),
        ) for u in inventory.units],
    )


def build_image(files: Dict[str, bytes], block_size: int = 131072, builder: Optional[str] = None,
                directories: Sequence[str] = ()) -> Tuple[bytes, Manifest]:
    builder = builder or settings.CORPUS_BUILDER
    if builder == "auto":
        builder = "mksquashfs" if shutil.which(settings.MKSQUASHFS) and not directories else "builtin"
    if builder == "builtin":
        image = build_squashfs(files, block_size=block_size, directories=tuple(directories))
    elif builder == "mksquashfs":
        image = _mksquashfs(files, block_size)
    else:
        raise CorpusError(f"unknown builder {builder!r}")
    manifest = manifest_for(image, files, builder)
    logger.info(f"[corpus] {builder} image: {len(files)} files, {len(manifest.fragments)} units, {len(image)} bytes")
    return image, manifest


def reference_extract(image: bytes) -> Dict[str, bytes]:
    """Regular files as extracted by unsquashfs, keyed by absolute path."""
    binary = shutil.which(settings.UNSQUASHFS)
    if binary is None:
        raise CorpusError(f"{settings.UNSQUASHFS} not found on PATH")
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "image.sqfs"
        src.write_bytes(image)
        dest = Path(tmp) / "out"
        proc = subprocess.run([binary, "-no-progress", "-d", str(dest), str(src)], capture_output=True)
        if proc.returncode != 0:
            raise CorpusError(f"unsquashfs failed: {proc.stderr.decode(errors='replace').strip()}")
        return {
            "/" + p.relative_to(dest).as_posix(): p.read_bytes()
            for p in sorted(dest.rglob("*")) if p.is_file() and not p.is_symlink()
        }


# ─── Injection ────────────────────────────────────────────────────────────────

@dataclass
class InjectionRecord:
    seed: int
    p: Optional[float] = None
    k: Optional[int] = None
    fragment: Optional[int] = None
    regions: List[Tuple[int, int]] = field(default_factory=list)
    flips: List[Tuple[int, int]] = field(default_factory=list)  # (byte offset, bit), sorted
    still_valid: Optional[bool] = None

    @property
    def bit_positions(self) -> List[int]:
        return [byte * 8 + bit for byte, bit in self.flips]

    def to_model(self) -> InjectionModel:
        return InjectionModel(
            prng=PRNG_NAME, seed=self.seed, p=self.p, k=self.k, fragment=self.fragment,
            regions=[(hex_offset(a), hex_offset(b)) for a, b in self.regions],
            flips=list(self.flips), still_valid=self.still_valid,
        )


def data_regions(image: bytes, inventory: Optional[Inventory] = None) -> List[Tuple[int, int]]:
    inventory = inventory or build_inventory(image)
    return sorted((u.start, u.end) for u in inventory.units if u.compressed_len)


def _flip(image: bytes, flips: List[Tuple[int, int]]) -> bytes:
    out = bytearray(image)
    for byte, bit in flips:
        out[byte] ^= 1 << bit
    return bytes(out)


def inject(image: bytes, p: float, seed: int,
           regions: Optional[Sequence[Tuple[int, int]]] = None) -> Tuple[bytes, InjectionRecord]:
    """Each bit inside `regions` flips independently with probability p."""
    if not 0 <= p <= 1:
        raise CorpusError(f"flip probability {p} outside [0, 1]")
    regions = sorted(regions) if regions is not None else data_regions(image)
    for start, end in regions:
        if not 0 <= start <= end <= len(image):
            raise CorpusError(f"region [{start:#x}, {end:#x}) outside the image")

    rng = _rng(seed)
    flips = set()
    for start, end in regions:
        n_bits = 8 * (end - start)
        if n_bits == 0:
            continue
        count = int(rng.binomial(n_bits, p))
        for pos in rng.choice(n_bits, size=count, replace=False):
            flips.add((start + int(pos) // 8, int(pos) % 8))
    record = InjectionRecord(seed=seed, p=p, regions=list(regions), flips=sorted(flips))
    logger.info(f"[corpus] injected {len(record.flips)} flips at p={p:g} (seed {seed})")
    return _flip(image, record.flips), record


def inject_exact(image: bytes, k: int, fragment_index: int, seed: int,
                 inventory: Optional[Inventory] = None) -> Tuple[bytes, InjectionRecord]:
    """Exactly k distinct flips inside one unit's compressed bytes."""
    if k < 1:
        raise CorpusError("k must be at least 1")
    inventory = inventory or build_inventory(image)
    if not 0 <= fragment_index < len(inventory.units):
        raise CorpusError(f"no unit {fragment_index} (image has {len(inventory.units)})")
    unit = inventory.units[fragment_index]
    n_bits = 8 * unit.compressed_len
    if k > n_bits:
        raise CorpusError(f"{k} flips exceed the {n_bits} bits of unit {fragment_index}")

    positions = sorted(int(p) for p in _rng(seed).choice(n_bits, size=k, replace=False))
    flips = [(unit.start + pos // 8, pos % 8) for pos in positions]
    corrupted = _flip(image, flips)
    still_valid = None
    if unit.is_compressed:
        still_valid = quick_check(unit_bytes(corrupted, unit), unit.max_decompressed_len) is not None
    record = InjectionRecord(seed=seed, k=k, fragment=fragment_index, regions=[(unit.start, unit.end)],
                             flips=flips, still_valid=still_valid)
    return corrupted, record
