import shutil
import zlib

import pytest

from config import settings
from corpus import build_image, generate_tree

TEXT = (
    b"The fragment table lists every tail-end block of the filesystem. "
    b"Each entry stores a start offset and a compressed size; inodes point "
    b"into it by index and byte offset. "
) * 6


@pytest.fixture
def text_payload() -> bytes:
    return TEXT


@pytest.fixture
def zlib_stream() -> bytes:
    return zlib.compress(TEXT, 9)


@pytest.fixture
def short_stream() -> bytes:
    """A unit small enough for an exhaustive pair search inside a unit test."""
    return zlib.compress(b"inode 17 owns bytes 0..42 of fragment 3", 9)


@pytest.fixture
def small_tree():
    return generate_tree(seed=11, n_files=6, min_size=300, max_size=2500, n_dirs=2)


@pytest.fixture
def built_image(small_tree):
    image, manifest = build_image(small_tree, block_size=4096, builder="builtin")
    return image, manifest


@pytest.fixture(autouse=True)
def quiet_settings(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "JOBS", 1)
    monkeypatch.setattr(settings, "CHECKPOINT_DIR", str(tmp_path / "checkpoints"))
    monkeypatch.setattr(settings, "VERIFY_HITS", True)


requires_mksquashfs = pytest.mark.skipif(
    shutil.which(settings.MKSQUASHFS) is None, reason="mksquashfs not installed"
)
requires_unsquashfs = pytest.mark.skipif(
    shutil.which(settings.UNSQUASHFS) is None, reason="unsquashfs not installed"
)


def flip_bits(data: bytes, *positions: int) -> bytes:
    buf = bytearray(data)
    for pos in positions:
        buf[pos >> 3] ^= 1 << (pos & 7)
    return bytes(buf)
