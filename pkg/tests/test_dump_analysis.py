import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from dump_analysis import (
    COMPRESSED,
    ENCRYPTED,
    NULL,
    UNKNOWN,
    EntropySeries,
    PageGeometry,
    Thresholds,
    classify_segments,
    diff_bitflips,
    entropy_scan,
    segment_map,
    strip_spare,
)
from errors import DumpError

GEOM = PageGeometry(2176, 2048)


def _uniform(n: int, seed: int = 7) -> bytes:
    return np.random.Generator(np.random.Philox(seed)).integers(0, 256, size=n, dtype=np.uint8).tobytes()


# ─── strip_spare ──────────────────────────────────────────────────────────────

def test_strip_one_zero_page():
    assert strip_spare(bytes(2176), GEOM) == bytes(2048)


def test_strip_keeps_data_drops_spare():
    page = bytes([0xAA]) * 2048 + bytes([0x55]) * 128
    out = strip_spare(page * 3, GEOM)
    assert out == bytes([0xAA]) * (3 * 2048)


def test_full_dump_geometry():
    pages = 285_212_672 // GEOM.page_total
    assert pages * GEOM.page_total == 285_212_672
    assert pages * GEOM.page_data == 268_435_456
    assert GEOM.page_spare == 128


def test_strip_rejects_partial_page():
    with pytest.raises(DumpError):
        strip_spare(bytes(2177), GEOM)
    with pytest.raises(DumpError):
        strip_spare(b"", GEOM)


def test_bad_geometry():
    with pytest.raises(DumpError):
        PageGeometry(2048, 2176)


@hsettings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=4), st.integers(min_value=1, max_value=4), st.integers(0, 2**32 - 1))
def test_strip_is_length_homomorphic(n_a, n_b, seed):
    a = _uniform(n_a * 2176, seed)
    b = _uniform(n_b * 2176, seed + 1)
    assert strip_spare(a + b, GEOM) == strip_spare(a, GEOM) + strip_spare(b, GEOM)


# ─── entropy_scan ─────────────────────────────────────────────────────────────

def test_entropy_of_zeros():
    series = entropy_scan(bytes(4096), 4096, 4096)
    assert series.values == [0.0]


def test_entropy_of_every_byte_once():
    series = entropy_scan(bytes(range(256)), 256, 1)
    assert series.values[0] == pytest.approx(1.0)


def test_entropy_of_uniform_window():
    series = entropy_scan(_uniform(65536), 65536, 65536)
    assert 0.995 <= series.values[0] <= 1.0


def test_window_count():
    series = entropy_scan(bytes(10_000), 4096, 1024)
    assert len(series.values) == (10_000 - 4096) // 1024 + 1


def test_entropy_preconditions():
    with pytest.raises(DumpError):
        entropy_scan(bytes(1000), 4096, 1024)
    with pytest.raises(DumpError):
        entropy_scan(bytes(4096), 128, 1)


def test_zero_window_or_stride_is_rejected():
    with pytest.raises(ValueError):
        entropy_scan(bytes(8192), 0, 1024)
    with pytest.raises(ValueError):
        entropy_scan(bytes(8192), 4096, 0)


def test_bias_correction_lifts_uniform_data():
    series = entropy_scan(_uniform(65536), 65536, 65536)
    assert series.corrected()[0] > series.values[0]
    assert series.corrected()[0] <= 1.0


# ─── classify_segments ────────────────────────────────────────────────────────

def test_zeros_are_null():
    image = bytes(1 << 20)
    labels = classify_segments(entropy_scan(image), image)
    assert [(s.start, s.end, s.kind) for s in labels] == [(0, 1 << 20, NULL)]


def test_uniform_is_encrypted():
    image = _uniform(1 << 20)
    labels = classify_segments(entropy_scan(image), image)
    assert [(s.start, s.end, s.kind) for s in labels] == [(0, 1 << 20, ENCRYPTED)]


def test_dipping_run_is_compressed():
    image = bytes([1]) * 7168
    series = EntropySeries(4096, 1024, [0.9985, 0.9990, 0.9975, 0.9992])
    labels = classify_segments(series, image, Thresholds(0.9998, 0.998, 0.95), bias_correction=False)
    assert [(s.start, s.end, s.kind) for s in labels] == [(0, 7168, COMPRESSED)]


def test_run_without_a_dip_is_unknown():
    image = bytes([1]) * (65536 + 7 * 16384)
    series = EntropySeries(65536, 16384, [0.999] * 8)
    labels = classify_segments(series, image, Thresholds(0.9998, 0.998, 0.95), bias_correction=False)
    assert [(s.start, s.end, s.kind) for s in labels] == [(0, len(image), UNKNOWN)]


def test_null_then_encrypted():
    image = bytes(2048) + bytes([3]) * 5120
    series = EntropySeries(4096, 1024, [0.0, 0.0, 1.0, 1.0])
    labels = classify_segments(series, image, Thresholds(0.9998, 0.998, 0.95), bias_correction=False)
    assert [(s.start, s.end, s.kind) for s in labels] == [(0, 2048, NULL), (2048, 7168, ENCRYPTED)]


def test_low_entropy_is_unknown():
    image = bytes([9]) * 7168
    series = EntropySeries(4096, 1024, [0.4, 0.5, 0.45, 0.6])
    labels = classify_segments(series, image, bias_correction=False)
    assert [s.kind for s in labels] == [UNKNOWN]


def test_segments_cover_image():
    image = bytes(100_000) + _uniform(200_000)
    labels = classify_segments(entropy_scan(image, 4096, 4096), image)
    assert labels[0].start == 0 and labels[-1].end == len(image)
    assert all(a.end == b.start for a, b in zip(labels, labels[1:]))
    assert all(a.kind != b.kind for a, b in zip(labels, labels[1:]))


def test_segment_map_uses_hex_offsets():
    image = bytes(8192)
    series = entropy_scan(image, 4096, 4096)
    model = segment_map(series, classify_segments(series, image), len(image))
    assert model.segments[0].start == "0x0"
    assert model.segments[0].end == "0x2000"
    assert model.schema_version == 1


def test_thresholds_parse():
    assert Thresholds.parse("0.9998,0.998") == Thresholds(0.9998, 0.998)
    assert Thresholds.parse("0.99,0.98,0.9").floor == 0.9
    with pytest.raises(DumpError):
        Thresholds.parse("high,low")
    with pytest.raises(DumpError):
        Thresholds.parse("0.9")


# ─── diff_bitflips ────────────────────────────────────────────────────────────

def test_identical_regions():
    diff = diff_bitflips(bytes(64), bytes(64))
    assert diff.positions == [] and diff.bytes_per_flip is None


def test_single_bit_position():
    a = bytes(8)
    b = bytearray(8)
    b[5] = 1 << 3
    assert diff_bitflips(a, bytes(b)).positions == [43]


def test_rate_over_two_copies():
    length = 1_310_720
    a = _uniform(length, seed=3)
    b = bytearray(a)
    for pos in (17, 9_001, 80_000, 123_457, 400_000, 512_345, 700_001, 888_888, 1_000_003, 1_200_000, 1_310_719):
        b[pos] ^= 0x10
    diff = diff_bitflips(a, bytes(b))
    assert diff.count == 11
    assert int(diff.bytes_per_flip) == 238_312


def test_diff_length_mismatch():
    with pytest.raises(DumpError):
        diff_bitflips(bytes(4), bytes(5))
