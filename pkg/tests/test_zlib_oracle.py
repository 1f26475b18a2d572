import zlib

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from conftest import flip_bits
from inflate import DeflateError, inflate_raw
from zlib_oracle import Status, adler32, check_candidate, describe, quick_check


def test_adler32_vectors():
    assert adler32(b"") == 0x00000001
    assert adler32(b"\x00") == 0x00010001
    assert adler32(b"abc") == 0x024D0127


def test_adler32_matches_running_sums():
    data = bytes(range(256)) * 40
    a, b = 1, 0
    for byte in data:
        a = (a + byte) % 65521
        b = (b + a) % 65521
    assert adler32(data) == (b << 16) | a


def test_valid_stream_round_trips(text_payload, zlib_stream):
    verdict = check_candidate(zlib_stream, 131072)
    assert verdict.status is Status.VALID
    assert verdict.valid
    assert verdict.payload == text_payload
    assert verdict.consumed == len(zlib_stream)


def test_thousand_bytes_of_text():
    data = (b"squashfs block " * 100)[:1000]
    verdict = check_candidate(zlib.compress(data), 131072)
    assert verdict.valid and verdict.payload == data


def test_checksum_flip_is_adler_mismatch(zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * (len(zlib_stream) - 2) + 5)
    verdict = check_candidate(corrupted, 131072)
    assert verdict.status is Status.ADLER_MISMATCH
    assert verdict.consumed == len(zlib_stream)
    assert verdict.stored_checksum != verdict.computed_checksum


def test_too_long():
    stream = zlib.compress(bytes(4097))
    assert check_candidate(stream, 4096).status is Status.TOO_LONG
    assert check_candidate(stream, 4097).valid


def test_bad_header():
    verdict = check_candidate(bytes(64), 8192)
    assert verdict.status is Status.BAD_HEADER
    assert verdict.consumed == 2


def test_preset_dictionary_rejected(zlib_stream):
    cmf = zlib_stream[0]
    flg = 0x20
    flg |= 31 - ((cmf << 8 | flg) % 31)
    assert check_candidate(bytes([cmf, flg]) + zlib_stream[2:], 8192).status is Status.BAD_HEADER


def test_truncated_stream_consumes_everything(zlib_stream):
    truncated = zlib_stream[:len(zlib_stream) // 2]
    verdict = check_candidate(truncated, 131072)
    assert verdict.status is Status.BAD_DEFLATE
    assert verdict.consumed <= len(truncated)


def test_consumed_covers_early_failure(zlib_stream):
    # a reserved block type (BTYPE=11) fails in the first deflate byte
    corrupted = bytearray(zlib_stream)
    corrupted[2] |= 0b110
    verdict = check_candidate(bytes(corrupted), 131072)
    assert verdict.status is Status.BAD_DEFLATE
    assert verdict.consumed == 3


def test_strict_rejects_trailing_bytes(zlib_stream):
    padded = zlib_stream + b"\x00\x00"
    assert check_candidate(padded, 131072).valid
    assert check_candidate(padded, 131072, strict=True).status is Status.BAD_DEFLATE
    assert quick_check(padded, 131072) is not None
    assert quick_check(padded, 131072, strict=True) is None


def test_max_len_must_be_positive(zlib_stream):
    with pytest.raises(ValueError):
        check_candidate(zlib_stream, 0)


def test_describe_mismatch(zlib_stream):
    info = describe(check_candidate(flip_bits(zlib_stream, 8 * (len(zlib_stream) - 1)), 131072))
    assert info["status"] == "AdlerMismatch"
    assert info["computed_checksum"].startswith("0x")


def test_inflate_raw_rejects_garbage():
    with pytest.raises(DeflateError):
        inflate_raw(b"\xff" * 8, 1024)


@hsettings(max_examples=60, deadline=None)
@given(st.binary(max_size=3000), st.integers(min_value=0, max_value=9))
def test_round_trip(data, level):
    stream = zlib.compress(data, level)
    verdict = check_candidate(stream, 4096)
    assert verdict.valid
    assert verdict.payload == data
    assert quick_check(stream, 4096) == data


@hsettings(max_examples=80, deadline=None)
@given(st.binary(min_size=1, max_size=600), st.data())
def test_screen_and_oracle_agree_on_single_flips(data, draw):
    stream = zlib.compress(data)
    pos = draw.draw(st.integers(min_value=0, max_value=8 * len(stream) - 1))
    candidate = flip_bits(stream, pos)
    verdict = check_candidate(candidate, 1024)
    screened = quick_check(candidate, 1024)
    assert verdict.valid == (screened is not None)
    if verdict.valid:
        assert verdict.payload == screened
    assert 0 < verdict.consumed <= len(candidate)


def _with_header(raw: bytes, payload: bytes, cinfo: int) -> bytes:
    cmf = (cinfo << 4) | 8
    flg = (31 - (cmf * 256) % 31) % 31
    return bytes([cmf, flg]) + raw + adler32(payload).to_bytes(4, "big")


@pytest.mark.parametrize("cinfo", range(8))
def test_declared_window_does_not_bound_distances(cinfo):
    head = np.random.Generator(np.random.Philox(7)).integers(0, 256, 300, dtype=np.uint8).tobytes()
    payload = head + head[:64]
    compressor = zlib.compressobj(9, zlib.DEFLATED, -15)
    raw = compressor.compress(payload) + compressor.flush()
    stream = _with_header(raw, payload, cinfo)
    verdict = check_candidate(stream, 4096)
    assert verdict.valid == (quick_check(stream, 4096) is not None)
    assert verdict.valid and verdict.payload == payload


def test_every_single_flip_of_a_short_stream():
    text = b"".join(b"line %d of the log, value=%d\n" % (i, i * i % 977) for i in range(400))
    n = 1
    while len(zlib.compress(text[:n])) < 256:
        n += 1
    stream = zlib.compress(text[:n])
    disagreements = []
    for pos in range(8 * len(stream)):
        candidate = flip_bits(stream, pos)
        verdict = check_candidate(candidate, 4096)
        screened = quick_check(candidate, 4096)
        if verdict.valid != (screened is not None) or (verdict.valid and verdict.payload != screened):
            disagreements.append(pos)
    assert 8 * len(stream) >= 2048
    assert disagreements == []


@hsettings(max_examples=60, deadline=None)
@given(st.binary(min_size=1, max_size=400), st.data())
def test_consumed_never_shrinks_as_bytes_arrive(data, draw):
    stream = zlib.compress(data)
    pos = draw.draw(st.integers(min_value=0, max_value=8 * len(stream) - 1))
    candidate = flip_bits(stream, pos)
    previous = 0
    for end in range(1, len(candidate) + 1):
        consumed = check_candidate(candidate[:end], 1024).consumed
        assert consumed >= previous
        previous = consumed
