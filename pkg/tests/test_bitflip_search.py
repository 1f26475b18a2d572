import zlib

import numpy as np
import pytest
from hypothesis import given, settings as hsettings
from hypothesis import strategies as st

from bitflip_search import (
    ONE_FLIP,
    TWO_FLIP,
    CandidateSpec,
    TargetSet,
    apply_flips,
    estimate_cost,
    pair_count,
    pairs_before,
    prefix_limit,
    repair_1flip,
    repair_2flip,
    repair_fragment,
    shard_bounds,
    union_target_sets,
)
from checkpoint_store import CheckpointStore, SearchProgress
from conftest import flip_bits
from errors import SearchError
from models import HitModel
from zlib_oracle import Status, check_candidate

MAX_LEN = 4096


# ─── Arithmetic ───────────────────────────────────────────────────────────────

def test_cost_estimates():
    assert estimate_cost(1000, 1000, ONE_FLIP).candidates == 8000
    assert estimate_cost(1000, 1000, TWO_FLIP).candidates == 31_996_000
    assert estimate_cost(100, 20, TWO_FLIP).candidates == 12_720
    with pytest.raises(SearchError):
        estimate_cost(100, 20, "3flip")


def test_pairs_before_counts_pairs():
    n = 37
    for first in range(n + 1):
        assert pairs_before(first, n) == sum(1 for a in range(first) for b in range(a + 1, n))
    assert pairs_before(n, n) == pair_count(n)


@hsettings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=3000), st.integers(min_value=1, max_value=40))
def test_shards_partition_first_flips(n_bits, total):
    bounds = [shard_bounds(n_bits, (i, total)) for i in range(total)]
    assert bounds[0][0] == 0 and bounds[-1][1] == n_bits
    assert all(a[1] == b[0] for a, b in zip(bounds, bounds[1:]))
    assert sum(pairs_before(stop, n_bits) - pairs_before(start, n_bits) for start, stop in bounds) == pair_count(n_bits)


def test_shards_are_balanced():
    n_bits = 8 * 1000
    sizes = [pairs_before(b, n_bits) - pairs_before(a, n_bits)
             for a, b in (shard_bounds(n_bits, (i, 8)) for i in range(8))]
    assert max(sizes) - min(sizes) <= 2 * n_bits


def test_invalid_shard():
    with pytest.raises(SearchError):
        shard_bounds(100, (4, 4))


def test_candidate_spec():
    assert CandidateSpec(0, (3, 9)).apply(bytes(2)) == bytes([0x08, 0x02])
    with pytest.raises(SearchError):
        CandidateSpec(0, (3, 3))
    with pytest.raises(SearchError):
        CandidateSpec(0, ())
    with pytest.raises(SearchError):
        CandidateSpec(0, (16,)).apply(bytes(2))


def test_apply_flips_is_an_involution():
    data = b"\x12\x34\x56"
    assert apply_flips(apply_flips(data, (0, 9, 23)), (0, 9, 23)) == data


# ─── Prefix limit ─────────────────────────────────────────────────────────────

def test_prefix_limit_follows_consumed(zlib_stream):
    corrupted = bytearray(zlib_stream)
    corrupted[2] |= 0b110  # reserved block type in the first deflate byte
    assert prefix_limit(bytes(corrupted), MAX_LEN) == 3


def test_prefix_limit_for_checksum_damage(zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * len(zlib_stream) - 1)
    assert check_candidate(corrupted, MAX_LEN).status is Status.ADLER_MISMATCH
    assert prefix_limit(corrupted, MAX_LEN) == len(corrupted)


def test_prefix_limit_rejects_valid_units(zlib_stream):
    with pytest.raises(SearchError):
        prefix_limit(zlib_stream, MAX_LEN)


def test_flip_lies_inside_prefix():
    data = (b"0123456789abcdef" * 200)[:3000]
    stream = zlib.compress(data)
    corrupted = flip_bits(stream, 10 * 8 + 2)
    limit = prefix_limit(corrupted, MAX_LEN)
    assert limit <= len(stream)
    assert 10 * 8 + 2 < 8 * limit


# ─── 1-flip ───────────────────────────────────────────────────────────────────

def test_one_flip_recovers_payload(text_payload, zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * (len(zlib_stream) // 2) + 5)
    result = repair_1flip(corrupted, MAX_LEN, prefix_limit(corrupted, MAX_LEN), jobs=1)
    assert text_payload in result.payloads
    assert result.model == ONE_FLIP and result.complete


def test_zero_fragment_has_no_repair():
    result = repair_1flip(bytes(64), MAX_LEN, jobs=1)
    assert result.targets == []


def test_targets_are_canonical_and_unique(zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * len(zlib_stream) - 3)
    result = repair_1flip(corrupted, MAX_LEN, jobs=1)
    flips = [t.flips for t in result.targets]
    assert flips == sorted(flips)
    assert len({t.payload for t in result.targets}) == len(result.targets)


def test_one_flip_on_a_pool(text_payload, zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * 20 + 1)
    single = repair_1flip(corrupted, MAX_LEN, jobs=1)
    pooled = repair_1flip(corrupted, MAX_LEN, jobs=2)
    assert [t.flips for t in single.targets] == [t.flips for t in pooled.targets]
    assert text_payload in pooled.payloads


@hsettings(max_examples=15, deadline=None)
@given(st.binary(min_size=20, max_size=200), st.data())
def test_one_flip_completeness(data, draw):
    stream = zlib.compress(data)
    pos = draw.draw(st.integers(min_value=0, max_value=8 * len(stream) - 1))
    corrupted = flip_bits(stream, pos)
    verdict = check_candidate(corrupted, 1024)
    if verdict.valid:
        return
    limit = prefix_limit(corrupted, 1024, verdict=verdict)
    assert pos < 8 * limit
    assert data in repair_1flip(corrupted, 1024, limit, jobs=1).payloads


def test_prefix_search_matches_full_search():
    rng = np.random.Generator(np.random.Philox(21))
    words = [b"inode", b"block", b"xattr", b"uid", b"dir", b"0x1f", b"frag", b"\n"]
    checked = 0
    while checked < 100:
        payload = b" ".join(words[i] for i in rng.integers(0, len(words), int(rng.integers(10, 60))))
        stream = zlib.compress(payload, int(rng.integers(1, 10)))
        assert len(stream) <= 256
        corrupted = flip_bits(stream, int(rng.integers(0, 8 * len(stream))))
        verdict = check_candidate(corrupted, 1024)
        if verdict.valid:
            continue
        pruned = repair_1flip(corrupted, 1024, prefix_limit(corrupted, 1024, verdict=verdict), jobs=1)
        full = repair_1flip(corrupted, 1024, jobs=1)
        assert [(t.flips, t.payload) for t in pruned.targets] == [(t.flips, t.payload) for t in full.targets]
        assert payload in full.payloads
        checked += 1


# ─── 2-flip ───────────────────────────────────────────────────────────────────

def _two_flip_unit(stream: bytes):
    return flip_bits(stream, 8 * 6 + 1, 8 * (len(stream) - 8) + 6)


def test_two_flip_recovers_payload(short_stream):
    payload = zlib.decompress(short_stream)
    corrupted = _two_flip_unit(short_stream)
    result = repair_2flip(corrupted, MAX_LEN, jobs=1)
    assert payload in result.payloads
    assert result.model == TWO_FLIP and result.complete


def test_shard_union_equals_full_search(short_stream):
    corrupted = _two_flip_unit(short_stream)
    full = repair_2flip(corrupted, MAX_LEN, shard=(0, 1), jobs=1)
    parts = [repair_2flip(corrupted, MAX_LEN, shard=(i, 4), jobs=1) for i in range(4)]
    merged = union_target_sets(parts)
    assert merged.complete
    assert [(t.flips, t.payload) for t in merged.targets] == [(t.flips, t.payload) for t in full.targets]


def test_incomplete_union_is_flagged(short_stream):
    corrupted = _two_flip_unit(short_stream)
    parts = [repair_2flip(corrupted, MAX_LEN, shard=(i, 3), jobs=1) for i in (0, 2)]
    assert not union_target_sets(parts).complete


def test_two_flip_superset_of_one_flip(short_stream):
    # the trailing byte is ignored outside strict mode, so every 1-flip repair has a partner pair
    corrupted = flip_bits(short_stream, 8 * 5 + 4) + b"\x00"
    one = repair_1flip(corrupted, MAX_LEN, jobs=1)
    two = repair_2flip(corrupted, MAX_LEN, jobs=1)
    assert set(one.payloads) <= set(two.payloads)


def test_checkpoint_resume_gives_same_targets(short_stream, tmp_path):
    corrupted = _two_flip_unit(short_stream)
    n_bits = 8 * len(corrupted)
    reference = repair_2flip(corrupted, MAX_LEN, jobs=1)

    # a search that stopped halfway, with the hits it had found so far
    halfway = n_bits // 2
    store = CheckpointStore(str(tmp_path))
    progress = SearchProgress(0, reference.fragment_id, (0, 1), 0, n_bits, halfway, hits=[
        HitModel(flips=list(t.flips), sha256=t.sha256, length=len(t.payload))
        for t in reference.targets if t.flips[0] < halfway
    ])
    store.update(progress)

    resumed = repair_2flip(corrupted, MAX_LEN, jobs=1, checkpoint_dir=str(tmp_path))
    assert [(t.flips, t.payload) for t in resumed.targets] == [(t.flips, t.payload) for t in reference.targets]
    assert store.get(0, (0, 1), reference.fragment_id).complete


def test_checkpoint_for_other_bytes_is_ignored(short_stream, tmp_path):
    corrupted = _two_flip_unit(short_stream)
    store = CheckpointStore(str(tmp_path))
    store.update(SearchProgress(0, "0" * 64, (0, 1), 0, 8 * len(corrupted), 8 * len(corrupted), complete=True))
    result = repair_2flip(corrupted, MAX_LEN, jobs=1, checkpoint_dir=str(tmp_path))
    assert zlib.decompress(short_stream) in result.payloads


def test_duplicate_hits_are_saved_once(tmp_path):
    store = CheckpointStore(str(tmp_path))
    hit = HitModel(flips=[3, 40], sha256="ab" * 32, length=12)
    other = HitModel(flips=[5, 41], sha256="cd" * 32, length=12)
    progress = SearchProgress(0, "0" * 64, (0, 1), 0, 64, 32, hits=[hit, other, hit.model_copy()])
    store.update(progress)
    saved = store.get(0, (0, 1), "0" * 64)
    assert [h.flips for h in saved.hits] == [[3, 40], [5, 41]]
    assert [h.flips for h in progress.hits] == [[3, 40], [5, 41]]

# ─── repair_fragment ──────────────────────────────────────────────────────────

def test_valid_unit_is_its_own_target(text_payload, zlib_stream):
    result = repair_fragment(zlib_stream, MAX_LEN, ONE_FLIP)
    assert [(t.flips, t.payload) for t in result.targets] == [((), text_payload)]
    assert result.baseline == "Valid"


def test_two_flip_model_escalates(short_stream):
    corrupted = _two_flip_unit(short_stream)
    assert repair_fragment(corrupted, MAX_LEN, ONE_FLIP, jobs=1).targets == []
    result = repair_fragment(corrupted, MAX_LEN, TWO_FLIP, jobs=1)
    assert zlib.decompress(short_stream) in result.payloads
    assert result.search_budget["two_flip"] > 0


def test_unknown_model(zlib_stream):
    with pytest.raises(SearchError):
        repair_fragment(zlib_stream, MAX_LEN, "3flip")


def test_target_set_model_round_trip(zlib_stream):
    corrupted = flip_bits(zlib_stream, 8 * 30 + 2)
    result = repair_1flip(corrupted, MAX_LEN, jobs=1)
    rebuilt = TargetSet.from_model(result.to_model(), corrupted, MAX_LEN)
    assert rebuilt.payloads == result.payloads
    assert rebuilt.fragment_id == result.fragment_id
