import types

import numpy as np
import pytest

import repair_scenarios
from zlib_oracle import check_candidate


def _timed_search(monkeypatch, power: float):
    clock = [0.0]
    calls = []

    def fake_repair_2flip(fragment, max_len, *args, **kwargs):
        calls.append((len(fragment), args, kwargs))
        clock[0] += (len(fragment) / 256.0) ** power

    monkeypatch.setattr(repair_scenarios, "repair_2flip", fake_repair_2flip)
    monkeypatch.setattr(repair_scenarios, "time", types.SimpleNamespace(perf_counter=lambda: clock[0]))
    return calls


@pytest.mark.parametrize("size", repair_scenarios.COST_SIZES)
def test_sized_fragment_is_a_damaged_stream_of_the_requested_size(size):
    rng = np.random.Generator(np.random.Philox(3))
    fragment, max_len = repair_scenarios._sized_fragment(size, rng)
    assert size <= len(fragment) < size + 64
    assert not check_candidate(fragment, max_len).valid


def test_cost_scenario_searches_the_full_range_of_each_size(monkeypatch):
    calls = _timed_search(monkeypatch, 3.0)
    result = repair_scenarios.run_cost_scenario(jobs=1)
    assert [n >= size for (n, _, _), size in zip(calls, repair_scenarios.COST_SIZES)] == [True] * 4
    assert all(not args and set(kwargs) == {"jobs"} for _, args, kwargs in calls)
    assert result["slope"] == pytest.approx(3.0)
    assert result["score"]["total"] == 100


def test_cost_scenario_fails_a_quadratic_curve(monkeypatch):
    _timed_search(monkeypatch, 2.0)
    result = repair_scenarios.run_cost_scenario(jobs=1)
    assert result["slope"] == pytest.approx(2.0)
    assert result["score"]["total"] < 100
