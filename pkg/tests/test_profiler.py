from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from treeformer.errors import ContractError
from treeformer.profiler import (
    compositions_closed_form,
    compositions_enumerated,
    compositions_height_limited,
    loglog_slope,
    parallel_work_per_level,
    profile_point,
    profile_run,
    read_csv,
    rows_to_csv,
)


@pytest.mark.parametrize("n,count", [(1, 0), (2, 1), (5, 20), (8, 84)])
def test_closed_form_values(n, count):
    assert compositions_closed_form(n) == count == compositions_enumerated(n)


@given(st.integers(1, 40))
def test_closed_form_is_the_cubic(n):
    assert compositions_closed_form(n) == (n + 1) * n * (n - 1) // 6


@pytest.mark.parametrize("n,H,count", [(5, 1, 0), (5, 2, 4), (8, 3, 19), (6, 6, 35)])
def test_height_limited_values(n, H, count):
    assert compositions_height_limited(n, H) == count == compositions_enumerated(n, H)
    if H == n:
        assert count == compositions_closed_form(n)


def test_parallel_levels():
    assert parallel_work_per_level(5).per_level == [0, 1, 2, 3, 4]
    assert parallel_work_per_level(5).total == 10
    assert parallel_work_per_level(1).total == 0
    for n in range(1, 13):
        assert parallel_work_per_level(n).total == n * (n - 1) // 2


def test_profile_point_counters():
    row = profile_point(8, 8, d=4, repeats=1)
    assert row.compositions == 84 and row.level_steps == 7 and row.cells == 36
    row = profile_point(8, 3, d=4, repeats=1)
    assert row.compositions == 19 and row.level_steps == 2 and row.chart_bytes == 21 * 4 * 4


def test_csv_round_trip():
    rows = profile_run([(4, 4), (6, 2)], d=4, repeats=1)
    text = rows_to_csv(rows)
    assert text.splitlines()[0] == "n,H,compositions,pool_candidates,cells,level_steps,wall_ms,chart_bytes"
    back = read_csv(text)
    assert [(r.n, r.H, r.compositions) for r in back] == [(4, 4, 10), (6, 2, 5)]


def test_loglog_slope_of_power_law():
    xs = [2, 4, 8, 16]
    assert loglog_slope(xs, [x**3 for x in xs]) == pytest.approx(3.0)


def test_bad_arguments():
    with pytest.raises(ContractError):
        compositions_height_limited(4, 5)
    with pytest.raises(ContractError):
        profile_run([])
