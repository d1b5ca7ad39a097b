from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from treeformer.autodiff import Tensor
from treeformer.chart import LevelPlan, Span, SpanChart, cell_count, chart_new, split_pairs, spans_of_length
from treeformer.errors import ContractError, EmptyInputError


@pytest.mark.parametrize("n,H,cells", [(5, 5, 15), (5, 3, 12), (1, 1, 1), (3, 9, 6)])
def test_cell_counts(n, H, cells):
    assert chart_new(n, H, 4).size == cells == cell_count(n, H)


def test_split_pairs_of_five_token_span():
    pairs = split_pairs(Span(0, 4))
    assert pairs == [
        (Span(0, 0), Span(1, 4)),
        (Span(0, 1), Span(2, 4)),
        (Span(0, 2), Span(3, 4)),
        (Span(0, 3), Span(4, 4)),
    ]
    assert split_pairs(Span(2, 3)) == [(Span(2, 2), Span(3, 3))]
    with pytest.raises(ContractError):
        split_pairs(Span(1, 1))


def test_total_splits_full_chart():
    chart = chart_new(5, 5, 2)
    assert sum(len(split_pairs(s)) for s in chart.spans() if s.length > 1) == 20


def test_cells_of_length():
    chart = chart_new(7, 7, 2)
    assert chart.cells_of_length(3) == [Span(i, i + 2) for i in range(5)]
    assert len(chart_new(5, 5, 2).cells_of_length(1)) == 5
    assert chart_new(5, 5, 2).cells_of_length(5) == [Span(0, 4)]


@given(st.integers(1, 12), st.integers(1, 12))
def test_offsets_are_a_bijection(n, H):
    chart = chart_new(n, H, 1)
    offsets = [chart.span_offset(s) for s in chart.spans()]
    assert offsets == list(range(chart.size))
    for s in chart.spans():
        assert 0 <= s.i <= s.j < n and s.length == s.j - s.i + 1


def _fill(chart: SpanChart) -> None:
    for h in range(1, chart.H + 1):
        for s in chart.cells_of_length(h):
            chart.write(s, Tensor(np.full(chart.d, 10 * s.i + s.j, dtype=float)))


def test_flatten_selection():
    chart = chart_new(5, 3, 2)
    _fill(chart)
    assert len(chart.flatten()) == 12
    picked = chart.flatten({3})
    assert [s for s, _ in picked] == [Span(0, 2), Span(1, 3), Span(2, 4)]
    assert picked[1][1].tolist() == [13.0, 13.0]
    single = chart_new(1, 1, 2)
    _fill(single)
    assert len(single.flatten()) == 1


def test_bottom_up_discipline_and_shape_checks():
    chart = chart_new(3, 3, 2)
    chart.write(Span(0, 0), Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        chart.write(Span(0, 1), Tensor(np.zeros(2)))
    with pytest.raises(ContractError):
        chart.write(Span(1, 1), Tensor(np.zeros(3)))
    with pytest.raises(ContractError):
        chart.vector(Span(2, 2))
    with pytest.raises(ContractError):
        chart.span_offset(Span(1, 3))
    with pytest.raises(EmptyInputError):
        chart_new(0, 1, 2)


def test_render_has_one_row_per_level():
    chart = chart_new(4, 3, 2)
    _fill(chart)
    rows = chart.render().splitlines()
    assert len(rows) == 3 and rows[0].startswith("h=1") and rows[2].count("[") == 2


def test_level_plan_rows_and_splits():
    plan = LevelPlan(np.array([3, 1, 4]), H=3)
    assert plan.top == 3
    assert [c.tolist() for c in plan.level_counts] == [[3, 1, 4], [2, 0, 3], [1, 0, 2]]
    assert plan.total == 8 + 5 + 3
    left, right, owner = plan.split_indices(3)
    # first span: sequence 0, start 0, splits (0|1,2) and (0,1|2)
    assert (left[0], right[0]) == (plan.row(0, 1, 0), plan.row(0, 2, 1))
    assert (left[1], right[1]) == (plan.row(0, 2, 0), plan.row(0, 1, 2))
    assert owner.tolist() == [0, 2, 2]
    index, mask = plan.memory_index()
    assert mask.sum(axis=1).tolist() == [cell_count(3, 3), 1, cell_count(4, 3)]


def test_spans_of_length_empty_when_too_long():
    assert spans_of_length(3, 4) == []
