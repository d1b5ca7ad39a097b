from __future__ import annotations

from functools import lru_cache

import numpy as np
import pytest

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.chart import Span
from treeformer.encoder import (
    EncodeOptions,
    OpCounters,
    TreeformerConfig,
    TreeformerParams,
    compose,
    encode_levelwise,
    encode_sequential,
    pool,
    top_level_summary,
)
from treeformer.errors import ContractError, DimensionError, EmptyInputError

from conftest import make_params, random_tokens


def numpy_params(params: TreeformerParams) -> dict:
    return {k: v.data.astype(np.float64) for k, v in params.named_parameters().items()}


def memo_oracle(tokens: np.ndarray, p: dict, H: int):
    """Top-down recursion with memoisation, written straight from the formulas."""
    n, d = tokens.shape

    @lru_cache(maxsize=None)
    def cell(i: int, j: int) -> np.ndarray:
        if i == j:
            return tokens[i]
        cands = []
        for k in range(i, j):
            c = p["W"] @ np.concatenate([cell(i, k), cell(k + 1, j)])
            cands.append(c + p.get("b", 0.0))
        C = np.array(cands)
        scores = (C @ p["Q"].T) @ (p["K"] @ p["w"]) / np.sqrt(d)
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        return a @ C

    return cell


def test_compose_projectors(f64):
    d = 3
    a, b = Tensor(np.array([1.0, 2.0, 3.0])), Tensor(np.array([-4.0, 5.0, 0.5]))
    eye, zero = np.eye(d), np.zeros((d, d))
    left = TreeformerParams(W=Tensor(np.hstack([eye, zero])), w=Tensor(np.ones(d)), b=Tensor(np.zeros(d)))
    right = TreeformerParams(W=Tensor(np.hstack([zero, eye])), w=Tensor(np.ones(d)), b=Tensor(np.zeros(d)))
    assert compose(a, b, left).data.tolist() == a.data.tolist()
    assert compose(a, b, right).data.tolist() == b.data.tolist()


def test_compose_is_not_commutative():
    rng = np.random.default_rng(11)
    _, params = make_params(16, seed=3)
    for _ in range(100):
        a, b = rng.normal(size=16), rng.normal(size=16)
        a, b = Tensor(a / np.linalg.norm(a)), Tensor(b / np.linalg.norm(b))
        assert np.linalg.norm(compose(a, b, params).data - compose(b, a, params).data) > 1e-3


def test_compose_rejects_wrong_width():
    _, params = make_params(4)
    with pytest.raises(DimensionError):
        compose(Tensor(np.zeros(4)), Tensor(np.zeros(5)), params)


def test_pool_single_and_identical_candidates(f64):
    _, params = make_params(5, seed=1)
    c = Tensor(np.random.default_rng(0).normal(size=5))
    out, weights = pool([c], params, return_weights=True)
    assert out.data.tolist() == c.data.tolist() and weights.tolist() == [1.0]
    same = pool([c, c, c], params).data
    np.testing.assert_allclose(same, c.data, rtol=0, atol=1e-15)


def test_pool_zero_scores_give_mean(f64):
    d = 2
    params = TreeformerParams(W=Tensor(np.zeros((d, 2 * d))), w=Tensor(np.array([0.0, 1.0])),
                              Q=Tensor(np.eye(d)), K=Tensor(np.eye(d)))
    a, b = Tensor(np.array([2.0, 0.0])), Tensor(np.array([-6.0, 0.0]))
    out, weights = pool([a, b], params, return_weights=True)
    assert weights.tolist() == [0.5, 0.5]
    assert out.data.tolist() == [-2.0, 0.0]


def test_pool_matches_direct_formula(f64):
    rng = np.random.default_rng(5)
    _, params = make_params(6, seed=2)
    p = numpy_params(params)
    C = rng.normal(size=(4, 6))
    scores = np.array([(p["Q"] @ c) @ (p["K"] @ p["w"]) for c in C]) / np.sqrt(6)
    a = np.exp(scores) / np.exp(scores).sum()
    out = pool(Tensor(C), params).data
    assert np.abs(out - a @ C).max() < 1e-6


def test_pool_empty_is_an_error():
    _, params = make_params(3)
    with pytest.raises(ContractError):
        pool([], params)


def test_sequential_base_cases(f64):
    rng = np.random.default_rng(0)
    config, params = make_params(4)
    t = random_tokens(1, 4, rng)
    chart = encode_sequential(t, config, params)
    assert chart.size == 1 and chart.vector(Span(0, 0)).tolist() == t[0].tolist()
    t2 = random_tokens(2, 4, rng)
    chart = encode_sequential(t2, config, params)
    direct = compose(Tensor(t2[0]), Tensor(t2[1]), params).data
    assert chart.vector(Span(0, 1)).tolist() == direct.tolist()
    with pytest.raises(EmptyInputError):
        encode_sequential(np.zeros((0, 4)), config, params)


@pytest.mark.parametrize("seed", range(3))
def test_sequential_matches_memo_oracle(f64, seed):
    rng = np.random.default_rng(seed)
    config, params = make_params(6, seed=seed, H=4)
    tokens = random_tokens(4, 6, rng)
    chart = encode_sequential(tokens, config, params)
    oracle = memo_oracle(tokens, numpy_params(params), 4)
    for span in chart.spans():
        assert np.abs(chart.vector(span) - oracle(*span)).max() < 1e-6


def test_levelwise_batch_matches_sequential():
    rng = np.random.default_rng(9)
    config, params = make_params(8, seed=4, H=8)
    seqs = [random_tokens(int(rng.integers(2, 17)), 8, rng) for _ in range(8)]
    batched = encode_levelwise(seqs, config, params, EncodeOptions(keep_weights=True))
    for tokens, chart in zip(seqs, batched.charts()):
        ref = encode_sequential(tokens, config, params, EncodeOptions(keep_weights=True))
        assert np.abs(chart.values - ref.values).max() < 1e-6
        for span, w in ref.weights.items():
            assert np.abs(chart.weights[span] - w).max() < 1e-6


def test_levelwise_single_sequence():
    rng = np.random.default_rng(1)
    config, params = make_params(8, seed=1, H=5)
    tokens = random_tokens(7, 8, rng)
    only = encode_levelwise([tokens], config, params).charts()[0]
    ref = encode_sequential(tokens, config, params)
    assert np.abs(only.values - ref.values).max() < 1e-6


def test_height_one_does_no_compositions():
    rng = np.random.default_rng(2)
    config, params = make_params(4, H=1)
    counters = OpCounters()
    tokens = random_tokens(6, 4, rng)
    batched = encode_levelwise([tokens], config, params, EncodeOptions(counters=counters))
    chart = batched.charts()[0]
    assert counters.compositions == 0 and counters.level_steps == 0
    assert chart.size == 6
    np.testing.assert_allclose(chart.values, tokens.astype(np.float32))


def test_counters_agree_between_schedules():
    rng = np.random.default_rng(3)
    config, params = make_params(4, H=4)
    tokens = random_tokens(9, 4, rng)
    a, b = OpCounters(), OpCounters()
    encode_sequential(tokens, config, params, EncodeOptions(counters=a))
    encode_levelwise([tokens], config, params, EncodeOptions(counters=b))
    assert a == b
    assert a.compositions == 8 * 1 + 7 * 2 + 6 * 3 and a.level_steps == 3


def test_top_level_summary(f64):
    rng = np.random.default_rng(4)
    config, params = make_params(4, H=3)
    chart = encode_sequential(random_tokens(5, 4, rng), config, params)
    want = np.mean([chart.vector(s) for s in chart.cells_of_length(3)], axis=0)
    np.testing.assert_allclose(top_level_summary(chart).data, want, atol=1e-12)
    short = encode_sequential(random_tokens(3, 4, rng), config, params)
    np.testing.assert_array_equal(top_level_summary(short).data, short.vector(Span(0, 2)))


def test_summary_of_equal_top_cells():
    config, params = make_params(3, H=1)
    c = np.array([0.25, -1.0, 2.0])
    chart = encode_sequential(np.tile(c, (4, 1)), config, params)
    np.testing.assert_allclose(top_level_summary(chart).data, c)


def test_root_depends_on_token_order():
    rng = np.random.default_rng(6)
    config, params = make_params(8, H=5)
    tokens = random_tokens(5, 8, rng)
    root = encode_sequential(tokens, config, params).vector(Span(0, 4))
    swapped = encode_sequential(tokens[[1, 0, 2, 3, 4]], config, params).vector(Span(0, 4))
    assert np.abs(root - swapped).max() > 1e-4


def test_levelwise_gradients_match_sequential(f64):
    rng = np.random.default_rng(8)
    config, params = make_params(4, H=3)
    tokens = random_tokens(5, 4, rng)
    probe = Tensor(rng.normal(size=4))

    def grads(run):
        for p in params.named_parameters().values():
            p.grad = None
        ad.new_tape()
        ad.backward(ad.sum_(ad.mul(run(), probe)))
        return {k: v.grad.copy() for k, v in params.named_parameters().items()}

    seq = grads(lambda: encode_sequential(tokens, config, params).cell(Span(0, 2)))
    lvl = grads(lambda: encode_levelwise([tokens], config, params).charts()[0].cell(Span(0, 2)))
    for name in seq:
        np.testing.assert_allclose(lvl[name], seq[name], atol=1e-12)


def test_fixed_qk_variant():
    rng = np.random.default_rng(10)
    config = TreeformerConfig(d=4, H=4, learned_qk=False, compose_bias=False)
    params = TreeformerParams.init(config, rng)
    assert set(params.named_parameters()) == {"W", "w"}
    tokens = random_tokens(6, 4, rng)
    a = encode_sequential(tokens, config, params)
    b = encode_levelwise([tokens], config, params).charts()[0]
    assert np.abs(a.values - b.values).max() < 1e-6


def test_tanh_variant_is_bounded():
    rng = np.random.default_rng(12)
    config, params = make_params(4, H=4, activation="tanh")
    chart = encode_sequential(random_tokens(6, 4, rng) * 10, config, params,
                              EncodeOptions(activation="tanh"))
    upper = chart.values[6:]
    assert np.all(np.abs(upper) <= 1.0)
