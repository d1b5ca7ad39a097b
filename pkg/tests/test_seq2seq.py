from __future__ import annotations

import itertools
import math

import numpy as np
import pytest

from treeformer import autodiff as ad
from treeformer.autodiff import Tensor
from treeformer.encoder import EncodeOptions, encode_levelwise, encode_sequential
from treeformer.errors import ContractError
from treeformer.seq2seq import (
    BOS,
    EOS,
    ClassifierHead,
    Decoder,
    DecoderConfig,
    EncoderMemory,
    beam_search,
    classify,
    decode_train_step,
    generate_beam,
    generate_greedy,
    greedy_search,
    strip_special,
)

from conftest import make_params, random_tokens


def small_setup(seed=0, d=8, n=5, H=3, L_dec=1, max_out=6):
    rng = np.random.default_rng(seed)
    config, params = make_params(d, seed=seed, H=H)
    charts = [encode_sequential(random_tokens(n, d, rng), config, params)]
    memory = EncoderMemory.from_charts(charts)
    decoder = Decoder(DecoderConfig(vocab_size=6, d=d, L_dec=L_dec, n_heads=2, d_ffn=16,
                                    max_output_length=max_out), rng)
    return memory, decoder, params


def test_memory_from_charts_matches_batched_memory():
    rng = np.random.default_rng(1)
    config, params = make_params(4, H=3)
    seqs = [random_tokens(5, 4, rng), random_tokens(2, 4, rng)]
    batched = encode_levelwise(seqs, config, params)
    vectors, mask = batched.memory()
    ref = EncoderMemory.from_charts([encode_sequential(s, config, params) for s in seqs])
    np.testing.assert_array_equal(mask, ref.mask)
    assert np.abs(vectors.data[mask] - ref.vectors.data[ref.mask]).max() < 1e-6
    assert ref.lengths.tolist() == [12, 3]


def test_single_step_loss_is_one_cross_entropy(f64):
    memory, decoder, _ = small_setup()
    loss = decode_train_step(memory, [[BOS, 4]], decoder, label_smoothing=0.0).item()
    logits = decoder.logits(memory, [[BOS]]).data[0, 0]
    expected = -(logits[4] - math.log(np.exp(logits).sum()))
    assert loss == pytest.approx(expected, abs=1e-12)


def test_overlong_target_rejected():
    memory, decoder, _ = small_setup(max_out=3)
    with pytest.raises(ContractError):
        decode_train_step(memory, [[BOS, 3, 4, 5, EOS]], decoder)


def test_causal_mask(f64):
    memory, decoder, _ = small_setup(L_dec=2)
    base = decoder.logits(memory, [[BOS, 3, 4, 5, 3]]).data
    changed = decoder.logits(memory, [[BOS, 3, 4, 0, 3]]).data
    np.testing.assert_array_equal(base[0, :3], changed[0, :3])
    assert np.abs(base[0, 3:] - changed[0, 3:]).max() > 0


def test_decoder_and_chart_gradients(f64):
    rng = np.random.default_rng(2)
    d = 8
    config, params = make_params(d, seed=2, H=2)
    decoder = Decoder(DecoderConfig(vocab_size=6, d=d, L_dec=1, n_heads=2, d_ffn=16), rng)
    tokens = ad.parameter(random_tokens(4, d, rng), "tokens")

    def loss():
        charts = [encode_sequential(tokens, config, params)]
        return decode_train_step(EncoderMemory.from_charts(charts), [[BOS, 3, 5, EOS]], decoder)

    inputs = {"tokens": tokens, **params.named_parameters(), **decoder.named_parameters()}
    report = ad.grad_check(loss, inputs, step=1e-5, tolerance=1e-3)
    assert report.passed, report.lines()


def test_greedy_equals_beam_one_and_is_deterministic():
    memory, decoder, _ = small_setup(seed=3)
    g = generate_greedy(memory, decoder)
    assert g == generate_beam(memory, decoder, 1, 0.0)
    assert g == generate_greedy(memory, decoder)


# toy next-token table over {A=0, B=1, EOS=2}; bos is 9
def toy_step(prefixes):
    out = []
    for p in prefixes:
        gen = p[1:]
        if not gen:
            probs = [0.6, 0.4, 0.0]
        elif len(gen) == 1:
            probs = [1 / 3, 1 / 3, 1 / 3] if gen[0] == 0 else [0.05, 0.05, 0.9]
        else:
            probs = [0.0, 0.0, 1.0]
        with np.errstate(divide="ignore"):
            out.append(np.log(probs))
    return np.array(out)


def enumerate_toy(max_len=3):
    best, best_p = None, -1.0
    for length in range(1, max_len + 1):
        for body in itertools.product([0, 1], repeat=length - 1):
            seq = [*body, 2]
            p = math.exp(sum(toy_step([[9, *seq[:t]]])[0][seq[t]] for t in range(len(seq))))
            if p > best_p:
                best, best_p = seq, p
    return best, best_p


def test_beam_escapes_greedy_trap():
    best_seq, best_p = enumerate_toy()
    assert best_seq == [1, 2] and best_p == pytest.approx(0.36)
    greedy = greedy_search(toy_step, 3, bos=9, eos=2)
    assert greedy == [0, 0, 2]
    beam, pool = beam_search(toy_step, 4, 0.0, 3, bos=9, eos=2)
    assert beam.tokens == best_seq
    assert beam.score == max(h.score for h in pool)


def test_length_penalty_prefers_longer_outputs():
    def step(prefixes):
        out = []
        for p in prefixes:
            gen = p[1:]
            probs = [0.0, 0.45, 0.55] if not gen else ([0.0, 0.0, 1.0] if len(gen) >= 3 else [0.0, 0.9, 0.1])
            with np.errstate(divide="ignore"):
                out.append(np.log(probs))
        return np.array(out)

    short, _ = beam_search(step, 3, 0.0, 5, bos=9, eos=2)
    long, _ = beam_search(step, 3, 2.0, 5, bos=9, eos=2)
    assert short.tokens == [2]
    assert len(long.tokens) > 1


def test_strip_special():
    assert strip_special([BOS, 3, 0, 4, EOS, 5]) == [3, 4]


def test_classifier_zero_weights_give_zero_logits():
    rng = np.random.default_rng(4)
    config, params = make_params(4, H=3)
    chart = encode_sequential(random_tokens(5, 4, rng), config, params)
    head = ClassifierHead(rng, 4, 2)
    head.proj.weight.data[...] = 0
    assert classify(chart, head).data.tolist() == [0.0, 0.0]


def test_classifier_gradient_reaches_both_paths(f64):
    rng = np.random.default_rng(5)
    config, params = make_params(4, H=3)
    tokens = ad.parameter(random_tokens(5, 4, rng), "tokens")
    head = ClassifierHead(rng, 4, 2)
    ad.new_tape()
    chart = encode_sequential(tokens, config, params)
    ad.backward(ad.cross_entropy(classify(chart, head).reshape(1, 2), [1]))
    assert np.abs(params.W.grad).max() > 0  # summary path runs through composition
    assert np.abs(tokens.grad).max() > 0


def test_classifier_ablation_uses_token_mean_only():
    rng = np.random.default_rng(6)
    config, params = make_params(4, H=3)
    tokens = random_tokens(5, 4, rng)
    head = ClassifierHead(rng, 4, 2, use_summary=False)
    before = classify(encode_sequential(tokens, config, params), head).data
    params.W.data *= 3.0
    after = classify(encode_sequential(tokens, config, params), head).data
    np.testing.assert_array_equal(before, after)
    batched = classify(encode_levelwise([tokens], config, params), head).data
    assert np.abs(batched[0] - before).max() < 1e-6
