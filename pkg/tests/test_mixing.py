import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fnetar import numerics as nx
from fnetar.errors import ConfigError, DomainError, ShapeError
from fnetar.mixing import (
    AttentionParams,
    apply_fnet_fft,
    apply_mixing,
    as_complex_buffer,
    attention_forward,
    build_causal_mask,
    build_fnet_matrix,
    build_fnetar_matrix,
    causal_leaks,
    dft_naive,
    fft_radix2,
    idft_naive,
    verify_causality,
)
from fnetar.numerics import Tensor

S2 = 1 / math.sqrt(2)


def loop_dft(v):
    n = len(v)
    return np.array([sum(v[j] * cmath.exp(-2j * math.pi * j * k / n) for j in range(n))
                     for k in range(n)])


def random_attention(rng, d=8, heads=2):
    return AttentionParams(*(Tensor(rng.standard_normal((d, d)) / math.sqrt(d)) for _ in range(4)),
                           n_heads=heads)


# ---------------------------------------------------------------- FNet matrix

def test_fnet_n1():
    np.testing.assert_array_equal(build_fnet_matrix(1).matrix, [[1.0]])


def test_fnet_n2():
    np.testing.assert_allclose(build_fnet_matrix(2).matrix, S2 * np.array([[1, 1], [1, -1]]),
                               rtol=0, atol=1e-15)


def test_fnet_n4_row1():
    np.testing.assert_allclose(build_fnet_matrix(4).matrix[1], [0.5, 0, -0.5, 0], rtol=0, atol=1e-15)


def test_fnet_zero_size_rejected():
    with pytest.raises(DomainError):
        build_fnet_matrix(0)


@pytest.mark.parametrize("n", range(1, 33))
def test_fnet_symmetric_and_bounded(n):
    m = build_fnet_matrix(n).matrix
    np.testing.assert_array_equal(m, m.T)
    assert np.abs(m).max() <= 1 / math.sqrt(n)


def test_fnet_matrix_is_read_only():
    with pytest.raises(ValueError):
        build_fnet_matrix(3).matrix[0, 0] = 2.0


# ---------------------------------------------------------------- FNetAR matrix

def test_fnetar_trivial():
    np.testing.assert_array_equal(build_fnetar_matrix(1, 0).matrix, [[1.0]])


def test_fnetar_worked_2x4():
    expected = S2 * np.array([[0, 1, 1, 0], [0, 0, 1, -1]])
    assert np.abs(build_fnetar_matrix(2, 2).matrix - expected).max() <= 1e-15


def test_fnetar_3x6_last_row():
    m = build_fnetar_matrix(3, 3).matrix
    np.testing.assert_array_equal(m[2, :3], 0.0)
    np.testing.assert_allclose(m[2, 3:], np.array([1, -0.5, -0.5]) / math.sqrt(3), rtol=0, atol=1e-15)


@pytest.mark.parametrize("l", range(1, 33))
def test_fnetar_without_memory_is_lower_triangular(l):
    m = build_fnetar_matrix(l, 0).matrix
    assert m.shape == (l, l)
    np.testing.assert_array_equal(np.triu(m, 1), 0.0)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 32), st.integers(0, 32))
def test_fnetar_structure(l_seq, l_mem):
    op = build_fnetar_matrix(l_seq, l_mem)
    m = op.matrix
    assert m.shape == (l_seq, l_mem + l_seq)
    rows, cols = np.indices(m.shape)
    assert np.all(m[cols > l_mem + rows] == 0.0)
    assert np.abs(m).max() <= 1 / math.sqrt(l_seq)
    # row 0 samples its window uniformly
    window = m[0, max(0, l_mem + 1 - l_seq): l_mem + 1]
    np.testing.assert_array_equal(window, 1 / math.sqrt(l_seq))
    if l_mem >= l_seq - 1:
        # every row has its full window of N eligible slots
        for r in range(l_seq):
            assert l_mem + r + 1 - l_seq >= 0
    assert causal_leaks(op) == []


def test_fnetar_truncation_drops_rather_than_wraps():
    m = build_fnetar_matrix(4, 0).matrix
    # row 1 would start at column -2; only columns 0..1 survive
    np.testing.assert_allclose(m[1, :2], [math.cos(2 * math.pi * 2 / 4) / 2,
                                          math.cos(2 * math.pi * 3 / 4) / 2], atol=1e-15)
    np.testing.assert_array_equal(m[1, 2:], 0.0)


def test_fnetar_self_exclusive_shifts_window_left():
    inc = build_fnetar_matrix(3, 3).matrix
    exc = build_fnetar_matrix(3, 3, self_exclusive=True).matrix
    np.testing.assert_array_equal(exc[:, :-1], inc[:, 1:])
    rows, cols = np.indices(exc.shape)
    assert np.all(exc[cols >= 3 + rows] == 0.0)


def test_fnetar_domain_checks():
    with pytest.raises(DomainError):
        build_fnetar_matrix(0, 3)
    with pytest.raises(DomainError):
        build_fnetar_matrix(3, -1)


# ---------------------------------------------------------------- causal mask

def test_mask_single():
    np.testing.assert_array_equal(build_causal_mask(1, 0).matrix, [[True]])


def test_mask_lower_triangular():
    np.testing.assert_array_equal(build_causal_mask(2, 0).matrix, [[True, False], [True, True]])


def test_mask_with_memory():
    m = build_causal_mask(2, 3).matrix
    np.testing.assert_array_equal(m[0], [True] * 4 + [False])
    np.testing.assert_array_equal(m[1], [True] * 5)


def test_mask_self_exclusive():
    np.testing.assert_array_equal(build_causal_mask(2, 1, self_exclusive=True).matrix,
                                  [[True, False, False], [True, True, False]])


# ---------------------------------------------------------------- apply_mixing

def test_apply_mixing_identity_sampling(rng):
    from fnetar.mixing import MixingOperator

    l_seq, l_mem, d = 3, 2, 4
    mat = np.zeros((l_seq, l_mem + l_seq))
    mat[np.arange(l_seq), l_mem + np.arange(l_seq)] = 1.0
    op = MixingOperator("fnetar", l_seq, l_mem, mat)
    x = Tensor(rng.standard_normal((l_seq, d)))
    mem = Tensor(rng.standard_normal((l_mem, d)))
    np.testing.assert_array_equal(apply_mixing(x, mem, op).data, x.data)


def test_apply_mixing_hand_contraction():
    op = build_fnetar_matrix(2, 2)
    col = np.array([1.0, 2.0, 3.0, 4.0])[:, None] * np.ones((1, 3))
    y = apply_mixing(Tensor(col[2:]), Tensor(col[:2]), op).data
    np.testing.assert_allclose(y, S2 * np.array([[5.0] * 3, [-1.0] * 3]), rtol=0, atol=1e-15)


def test_apply_mixing_extent_mismatch():
    with pytest.raises(ShapeError):
        apply_mixing(Tensor(np.zeros((3, 2))), Tensor(np.zeros((2, 2))), build_fnetar_matrix(2, 2))


def test_apply_mixing_future_gradients_exactly_zero(rng):
    l_seq, l_mem, d = 5, 3, 4
    op = build_fnetar_matrix(l_seq, l_mem)
    mem = Tensor(rng.standard_normal((l_mem, d)))
    for r in range(l_seq):
        x = Tensor(rng.standard_normal((l_seq, d)), requires_grad=True)
        y = apply_mixing(x, mem, op)
        nx.backward(nx.reduce_sum(y[r]))
        np.testing.assert_array_equal(x.grad[r + 1:], 0.0)


def test_apply_mixing_batched(rng):
    op = build_fnetar_matrix(4, 2)
    x = rng.standard_normal((3, 4, 5))
    mem = rng.standard_normal((3, 2, 5))
    y = apply_mixing(Tensor(x), Tensor(mem), op).data
    for b in range(3):
        np.testing.assert_allclose(y[b], op.matrix @ np.vstack([mem[b], x[b]]), atol=1e-14)


@pytest.mark.parametrize("n", [1, 2, 4, 8, 64])
def test_fft_path_matches_dense_fnet(rng, n):
    x = rng.standard_normal((n, 6))
    dense = build_fnet_matrix(n).matrix @ x
    np.testing.assert_allclose(apply_fnet_fft(x), dense, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- attention

def test_attention_single_token(rng):
    p = random_attention(rng)
    x = rng.standard_normal((1, 8))
    out = attention_forward(Tensor(x), Tensor(np.zeros((0, 8))), p, build_causal_mask(1, 0))
    np.testing.assert_allclose(out.data, x @ p.wv.data @ p.wo.data, atol=1e-14)


def test_attention_equal_keys_average_allowed_values(rng):
    d = 8
    p = random_attention(rng, d)
    p.wk.data[:] = 0.0  # every key is zero, so scores are uniform
    x = rng.standard_normal((3, d))
    mem = rng.standard_normal((2, d))
    out = attention_forward(Tensor(x), Tensor(mem), p, build_causal_mask(3, 2)).data
    z = np.vstack([mem, x]) @ p.wv.data
    for r in range(3):
        np.testing.assert_allclose(out[r], z[: 2 + r + 1].mean(axis=0) @ p.wo.data, atol=1e-14)


def test_attention_jacobian_is_causal(rng):
    d, l_seq, l_mem = 8, 4, 2
    p = random_attention(rng, d)
    mem = Tensor(rng.standard_normal((l_mem, d)))
    mask = build_causal_mask(l_seq, l_mem)
    for i in range(l_seq):
        x = Tensor(rng.standard_normal((l_seq, d)), requires_grad=True)
        out = attention_forward(x, mem, p, mask)
        nx.backward(nx.reduce_sum(out[i]))
        np.testing.assert_array_equal(x.grad[i + 1:], 0.0)
        assert np.abs(x.grad[: i + 1]).max() > 0


def test_attention_head_divisibility():
    with pytest.raises(ConfigError):
        AttentionParams(*(Tensor(np.zeros((6, 6))) for _ in range(4)), n_heads=4)


def test_attention_gradient_check(rng):
    d = 4
    p = random_attention(rng, d)
    mem = Tensor(rng.standard_normal((2, d)))
    r = Tensor(rng.standard_normal((3, d)))
    mask = build_causal_mask(3, 2)
    err = nx.finite_diff_check(
        lambda x: nx.reduce_sum(nx.multiply(attention_forward(x, mem, p, mask), r)),
        Tensor(rng.standard_normal((3, d))))
    assert err < 1e-6


# ---------------------------------------------------------------- DFT / FFT

def test_dft_impulse():
    np.testing.assert_allclose(dft_naive([1, 0, 0, 0]), [1, 1, 1, 1], atol=1e-15)


def test_dft_constant():
    np.testing.assert_allclose(dft_naive([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-14)


def test_dft_matches_loop_and_round_trips(rng):
    v = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    np.testing.assert_allclose(dft_naive(v), loop_dft(v.tolist()), atol=1e-12)
    assert np.abs(idft_naive(dft_naive(v)) - v).max() < 1e-10


def test_dft_empty_rejected():
    with pytest.raises(DomainError):
        dft_naive([])


def test_complex_buffer_pair_input():
    np.testing.assert_array_equal(as_complex_buffer(([1.0, 2.0], [3.0, 4.0])), [1 + 3j, 2 + 4j])
    with pytest.raises(ShapeError):
        as_complex_buffer(([1.0], [1.0, 2.0]))


def test_fft_impulse_and_constant():
    np.testing.assert_allclose(fft_radix2([1, 0, 0, 0]), [1, 1, 1, 1], atol=1e-15)
    np.testing.assert_allclose(fft_radix2([1, 1, 1, 1]), [4, 0, 0, 0], atol=1e-15)


@pytest.mark.parametrize("n", [2 ** k for k in range(11)])
def test_fft_matches_naive(rng, n):
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    x = fft_radix2(v)
    assert np.abs(x - dft_naive(v)).max() < 1e-9
    assert abs(np.sum(np.abs(v) ** 2) - np.sum(np.abs(x) ** 2) / n) <= 1e-9 * np.sum(np.abs(v) ** 2)


def test_fft_batched_rows(rng):
    v = rng.standard_normal((3, 16)) + 0j
    np.testing.assert_allclose(fft_radix2(v), np.stack([dft_naive(r) for r in v]), atol=1e-12)


@pytest.mark.parametrize("n", [0, 3, 6, 12])
def test_fft_rejects_non_power_of_two(n):
    with pytest.raises(DomainError, match="power-of-two"):
        fft_radix2(np.ones(n))


# ---------------------------------------------------------------- causality verifier

def test_verify_causality_on_fnetar_mixer(rng):
    op = build_fnetar_matrix(6, 3)
    mem = Tensor(rng.standard_normal((3, 4)))
    report = verify_causality(lambda x: apply_mixing(x, mem, op), 6, 4, probes=32)
    assert report.ok and report.pairs_checked > 0


def test_verify_causality_flags_fnet_mixer(rng):
    op = build_fnet_matrix(6)
    report = verify_causality(lambda x: apply_mixing(x, Tensor(np.zeros((0, 4))), op), 6, 4,
                              probes=16)
    assert not report.ok
    assert all(j > i for _, i, j, _ in report.violations)


def test_verify_causality_unmasked_attention_negative_control(rng):
    p = random_attention(rng, 8)
    mem = Tensor(np.zeros((0, 8)))
    report = verify_causality(lambda x: attention_forward(x, mem, p, None), 5, 8, probes=16)
    assert len(report.violations) > 0
