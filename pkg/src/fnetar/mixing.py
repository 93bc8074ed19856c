"""Token-mixing operators: attention, causal mask, FNet and FNetAR matrices, FFTs.

All fixed mixing matrices are real and are contracted against the
sequence axis only. A mixer over a memory window of ``l_mem`` rows and
a segment of ``l_seq`` rows is an ``l_seq x (l_mem + l_seq)`` matrix
whose column ``l_mem + r`` is the position of segment row ``r``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DomainError, ShapeError
from .numerics import Tensor

KINDS = ("attention", "fnet", "fnetar", "mask")


@dataclass(frozen=True)
class MixingOperator:
    """A realized mixing matrix and the recipe that built it.

    ``matrix`` is read-only float64 for fnet/fnetar, boolean (True =
    allowed) for mask, and None for attention.
    """

    kind: str
    l_seq: int
    l_mem: int
    matrix: np.ndarray | None = field(repr=False, compare=False)
    self_exclusive: bool = False

    @cached_property
    def tensor(self) -> Tensor:
        if self.matrix is None or self.matrix.dtype == bool:
            raise DomainError(f"{self.kind} operator has no real matrix")
        return Tensor(self.matrix)

    @property
    def width(self) -> int:
        return self.l_mem + self.l_seq


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (d, d):
                raise ShapeError(f"attention {name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.n_heads < 1 or d % self.n_heads:
            raise ConfigError(f"d_model={d} is not divisible by n_heads={self.n_heads}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def _unit_cos(phase: np.ndarray, n: int) -> np.ndarray:
    """cos(2*pi*phase/n) for integer phases, reduced mod n; exact zeros snapped."""
    c = np.cos(2.0 * np.pi * (phase % n) / n)
    c[np.abs(c) < 1e-15] = 0.0
    return c


def build_fnet_matrix(n: int) -> MixingOperator:
    """Square cosine mixer ``cos(2*pi*i*j/n) / sqrt(n)``."""
    if n < 1:
        raise DomainError(f"FNet matrix size must be >= 1, got {n}")
    idx = np.arange(n)
    m = _unit_cos(np.outer(idx, idx), n) * (1.0 / math.sqrt(n))
    return MixingOperator("fnet", n, 0, _frozen(m))


def build_fnetar_matrix(l_seq: int, l_mem: int, self_exclusive: bool = False) -> MixingOperator:
    """Zero-padded, row-shifted real Fourier matrix of shape ``l_seq x (l_mem + l_seq)``.

    Row ``r`` carries ``Re(w**(r*k)) / sqrt(N)`` (``N = l_seq``,
    ``w = exp(2j*pi/N)``) on the ``N`` columns ending at ``l_mem + r``
    (``l_mem + r - 1`` when ``self_exclusive``). Coefficients that would
    land left of column 0 are dropped, never wrapped.
    """
    if l_seq < 1:
        raise DomainError(f"l_seq must be >= 1, got {l_seq}")
    if l_mem < 0:
        raise DomainError(f"l_mem must be >= 0, got {l_mem}")
    n = l_seq
    width = l_mem + l_seq
    inv = 1.0 / math.sqrt(n)
    k = np.arange(n)
    m = np.zeros((l_seq, width))
    for r in range(l_seq):
        start = l_mem + r + 1 - n - int(self_exclusive)
        cols = start + k
        keep = cols >= 0
        m[r, cols[keep]] = _unit_cos(r * k[keep], n) * inv
    return MixingOperator("fnetar", l_seq, l_mem, _frozen(m), self_exclusive)


def build_causal_mask(l_seq: int, l_mem: int, self_exclusive: bool = False) -> MixingOperator:
    """Boolean mask allowing column ``c`` for row ``r`` iff ``c <= l_mem + r``."""
    if l_seq < 1:
        raise DomainError(f"l_seq must be >= 1, got {l_seq}")
    if l_mem < 0:
        raise DomainError(f"l_mem must be >= 0, got {l_mem}")
    rows = np.arange(l_seq)[:, None]
    cols = np.arange(l_mem + l_seq)[None, :]
    limit = l_mem + rows - int(self_exclusive)
    return MixingOperator("mask", l_seq, l_mem, _frozen(cols <= limit), self_exclusive)


def causal_leaks(op: MixingOperator) -> list[tuple[int, int]]:
    """Positions ``(r, c)`` with ``c > l_mem + r`` holding a nonzero entry."""
    rows, cols = np.nonzero(op.matrix)
    bad = cols > op.l_mem + rows
    return list(zip(rows[bad].tolist(), cols[bad].tolist()))


def _check_extents(x: Tensor, mem: Tensor, l_seq: int, l_mem: int, what: str) -> None:
    if x.shape[-2] != l_seq or mem.shape[-2] != l_mem:
        raise ShapeError(
            f"{what}: expected {l_seq} segment rows and {l_mem} memory rows, "
            f"got x {x.shape} and mem {mem.shape}")
    if x.shape[-1] != mem.shape[-1] or x.shape[:-2] != mem.shape[:-2]:
        raise ShapeError(f"{what}: x {x.shape} and mem {mem.shape} disagree")


def apply_mixing(x: Tensor, mem: Tensor, op: MixingOperator) -> Tensor:
    """``op.matrix @ [mem; x]`` along the sequence axis; residual left to the caller."""
    _check_extents(x, mem, op.l_seq, op.l_mem, "apply_mixing")
    z = nx.concat([mem, x], axis=-2) if op.l_mem else x
    return nx.matmul(op.tensor, z)


def apply_fnet_fft(x: np.ndarray) -> np.ndarray:
    """Square FNet mixing along axis -2 through :func:`fft_radix2`.

    Same values as the dense ``build_fnet_matrix(n)`` contraction since
    the real part of the forward DFT kernel is the cosine matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-2]
    freq = fft_radix2(np.swapaxes(x, -1, -2).astype(np.complex128))
    return np.swapaxes(freq.real, -1, -2) / math.sqrt(n)


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = t.shape
    t = nx.reshape(t, (*lead, length, n_heads, d // n_heads))
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return nx.transpose(t, axes)


def _merge_heads(t: Tensor) -> Tensor:
    *lead, h, length, dh = t.shape
    nd = t.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return nx.reshape(nx.transpose(t, axes), (*lead, length, h * dh))


def attention_forward(x: Tensor, mem: Tensor, params: AttentionParams,
                      mask: MixingOperator | None) -> Tensor:
    """Multi-head scaled dot-product attention over ``[mem; x]``.

    Queries come from ``x`` only. ``mask=None`` disables masking; that is
    only useful as a deliberately non-causal control.
    """
    l_seq, l_mem = x.shape[-2], mem.shape[-2]
    _check_extents(x, mem, l_seq, l_mem, "attention_forward")
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"attention_forward: feature extent {x.shape[-1]} != d_model {params.d_model}")
    if mask is not None and (mask.l_seq, mask.l_mem) != (l_seq, l_mem):
        raise ShapeError(f"attention_forward: mask is {mask.l_seq}x{mask.width}, inputs need "
                         f"{l_seq}x{l_mem + l_seq}")
    h = params.n_heads
    z = nx.concat([mem, x], axis=-2) if l_mem else x
    q = _split_heads(nx.matmul(x, params.wq), h)
    k = _split_heads(nx.matmul(z, params.wk), h)
    v = _split_heads(nx.matmul(z, params.wv), h)
    nd = k.ndim
    kt = nx.transpose(k, list(range(nd - 2)) + [nd - 1, nd - 2])
    scores = nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(params.d_model // h))
    weights = nx.softmax(scores, axis=-1, mask=None if mask is None else mask.matrix)
    out = _merge_heads(nx.matmul(weights, v))
    return nx.matmul(out, params.wo)


# ---------------------------------------------------------------- Fourier transforms

ComplexBuffer = np.ndarray  # complex128, i.e. interleaved float64 real/imag pairs


def as_complex_buffer(v) -> ComplexBuffer:
    """Accept a complex array or a ``(real, imag)`` pair of equal-length arrays."""
    if isinstance(v, tuple):
        re, im = (np.asarray(p, dtype=np.float64) for p in v)
        if re.shape != im.shape:
            raise ShapeError(f"real/imag lengths differ: {re.shape} vs {im.shape}")
        return re + 1j * im
    return np.asarray(v, dtype=np.complex128)


def _dft_matrix(n: int, sign: float) -> np.ndarray:
    idx = np.arange(n)
    phase = np.outer(idx, idx) % n
    return np.exp(sign * 2j * np.pi * phase / n)


def dft_naive(v) -> ComplexBuffer:
    """``X_k = sum_j v_j exp(-2*pi*i*j*k/N)`` along the last axis, O(N^2)."""
    x = as_complex_buffer(v)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DomainError("dft_naive: input must be non-empty")
    return x @ _dft_matrix(x.shape[-1], -1.0)


def idft_naive(v) -> ComplexBuffer:
    x = as_complex_buffer(v)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DomainError("idft_naive: input must be non-empty")
    n = x.shape[-1]
    return (x @ _dft_matrix(n, 1.0)) / n


def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.intp)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def fft_radix2(v) -> ComplexBuffer:
    """Iterative decimation-in-time Cooley-Tukey FFT along the last axis."""
    x = as_complex_buffer(v)
    if x.ndim == 0:
        raise DomainError("fft_radix2: input must be at least 1-D")
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise DomainError(f"fft_radix2 requires a power-of-two length, got {n}")
    lead = x.shape[:-1]
    x = x[..., _bit_reverse(n)]
    m = 2
    while m <= n:
        half = m // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / m)
        blocks = x.reshape(lead + (n // m, m))
        even = blocks[..., :half]
        odd = blocks[..., half:] * tw
        x = np.concatenate([even + odd, even - odd], axis=-1).reshape(lead + (n,))
        m *= 2
    return x


# ---------------------------------------------------------------- causality

@dataclass
class CausalityReport:
    probes: int
    pairs_checked: int
    tolerance: float
    violations: list[tuple[int, int, int, float]]  # (probe, row i, perturbed row j, leak)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_leak(self) -> float:
        return max((v[3] for v in self.violations), default=0.0)


def verify_causality(forward: Callable[[Tensor], Tensor], l_seq: int, d_in: int,
                     probes: int, seed: int = 0, tol: float = 1e-10) -> CausalityReport:
    """Perturb row ``j`` of random inputs and flag any change in output rows ``i < j``.

    Each probe draws a fresh input and a random ``j`` in ``[1, l_seq)``;
    every earlier row is checked, which covers all pairs ``(i, j)`` with
    ``j > i`` for that ``j``.
    """
    rng = np.random.default_rng(seed)
    violations = []
    checked = 0
    if l_seq < 2:
        return CausalityReport(probes, 0, tol, violations)
    with nx.no_grad():
        for p in range(probes):
            x = rng.standard_normal((l_seq, d_in))
            j = int(rng.integers(1, l_seq))
            bumped = x.copy()
            bumped[j] += rng.standard_normal(d_in)
            base = forward(Tensor(x)).data
            moved = forward(Tensor(bumped)).data
            leak = np.abs(moved[:j] - base[:j]).reshape(j, -1).max(axis=1)
            checked += j
            for i in np.nonzero(leak >= tol)[0]:
                violations.append((p, int(i), j, float(leak[i])))
    return CausalityReport(probes, checked, tol, violations)
