"""Scaled dot-product attention, its landmark-based approximation, and the
residual instance-correlation block.

``exact_attention`` is the quadratic-cost reference; ``nystrom_attention``
approximates it through ``m`` segment-mean landmarks and an iterative
Moore-Penrose pseudoinverse, bringing the cost down to O(n * m * d). The
correlation block applies pre-norm multi-head self-attention with a
residual connection over a bag of instance embeddings, switching to the
approximation for long bags.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidLandmarkCountError, ShapeMismatchError, ZeroMatrixWarning
from .tensor import (
    Parameter,
    Tensor,
    add,
    concat_cols,
    gelu,
    layer_norm,
    matmul,
    mul,
    normal_param,
    ones_param,
    slice_cols,
    softmax_rows,
    sub,
    transpose,
    zeros_param,
)


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int = 8
    landmark_count: int = 64
    pinv_iterations: int = 14
    nystrom_threshold: int = 256

    def __post_init__(self):
        if self.model_dim < 1 or self.num_heads < 1:
            raise ValueError("model_dim and num_heads must be positive")
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.landmark_count < 1:
            raise InvalidLandmarkCountError(
                f"landmark_count must be >= 1, got {self.landmark_count}"
            )
        if self.pinv_iterations < 1:
            raise ValueError("pinv_iterations must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


@dataclass
class LandmarkSet:
    """Segment-mean landmark rows for a query/key pair plus the segments."""

    q_landmarks: Tensor
    k_landmarks: Tensor
    segment_bounds: list


def exact_attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
    """softmax(q @ k.T / sqrt(d)) @ v; the correctness oracle for the
    landmark approximation. ``mask`` is an optional additive bias on the
    score matrix (used for causal decoding)."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeMismatchError("attention operands must be rank 2")
    if q.shape[1] != k.shape[1]:
        raise ShapeMismatchError(f"q/k widths differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"k/v row counts differ: {k.shape} vs {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1])
    scores = mul(matmul(q, transpose(k)), scale)
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax_rows(scores), v)


def segment_bounds(n: int, m: int) -> list:
    """Partition [0, n) into m contiguous segments, longer segments first."""
    if not 1 <= m <= n:
        raise InvalidLandmarkCountError(f"need 1 <= m <= {n}, got m={m}")
    base, extra = divmod(n, m)
    bounds = []
    start = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        bounds.append((start, start + size))
        start += size
    return bounds


def _segment_matrix(n: int, m: int):
    bounds = segment_bounds(n, m)
    s = np.zeros((m, n), dtype=np.float64)
    for i, (lo, hi) in enumerate(bounds):
        s[i, lo:hi] = 1.0 / (hi - lo)
    return Tensor(s), bounds


def segment_mean_landmarks(x: Tensor, m: int) -> Tensor:
    """m landmark rows, each the mean of one contiguous row segment of x."""
    s, _ = _segment_matrix(x.shape[0], m)
    return matmul(s, x)


def build_landmark_set(q: Tensor, k: Tensor, m: int) -> LandmarkSet:
    if q.shape != k.shape:
        raise ShapeMismatchError(f"landmarks need matching q/k: {q.shape} vs {k.shape}")
    s, bounds = _segment_matrix(q.shape[0], m)
    return LandmarkSet(matmul(s, q), matmul(s, k), bounds)


def moore_penrose_pinv(a: Tensor, iterations: int = 14) -> Tensor:
    """Iterative pseudoinverse of a square matrix (Newton-Schulz, cubic order).

    Starts from ``a.T / (||a||_1 * ||a||_inf)`` and applies
    ``z <- z (13 I - a z (15 I - a z (7 I - a z))) / 4``. Converges quickly
    for the well-conditioned row-stochastic matrices softmax produces. An
    all-zero input is flagged with ``ZeroMatrixWarning`` and returned as the
    zero matrix. The initial scaling is treated as a constant on the tape;
    after convergence the result is insensitive to it.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"pinv needs a square matrix, got {a.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    n = a.shape[0]
    a64 = a.data.astype(np.float64, copy=False)
    norm_one = np.abs(a64).sum(axis=0).max()
    norm_inf = np.abs(a64).sum(axis=1).max()
    if norm_one == 0.0 or norm_inf == 0.0:
        warnings.warn("pseudoinverse of zero matrix", ZeroMatrixWarning, stacklevel=2)
        return Tensor(np.zeros((n, n)))
    eye = Tensor(np.eye(n))
    z = mul(transpose(a), 1.0 / (norm_one * norm_inf))
    for _ in range(iterations):
        az = matmul(a, z)
        inner = sub(mul(eye, 7.0), az)
        inner = sub(mul(eye, 15.0), matmul(az, inner))
        inner = sub(mul(eye, 13.0), matmul(az, inner))
        z = mul(matmul(z, inner), 0.25)
    return z


def nystrom_attention(q: Tensor, k: Tensor, v: Tensor, cfg: AttentionConfig) -> Tensor:
    """Landmark-factorized attention.

    With landmark rows ``Q~``/``K~`` (segment means of q/k) the score kernel
    is approximated by the three-factor product

        softmax(q K~.T / sqrt(d)) @ pinv(softmax(Q~ K~.T / sqrt(d)))
                                  @ softmax(Q~ k.T / sqrt(d))

    applied to ``v``. Cost is O(n * m * d) for fixed m. With m == n (one row
    per segment) the product collapses to exact attention up to pinv error.
    """
    if q.shape != k.shape:
        raise ShapeMismatchError(f"q/k shapes differ: {q.shape} vs {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeMismatchError(f"k/v row counts differ: {k.shape} vs {v.shape}")
    n = q.shape[0]
    m = cfg.landmark_count
    if m > n:
        raise InvalidLandmarkCountError(f"{m} landmarks for {n} rows")
    lm = build_landmark_set(q, k, m)
    scale = 1.0 / math.sqrt(q.shape[1])
    f1 = softmax_rows(mul(matmul(q, transpose(lm.k_landmarks)), scale))
    f2 = softmax_rows(mul(matmul(lm.q_landmarks, transpose(lm.k_landmarks)), scale))
    f3 = softmax_rows(mul(matmul(lm.q_landmarks, transpose(k)), scale))
    f2_pinv = moore_penrose_pinv(f2, cfg.pinv_iterations)
    return matmul(f1, matmul(f2_pinv, matmul(f3, v)))


@dataclass
class MultiHeadWeights:
    """Per-model projection matrices; no biases."""

    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter

    @classmethod
    def create(cls, prefix: str, dim: int, rng, std: float = 0.02):
        return cls(
            wq=normal_param(f"{prefix}.wq", (dim, dim), rng, std),
            wk=normal_param(f"{prefix}.wk", (dim, dim), rng, std),
            wv=normal_param(f"{prefix}.wv", (dim, dim), rng, std),
            wo=normal_param(f"{prefix}.wo", (dim, dim), rng, std),
        )

    def named_parameters(self):
        return [(self.wq.name, self.wq), (self.wk.name, self.wk),
                (self.wv.name, self.wv), (self.wo.name, self.wo)]


def multi_head(kind: str, x_q: Tensor, x_kv: Tensor, weights: MultiHeadWeights,
               cfg: AttentionConfig, mask: Tensor | None = None) -> Tensor:
    """Project, split into heads, attend per head, concatenate, project out.

    ``kind`` selects ``"exact"`` or ``"nystrom"`` attention for every head.
    """
    if kind not in ("exact", "nystrom"):
        raise ValueError(f"unknown attention kind {kind!r}")
    if x_q.shape[1] != cfg.model_dim or x_kv.shape[1] != cfg.model_dim:
        raise ShapeMismatchError(
            f"inputs must have width {cfg.model_dim}: {x_q.shape}, {x_kv.shape}"
        )
    q = matmul(x_q, weights.wq)
    k = matmul(x_kv, weights.wk)
    v = matmul(x_kv, weights.wv)
    dh = cfg.head_dim
    outs = []
    for h in range(cfg.num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi)
        if kind == "exact":
            outs.append(exact_attention(qh, kh, vh, mask=mask))
        else:
            outs.append(nystrom_attention(qh, kh, vh, cfg))
    joined = outs[0] if len(outs) == 1 else concat_cols(outs)
    return matmul(joined, weights.wo)


class CorrelationBlock:
    """Residual self-attention over a bag: ``msa(ln(e)) + e``.

    Below ``nystrom_threshold`` instances the exact kernel is used; above it
    the landmark approximation keeps the cost near-linear in bag size.
    """

    def __init__(self, prefix: str, cfg: AttentionConfig, rng, ln_eps: float = 1e-5):
        self.cfg = cfg
        self.ln_eps = ln_eps
        self.gamma = ones_param(f"{prefix}.ln.gamma", (cfg.model_dim,))
        self.beta = zeros_param(f"{prefix}.ln.beta", (cfg.model_dim,))
        self.msa = MultiHeadWeights.create(f"{prefix}.msa", cfg.model_dim, rng)

    def named_parameters(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta),
                *self.msa.named_parameters()]

    def __call__(self, e: Tensor) -> Tensor:
        if e.ndim != 2 or e.shape[1] != self.cfg.model_dim:
            raise ShapeMismatchError(
                f"expected (*, {self.cfg.model_dim}) instances, got {e.shape}"
            )
        kind = "nystrom" if e.shape[0] > self.cfg.nystrom_threshold else "exact"
        normed = layer_norm(e, self.gamma, self.beta, self.ln_eps)
        return add(multi_head(kind, normed, normed, self.msa, self.cfg), e)


@dataclass
class FeedForward:
    """Two affine maps with a GELU in between (expansion ratio 4)."""

    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @classmethod
    def create(cls, prefix: str, dim: int, rng, ratio: int = 4, std: float = 0.02):
        hidden = ratio * dim
        return cls(
            w1=normal_param(f"{prefix}.w1", (dim, hidden), rng, std),
            b1=zeros_param(f"{prefix}.b1", (hidden,)),
            w2=normal_param(f"{prefix}.w2", (hidden, dim), rng, std),
            b2=zeros_param(f"{prefix}.b2", (dim,)),
        )

    def named_parameters(self):
        return [(p.name, p) for p in (self.w1, self.b1, self.w2, self.b2)]

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(gelu(add(matmul(x, self.w1), self.b1)), self.w2), self.b2)
