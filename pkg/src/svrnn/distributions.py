"""Differentiable probability primitives: diagonal Gaussians, categoricals and
the Gumbel-Softmax relaxation.

All operations reduce over the last axis, so a (dim,) input yields a scalar
and a (batch, dim) input yields one value per row.  Everything is composed
from autodiff primitives and therefore differentiable end to end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    ShapeError,
    constant,
    exp,
    log,
    mul,
    reduce_sum,
    softmax,
)

LOG_2PI = float(np.log(2.0 * np.pi))

# Gumbel-Softmax temperature used when none is configured explicitly.
DEFAULT_TEMPERATURE = 0.1


@dataclass
class GaussianParams:
    """Diagonal Gaussian: per-dimension mean and log standard deviation."""

    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.log_sigma.data.shape:
            raise ShapeError(
                f"gaussian params: mu {self.mu.data.shape} vs log_sigma {self.log_sigma.data.shape}"
            )

    @property
    def dim(self) -> int:
        return self.mu.data.shape[-1]


@dataclass
class CategoricalParams:
    logits: Tensor

    @property
    def n_class(self) -> int:
        return self.logits.data.shape[-1]

    def probs(self) -> Tensor:
        return softmax(self.logits, axis=-1)


@dataclass
class RelaxedSample:
    """A point on the probability simplex produced by the Gumbel trick."""

    vector: Tensor
    temperature: float


def _require_same_dim(a: int, b: int, what: str) -> None:
    if a != b:
        raise ShapeError(f"{what}: dimension mismatch ({a} vs {b})")


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over dims."""
    _require_same_dim(q.dim, p.dim, "gaussian_kl")
    d_log = p.log_sigma - q.log_sigma
    var_ratio = exp(2.0 * (q.log_sigma - p.log_sigma))
    diff = q.mu - p.mu
    mahal = mul(diff, diff) * exp(-2.0 * p.log_sigma)
    per_dim = d_log + 0.5 * (var_ratio + mahal) - 0.5
    return reduce_sum(per_dim, axis=-1)


def gaussian_log_pdf(x, params: GaussianParams) -> Tensor:
    """log N(x; mu, diag(sigma^2)), summed over dimensions."""
    x = x if isinstance(x, Tensor) else constant(x)
    _require_same_dim(x.data.shape[-1], params.dim, "gaussian_log_pdf")
    diff = x - params.mu
    quad = mul(diff, diff) * exp(-2.0 * params.log_sigma)
    per_dim = -0.5 * LOG_2PI - params.log_sigma - 0.5 * quad
    return reduce_sum(per_dim, axis=-1)


def reparam_sample(params: GaussianParams, noise) -> Tensor:
    """mu + sigma * noise; gradients flow into both parameter heads."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != params.mu.data.shape:
        raise ShapeError(f"reparam noise {noise.shape} vs mu {params.mu.data.shape}")
    return params.mu + mul(exp(params.log_sigma), constant(noise))


def log_softmax(logits: Tensor) -> Tensor:
    # The max shift is a detached constant; the result is invariant to it, so
    # gradients stay exact while exp never overflows.
    shift = constant(logits.data.max(axis=-1, keepdims=True))
    shifted = logits - shift
    lse = log(reduce_sum(exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def categorical_kl(q: CategoricalParams, p: CategoricalParams) -> Tensor:
    """KL(q || p) = sum_i q_i (log q_i - log p_i)."""
    _require_same_dim(q.n_class, p.n_class, "categorical_kl")
    log_q = log_softmax(q.logits)
    log_p = log_softmax(p.logits)
    return reduce_sum(mul(exp(log_q), log_q - log_p), axis=-1)


def gumbel_softmax_sample(logits: Tensor, temperature: float, uniform_noise) -> RelaxedSample:
    """softmax((logits + g) / temperature) with g = -log(-log(u))."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    u = np.asarray(uniform_noise, dtype=np.float64)
    if u.shape != logits.data.shape:
        raise ShapeError(f"gumbel noise {u.shape} vs logits {logits.data.shape}")
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise ValueError("uniform noise must lie strictly inside (0, 1)")
    g = -np.log(-np.log(u))
    vec = softmax((logits + constant(g)) * (1.0 / temperature), axis=-1)
    return RelaxedSample(vector=vec, temperature=temperature)


def label_cross_entropy(target_one_hot, params: CategoricalParams) -> Tensor:
    """-log prob of the target class; target rows must be one-hot (all-zero
    rows are allowed and contribute nothing, which is how unobserved steps in
    a batch are masked out)."""
    t = np.asarray(target_one_hot, dtype=np.float64)
    if t.shape[-1] != params.n_class:
        raise ShapeError(f"cross entropy target {t.shape} vs {params.n_class} classes")
    sums = t.sum(axis=-1)
    ok = np.isclose(sums, 1.0) | (sums == 0.0)
    if not (np.all(ok) and np.all((t == 0.0) | (t == 1.0))):
        raise ValueError("target must be one-hot (or all-zero for masked rows)")
    return -reduce_sum(mul(constant(t), log_softmax(params.logits)), axis=-1)


def one_hot(indices, n_class: int) -> np.ndarray:
    """One-hot rows for integer labels; negative indices give all-zero rows."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros(idx.shape + (n_class,), dtype=np.float64)
    observed = idx >= 0
    if np.any(idx >= n_class):
        raise ValueError(f"label index out of range for {n_class} classes")
    out[observed, idx[observed]] = 1.0
    return out
