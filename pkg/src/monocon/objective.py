"""Supervised contrastive (SupCon) loss.

For a batch of unit-norm embeddings ``z`` with integer labels, each anchor
``i`` that has at least one other same-label sample contributes

    -1/|P(i)| * sum_{p in P(i)} log( exp(z_i.z_p / tau) / sum_{a != i} exp(z_i.z_a / tau) )

Anchors without positives contribute nothing. ``reduction="sum"`` returns
the plain sum over anchors; ``"mean"`` divides by the number of anchors
that have positives.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, DegenerateError, DimensionError
from .tensor import Tensor

UNIT_NORM_TOL = 1e-9


def _check(z: np.ndarray, labels: np.ndarray, temperature: float):
    if temperature <= 0 or not math.isfinite(temperature):
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"labels {labels.shape} do not match embeddings {z.shape}")
    if z.shape[0] < 2:
        raise DegenerateError("SupCon needs a batch of at least 2")
    norms = np.sqrt(np.einsum("ij,ij->i", z, z))
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        raise DimensionError("SupCon embeddings must be row-normalized")


def _positive_mask(labels: np.ndarray) -> np.ndarray:
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    return pos


def supcon_loss(z: Tensor | np.ndarray, labels, temperature: float = 0.1,
                reduction: str = "sum") -> Tensor:
    """SupCon loss as a single 1 x 1 tape node with a fused backward."""
    z = z if isinstance(z, Tensor) else Tensor(z)
    labels = np.asarray(labels)
    zv = z.value
    _check(zv, labels, temperature)
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"unknown reduction {reduction!r}")

    n = zv.shape[0]
    pos = _positive_mask(labels)
    n_pos = pos.sum(axis=1)
    valid = n_pos > 0
    if not valid.any():
        raise DegenerateError("SupCon: no anchor in the batch has a positive")

    logits = (zv @ zv.T) / temperature
    off = ~np.eye(n, dtype=bool)
    masked = np.where(off, logits, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    expd = np.exp(masked - row_max)  # exactly 0 on the diagonal
    denom = expd.sum(axis=1, keepdims=True)
    log_prob = logits - row_max - np.log(denom)

    safe_npos = np.where(valid, n_pos, 1)
    mean_log_pos = np.where(pos, log_prob, 0.0).sum(axis=1) / safe_npos
    per_anchor = np.where(valid, -mean_log_pos, 0.0)
    weight = 1.0 if reduction == "sum" else 1.0 / valid.sum()
    value = np.array([[per_anchor.sum() * weight]])

    softmax = expd / denom

    def bw(g):
        # dL_i/dlogit_ij = softmax_ij - [j in P(i)] / |P(i)|, for valid anchors
        coef = (g[0, 0] * weight) * valid[:, None]
        dlogits = coef * (softmax - pos / safe_npos[:, None])
        return ((dlogits + dlogits.T) @ zv / temperature,)

    return Tensor(value, op="supcon", parents=(z,), backward_fn=bw, _checked=True)


def supcon_loss_oracle(z, labels, temperature: float = 0.1) -> float:
    """Literal double-loop evaluation, no vectorization and no stabilization."""
    z = np.asarray(z, dtype=np.float64)
    labels = list(np.asarray(labels))
    _check(z, np.asarray(labels), temperature)
    n = len(labels)
    total, any_valid = 0.0, False
    for i in range(n):
        positives = [p for p in range(n) if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        any_valid = True
        denom = 0.0
        for a in range(n):
            if a != i:
                denom += math.exp(float(np.dot(z[i], z[a])) / temperature)
        inner = 0.0
        for p in positives:
            inner += math.log(math.exp(float(np.dot(z[i], z[p])) / temperature) / denom)
        total += -inner / len(positives)
    if not any_valid:
        raise DegenerateError("SupCon: no anchor in the batch has a positive")
    return total
