"""Differentiable band selection.

Graph diffusion over the frozen band adjacency, a small weighting MLP fed
by per-band distance sums, a temperature-annealed softmax restricted to
each cluster's bands, and the inference-time hardening that turns the soft
selection matrix into an exact one-band-per-cluster gather.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class TemperatureSchedule:
    """Geometric decay tau_start -> tau_end over total_epochs."""

    tau_start: float = 1.0
    tau_end: float = 0.01
    total_epochs: int = 400

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError(
                f"need tau_start >= tau_end > 0, got {self.tau_start}, {self.tau_end}"
            )
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def temperature_at(self, epoch: int) -> float:
        if not 0 <= epoch <= self.total_epochs:
            raise ValueError(f"epoch {epoch} outside [0,{self.total_epochs}]")
        ratio = epoch / self.total_epochs
        return float(self.tau_start * (self.tau_end / self.tau_start) ** ratio)


def hidden_width(bands: int) -> int:
    return max(4, bands // 4)


def diffuse(x: Tensor, a_hat: Tensor, w: Tensor) -> Tensor:
    """Mix band rows through the constant adjacency, then the learned m x m map."""
    return T.matmul(T.matmul(a_hat, x), w)


def similarity_vector(x_bar: Tensor, metric: str = "l2") -> Tensor:
    """Per-band sum of row distances to every other band."""
    return T.row_distance_sums(x_bar, metric=metric)


def band_weights(s: Tensor, head) -> Tensor:
    """Normalize the distance sums and map them to per-band weights in (0,1)."""
    shat = T.normalize_affine(s, head.gamma, head.beta, head.eps)
    row = T.reshape(shat, (1, s.shape[0]))
    hidden = T.relu(T.add(T.matmul(row, head.w0), head.b0))
    w = T.sigmoid(T.add(T.matmul(hidden, head.w1), head.b1))
    return T.reshape(w, (s.shape[0],))


def batch_average(weights) -> Tensor:
    """Deterministic sequential mean of per-patch weight vectors."""
    weights = list(weights)
    if not weights:
        raise ValueError("cannot average an empty batch")
    acc = weights[0]
    for w in weights[1:]:
        acc = T.add(acc, w)
    return T.scale(acc, 1.0 / len(weights))


def intra_cluster_softmax(w: Tensor, assignment: np.ndarray, tau: float) -> Tensor:
    """Row-wise softmax of the band weights restricted to each cluster.

    Row i of the result is supported exactly on cluster i's bands and sums
    to 1; lowering tau sharpens every row toward its argmax.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    mask = np.asarray(assignment, dtype=bool)
    if mask.ndim != 2 or mask.shape[1] != w.shape[0]:
        raise ValueError(
            f"assignment {mask.shape} does not match weight vector of {w.shape[0]} bands"
        )
    if (mask.sum(axis=1) < 1).any():
        raise ValueError("assignment has an empty cluster")
    logits = np.where(mask, w.data[None, :] / tau, -np.inf)
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits, where=np.isfinite(logits), out=np.zeros_like(logits))
    e = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * e).sum(axis=1, keepdims=True)
        return (((g - inner) * e / tau).sum(axis=0),)

    return T.record("intra_cluster_softmax", (w,), e, backward_fn)


def apply_selection(selection: Tensor, x: Tensor) -> Tensor:
    """Reduce a (B,s,s) patch to (b,s,s) by mixing bands with the selection rows."""
    bands, h, w = x.shape
    flat = T.reshape(x, (bands, h * w))
    mixed = T.matmul(selection, flat)
    return T.reshape(mixed, (selection.shape[0], h, w))


def harden(selection):
    """One-hot each row at its argmax (first index wins ties).

    Accepts the soft selection matrix as a Tensor or array; returns
    (hard matrix, selected band indices ordered by cluster id).
    """
    e = selection.data if isinstance(selection, Tensor) else np.asarray(selection)
    indices = e.argmax(axis=1)
    hard = np.zeros_like(e, dtype=np.float64)
    hard[np.arange(e.shape[0]), indices] = 1.0
    return hard, [int(i) for i in indices]
