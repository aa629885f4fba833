"""The three-term training objective: cross-entropy + KL uniformity + centroid MSE."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError, ParameterError, UndefinedLossError
from .graph_build import ProjectionMatrix
from .tensor import Tensor

IGNORE_LABEL = 255

KL_VARIANTS = ("marginal", "per_pixel")

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1  # KL uniformity
    beta: float = 0.1   # centroid MSE

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ParameterError("loss weights must be nonnegative")


@dataclass
class LabelMap:
    """H x W class indices; 255 marks pixels excluded from supervision."""

    values: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or not np.issubdtype(self.values.dtype, np.integer):
            raise ParameterError(f"labels must be an integer H,W grid, got {self.values.dtype}")
        bad = (self.values != IGNORE_LABEL) & (
            (self.values < 0) | (self.values >= self.num_classes)
        )
        if bad.any():
            raise ParameterError(
                f"labels contain values outside [0, {self.num_classes}) + ignore"
            )

    @property
    def supervised(self) -> np.ndarray:
        return self.values != IGNORE_LABEL


def cross_entropy(logits: Tensor, labels: LabelMap) -> Tensor:
    """Mean of -log softmax(logits)[label] over supervised pixels.

    Uses a detached per-pixel max inside log-sum-exp, so large margins stay
    finite without changing the gradient.
    """
    if logits.ndim != 3:
        raise DimensionError(f"logits must be K,H,W, got {logits.shape}")
    k, h, w = logits.shape
    if labels.values.shape != (h, w):
        raise DimensionError(
            f"labels {labels.values.shape} do not match logits plane {(h, w)}"
        )
    if labels.num_classes != k:
        raise DimensionError(f"labels expect {labels.num_classes} classes, logits carry {k}")
    keep = labels.supervised.ravel()
    count = int(keep.sum())
    if count == 0:
        raise UndefinedLossError("cross-entropy undefined: every pixel is ignored")

    x = tc.reshape(logits, (k, h * w))
    peak = x.data.max(axis=0)
    shifted = tc.sub(x, tc.constant(np.broadcast_to(peak, (k, h * w)).copy()))
    lse = tc.add(tc.log(tc.tensor_sum(tc.exp(shifted), axis=0)), tc.constant(peak))

    flat_labels = np.where(keep, labels.values.ravel(), 0)
    onehot = np.zeros((k, h * w))
    onehot[flat_labels, np.arange(h * w)] = 1.0
    picked = tc.tensor_sum(tc.mul(x, tc.constant(onehot)), axis=0)

    per_pixel = tc.mul(tc.sub(lse, picked), tc.constant(keep.astype(np.float64)))
    return tc.mul(tc.tensor_sum(per_pixel), 1.0 / count)


def kl_uniformity(p: ProjectionMatrix, variant: str = "marginal") -> Tensor:
    """Divergence of the assignment from uniform; applied to the soft scores.

    marginal   KL(node-usage marginal || uniform): penalizes node collapse,
               the Biased-Assignment failure mode.
    per_pixel  mean over pixels of KL(assignment column || uniform): also
               penalizes individually confident pixels.
    """
    if variant not in KL_VARIANTS:
        raise ConfigError(f"unknown KL variant {variant!r}")
    scores = p.soft
    n, hw = scores.shape
    if variant == "marginal":
        q = tc.mul(tc.tensor_sum(scores, axis=1), 1.0 / hw)
        return tc.tensor_sum(tc.mul(q, tc.log(tc.maximum(tc.mul(q, float(n)), _LOG_FLOOR))))
    per = tc.mul(scores, tc.log(tc.maximum(tc.mul(scores, float(n)), _LOG_FLOOR)))
    return tc.mul(tc.tensor_sum(per), 1.0 / hw)


def centroid_mse(m_c: Tensor, m_g: np.ndarray, degenerate: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error to the non-differentiable centroid targets.

    Degenerate nodes (no assignment mass) are skipped; if every node is
    degenerate the term contributes exactly zero, with a warning.
    """
    m_g = np.asarray(m_g, dtype=np.float64)
    if m_c.shape != m_g.shape:
        raise DimensionError(f"centroid shapes differ: {m_c.shape} vs {m_g.shape}")
    if degenerate is None:
        degenerate = np.zeros(m_g.shape[0], dtype=bool)
    alive = ~np.asarray(degenerate, dtype=bool)
    if not alive.any():
        warnings.warn("all nodes degenerate; centroid MSE contributes 0", stacklevel=2)
        return tc.mul(tc.tensor_sum(tc.mul(m_c, 0.0)), 0.0)
    row_mask = np.repeat(alive.astype(np.float64)[:, None], 3, axis=1)
    diff = tc.sub(m_c, tc.constant(m_g))
    sq = tc.mul(tc.mul(diff, diff), tc.constant(row_mask))
    return tc.mul(tc.tensor_sum(sq), 1.0 / (3.0 * int(alive.sum())))


def total_loss(ce: Tensor, kl: Tensor, mse: Optional[Tensor], w: LossWeights) -> Tensor:
    """ce + alpha * kl (+ beta * mse when the centroid branch is active)."""
    out = tc.add(ce, tc.mul(kl, w.alpha))
    if mse is not None:
        out = tc.add(out, tc.mul(mse, w.beta))
    return out
