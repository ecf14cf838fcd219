"""Training objectives and evaluation metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .errors import ConfigError, DimensionError, MetricError

# incremented whenever focal_loss has to clamp a non-positive probability
diagnostics: Counter = Counter()

P_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.01

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class FocalParams:
    alpha_t: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.alpha_t < 0:
            raise ConfigError("focal alpha_t must be non-negative")
        if not 0.0 <= self.gamma <= 5.0:
            raise ConfigError("focal gamma must lie in [0, 5]")


# ---------------------------------------------------------------- losses


def mse_loss(pred, target) -> tc.Tensor:
    pred, target = tc.as_tensor(pred), tc.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    return tc.mean_all(tc.square(pred - target))


def cross_entropy_loss(logits, target) -> tc.Tensor:
    """Mean negative log-likelihood of integer targets under softmax(logits)."""
    logits = tc.as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"cross_entropy_loss expects batch x K logits with K >= 2, got {logits.shape}")
    if target.shape != (logits.shape[0],):
        raise DimensionError(f"{target.shape[0] if target.ndim else 0} targets for {logits.shape[0]} rows")
    if np.any(target < 0) or np.any(target >= logits.shape[1]):
        raise IndexError(f"class target outside [0, {logits.shape[1]})")
    return -tc.mean_all(tc.pick(tc.log_softmax_rows(logits), target))


def eri_loss(l_reg, l_class, weights: LossWeights = LossWeights()):
    """Weighted sum of the regression and classification terms.

    Works on plain floats as well as graph tensors. A zero ``beta`` drops the
    class term entirely so no gradient flows through it.
    """
    if weights.beta == 0.0:
        return l_reg * weights.alpha
    return l_reg * weights.alpha + l_class * weights.beta


def _focal_op(p: tc.Tensor, params: FocalParams) -> tc.Tensor:
    a, gamma = params.alpha_t, params.gamma
    raw = p.data
    bad = raw <= 0
    if bad.any():
        diagnostics["focal_clamped"] += int(bad.sum())
    pd = np.where(bad, P_FLOOR, raw)
    logp = np.log(pd)
    one_minus = 1.0 - pd
    weight = one_minus**gamma
    out = -a * weight * logp

    def backward(g):
        if gamma == 0.0:
            dweight = np.zeros_like(pd)
        else:
            # d/dp (1-p)^gamma, guarded at p == 1 for gamma < 1
            with np.errstate(divide="ignore", invalid="ignore"):
                dweight = np.where(one_minus > 0, -gamma * one_minus ** (gamma - 1.0), 0.0)
        d = -a * (dweight * logp + weight / pd)
        return (np.where(bad, 0.0, g * d),)

    return tc._result(out, (p,), backward, "focal")


def focal_loss(probs_t, params: FocalParams = FocalParams()) -> tc.Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over the batch."""
    return tc.mean_all(_focal_op(tc.as_tensor(probs_t), params))


def focal_loss_from_logits(logits, target, params: FocalParams = FocalParams()) -> tc.Tensor:
    probs = tc.softmax_rows(logits)
    return focal_loss(tc.pick(probs, target), params)


# ---------------------------------------------------------------- metrics


@dataclass
class PearsonResult:
    per_class: np.ndarray
    degenerate: np.ndarray  # True where a column had zero variance

    @property
    def mean(self) -> float:
        return mean_pearson(self.per_class)


def pearson_per_class(pred, target) -> PearsonResult:
    """Column-wise Pearson r; zero-variance columns give 0 and are flagged."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.ndim != 2:
        raise MetricError(f"pearson_per_class shape mismatch: {pred.shape} vs {target.shape}")
    if pred.shape[0] < 2:
        raise MetricError("pearson_per_class needs at least 2 samples")
    pc = pred - pred.mean(axis=0)
    tcen = target - target.mean(axis=0)
    cov = (pc * tcen).sum(axis=0)
    sp = np.sqrt((pc * pc).sum(axis=0))
    st = np.sqrt((tcen * tcen).sum(axis=0))
    denom = sp * st
    degenerate = denom == 0
    r = np.where(degenerate, 0.0, cov / np.where(degenerate, 1.0, denom))
    return PearsonResult(np.clip(r, -1.0, 1.0), degenerate)


def mean_pearson(per_class) -> float:
    per_class = np.asarray(per_class, dtype=np.float64)
    return float(per_class.sum() / per_class.size)


def macro_f1(pred_class, target_class, k: int):
    """Per-class F1 (0/0 counted as 0) and its unweighted mean over ``k`` classes."""
    pred_class = np.asarray(pred_class, dtype=np.int64)
    target_class = np.asarray(target_class, dtype=np.int64)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (target_class, pred_class), 1)
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    denom = predicted + actual
    f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return f1, float(f1.mean())
