"""Optimization recipe: Adam, L2 penalty, clipping, EMA and early stopping."""

from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np

from . import losses, model
from . import tensor as tc
from .data import Dataset, derive_class_target  # noqa: F401  (re-exported)
from .errors import ConfigError, DataError, NumericalError

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    ema_decay: float = 0.99
    clip_max_norm: float = 0.1
    clip_norm_type: int = 2
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 0.01
    focal_alpha: float = 1.0
    focal_gamma: float = 2.0
    seed: int = 0
    eval_batch_size: int = 256
    use_class_loss: bool = True
    use_ema: bool = True
    use_l2: bool = True
    use_clip: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.patience < 1:
            raise ConfigError("train.patience must be >= 1")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("train.ema_decay must lie in [0, 1)")
        if not self.clip_max_norm > 0:
            raise ConfigError("train.clip_max_norm must be positive")
        if self.clip_norm_type != 2:
            raise ConfigError("only clip_norm_type = 2 is supported")
        if self.batch_size < 1 or self.max_epochs < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes and max_epochs must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be non-negative")
        # validates ranges
        losses.LossWeights(self.alpha, self.beta)
        losses.FocalParams(self.focal_alpha, self.focal_gamma)

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-scale settings, including the 256-sample batch."""
        return cls(**{"batch_size": 256, **overrides})

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**values)

    @property
    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(self.alpha, self.beta if self.use_class_loss else 0.0)


@dataclass
class TrainState:
    params: "OrderedDict[str, tc.Tensor]"
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    ema: "OrderedDict[str, np.ndarray]"
    step: int = 0
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def create(cls, params, seed: int = 0) -> "TrainState":
        return cls(
            params=params,
            m=OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            v=OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            ema=OrderedDict((k, p.data.copy()) for k, p in params.items()),
            rng=np.random.default_rng(seed),
        )


# ---------------------------------------------------------------- update rules


def adam_step(state: TrainState, grads, cfg: TrainConfig) -> TrainState:
    """One bias-corrected Adam update; L2 adds ``weight_decay * param`` to the gradient."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - ADAM_BETA1**t
    c2 = 1.0 - ADAM_BETA2**t
    for name, p in state.params.items():
        g = grads[name]
        if cfg.use_l2 and cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p.data -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return state


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_gradients(grads, max_norm: float = 0.1, norm_type: int = 2):
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, pre_clip_norm, clipped)``; untouched gradients are the
    same arrays that were passed in.
    """
    if norm_type != 2:
        raise ConfigError("only the L2 norm is supported for clipping")
    norm = global_norm(grads)
    if norm <= max_norm:
        return grads, norm, False
    factor = max_norm / norm
    return OrderedDict((k, g * factor) for k, g in grads.items()), norm, True


def ema_update(ema, params, decay: float = 0.99):
    """In place: ``ema <- decay * ema + (1 - decay) * param``."""
    for name, p in params.items():
        value = p.data if isinstance(p, tc.Tensor) else p
        if ema[name].shape != value.shape:
            raise ConfigError(f"EMA shape mismatch for {name}")
        ema[name] *= decay
        ema[name] += (1.0 - decay) * value
    return ema


# ---------------------------------------------------------------- evaluation


def predict(dataset: Dataset, params, cfg: model.ModelConfig, batch_size: int = 256) -> model.PredictionSet:
    """Eval-mode outputs in dataset order (intensities or class probabilities)."""
    if isinstance(next(iter(params.values())), np.ndarray):
        params = OrderedDict((k, tc.Tensor(v)) for k, v in params.items())
    chunks = []
    for start in range(0, len(dataset), batch_size):
        sl = slice(start, start + batch_size)
        audio = None if dataset.audio is None else dataset.audio[sl]
        out = model.forward(audio, dataset.visual[sl], params, cfg, train=False)
        if cfg.head_mode == "eri":
            chunks.append(out.intensity.data)
        else:
            chunks.append(tc.softmax_rows(out.class_logits).data)
    kind = "intensity" if cfg.head_mode == "eri" else "probs"
    return model.PredictionSet(list(dataset.ids), np.concatenate(chunks), kind)


def evaluate_predictions(preds: model.PredictionSet, dataset: Dataset, cfg: model.ModelConfig) -> dict:
    """Metrics record for one evaluation (Pearson for ERI, F1 for expr)."""
    preds = preds.reorder(dataset.ids)
    if cfg.head_mode == "eri":
        result = losses.pearson_per_class(preds.values, dataset.intensities)
        return {
            "mode": "eri",
            "n": len(dataset),
            "per_class_pearson": [float(r) for r in result.per_class],
            "mean_pearson": result.mean,
            "degenerate_columns": [int(i) for i in np.flatnonzero(result.degenerate)],
            "metric": result.mean,
        }
    f1, mean = losses.macro_f1(np.argmax(preds.values, axis=1), dataset.class_target, cfg.expr_classes)
    return {"mode": "expr", "n": len(dataset), "per_class_f1": [float(x) for x in f1],
            "macro_f1": mean, "metric": mean}


def evaluate(dataset: Dataset, params, cfg: model.ModelConfig, batch_size: int = 256) -> dict:
    return evaluate_predictions(predict(dataset, params, cfg, batch_size), dataset, cfg)


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: model.Checkpoint
    history: list
    best_metric: float
    best_epoch: int
    clip_events: int


def batch_loss(out: model.ForwardResult, batch: Dataset, mcfg: model.ModelConfig, tcfg: TrainConfig):
    """Objective for one batch plus its float components."""
    if mcfg.head_mode == "expr":
        focal = losses.focal_loss_from_logits(
            out.class_logits, batch.class_target, losses.FocalParams(tcfg.focal_alpha, tcfg.focal_gamma)
        )
        return focal, {"focal": focal.item()}
    weights = tcfg.loss_weights
    l_reg = losses.mse_loss(out.intensity, batch.intensities)
    parts = {"reg": l_reg.item()}
    if weights.beta > 0:
        l_class = losses.cross_entropy_loss(out.class_logits, batch.class_target)
        parts["class"] = l_class.item()
    else:
        l_class = None
    total = losses.eri_loss(l_reg, l_class, weights)
    parts["total"] = total.item()
    return total, parts


def train(train_set: Dataset, val_set: Dataset, mcfg: model.ModelConfig, tcfg: TrainConfig,
          on_epoch=None) -> TrainResult:
    """Run the full loop and return the best checkpoint and per-epoch history."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigError("train and validation splits must be non-empty")
    if train_set.mode != mcfg.head_mode:
        raise DataError(f"dataset mode {train_set.mode!r} does not match model mode {mcfg.head_mode!r}")
    if mcfg.head_mode == "eri" and val_set.intensities is not None and len(val_set) < 2:
        raise ConfigError("validation split needs at least 2 samples for Pearson")

    params = model.init_params(mcfg, tcfg.seed)
    state = TrainState.create(params, tcfg.seed)
    names = list(params)
    history = []
    best_params = best_ema = None
    clip_events = 0
    stale = 0
    eval_weights = "ema" if tcfg.use_ema else "raw"

    for epoch in range(1, tcfg.max_epochs + 1):
        state.epoch = epoch
        order = state.rng.permutation(len(train_set))
        sums = {}
        n_batches = 0
        epoch_clips = 0
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            batch = train_set.subset(order[start : start + tcfg.batch_size])
            for p in params.values():
                p.zero_grad()
            out = model.forward(batch.audio, batch.visual, params, mcfg, train=True, rng=state.rng)
            total, parts = batch_loss(out, batch, mcfg, tcfg)
            if not math.isfinite(total.item()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            total.backward()
            grads = OrderedDict((k, params[k].grad) for k in names)
            if tcfg.use_clip:
                grads, _, clipped = clip_gradients(grads, tcfg.clip_max_norm, tcfg.clip_norm_type)
                epoch_clips += int(clipped)
            try:
                adam_step(state, grads, tcfg)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {b}: {exc}") from exc
            if tcfg.use_ema:
                ema_update(state.ema, params, tcfg.ema_decay)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        clip_events += epoch_clips

        weights = state.ema if tcfg.use_ema else params
        report = evaluate(val_set, weights, mcfg, tcfg.eval_batch_size)
        metric = report["metric"]
        improved = metric > state.best_metric
        if improved:
            state.best_metric, state.best_epoch = metric, epoch
            best_params = model.params_to_arrays(params)
            best_ema = OrderedDict((k, v.copy()) for k, v in state.ema.items()) if tcfg.use_ema else OrderedDict()
            stale = 0
        else:
            stale += 1
        record = {
            "epoch": epoch,
            "train_loss": {k: v / n_batches for k, v in sums.items()},
            "val": {k: v for k, v in report.items() if k not in ("mode", "n")},
            "clip_events": epoch_clips,
            "best_metric": state.best_metric,
            "best_epoch": state.best_epoch,
        }
        history.append(record)
        log.info("epoch %d loss %.5f val %.4f%s", epoch, record["train_loss"].get("total", record["train_loss"].get("focal", 0.0)),
                 metric, " *" if improved else "")
        if on_epoch is not None:
            on_epoch(record)
        if stale >= tcfg.patience:
            break

    meta = {
        "eval_weights": eval_weights,
        "seed": tcfg.seed,
        "best_epoch": state.best_epoch,
        "best_metric": state.best_metric,
    }
    ckpt = model.Checkpoint(mcfg, best_params, best_ema, meta)
    return TrainResult(ckpt, history, state.best_metric, state.best_epoch, clip_events)
