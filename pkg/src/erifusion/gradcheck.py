"""Finite-difference audit of every differentiable op and of the composed model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, model
from . import tensor as tc

THRESHOLD = 1e-4


@dataclass
class CheckResult:
    op: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD


def _leaf(rng, *shape, positive=False, away_from_zero=False):
    x = rng.standard_normal(shape)
    if positive:
        x = rng.uniform(0.2, 0.95, shape)
    if away_from_zero:
        # keep relu/abs kinks further than eps away
        x = np.where(np.abs(x) < 0.05, 0.05 * np.sign(x) + 0.05 * (x == 0), x)
    return tc.parameter(x)


def op_checks(d: int = 8, T: int = 4, heads: int = 2, seed: int = 0):
    """Yield ``(name, fn, inputs)`` triples, one per differentiable op."""
    rng = np.random.default_rng(seed)
    L = lambda *s, **k: _leaf(rng, *s, **k)  # noqa: E731

    yield "matmul", tc.matmul, [L(2, T, d), L(d, 3)]
    yield "add", tc.add, [L(2, T, d), L(1, d)]
    yield "mul", tc.mul, [L(T, d), L(T, d)]
    yield "scale", lambda x: tc.scale(x, 0.37), [L(T, d)]
    yield "relu", tc.relu, [L(T, d, away_from_zero=True)]
    yield "sigmoid", tc.sigmoid, [L(T, d)]
    yield "square", tc.square, [L(T, d)]
    yield "log", tc.log, [L(T, d, positive=True)]
    yield "exp", tc.exp, [L(T, d)]
    yield "dropout", lambda x: tc.dropout(x, 0.5, np.random.default_rng(7), True), [L(T, d)]
    yield "sum_all", tc.sum_all, [L(T, d)]
    yield "mean_all", tc.mean_all, [L(T, d)]
    yield "mean_axis", lambda x: tc.mean_axis(x, -2), [L(2, T, d)]
    yield "concat", lambda a, b: tc.concat([a, b], -1), [L(T, d), L(T, 3)]
    yield "reshape", lambda x: tc.reshape(x, (T * d // 2, 2)), [L(T, d)]
    yield "transpose", lambda x: tc.transpose(x, (1, 0, 2)), [L(2, T, d)]
    yield "pick", lambda x: tc.pick(x, np.arange(T) % d), [L(T, d)]
    yield "softmax_rows", tc.softmax_rows, [L(3, 4)]
    yield "log_softmax_rows", tc.log_softmax_rows, [L(T, d)]
    yield "layer_norm", lambda x, g, b: tc.layer_norm(x, g, b, 1e-5), [L(2, T, d), L(1, d), L(1, d)]
    yield "conv1d", lambda x, w, b: tc.conv1d(x, w, b, 3), [L(2, T, 5), L(15, d), L(1, d)]

    attn = {n: L(*s) for n, s in model._attn_shapes(d).items()}
    names = list(attn)
    yield (
        "multi_head_attention",
        lambda x, *ws: tc.multi_head_attention(x, dict(zip(names, ws)), heads),
        [L(2, T, d), *attn.values()],
    )

    block = {n: L(*s) for n, s in model._block_shapes("blk", d, 1, 4).items()}
    for n in block:
        if n.endswith(".g"):
            block[n].data += 1.0
    bnames = list(block)
    yield (
        "encoder_block",
        lambda x, *ws: model.encoder_block(x, dict(zip(bnames, ws)), "blk", heads),
        [L(2, T, d), *block.values()],
    )

    target = rng.uniform(0, 1, (4, 7))
    yield "mse_loss", lambda p: losses.mse_loss(p, target), [L(4, 7)]
    classes = rng.integers(0, 7, 4)
    yield "cross_entropy_loss", lambda z: losses.cross_entropy_loss(z, classes), [L(4, 7)]
    fp = losses.FocalParams(0.25, 2.0)
    yield "focal_loss", lambda p: losses.focal_loss(p, fp), [L(6, positive=True)]

    yield ("eri_forward_loss",) + _composed(d, T, heads, seed)


def _composed(d, T, heads, seed):
    cfg = model.ModelConfig(d=d, audio_in=6, visual_in=10, heads_modality=heads, heads_interaction=heads,
                            T=T, proj_dim=d)
    params = model.init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    for name, p in params.items():
        # non-trivial biases and gains so every path carries gradient
        if p.shape[0] == 1:
            p.data += 0.1 * rng.standard_normal(p.shape)
    audio = tc.parameter(rng.standard_normal((2, T, cfg.audio_in)))
    visual = tc.parameter(rng.standard_normal((2, T, cfg.visual_in)))
    target = rng.uniform(0, 1, (2, 7))
    weights = losses.LossWeights()
    names = list(params)

    def fn(a, v, *ws):
        ps = dict(zip(names, ws))
        out = model.forward(a, v, ps, cfg, train=False)
        l_reg = losses.mse_loss(out.intensity, target)
        l_cls = losses.cross_entropy_loss(out.class_logits, np.argmax(target, axis=1))
        return losses.eri_loss(l_reg, l_cls, weights)

    return fn, [audio, visual, *params.values()]


def run_gradcheck(d: int = 8, T: int = 4, heads: int = 2, eps: float = 1e-5, seed: int = 0,
                  corrupt_op: str | None = None):
    """Check every op; ``corrupt_op`` deliberately skews one analytic gradient."""
    results = []
    for name, fn, inputs in op_checks(d, T, heads, seed):
        start = time.perf_counter()
        err = tc.grad_check(fn, inputs, eps=eps, name=name, corrupt=1.5 if name == corrupt_op else 1.0)
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results
