"""Small reverse-mode autodiff kernel over float64 numpy arrays.

Only the operations the fusion model needs are provided. Every op accepts
either a single ``T x D`` matrix or a stack of them with leading batch axes;
weights are always plain 2-D matrices and are shared across the stack.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DimensionError, ConfigError, NumericalError

DTYPE = np.float64


class Tensor:
    """A value in the computation graph together with its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, parents=(), backward=None, op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad and not parents else None
        self.op = op
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Intermediate gradients live only for the duration of the call, so two
        calls without ``zero_grad`` add exactly twice the gradient to leaves.
        """
        if grad is None:
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        pending = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.requires_grad:
                    node.grad += g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _result(data, parents, backward, op):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, backward=backward, op=op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (leading axes and size-1 axes)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: fold the batch into rows
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def add(a, b) -> Tensor:
    """Elementwise sum; ``b`` may broadcast over leading axes of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from exc

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# ---------------------------------------------------------------- elementwise


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    pos = x.data >= 0
    z = np.exp(-np.abs(x.data))
    out = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def dropout(x, p: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when ``train`` is false or ``p == 0``."""
    x = as_tensor(x)
    if not train or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- reductions & shape


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return _result(
        np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean"
    )


def mean_axis(x, axis: int) -> Tensor:
    """Mean over one axis (used for temporal pooling)."""
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _result(x.data.mean(axis=axis), (x,), backward, "mean_axis")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat shape mismatch: {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, tuple(tensors), backward, "concat")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def pick(x, index) -> Tensor:
    """Select ``x[i, index[i]]`` for each row of a 2-D tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def backward(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _result(x.data[rows, index], (x,), backward, "pick")


# ---------------------------------------------------------------- normalisation


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row maximum."""
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (x,), backward, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax_rows")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    width = x.shape[-1]
    if gain.data.size != width or bias.data.size != width:
        raise DimensionError(
            f"layer_norm expects gain/bias of length {width}, got {gain.data.size}/{bias.data.size}"
        )
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    g_vec = gain.data.reshape(-1)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * g_vec + bias.data.reshape(-1)

    def backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * g_vec
            gx = inv_std * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, width).sum(axis=0).reshape(gain.shape)
        if bias.requires_grad:
            gbias = g.reshape(-1, width).sum(axis=0).reshape(bias.shape)
        return gx, ggain, gbias

    return _result(out, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- sequence ops


def _windows(x, width):
    """im2col: (..., T, D) -> (..., T, width*D) with symmetric zero padding."""
    half = width // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    padded = np.pad(x, pad)
    t = x.shape[-2]
    return np.concatenate([padded[..., k : k + t, :] for k in range(width)], axis=-1)


def _windows_adjoint(g, width, d_in):
    t = g.shape[-2]
    half = width // 2
    out = np.zeros(g.shape[:-2] + (t + 2 * half, d_in))
    for k in range(width):
        out[..., k : k + t, :] += g[..., k * d_in : (k + 1) * d_in]
    return out[..., half : half + t, :]


def conv1d(seq, kernel, bias, width: int = 1) -> Tensor:
    """Same-padded 1-D convolution along time.

    ``kernel`` is stored unrolled as ``(width * D_in, D_out)``: rows
    ``k*D_in:(k+1)*D_in`` hold the tap applied to frame ``t + k - width//2``.
    """
    seq, kernel, bias = as_tensor(seq), as_tensor(kernel), as_tensor(bias)
    if width < 1 or width % 2 == 0:
        raise ConfigError(f"conv1d width must be odd and positive, got {width}")
    d_in = seq.shape[-1]
    if kernel.shape[0] != width * d_in:
        raise DimensionError(
            f"conv1d kernel has {kernel.shape[0]} rows, expected width*D_in = {width * d_in}"
        )
    if seq.shape[-2] < 1:
        raise DimensionError("conv1d needs at least one time step")
    if width == 1:
        return linear(seq, kernel, bias)
    cols = _result(
        _windows(seq.data, width),
        (seq,),
        lambda g: (_windows_adjoint(g, width, d_in),),
        "im2col",
    )
    return linear(cols, kernel, bias)


def multi_head_attention(x, params: dict, heads: int, prefix: str = "") -> Tensor:
    """Scaled dot-product self-attention with ``heads`` heads.

    ``params`` must provide ``{prefix}wq, bq, wk, wv, bv, wo, bo``. The key
    projection has no bias: it would shift every score in a row equally and
    so never reach the output.
    """
    x = as_tensor(x)
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    b, t = x.shape[0], x.shape[1]
    dh = d // heads
    p = lambda name: params[prefix + name]  # noqa: E731

    def split(z):
        return transpose(reshape(z, (b, t, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p("wq"), p("bq")))
    k = split(matmul(x, p("wk")))
    v = split(linear(x, p("wv"), p("bv")))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = softmax_rows(scores)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
    out = linear(ctx, p("wo"), p("bo"))
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


# ---------------------------------------------------------------- gradient check


def grad_check(fn, inputs, eps: float = 1e-5, name: str = "op", corrupt: float = 1.0, seed: int = 0):
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` maps the given leaf tensors to a tensor; a fixed random weighting
    reduces it to a scalar. Returns the largest component-wise relative error
    ``|a - n| / max(|a|, |n|, 1e-8)`` over all inputs. ``corrupt`` scales the
    analytic gradient and exists only so harness failures can be exercised.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ConfigError(f"grad_check eps must lie in [1e-6, 1e-2], got {eps}")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for leaf in inputs:
        if not leaf.requires_grad:
            raise ConfigError("grad_check inputs must require gradients")
        leaf.zero_grad()

    probe = fn(*inputs)
    weights = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar():
        return float((fn(*inputs).data * weights).sum())

    sum_all(mul(probe, Tensor(weights))).backward()

    worst = 0.0
    for leaf in inputs:
        analytic = leaf.grad * corrupt
        if not np.all(np.isfinite(analytic)):
            raise NumericalError(f"grad_check: non-finite gradient in {name}")
        flat = leaf.data.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = scalar()
            flat[i] = orig - eps
            down = scalar()
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * eps)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
        leaf.zero_grad()
    return worst
