"""Three-branch audio/visual fusion transformer.

Audio and visual feature sequences are embedded by a 1-D convolution, each
passes through its own modality encoder, the concatenated embeddings pass
through an interaction encoder, and the pooled results are projected and fed
to a regression head and a classification head.
"""

from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as tc
from .errors import ConfigError, ContractError, DataError, DimensionError, EnsembleError, FormatError

N_EMOTIONS = 7
MODALITIES = ("full", "av", "audio", "visual")


@dataclass
class ModelConfig:
    d: int = 256
    audio_in: int = 1024
    visual_in: int = 1536
    heads_modality: int = 2
    heads_interaction: int = 8
    depth_modality: int = 1
    depth_interaction: int = 1
    dropout_modality: float = 0.5
    dropout_interaction: float = 0.1
    T: int = 32
    proj_dim: int = 256
    ff_mult: int = 4
    embed_width: int = 1
    head_mode: str = "eri"
    expr_classes: int = 8
    modality: str = "full"
    pooling: str = "mean_before_projection"
    ln_eps: float = 1e-5

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("d", "audio_in", "visual_in", "heads_modality", "heads_interaction",
                     "depth_modality", "depth_interaction", "T", "proj_dim", "ff_mult",
                     "embed_width", "expr_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d % self.heads_modality:
            raise ConfigError(f"d={self.d} not divisible by heads_modality={self.heads_modality}")
        if (2 * self.d) % self.heads_interaction:
            raise ConfigError(f"2d={2 * self.d} not divisible by heads_interaction={self.heads_interaction}")
        if self.embed_width % 2 == 0:
            raise ConfigError("embed_width must be odd")
        if self.head_mode not in ("eri", "expr"):
            raise ConfigError(f"unknown head_mode {self.head_mode!r}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}; expected one of {MODALITIES}")
        if self.head_mode == "expr" and self.modality != "visual":
            raise ConfigError("expr mode runs on the visual branch only (modality='visual')")
        if self.pooling != "mean_before_projection":
            raise ConfigError("only pooling='mean_before_projection' is supported")
        if self.expr_classes < 2:
            raise ConfigError("expr_classes must be >= 2")
        for name in ("dropout_modality", "dropout_interaction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"model.{name} must lie in [0, 1)")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small preset that trains in seconds on one CPU core."""
        base = dict(d=32, audio_in=64, visual_in=96, T=8, proj_dim=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**values)

    @property
    def uses_audio(self) -> bool:
        return self.modality in ("full", "av", "audio")

    @property
    def uses_visual(self) -> bool:
        return self.modality in ("full", "av", "visual")

    @property
    def n_class_outputs(self) -> int:
        return self.expr_classes if self.head_mode == "expr" else N_EMOTIONS

    def branch_widths(self) -> dict:
        """Pooled width of each branch that feeds a projection layer."""
        d = self.d
        return {
            "full": {"av": 6 * d, "cat": 6 * d},
            "av": {"cat": 6 * d},
            "audio": {"a": 3 * d},
            "visual": {"v": 3 * d},
        }[self.modality]


@dataclass
class BranchOutputs:
    h_a: Optional[tc.Tensor] = None
    h_v: Optional[tc.Tensor] = None
    g_a: Optional[tc.Tensor] = None
    g_v: Optional[tc.Tensor] = None
    h_av: Optional[tc.Tensor] = None
    g_av: Optional[tc.Tensor] = None
    g_cat: Optional[tc.Tensor] = None


@dataclass
class ForwardResult:
    intensity: Optional[tc.Tensor]
    class_logits: tc.Tensor
    branch: BranchOutputs = field(default_factory=BranchOutputs)


# ---------------------------------------------------------------- parameters


def _attn_shapes(k):
    return {"wq": (k, k), "bq": (1, k), "wk": (k, k), "wv": (k, k), "bv": (1, k),
            "wo": (k, k), "bo": (1, k)}


def _block_shapes(prefix, k, depth, ff_mult):
    shapes = {f"{prefix}.att.{n}": s for n, s in _attn_shapes(k).items()}
    hidden = ff_mult * k
    for i in range(depth):
        layer = f"{prefix}.trans{i}"
        shapes.update({f"{layer}.attn.{n}": s for n, s in _attn_shapes(k).items()})
        shapes.update({
            f"{layer}.ln1.g": (1, k), f"{layer}.ln1.b": (1, k),
            f"{layer}.ff.w1": (k, hidden), f"{layer}.ff.b1": (1, hidden),
            f"{layer}.ff.w2": (hidden, k), f"{layer}.ff.b2": (1, k),
            f"{layer}.ln2.g": (1, k), f"{layer}.ln2.b": (1, k),
        })
    return shapes


def param_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape for every weight; order is the serialization order."""
    d, w = cfg.d, cfg.embed_width
    shapes = OrderedDict()
    if cfg.uses_audio:
        shapes["embed_a.w"] = (w * cfg.audio_in, d)
        shapes["embed_a.b"] = (1, d)
    if cfg.uses_visual:
        shapes["embed_v.w"] = (w * cfg.visual_in, d)
        shapes["embed_v.b"] = (1, d)
    if cfg.uses_audio:
        shapes.update(_block_shapes("enc_a", d, cfg.depth_modality, cfg.ff_mult))
    if cfg.uses_visual:
        shapes.update(_block_shapes("enc_v", d, cfg.depth_modality, cfg.ff_mult))
    if cfg.modality == "full":
        shapes.update(_block_shapes("enc_av", 2 * d, cfg.depth_interaction, cfg.ff_mult))
    branches = cfg.branch_widths()
    for name, width in branches.items():
        shapes[f"proj_{name}.w"] = (width, cfg.proj_dim)
        shapes[f"proj_{name}.b"] = (1, cfg.proj_dim)
    fused = cfg.proj_dim * len(branches)
    if cfg.head_mode == "eri":
        shapes["head_reg.w"] = (fused, N_EMOTIONS)
        shapes["head_reg.b"] = (1, N_EMOTIONS)
    shapes["head_cls.w"] = (fused, cfg.n_class_outputs)
    shapes["head_cls.b"] = (1, cfg.n_class_outputs)
    return shapes


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form parameter count, independent of ``param_shapes``."""
    d, p = cfg.d, cfg.proj_dim

    def attn(k):
        return 4 * k * k + 3 * k

    def block(k, depth):
        hidden = cfg.ff_mult * k
        layer = attn(k) + 4 * k + (k * hidden + hidden) + (hidden * k + k)
        return attn(k) + depth * layer

    total = 0
    if cfg.uses_audio:
        total += cfg.embed_width * cfg.audio_in * d + d + block(d, cfg.depth_modality)
    if cfg.uses_visual:
        total += cfg.embed_width * cfg.visual_in * d + d + block(d, cfg.depth_modality)
    if cfg.modality == "full":
        total += block(2 * d, cfg.depth_interaction)
    n_branches = {"full": 2, "av": 1, "audio": 1, "visual": 1}[cfg.modality]
    pooled = 3 * d if cfg.modality in ("audio", "visual") else 6 * d
    total += n_branches * (pooled * p + p)
    fused = n_branches * p
    if cfg.head_mode == "eri":
        total += fused * N_EMOTIONS + N_EMOTIONS
    total += fused * cfg.n_class_outputs + cfg.n_class_outputs
    return total


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, tc.Tensor]":
    """Glorot-uniform matrices, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if ".ln" in name and leaf == "g":
            value = np.ones(shape)
        elif shape[0] == 1:
            value = np.zeros(shape)
        else:
            limit = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-limit, limit, size=shape)
        params[name] = tc.parameter(value)
    return params


def params_to_arrays(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.data.copy()) for k, v in params.items())


def arrays_to_params(arrays) -> "OrderedDict[str, tc.Tensor]":
    return OrderedDict((k, tc.parameter(v)) for k, v in arrays.items())


# ---------------------------------------------------------------- forward pass


def embed(seq, params, cfg: ModelConfig, modality: str) -> tc.Tensor:
    expected = cfg.audio_in if modality == "a" else cfg.visual_in
    seq = tc.as_tensor(seq)
    if seq.shape[-1] != expected:
        raise DataError(f"{modality} features have width {seq.shape[-1]}, expected {expected}")
    return tc.conv1d(seq, params[f"embed_{modality}.w"], params[f"embed_{modality}.b"], cfg.embed_width)


def transformer_layer(x, params, prefix, heads, p_drop, rng, train, eps=1e-5) -> tc.Tensor:
    """Post-norm encoder layer: attention and feed-forward sublayers with residuals."""
    attn = tc.multi_head_attention(x, params, heads, prefix=f"{prefix}.attn.")
    y = tc.layer_norm(x + tc.dropout(attn, p_drop, rng, train),
                      params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"], eps)
    hidden = tc.relu(tc.linear(y, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"]))
    ff = tc.linear(tc.dropout(hidden, p_drop, rng, train), params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])
    return tc.layer_norm(y + tc.dropout(ff, p_drop, rng, train),
                         params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"], eps)


def encoder_block(x, params, prefix, heads, p_drop=0.0, rng=None, train=False, depth=1, eps=1e-5) -> tc.Tensor:
    """``concat(x, MHA(x), trans(x))`` along features: width k -> 3k."""
    x = tc.as_tensor(x)
    att = tc.multi_head_attention(x, params, heads, prefix=f"{prefix}.att.")
    trans = x
    for i in range(depth):
        trans = transformer_layer(trans, params, f"{prefix}.trans{i}", heads, p_drop, rng, train, eps)
    return tc.concat([x, att, trans], axis=-1)


def _check_width(t, want, label):
    if t.shape[-1] != want:
        raise DimensionError(f"{label} has {t.shape[-1]} columns, expected {want}")


def forward(audio, visual, params, cfg: ModelConfig, train: bool = False,
            rng: np.random.Generator | None = None) -> ForwardResult:
    """Run a batch (``B x T x D``) or a single sample (``T x D``) through the model."""
    if train and rng is None:
        rng = np.random.default_rng(0)
    single = np.ndim(visual if cfg.uses_visual else audio) == 2
    if single:
        audio = None if audio is None else tc.reshape(audio, (1,) + np.shape(audio))
        visual = None if visual is None else tc.reshape(visual, (1,) + np.shape(visual))
    d = cfg.d
    lengths = []
    if cfg.uses_audio:
        lengths.append(np.shape(audio)[-2])
    if cfg.uses_visual:
        lengths.append(np.shape(visual)[-2])
    if any(n != cfg.T for n in lengths):
        raise ContractError(f"sample not aligned: lengths {lengths}, expected T={cfg.T}")

    br = BranchOutputs()
    eps = cfg.ln_eps
    if cfg.uses_audio:
        br.h_a = embed(audio, params, cfg, "a")
        br.g_a = encoder_block(br.h_a, params, "enc_a", cfg.heads_modality, cfg.dropout_modality,
                               rng, train, cfg.depth_modality, eps)
        _check_width(br.h_a, d, "h_a")
        _check_width(br.g_a, 3 * d, "g_a")
    if cfg.uses_visual:
        br.h_v = embed(visual, params, cfg, "v")
        br.g_v = encoder_block(br.h_v, params, "enc_v", cfg.heads_modality, cfg.dropout_modality,
                               rng, train, cfg.depth_modality, eps)
        _check_width(br.h_v, d, "h_v")
        _check_width(br.g_v, 3 * d, "g_v")
    if cfg.modality == "full":
        br.h_av = tc.concat([br.h_a, br.h_v], axis=-1)
        br.g_av = encoder_block(br.h_av, params, "enc_av", cfg.heads_interaction, cfg.dropout_interaction,
                                rng, train, cfg.depth_interaction, eps)
        _check_width(br.h_av, 2 * d, "h_av")
        _check_width(br.g_av, 6 * d, "g_av")
    if cfg.modality in ("full", "av"):
        br.g_cat = tc.concat([br.g_a, br.g_v], axis=-1)
        _check_width(br.g_cat, br.g_a.shape[-1] + br.g_v.shape[-1], "g_cat")
        _check_width(br.g_cat, 6 * d, "g_cat")

    sources = {"av": br.g_av, "cat": br.g_cat, "a": br.g_a, "v": br.g_v}
    projected = []
    for name in cfg.branch_widths():
        pooled = tc.mean_axis(sources[name], axis=-2)
        projected.append(tc.linear(pooled, params[f"proj_{name}.w"], params[f"proj_{name}.b"]))
    fused = projected[0] if len(projected) == 1 else tc.concat(projected, axis=-1)

    intensity = None
    if cfg.head_mode == "eri":
        intensity = tc.sigmoid(tc.linear(fused, params["head_reg.w"], params["head_reg.b"]))
    logits = tc.linear(fused, params["head_cls.w"], params["head_cls.b"])
    if single:
        drop = lambda t: None if t is None else tc.reshape(t, t.shape[1:])  # noqa: E731
        intensity, logits = drop(intensity), drop(logits)
        br = BranchOutputs(**{k: drop(v) for k, v in vars(br).items()})
    return ForwardResult(intensity, logits, br)


# ---------------------------------------------------------------- predictions & ensembles


@dataclass
class PredictionSet:
    """Per-sample outputs: intensities in ERI mode, class probabilities in expr mode."""

    ids: list
    values: np.ndarray
    kind: str = "intensity"

    def as_dict(self) -> dict:
        return {i: self.values[n] for n, i in enumerate(self.ids)}

    def reorder(self, ids) -> "PredictionSet":
        lookup = {i: n for n, i in enumerate(self.ids)}
        return PredictionSet(list(ids), self.values[[lookup[i] for i in ids]], self.kind)

    def to_jsonl(self, path):
        with open(path, "w") as fh:
            for i, row in zip(self.ids, self.values):
                fh.write(json.dumps({"id": i, "kind": self.kind, "values": [float(v) for v in row]}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "PredictionSet":
        ids, rows, kind = [], [], "intensity"
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    ids.append(rec["id"])
                    rows.append(rec["values"])
                    kind = rec.get("kind", kind)
        return cls(ids, np.asarray(rows, dtype=np.float64), kind)


def ensemble_average(predictions: list) -> PredictionSet:
    """Element-wise mean of several prediction sets over the same sample ids."""
    if not predictions:
        raise EnsembleError("ensemble needs at least one prediction set")
    base = predictions[0]
    ids = set(base.ids)
    for other in predictions[1:]:
        other_ids = set(other.ids)
        if other_ids != ids:
            missing = sorted(ids.symmetric_difference(other_ids))
            raise EnsembleError(f"prediction sets cover different samples; unmatched ids: {missing}")
        if other.kind != base.kind:
            raise EnsembleError(f"cannot average {base.kind} with {other.kind} predictions")
    stacked = np.stack([p.reorder(base.ids).values for p in predictions])
    return PredictionSet(list(base.ids), stacked.mean(axis=0), base.kind)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"FUSN"
CKPT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    ema: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def eval_arrays(self) -> "OrderedDict[str, np.ndarray]":
        """Weights evaluation should use: EMA when it was recorded as active."""
        if self.meta.get("eval_weights") == "ema" and self.ema:
            return self.ema
        return self.params


def _write_blobs(buf, arrays):
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim != 2:
            raise DimensionError(f"parameter {name} is not a matrix: {arr.shape}")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    header = json.dumps({"config": asdict(ckpt.config), "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    _write_blobs(buf, ckpt.params)
    _write_blobs(buf, ckpt.ema)
    return buf.getvalue()


def save_checkpoint(path, ckpt: Checkpoint):
    Path(path).write_bytes(checkpoint_bytes(ckpt))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def _read_blobs(reader):
    out = OrderedDict()
    for _ in range(reader.u32("blob count")):
        name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        rows, cols = reader.u32("rows"), reader.u32("cols")
        raw = reader.take(8 * rows * cols, f"values of {name}")
        out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
    return out


def parse_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    version = reader.u32("version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    header = json.loads(reader.take(reader.u32("header length"), "header").decode("utf-8"))
    cfg = ModelConfig.from_dict(header["config"])
    params = _read_blobs(reader)
    ema = _read_blobs(reader)
    if reader.pos != len(data):
        raise FormatError("trailing bytes after checkpoint", reader.pos)
    expected = param_shapes(cfg)
    for label, arrays in (("params", params), ("ema", ema)):
        if not arrays:
            continue
        for name, shape in expected.items():
            if name not in arrays or arrays[name].shape != shape:
                raise FormatError(f"{label} entry {name} missing or mis-shaped for this config")
    return Checkpoint(cfg, params, ema, header.get("meta", {}))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    return parse_checkpoint(path.read_bytes())
