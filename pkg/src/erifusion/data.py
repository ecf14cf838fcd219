"""Feature files, manifests, temporal alignment and the synthetic generator."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

FEAT_MAGIC = b"FEAT"
FEAT_VERSION = 1
FEAT_HEADER = struct.Struct("<4sIII")

RAW_MIN, RAW_MAX = 1.0, 100.0
N_EMOTIONS = 7
EMOTIONS = ("adoration", "amusement", "anxiety", "disgust", "empathic_pain", "fear", "surprise")
SPLITS = ("train", "val", "test")


@dataclass
class FeatureSequence:
    values: np.ndarray  # T_raw x D, float64
    modality: str = "v"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise DataError(f"feature sequence must be a non-empty matrix, got shape {self.values.shape}")

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class Sample:
    id: str
    audio: FeatureSequence | None
    visual: FeatureSequence | None
    intensities: np.ndarray | None
    class_target: int


# ---------------------------------------------------------------- FEAT format


def feat_bytes(values) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise DataError(f"FEAT payload must be 2-D, got {values.shape}")
    rows, cols = values.shape
    return FEAT_HEADER.pack(FEAT_MAGIC, FEAT_VERSION, rows, cols) + values.astype("<f4").tobytes()


def write_feature_file(path, values):
    Path(path).write_bytes(feat_bytes(values))


def parse_feature_bytes(data: bytes, modality: str = "v", source="<bytes>") -> FeatureSequence:
    if len(data) < FEAT_HEADER.size:
        raise FormatError(f"{source}: truncated header", len(data))
    magic, version, rows, cols = FEAT_HEADER.unpack_from(data)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}", 0)
    if version != FEAT_VERSION:
        raise FormatError(f"{source}: unsupported version {version}", 4)
    if rows < 1:
        raise DataError(f"{source}: feature file has no frames (rows=0)")
    expected = FEAT_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{source}: payload is {len(data)} bytes, expected {expected}",
                          min(len(data), expected))
    values = np.frombuffer(data, dtype="<f4", offset=FEAT_HEADER.size).reshape(rows, cols)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        cells = ", ".join(f"({r},{c})" for r, c in bad[:10])
        raise DataError(f"{source}: non-finite values at row/col {cells}")
    return FeatureSequence(values.astype(np.float64), modality)


def load_feature_file(path, modality: str = "v") -> FeatureSequence:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature file not found: {path}")
    return parse_feature_bytes(path.read_bytes(), modality, str(path))


# ---------------------------------------------------------------- preprocessing


def align_to_length(seq: FeatureSequence, T: int) -> FeatureSequence:
    """Linearly resample along time onto ``T`` evenly spaced frames."""
    if T < 1:
        raise ConfigError("aligned length T must be >= 1")
    n = seq.length
    if n == T:
        return seq
    if n == 1:
        return FeatureSequence(np.repeat(seq.values, T, axis=0), seq.modality)
    pos = np.linspace(0.0, n - 1, T)
    lo = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = (pos - lo)[:, None]
    out = (1.0 - frac) * seq.values[lo] + frac * seq.values[lo + 1]
    return FeatureSequence(out, seq.modality)


def normalize_labels(raw, raw_min: float = RAW_MIN, raw_max: float = RAW_MAX) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if np.any(raw < raw_min) or np.any(raw > raw_max) or not np.all(np.isfinite(raw)):
        raise DataError(f"label outside [{raw_min}, {raw_max}]: {raw.tolist()}")
    return (raw - raw_min) / (raw_max - raw_min)


def derive_class_target(intensities) -> int:
    """Index of the strongest emotion; ties go to the lowest index."""
    return int(np.argmax(np.asarray(intensities)))


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    id: str
    split: str
    mode: str
    audio: str | None = None
    visual: list = field(default_factory=list)
    labels: list | None = None  # raw 1..100 intensities (eri)
    label: int | None = None  # class index (expr)

    def to_json(self) -> str:
        rec = {"id": self.id, "split": self.split, "mode": self.mode}
        if self.mode == "eri":
            rec.update(audio=self.audio, visual=self.visual[0], labels=self.labels)
        else:
            rec.update(visual=self.visual, label=self.label)
        return json.dumps(rec)


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")

    @property
    def mode(self) -> str:
        return self.entries[0].mode if self.entries else "eri"

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def write(self, path):
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(e.to_json() + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    entries, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                mode = rec.get("mode", "eri")
                visual = rec["visual"]
                entry = ManifestEntry(
                    id=str(rec["id"]), split=rec["split"], mode=mode,
                    audio=rec.get("audio"),
                    visual=[visual] if isinstance(visual, str) else list(visual),
                    labels=rec.get("labels"), label=rec.get("label"),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed manifest record ({exc})") from exc
            if entry.split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {entry.split!r}")
            if entry.mode not in ("eri", "expr"):
                raise DataError(f"{path}:{lineno}: unknown mode {entry.mode!r}")
            if entry.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {entry.id!r}")
            if entry.mode == "eri":
                if entry.audio is None or entry.labels is None or len(entry.labels) != N_EMOTIONS:
                    raise DataError(f"{path}:{lineno}: eri record needs audio, visual and 7 labels")
                normalize_labels(entry.labels)
            elif entry.label is None:
                raise DataError(f"{path}:{lineno}: expr record needs a class label")
            seen.add(entry.id)
            entries.append(entry)
    modes = {e.mode for e in entries}
    if len(modes) > 1:
        raise DataError(f"{path}: manifest mixes modes {sorted(modes)}")
    return DatasetManifest(entries, path.parent)


@dataclass
class Dataset:
    """Aligned, stacked samples ready for batching."""

    ids: list
    audio: np.ndarray | None  # N x T x D_a
    visual: np.ndarray  # N x T x D_v
    intensities: np.ndarray | None  # N x 7 in [0, 1]
    class_target: np.ndarray  # N
    mode: str = "eri"

    def __len__(self):
        return len(self.ids)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(
            [self.ids[i] for i in index],
            None if self.audio is None else self.audio[index],
            self.visual[index],
            None if self.intensities is None else self.intensities[index],
            self.class_target[index],
            self.mode,
        )

    def samples(self):
        for n, sid in enumerate(self.ids):
            yield Sample(
                sid,
                None if self.audio is None else FeatureSequence(self.audio[n], "a"),
                FeatureSequence(self.visual[n], "v"),
                None if self.intensities is None else self.intensities[n],
                int(self.class_target[n]),
            )


def load_split(manifest: DatasetManifest, split: str, T: int) -> Dataset:
    """Load, align and stack every sample of ``split`` in manifest order."""
    entries = manifest.split(split)
    if not entries:
        raise DataError(f"split {split!r} is empty")
    root = manifest.root
    ids, audio, visual, labels, targets = [], [], [], [], []
    for e in entries:
        ids.append(e.id)
        streams = [align_to_length(load_feature_file(root / p, "v"), T).values for p in e.visual]
        visual.append(np.concatenate(streams, axis=1))
        if e.mode == "eri":
            audio.append(align_to_length(load_feature_file(root / e.audio, "a"), T).values)
            y = normalize_labels(e.labels)
            labels.append(y)
            targets.append(derive_class_target(y))
        else:
            targets.append(int(e.label))
    eri = manifest.mode == "eri"
    return Dataset(
        ids,
        np.stack(audio) if eri else None,
        np.stack(visual),
        np.stack(labels) if eri else None,
        np.asarray(targets, dtype=np.int64),
        manifest.mode,
    )


# ---------------------------------------------------------------- synthetic data

AUDIO_LATENTS = (0, 1, 2)
VISUAL_LATENTS = (2, 3, 4, 5, 6)


@dataclass
class SynthSpec:
    n: int
    seed: int = 0
    noise: float = 0.1
    audio_dim: int = 1024
    visual_dim: int = 1536
    min_frames: int = 4
    max_frames: int = 48
    mode: str = "eri"
    expr_classes: int = 8
    expr_streams: int = 2
    split_fractions: tuple = (0.7, 0.15, 0.15)


def _mixing(rng, latents, width):
    return rng.standard_normal((len(latents), width))


def synth_generate(out_dir, n: int, seed: int = 0, noise: float = 0.1, **kwargs) -> DatasetManifest:
    """Write a planted-signal dataset (FEAT files + manifest + ground truth).

    ERI mode: latent intensities ``z ~ U(0,1)^7``. Every audio frame is
    ``z[AUDIO_LATENTS] @ A + noise``, every visual frame ``z[VISUAL_LATENTS] @
    V + noise``. Visual covers five emotions, audio three (one shared), so a
    visual-only model beats audio-only and the fused model beats both.
    """
    spec = SynthSpec(n=n, seed=seed, noise=noise, **kwargs)
    if spec.n < 20:
        raise ConfigError("synthetic dataset needs n >= 20")
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    if spec.mode == "eri":
        mix_a = _mixing(rng, AUDIO_LATENTS, spec.audio_dim)
        mix_v = _mixing(rng, VISUAL_LATENTS, spec.visual_dim)
        truth = {"mode": "eri", "audio_latents": list(AUDIO_LATENTS),
                 "visual_latents": list(VISUAL_LATENTS),
                 "audio_mixing": mix_a.tolist(), "visual_mixing": mix_v.tolist()}
    elif spec.mode == "expr":
        stream_dim = spec.visual_dim // spec.expr_streams
        mixes = [rng.standard_normal((spec.expr_classes, stream_dim)) for _ in range(spec.expr_streams)]
        truth = {"mode": "expr", "stream_mixing": [m.tolist() for m in mixes]}
    else:
        raise ConfigError(f"unknown synthetic mode {spec.mode!r}")

    n_train = int(round(spec.split_fractions[0] * spec.n))
    n_val = int(round(spec.split_fractions[1] * spec.n))
    entries, latents = [], []
    for i in range(spec.n):
        sid = f"s{i:05d}"
        split = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        frames = int(rng.integers(spec.min_frames, spec.max_frames + 1))
        if spec.mode == "eri":
            z = rng.uniform(0.0, 1.0, N_EMOTIONS)
            raw = (RAW_MIN + (RAW_MAX - RAW_MIN) * z).tolist()
            a = z[list(AUDIO_LATENTS)] @ mix_a + noise * rng.standard_normal((frames, spec.audio_dim))
            v = z[list(VISUAL_LATENTS)] @ mix_v + noise * rng.standard_normal((frames, spec.visual_dim))
            write_feature_file(out / "features" / f"{sid}_a.feat", a)
            write_feature_file(out / "features" / f"{sid}_v.feat", v)
            entries.append(ManifestEntry(sid, split, "eri", audio=f"features/{sid}_a.feat",
                                         visual=[f"features/{sid}_v.feat"], labels=raw))
            latents.append(z.tolist())
        else:
            z = rng.uniform(0.0, 1.0, spec.expr_classes)
            paths = []
            for k, mix in enumerate(mixes):
                frames_k = z @ mix + noise * rng.standard_normal((frames, mix.shape[1]))
                rel = f"features/{sid}_v{k}.feat"
                write_feature_file(out / rel, frames_k)
                paths.append(rel)
            entries.append(ManifestEntry(sid, split, "expr", visual=paths, label=int(np.argmax(z))))
            latents.append(z.tolist())

    manifest = DatasetManifest(entries, out)
    manifest.write(out / "manifest.jsonl")
    truth["latents"] = latents
    truth["seed"] = spec.seed
    truth["noise"] = spec.noise
    (out / "ground_truth.json").write_text(json.dumps(truth))
    return manifest
