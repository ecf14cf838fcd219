"""Command-line entry point: ``erifusion <subcommand> ...``.

Exit status is 0 on success, 2 for configuration errors, 3 for data/format
errors and 4 for numerical failures (including a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import data, model, training
from .config import DataConfig, RunConfig, dump_config, load_config
from .errors import ConfigError, DataError, FusionError, NumericalError

log = logging.getLogger("erifusion")

DEFAULT_SEED = 0
LOG_ENV = "ERIFUSION_LOG_LEVEL"

ABLATIONS = [
    ("all_on", {}),
    ("no_class_loss", {"use_class_loss": False}),
    ("no_ema", {"use_ema": False}),
    ("no_l2", {"use_l2": False}),
]


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _write_history(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_eval_split(manifest_path, split, cfg: model.ModelConfig) -> data.Dataset:
    manifest = data.read_manifest(manifest_path)
    if manifest.mode != cfg.head_mode:
        raise DataError(f"checkpoint is a {cfg.head_mode!r} model but manifest {manifest_path} is {manifest.mode!r}")
    return data.load_split(manifest, split, cfg.T)


# ---------------------------------------------------------------- train


def run_training(run_cfg: RunConfig, out_dir, seed: int | None = None, train_overrides=None) -> dict:
    """Train from a run config and write checkpoint, history and metrics to ``out_dir``."""
    tcfg = run_cfg.train
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    if train_overrides:
        tcfg = replace(tcfg, **train_overrides)
    mcfg = run_cfg.model
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    manifest_path = run_cfg.manifest_path()
    manifest = data.read_manifest(manifest_path)
    if manifest.mode != mcfg.head_mode:
        raise DataError(f"manifest mode {manifest.mode!r} does not match model head_mode {mcfg.head_mode!r}")
    train_set = data.load_split(manifest, "train", mcfg.T)
    val_set = data.load_split(manifest, "val", mcfg.T)
    log.info("training seed=%d on %d samples (%d val)", tcfg.seed, len(train_set), len(val_set))

    result = training.train(train_set, val_set, mcfg, tcfg)
    ckpt = result.checkpoint
    model.save_checkpoint(out / "checkpoint.fusn", ckpt)
    _write_history(out / "history.jsonl", result.history)
    resolved = RunConfig(mcfg, tcfg, DataConfig(str(manifest_path.resolve()), run_cfg.data.eval_split))
    (out / "config.toml").write_text(dump_config(resolved))

    metrics = {
        "seed": tcfg.seed,
        "best_epoch": result.best_epoch,
        "best_val_metric": result.best_metric,
        "epochs_run": len(result.history),
        "clip_events": result.clip_events,
        "active": {"class_loss": tcfg.use_class_loss, "ema": tcfg.use_ema,
                   "l2": tcfg.use_l2 and tcfg.weight_decay > 0, "clip": tcfg.use_clip},
        "val": training.evaluate(val_set, ckpt.eval_arrays(), mcfg, tcfg.eval_batch_size),
    }
    split = run_cfg.data.eval_split
    if split != "val" and manifest.split(split):
        held_out = data.load_split(manifest, split, mcfg.T)
        metrics[split] = training.evaluate(held_out, ckpt.eval_arrays(), mcfg, tcfg.eval_batch_size)
    (out / "metrics.json").write_text(_dump_json(metrics))
    if tcfg.use_clip:
        log.info("gradient clipping triggered on %d steps", result.clip_events)
    return metrics


def cmd_train(args) -> int:
    run_cfg = load_config(args.config)
    metrics = run_training(run_cfg, args.out, args.seed)
    sys.stdout.write(_dump_json(metrics))
    return 0


# ---------------------------------------------------------------- eval / predict / ensemble


def _format_table(report) -> str:
    if report["mode"] == "eri":
        rows = zip(data.EMOTIONS, report["per_class_pearson"])
        lines = [f"{name:>14s}  {value: .4f}" for name, value in rows]
        lines.append(f"{'mean P':>14s}  {report['mean_pearson']: .4f}")
    else:
        lines = [f"{'class ' + str(i):>14s}  {v: .4f}" for i, v in enumerate(report["per_class_f1"])]
        lines.append(f"{'macro F1':>14s}  {report['macro_f1']: .4f}")
    return "\n".join(lines)


def _emit_report(report, out):
    if out:
        Path(out).write_text(_dump_json(report))
    sys.stdout.write(_dump_json(report))
    sys.stderr.write(_format_table(report) + "\n")


def cmd_eval(args) -> int:
    ckpt = model.load_checkpoint(args.checkpoint)
    dataset = _load_eval_split(args.manifest, args.split, ckpt.config)
    report = training.evaluate(dataset, ckpt.eval_arrays(), ckpt.config)
    report["split"] = args.split
    report["checkpoint_seed"] = ckpt.meta.get("seed")
    _emit_report(report, args.out)
    return 0


def cmd_predict(args) -> int:
    ckpt = model.load_checkpoint(args.checkpoint)
    dataset = _load_eval_split(args.manifest, args.split, ckpt.config)
    preds = training.predict(dataset, ckpt.eval_arrays(), ckpt.config)
    preds.to_jsonl(args.out)
    log.info("wrote %d predictions to %s", len(preds.ids), args.out)
    return 0


def _compatible(a: model.ModelConfig, b: model.ModelConfig) -> bool:
    keys = ("head_mode", "T", "audio_in", "visual_in", "expr_classes")
    return all(getattr(a, k) == getattr(b, k) for k in keys)


def cmd_ensemble(args) -> int:
    ckpts = [model.load_checkpoint(p) for p in args.checkpoint]
    base = ckpts[0].config
    for path, ck in zip(args.checkpoint[1:], ckpts[1:]):
        if not _compatible(base, ck.config):
            raise ConfigError(f"checkpoint {path} is incompatible with {args.checkpoint[0]}")
    dataset = _load_eval_split(args.manifest, args.split, base)
    sets = [training.predict(dataset, ck.eval_arrays(), ck.config) for ck in ckpts]
    averaged = model.ensemble_average(sets)
    report = training.evaluate_predictions(averaged, dataset, base)
    report["split"] = args.split
    report["members"] = len(ckpts)
    _emit_report(report, args.out)
    return 0


# ---------------------------------------------------------------- ablation


def run_ablation(run_cfg: RunConfig, out_dir, seed: int | None = None) -> list:
    """Train the four variants with one seed: all tricks on, then each switched off."""
    out = Path(out_dir)
    rows = []
    for name, overrides in ABLATIONS:
        overrides = {"use_clip": True, "use_class_loss": True, "use_ema": True, "use_l2": True, **overrides}
        metrics = run_training(run_cfg, out / name, seed, overrides)
        rows.append({
            "variant": name,
            "class_loss": overrides["use_class_loss"],
            "ema": overrides["use_ema"],
            "l2_penalty": overrides["use_l2"],
            "P": metrics["best_val_metric"],
            "seed": metrics["seed"],
            "clip_events": metrics["clip_events"],
        })
    (out / "ablation.json").write_text(_dump_json(rows))
    mark = lambda on: "✓" if on else "✗"  # noqa: E731
    lines = ["Model\tClass loss\tEMA\tL2 Penalty\tP"]
    for r in rows:
        lines.append(f"Ours\t{mark(r['class_loss'])}\t{mark(r['ema'])}\t{mark(r['l2_penalty'])}\t{r['P']!r}")
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    return rows


def cmd_ablate(args) -> int:
    run_cfg = load_config(args.config)
    run_ablation(run_cfg, args.out, args.seed)
    sys.stdout.write((Path(args.out) / "ablation.tsv").read_text())
    return 0


# ---------------------------------------------------------------- synth / gradcheck


def cmd_synth(args) -> int:
    widths = {"desk": (64, 96), "full": (1024, 1536)}[args.preset]
    audio_dim = args.audio_dim or widths[0]
    visual_dim = args.visual_dim or widths[1]
    data.synth_generate(args.out, n=args.n, seed=args.seed, noise=args.noise, audio_dim=audio_dim,
                        visual_dim=visual_dim, min_frames=args.min_frames, max_frames=args.max_frames,
                        mode=args.mode)
    if args.preset == "desk":
        mcfg = model.ModelConfig.desk(audio_in=audio_dim, visual_in=visual_dim)
        tcfg = training.TrainConfig(seed=args.seed)
    else:
        mcfg = model.ModelConfig(audio_in=audio_dim, visual_in=visual_dim)
        tcfg = training.TrainConfig.full_scale(seed=args.seed)
    if args.mode == "expr":
        mcfg = replace(mcfg, head_mode="expr", modality="visual")
    run_cfg = RunConfig(mcfg, tcfg, DataConfig("manifest.jsonl"))
    (Path(args.out) / "config.toml").write_text(dump_config(run_cfg))
    log.info("wrote %d samples to %s", args.n, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import THRESHOLD, run_gradcheck

    if args.d > 16 or args.T > 8:
        raise ConfigError("gradcheck is meant for small dims (d <= 16, T <= 8)")
    results = run_gradcheck(args.d, args.T, args.heads, args.eps, args.seed, corrupt_op=args.corrupt)
    failed = [r.op for r in results if not r.passed]
    report = {
        "dims": {"d": args.d, "T": args.T, "heads": args.heads},
        "eps": args.eps,
        "threshold": THRESHOLD,
        "ops": {r.op: r.max_rel_error for r in results},
        "failed": failed,
    }
    sys.stdout.write(_dump_json(report))
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="erifusion", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-signal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--mode", choices=("eri", "expr"), default="eri")
    p.add_argument("--audio-dim", type=int, default=None)
    p.add_argument("--visual-dim", type=int, default=None)
    p.add_argument("--min-frames", type=int, default=4)
    p.add_argument("--max-frames", type=int, default=16)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "evaluate a checkpoint"),
                              ("predict", cmd_predict, "write per-sample predictions")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--out", required=(name == "predict"))
        p.set_defaults(func=func)

    p = sub.add_parser("ensemble", help="average several checkpoints and evaluate")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("ablate", help="train the four trick-ablation variants")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get(LOG_ENV, "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FusionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
