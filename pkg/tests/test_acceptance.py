"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (shown with ``-s`` and in the terminal
summary) before asserting. The synthetic-training criteria are marked slow.
"""

import json
import logging
import time
from collections import OrderedDict
from dataclasses import replace

import numpy as np
import pytest

from erifusion import cli, data, losses, model, training
from erifusion import tensor as tc
from erifusion.config import dump_config, load_config

SEEDS = range(5)


# ---------------------------------------------------------------- shared synthetic draw


@pytest.fixture(scope="session")
def draw(tmp_path_factory):
    """The n=2000, noise=0.1 draw with its desk-default run config."""
    root = tmp_path_factory.mktemp("draw")
    assert cli.main(["synth", "--out", str(root), "--n", "2000", "--noise", "0.1", "--seed", "0"]) == 0
    return root, load_config(root / "config.toml")


@pytest.fixture(scope="session")
def runs(draw, tmp_path_factory):
    """Memoised training runs keyed by (modality, seed)."""
    root, run_cfg = draw
    out_root = tmp_path_factory.mktemp("runs")
    cache = {}

    def get(modality, seed):
        if (modality, seed) not in cache:
            cfg = replace(run_cfg, model=replace(run_cfg.model, modality=modality))
            start = time.perf_counter()
            metrics = cli.run_training(cfg, out_root / f"{modality}_{seed}", seed)
            cache[modality, seed] = (metrics, time.perf_counter() - start)
        return cache[modality, seed]

    return get


# ---------------------------------------------------------------- 2


def test_c2_gradient_integrity(acceptance, capsys):
    start = time.perf_counter()
    code = cli.main(["gradcheck", "--d", "8", "--T", "4", "--heads", "2"])
    elapsed = time.perf_counter() - start
    report = json.loads(capsys.readouterr().out)
    worst_op = max(report["ops"], key=report["ops"].get)
    ok = code == 0 and not report["failed"] and max(report["ops"].values()) < 1e-4 \
        and "eri_forward_loss" in report["ops"] and elapsed < 120
    with capsys.disabled():
        acceptance("C2 gradient integrity", ok,
                   f"{len(report['ops'])} ops, worst {worst_op}={report['ops'][worst_op]:.2e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3


def test_c3_dimension_bookkeeping(acceptance, capsys):
    rng = np.random.default_rng(2024)
    violations = []
    for i in range(50):
        heads_m = int(rng.choice([1, 2, 4]))
        heads_i = int(rng.choice([1, 2, 4]))
        d = int(np.lcm(heads_m, heads_i) * rng.integers(1, 4))
        cfg = model.ModelConfig(d=d, audio_in=int(rng.integers(2, 12)), visual_in=int(rng.integers(2, 12)),
                                heads_modality=heads_m, heads_interaction=heads_i, T=int(rng.integers(1, 6)),
                                proj_dim=int(rng.integers(1, 9)), depth_modality=int(rng.integers(1, 3)),
                                depth_interaction=int(rng.integers(1, 3)), embed_width=int(rng.choice([1, 3])))
        params = model.init_params(cfg, seed=i)
        b = int(rng.integers(1, 4))
        audio = rng.standard_normal((b, cfg.T, cfg.audio_in))
        visual = rng.standard_normal((b, cfg.T, cfg.visual_in))
        br = model.forward(audio, visual, params, cfg).branch
        expected = {"g_a": 3 * d, "g_v": 3 * d, "h_av": 2 * d, "g_av": 6 * d, "g_cat": 6 * d}
        for name, width in expected.items():
            shape = getattr(br, name).data.shape
            if shape != (b, cfg.T, width):
                violations.append((i, name, shape, width))
    with capsys.disabled():
        acceptance("C3 dimension bookkeeping", not violations, f"50 configs, {len(violations)} violations")
    assert not violations


# ---------------------------------------------------------------- 4 / 5


@pytest.mark.slow
def test_c4_synthetic_end_to_end(runs, draw, acceptance, capsys):
    _, run_cfg = draw
    metrics, seconds = runs("full", 0)
    p = metrics["test"]["mean_pearson"]
    ok = p >= 0.8 and seconds < 15 * 60 and run_cfg.train.batch_size == 32 \
        and run_cfg.train.max_epochs == 100 and run_cfg.train.patience == 15
    with capsys.disabled():
        acceptance("C4 synthetic end-to-end", ok,
                   f"test mean Pearson {p:.4f} after {metrics['epochs_run']} epochs, {seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_c5_modality_ordering(runs, acceptance, capsys):
    rows, good = [], 0
    for seed in SEEDS:
        a, v, f = (runs(m, seed)[0]["test"]["mean_pearson"] for m in ("audio", "visual", "full"))
        ordered = v - a >= 0.02 and f - v >= 0.02
        good += ordered
        rows.append(f"s{seed}:{a:.3f}<{v:.3f}<{f:.3f}{'' if ordered else '!'}")
    ok = good >= 4
    with capsys.disabled():
        acceptance("C5 modality ordering", ok, f"{good}/5 seeds ordered; " + " ".join(rows))
    assert ok


# ---------------------------------------------------------------- 6


@pytest.fixture(scope="module")
def small_draw(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    assert cli.main(["synth", "--out", str(root), "--n", "300", "--seed", "3"]) == 0
    cfg = load_config(root / "config.toml")
    cfg = replace(cfg, train=replace(cfg.train, max_epochs=6, patience=3))
    (root / "ablate.toml").write_text(dump_config(cfg))
    return root


def test_c6_ablation_harness(small_draw, tmp_path, acceptance, capsys, caplog):
    caplog.set_level(logging.INFO, logger="erifusion")
    assert cli.main(["ablate", "--config", str(small_draw / "ablate.toml"), "--out", str(tmp_path / "abl"),
                     "--seed", "7"]) == 0
    table = capsys.readouterr().out.strip().splitlines()
    rows = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    base = load_config(small_draw / "ablate.toml")

    mismatches = []
    for row in rows:
        cfg = replace(base, train=replace(base.train, use_class_loss=row["class_loss"], use_ema=row["ema"],
                                          use_l2=row["l2_penalty"]))
        path = tmp_path / f"{row['variant']}.toml"
        path.write_text(dump_config(cfg).replace('"manifest.jsonl"', json.dumps(str(small_draw / "manifest.jsonl"))))
        assert cli.main(["train", "--config", str(path), "--out", str(tmp_path / row["variant"]),
                         "--seed", "7"]) == 0
        capsys.readouterr()
        solo = json.loads((tmp_path / row["variant"] / "metrics.json").read_text())["best_val_metric"]
        if abs(solo - row["P"]) > 1e-12:
            mismatches.append((row["variant"], solo, row["P"]))

    all_on = json.loads((tmp_path / "abl" / "all_on" / "metrics.json").read_text())
    ckpt = model.load_checkpoint(tmp_path / "abl" / "all_on" / "checkpoint.fusn")
    active = all_on["active"]
    logged = any("gradient clipping triggered" in r.getMessage() for r in caplog.records)
    ok = (len(rows) == 4 and len(table) == 5 and not mismatches and all_on["clip_events"] > 0 and logged
          and active["ema"] and active["l2"] and active["clip"] and ckpt.meta["eval_weights"] == "ema"
          and any(not np.array_equal(ckpt.params[k], ckpt.ema[k]) for k in ckpt.params))
    with capsys.disabled():
        acceptance("C6 ablation harness", ok,
                   f"{len(rows)} rows, {len(mismatches)} mismatches, all-on clip events {all_on['clip_events']}")
    assert ok


# ---------------------------------------------------------------- 7


def naive_pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / (sxx**0.5 * syy**0.5)


def naive_f1(pred, target, k):
    scores = []
    for c in range(k):
        tp = sum(1 for p, t in zip(pred, target) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, target) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, target) if p != c and t == c)
        scores.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return scores, sum(scores) / k


def test_c7_metric_oracles(acceptance, capsys):
    rng = np.random.default_rng(7)
    worst_p = worst_f = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 30))
        pred, target = rng.standard_normal((n, 7)), rng.standard_normal((n, 7))
        if rng.random() < 0.1:
            pred[:, rng.integers(7)] = 0.25  # constant column
        got = losses.pearson_per_class(pred, target)
        want = [naive_pearson(list(pred[:, j]), list(target[:, j])) for j in range(7)]
        worst_p = max(worst_p, float(np.max(np.abs(got.per_class - want))),
                      abs(got.mean - sum(want) / 7))

        k = int(rng.integers(2, 9))
        p_cls, t_cls = rng.integers(0, k, n), rng.integers(0, k, n)
        f1, mean = losses.macro_f1(p_cls, t_cls, k)
        want_f1, want_mean = naive_f1(list(p_cls), list(t_cls), k)
        worst_f = max(worst_f, float(np.max(np.abs(f1 - want_f1))), abs(mean - want_mean))

    worst_focal = 0.0
    for _ in range(200):
        n, k = int(rng.integers(1, 20)), int(rng.integers(2, 9))
        logits, target = 3 * rng.standard_normal((n, k)), rng.integers(0, k, n)
        focal = losses.focal_loss_from_logits(logits, target, losses.FocalParams(alpha_t=1.0, gamma=0.0)).item()
        ce = losses.cross_entropy_loss(logits, target).item()
        worst_focal = max(worst_focal, abs(focal - ce))

    ok = worst_p <= 1e-10 and worst_f <= 1e-10 and worst_focal <= 1e-12
    with capsys.disabled():
        acceptance("C7 metric oracles", ok,
                   f"pearson {worst_p:.1e}, macro F1 {worst_f:.1e}, focal(γ=0) vs CE {worst_focal:.1e}")
    assert ok


# ---------------------------------------------------------------- 8


def test_c8_training_recipe(acceptance, capsys):
    rng = np.random.default_rng(8)
    worst_norm, triggered = 0.0, 0
    for _ in range(500):
        scale = 10 ** rng.uniform(-3, 3)
        grads = OrderedDict((f"p{i}", scale * rng.standard_normal(rng.integers(1, 7, 2))) for i in range(5))
        out, _, clipped = training.clip_gradients(grads, 0.1)
        if clipped:
            triggered += 1
            worst_norm = max(worst_norm, training.global_norm(out))
    clip_ok = triggered > 0 and worst_norm <= 0.1 + 1e-12

    w0, target = rng.standard_normal(6), rng.standard_normal(6)
    ema, worst_ema = {"w": w0.copy()}, 0.0
    for k in range(1, 101):
        training.ema_update(ema, {"w": target}, 0.99)
        worst_ema = max(worst_ema, float(np.max(np.abs((ema["w"] - target) - 0.99**k * (w0 - target)))))
    ema_ok = worst_ema <= 1e-12

    weights = training.TrainConfig.full_scale().loss_weights
    value = losses.eri_loss(0.5, 2.0, weights)
    tensor_value = losses.eri_loss(tc.as_tensor(0.5), tc.as_tensor(2.0), weights).item()
    loss_ok = abs(value - 0.52) < 1e-15 and abs(tensor_value - 0.52) < 1e-15

    ok = clip_ok and ema_ok and loss_ok
    with capsys.disabled():
        acceptance("C8 training-recipe properties", ok,
                   f"post-clip max norm {worst_norm:.15f} over {triggered} clips, EMA err {worst_ema:.1e}, "
                   f"eri_loss(0.5, 2.0)={value!r}")
    assert ok


# ---------------------------------------------------------------- 9


def test_c9_determinism(small_draw, tmp_path, acceptance, capsys):
    config = str(small_draw / "ablate.toml")
    for name in ("a", "b"):
        assert cli.main(["train", "--config", config, "--out", str(tmp_path / name)]) == 0
    capsys.readouterr()
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("history.jsonl", "checkpoint.fusn")}
    ok = all(same.values())
    with capsys.disabled():
        acceptance("C9 determinism", ok, ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in same.items()))
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_format_round_trip(small_draw, tmp_path, acceptance, capsys):
    rng = np.random.default_rng(10)
    feat_ok = True
    for i in range(20):
        values = rng.standard_normal((int(rng.integers(1, 40)), int(rng.integers(1, 70))))
        data.write_feature_file(tmp_path / f"{i}.feat", values)
        first = (tmp_path / f"{i}.feat").read_bytes()
        data.write_feature_file(tmp_path / f"{i}b.feat", data.load_feature_file(tmp_path / f"{i}.feat").values)
        feat_ok &= first == (tmp_path / f"{i}b.feat").read_bytes()
    for path in sorted((small_draw / "features").iterdir())[:20]:
        feat_ok &= data.feat_bytes(data.load_feature_file(path).values) == path.read_bytes()

    cfg = model.ModelConfig.desk()
    params = model.params_to_arrays(model.init_params(cfg, seed=3))
    ema = {k: v + 0.5 for k, v in params.items()}
    ckpt = model.Checkpoint(cfg, params, ema, {"seed": 3, "eval_weights": "ema", "best_metric": 0.1 + 0.2})
    model.save_checkpoint(tmp_path / "a.fusn", ckpt)
    model.save_checkpoint(tmp_path / "b.fusn", model.load_checkpoint(tmp_path / "a.fusn"))
    ckpt_ok = (tmp_path / "a.fusn").read_bytes() == (tmp_path / "b.fusn").read_bytes()

    ok = bool(feat_ok and ckpt_ok)
    with capsys.disabled():
        acceptance("C10 format round-trip", ok, f"FEAT {'ok' if feat_ok else 'differs'}, "
                                               f"checkpoint {'ok' if ckpt_ok else 'differs'}")
    assert ok
