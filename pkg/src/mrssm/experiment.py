"""Desk-scale experiment: train the three objectives and score the directional criteria.

One dataset is generated, the ``new``, ``mvae`` and ``concat`` objectives
are trained on it with identical budget and seed, and each checkpoint is
evaluated on the held-out split. Every artifact is cached under a directory
keyed by the digest of the configuration that produced it, so repeated runs
only pay for what changed.

    python -m mrssm.experiment --cache .cache
"""

from __future__ import annotations

import argparse
import json
import os
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .config import RunConfig
from .evaluation import EvalConfig, EvalResult, ModelPredictor, ablation_eval, subset_label
from .model import MissingModalityError, load_checkpoint, save_checkpoint
from .selftest import CheckResult
from .simulator import ACCEL, ANG_VEL, IMAGE_NAME, LIN_VEL, gen_dataset, read_dataset, write_dataset
from .training import train_run

# 140 held-out trajectories give more than 500 transition anchors at 1 s
DESK_OVERRIDES = {"data.n_val": 140}
VARIANTS = ("new", "mvae", "concat")
MIN_ANCHORS = 500

FULL = subset_label((LIN_VEL, ANG_VEL, ACCEL, IMAGE_NAME))
PROPRIO = subset_label((LIN_VEL, ANG_VEL, ACCEL))
VISION = subset_label((IMAGE_NAME,))


def desk_config(overrides=None) -> RunConfig:
    return RunConfig({**DESK_OVERRIDES, **(overrides or {})})


def _say(report, msg):
    if report is not None:
        report(msg)


def prepare_data(cfg: RunConfig, cache: Path, report=None) -> Path:
    out = cache / f"data-{cfg.digest(cfg.data_keys())}"
    if (out / "val" / "meta.json").exists():
        return out
    _say(report, f"generating data in {out}")
    ds = gen_dataset(cfg["data.n_train"] + cfg["data.n_val"], cfg["data.length"], cfg["seed"], cfg.sim_config())
    train, val = ds.split(cfg["data.n_val"])
    tmp = out.with_name(out.name + ".tmp")
    write_dataset(train, tmp / "train")
    write_dataset(val, tmp / "val")
    cfg.write(tmp / "config.json")
    os.replace(tmp, out)
    return out


def train_variant(cfg: RunConfig, variant: str, data_dir: Path, cache: Path, report=None) -> Path:
    tc = cfg.training_config(variant)
    out = cache / f"{variant}-{cfg.digest(cfg.train_keys())}"
    ckpt = out / "model.ckpt"
    if ckpt.exists():
        return ckpt
    out.mkdir(parents=True, exist_ok=True)
    _say(report, f"training {variant} into {out}")
    t0 = time.time()
    model, _ = train_run(read_dataset(data_dir / "train"), tc, cfg.model_config(),
                         metrics_path=out / "metrics.jsonl",
                         progress=lambda r: _say(report, f"  {variant} epoch {r['epoch']} loss {r['loss']:.1f}"))
    cfg.write(out / "config.json")
    (out / "timing.json").write_text(json.dumps({"train_seconds": time.time() - t0}))
    save_checkpoint(out / "model.tmp", model, {"elbo": variant, "seed": tc.seed})
    os.replace(out / "model.tmp", ckpt)
    return ckpt


def eval_variant(cfg: RunConfig, ckpt: Path, data_dir: Path, report=None) -> EvalResult:
    out = ckpt.parent / f"eval-{cfg.digest([k for k in cfg.values if k.startswith('eval.')])}"
    if (out / "results.json").exists():
        return EvalResult.read(out)
    model, _ = load_checkpoint(ckpt)
    ec: EvalConfig = cfg.eval_config()
    subsets = ec.subsets
    if model.config.fusion == "concat":
        subsets = (tuple(model.config.names),)
    _say(report, f"evaluating {ckpt.parent.name}")
    res = ablation_eval(ModelPredictor(model), read_dataset(data_dir / "val"), ec, subsets)
    res.write(out)
    return res


def concat_rejects_partial(ckpt: Path, data_dir: Path, cfg: RunConfig) -> bool:
    model, _ = load_checkpoint(ckpt)
    ds = read_dataset(data_dir / "val")
    try:
        ablation_eval(ModelPredictor(model), ds, cfg.eval_config(), [(IMAGE_NAME,)], include_control=False)
    except MissingModalityError:
        return True
    return False


def _median(res: EvalResult, label: str, horizon_s: float, group: str = "all"):
    st = res.stats(label, horizon_s, group)
    return st.median, st.n


def _check(name: str, passed: bool, detail: str, n: int) -> CheckResult:
    if n < MIN_ANCHORS:
        return CheckResult(name, False, f"{detail}; only {n} anchors (< {MIN_ANCHORS})")
    return CheckResult(name, bool(passed), f"{detail}; n={n}")


def desk_criteria(results: dict[str, EvalResult], concat_rejects: bool) -> list[CheckResult]:
    new, mvae, concat = results["new"], results["mvae"], results["concat"]
    out = []

    full, n = _median(new, FULL, 1.0, "transition")
    prop, _ = _median(new, PROPRIO, 1.0, "transition")
    out.append(_check("transition_gain", full <= 0.8 * prop,
                      f"full {full:.4f} m vs 0.8 x proprio {0.8 * prop:.4f} m (1 s, transition)", n))

    full, n = _median(new, FULL, 1.0, "steady")
    prop, _ = _median(new, PROPRIO, 1.0, "steady")
    out.append(_check("steady_ordering", full <= prop,
                      f"full {full:.4f} m vs proprio {prop:.4f} m (1 s, steady)", n))

    full, n = _median(new, FULL, 3.0)
    ctrl, _ = _median(new, "control", 3.0)
    out.append(_check("beats_control_3s", full < ctrl, f"full {full:.4f} m vs control {ctrl:.4f} m (3 s)", n))

    vis, n = _median(new, VISION, 1.0)
    ctrl, _ = _median(new, "control", 1.0)
    out.append(_check("vision_beats_control_1s", vis < ctrl,
                      f"vision-only {vis:.4f} m vs control {ctrl:.4f} m (1 s)", n))

    vis_new, n = _median(new, VISION, 1.0)
    vis_mvae, _ = _median(mvae, VISION, 1.0)
    out.append(_check("new_vs_mvae_vision", vis_new <= vis_mvae,
                      f"vision-only new {vis_new:.4f} m vs mvae {vis_mvae:.4f} m (1 s)", n))

    cat, n = _median(concat, FULL, 1.0)
    full, _ = _median(new, FULL, 1.0)
    ok = cat <= 2 * full and concat_rejects
    out.append(_check("concat_sanity", ok, f"concat {cat:.4f} m vs 2 x new {2 * full:.4f} m (1 s); "
                      f"partial subset rejected: {concat_rejects}", n))
    return out


def run_desk(cache_dir, cfg: RunConfig | None = None,
             report: Callable[[str], None] | None = None) -> tuple[list[CheckResult], dict[str, EvalResult], Path]:
    """Generate, train and evaluate (all cached); returns the criteria, results and the new-ELBO checkpoint."""
    cfg = cfg or desk_config()
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    data_dir = prepare_data(cfg, cache, report)
    ckpts = {v: train_variant(cfg, v, data_dir, cache, report) for v in VARIANTS}
    results = {v: eval_variant(cfg, ckpts[v], data_dir, report) for v in VARIANTS}
    checks = desk_criteria(results, concat_rejects_partial(ckpts["concat"], data_dir, cfg))
    return checks, results, ckpts["new"]


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m mrssm.experiment", description=__doc__.splitlines()[0])
    p.add_argument("--cache", default=".cache", help="artifact cache directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    cfg = RunConfig.load(None, [f"{k}={json.dumps(v)}" for k, v in DESK_OVERRIDES.items()] + args.set)
    checks, results, _ = run_desk(args.cache, cfg, report=print)
    for label in (FULL, PROPRIO, VISION, "none", "control"):
        for h in cfg["eval.horizons"]:
            hs = round(h * cfg["eval.dt"], 6)
            try:
                med, n = _median(results["new"], label, hs)
            except KeyError:
                continue
            print(f"new {label:28s} {hs:3.1f}s median {med:.4f} m (n={n})")
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


if __name__ == "__main__":
    raise SystemExit(main())
