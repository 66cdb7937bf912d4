"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .evaluation import EvalConfig, ModelPredictor, ablation_eval, collect_anchors, control_baseline, \
    final_pose_error, integrate_pose
from .model import load_checkpoint, save_checkpoint
from .simulator import DatasetError, Dataset, gen_dataset, read_dataset, write_dataset
from .training import ELBO_VARIANTS, train_run

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

log = logging.getLogger("mrssm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())


def _load_split(data_dir, split: str) -> Dataset:
    d = Path(data_dir)
    if (d / split / "meta.json").exists():
        d = d / split
    return read_dataset(d)


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    n_train, n_val = cfg["data.n_train"], cfg["data.n_val"]
    ds = gen_dataset(n_train + n_val, cfg["data.length"], cfg["seed"], cfg.sim_config())
    train, val = ds.split(n_val) if n_val else (ds, None)
    write_dataset(train, out / "train")
    if val is not None:
        write_dataset(val, out / "val")
    cfg.write(out / "config.json")
    print(f"wrote {len(train)} training and {n_val} held-out trajectories to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = _load_split(args.data, "train")
    tc = cfg.training_config(args.elbo)
    cfg.write(out / "config.json")

    def progress(rec):
        print(f"epoch {rec['epoch']}: loss {rec['loss']:.2f} kl {rec['kl']:.3f}", flush=True)

    model, _ = train_run(ds, tc, cfg.model_config(), metrics_path=out / "metrics.jsonl", progress=progress)
    save_checkpoint(out / "model.ckpt", model, {"elbo": tc.elbo_variant, "seed": tc.seed})
    print(f"checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, _ = load_checkpoint(args.checkpoint)
    ds = _load_split(args.data, "val")
    ec = cfg.eval_config()
    subsets = ec.subsets
    if model.config.fusion == "concat":
        subsets = (tuple(model.config.names),)
    res = ablation_eval(ModelPredictor(model), ds, ec, subsets)
    res.write(out)
    cfg.write(out / "config.json")
    for r in res.rows:
        print(f"{r.ablation_subset:32s} {r.horizon_s:4.1f}s {r.group:10s} median {r.median_m:.4f} m  n={r.n}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.trajectory)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"trajectory index {args.index} out of range (dataset has {len(ds)})")
    one = Dataset([ds.trajectories[args.index]], ds.modalities, ds.dt)
    ec = EvalConfig(horizons=(args.horizon,), context=args.context, stride=1)
    anchors = collect_anchors(one, ec.context, args.horizon, 1)
    hit = np.flatnonzero(anchors.t == args.t)
    if hit.size == 0:
        raise UsageError(f"t={args.t} needs {args.context - 1} <= t and t + H < {len(one.trajectories[0])}")
    a = anchors.take(hit)
    subset = frozenset(args.subset.split(",")) if args.subset else frozenset(model.config.names)
    if args.subset == "none":
        subset = frozenset()
    vel = ModelPredictor(model).predict(a, subset)
    pred = integrate_pose(vel[..., 0], vel[..., 1], ds.dt)[:, 0]
    true = integrate_pose(a.true_velocity[..., 0], a.true_velocity[..., 1], ds.dt)[:, 0]
    ctrl = control_baseline(a.future_actions, ds.dt)[:, 0]
    print("step  v_pred   w_pred   v_true   w_true")
    for k in range(args.horizon):
        print(f"{k + 1:4d} {vel[k, 0, 0]:8.4f} {vel[k, 0, 1]:8.4f} "
              f"{a.true_velocity[k, 0, 0]:8.4f} {a.true_velocity[k, 0, 1]:8.4f}")
    print(f"predicted final pose  x={pred[0]:.4f} y={pred[1]:.4f} theta={pred[2]:.4f}")
    print(f"true final pose       x={true[0]:.4f} y={true[1]:.4f} theta={true[2]:.4f}")
    print(f"translation error {float(final_pose_error(pred, true)):.4f} m "
          f"(control baseline {float(final_pose_error(ctrl, true)):.4f} m)")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from .selftest import run_all

    results = run_all(args.checkpoint, report=print)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"selftest FAILED: {', '.join(failed)}")
        return EXIT_SELFTEST
    print("selftest passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mrssm", description="Multimodal recurrent state-space model toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file of dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        return sp

    g = with_config(sub.add_parser("gen-data", help="generate a simulated dataset"))
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = with_config(sub.add_parser("train", help="train a model"))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--elbo", choices=ELBO_VARIANTS, default=None)
    t.set_defaults(fn=cmd_train)

    e = with_config(sub.add_parser("eval", help="modality-ablation evaluation"))
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    pr = sub.add_parser("predict", help="predict one anchor of one trajectory")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--trajectory", required=True, help="dataset directory")
    pr.add_argument("--index", type=int, default=0, help="trajectory index in the dataset")
    pr.add_argument("--t", type=int, required=True, help="anchor step")
    pr.add_argument("--horizon", type=int, default=10)
    pr.add_argument("--context", type=int, default=20)
    pr.add_argument("--subset", default=None, help="comma-separated modalities, or 'none'")
    pr.set_defaults(fn=cmd_predict)

    s = sub.add_parser("selftest", help="run the property checks")
    s.add_argument("--checkpoint", default=None, help="checkpoint for the missing-modality check")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"mrssm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as e:
        print(f"mrssm: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DatasetError) as e:
        print(f"mrssm: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"mrssm: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
