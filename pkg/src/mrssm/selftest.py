"""Property checks against independent oracles.

Each check returns a :class:`CheckResult`; ``run_all`` executes the whole
suite. The checks use their own fixed seeds so results are reproducible.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffmath as dm
from .distributions import DiagGaussian, kl, poe_fuse
from .evaluation import integrate_pose
from .model import MRSSM, ModalitySpec, ModelConfig, ObservationSet, load_checkpoint, save_checkpoint
from .simulator import SimConfig, gen_dataset
from .training import (Batch, TrainingConfig, draw_noise, elbo_mvae, elbo_new, fullset_posteriors,
                       sample_subsets, schedule_loss, train_run)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


# ----------------------------------------------------------------------
# 1. product of experts vs grid integration


def poe_grid_oracle(means, stds, n: int = 400_001) -> tuple[float, float]:
    """Mean and stddev of the normalized product density, by trapezoid integration."""
    means, stds = np.asarray(means, float), np.asarray(stds, float)
    prec = np.sum(1 / stds**2)
    centre = np.sum(means / stds**2) / prec
    half = 14.0 / math.sqrt(prec)
    x = np.linspace(centre - half, centre + half, n)
    logp = np.sum(-0.5 * ((x[:, None] - means) / stds) ** 2 - np.log(stds), axis=1)
    p = np.exp(logp - logp.max())
    z = np.trapezoid(p, x)
    mu = np.trapezoid(x * p, x) / z
    var = np.trapezoid((x - mu) ** 2 * p, x) / z
    return float(mu), float(math.sqrt(var))


def check_poe(trials: int = 40, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    with dm.precision(np.float64):
        for _ in range(trials):
            k = int(rng.integers(2, 5))
            means = rng.normal(0, 2, size=k)
            stds = rng.uniform(0.2, 3.0, size=k)
            fused = poe_fuse([DiagGaussian(np.array([m]), np.array([s])) for m, s in zip(means, stds)])
            mu, sd = poe_grid_oracle(means, stds)
            worst = max(worst, abs(float(fused.mean.data[0]) - mu), abs(float(fused.stddev.data[0]) - sd))
    return CheckResult("poe_vs_grid", worst < 1e-6, f"max abs deviation {worst:.2e} over {trials} products")


# ----------------------------------------------------------------------
# 2. KL closed form vs Monte Carlo


def check_kl(pairs: int = 50, samples: int = 1_000_000, dim: int = 3, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = []
    with dm.precision(np.float64):
        for i in range(pairs):
            mq, mp = rng.normal(0, 1, dim), rng.normal(0, 1, dim)
            sq, sp = rng.uniform(0.3, 2.0, dim), rng.uniform(0.3, 2.0, dim)
            exact = float(kl(DiagGaussian(mq, sq), DiagGaussian(mp, sp)).data)
            x = mq + sq * rng.standard_normal((samples, dim))
            lq = np.sum(-0.5 * ((x - mq) / sq) ** 2 - np.log(sq), axis=1)
            lp = np.sum(-0.5 * ((x - mp) / sp) ** 2 - np.log(sp), axis=1)
            d = lq - lp
            est, se = float(d.mean()), float(d.std(ddof=1) / math.sqrt(samples))
            if not (abs(est - exact) <= 0.01 * abs(exact) or abs(est - exact) <= 3 * se):
                bad.append(i)
    return CheckResult("kl_vs_monte_carlo", not bad,
                       f"{pairs - len(bad)}/{pairs} pairs within 1% or 3 standard errors")


# ----------------------------------------------------------------------
# 3. gradient check of a miniature model


def miniature_config() -> ModelConfig:
    mods = (ModalitySpec("vel", "dense", (2,), 1.0), ModalitySpec("cam", "image", (3, 8, 8), 0.5))
    return ModelConfig(mods, action_dim=2, deter_dim=8, stoch_dim=4, embed_dim=6, hidden_dim=6,
                       image_channels=(2, 3, 4))


def miniature_batch(config: ModelConfig, T: int, B: int, rng) -> Batch:
    obs = {m.name: rng.normal(0, 0.5, size=(T, B) + m.shape) for m in config.modalities}
    return Batch(rng.normal(0, 1, size=(T, B, config.action_dim)), obs)


def check_gradients(T: int = 3, B: int = 2, coords: int = 6, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = miniature_config()
    base = MRSSM(cfg, rng=rng)
    # non-zero biases so every path carries gradient
    point = {k: v.data.astype(np.float64) + (rng.normal(0, 0.1, v.shape) if k.endswith(".b") else 0.0)
             for k, v in base.params.items()}
    batch = miniature_batch(cfg, T, B, rng)
    noise = draw_noise(rng, T, B, cfg.stoch_dim).astype(np.float64)
    schedule = sample_subsets(cfg.names, 1, rng)

    def loss(params):
        m = MRSSM(cfg, params)
        return schedule_loss(m, batch, schedule, noise, 1.0, "new")[0] + \
            schedule_loss(m, batch, schedule, noise, 1.0, "mvae")[0]

    errs = dm.grad_errors(loss, point, step=1e-5, max_coords=coords, rng=rng)
    groups = base.parameter_groups()
    per_group = {g: max(errs[n] for n in names) for g, names in groups.items()}
    worst_group = max(per_group, key=per_group.get)
    ok = all(e < 1e-3 for e in per_group.values())
    return CheckResult("gradient_check", ok, f"{len(per_group)} parameter groups, worst {worst_group} "
                       f"rel err {per_group[worst_group]:.2e}")


# ----------------------------------------------------------------------
# 4. full-subset equivalence of the two objectives


def check_fullset_equivalence(T: int = 4, B: int = 3, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = miniature_config()
    model = MRSSM(cfg, rng=rng)
    batch = miniature_batch(cfg, T, B, rng)
    noise = draw_noise(rng, T, B, cfg.stoch_dim)
    full = cfg.names
    with dm.precision(np.float64):
        m64 = model.astype(np.float64)
        a = float(elbo_new(m64, batch, full, fullset_posteriors(m64, batch, noise), noise).data)
        b = float(elbo_mvae(m64, batch, full, noise).data)
    diff = abs(a - b)
    return CheckResult("fullset_equivalence", diff <= 1e-5, f"|new - mvae| = {diff:.2e}")


# ----------------------------------------------------------------------
# 5. posterior contraction


def check_contraction(steps: int = 1000, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    cfg = miniature_config()
    model = MRSSM(cfg, rng=rng)
    names = cfg.names
    bad = 0
    state = model.initial_state((1,))
    for i in range(steps):
        present = [n for n in names if rng.random() < 0.5]
        obs = ObservationSet({m.name: rng.normal(0, 1, (1,) + m.shape).astype(np.float32)
                              for m in cfg.modalities if m.name in present})
        if i % 50 == 0:
            state = model.initial_state((1,))
        noise = rng.standard_normal((1, cfg.stoch_dim)).astype(np.float32)
        state = model.filter_step(state, rng.normal(0, 1, (1, 2)).astype(np.float32), obs, noise)
        ps, qs = state.prior.stddev.data, state.posterior.stddev.data
        if present:
            bad += int(not np.all(qs < ps))
        else:
            bad += int(not np.array_equal(qs, ps))
    return CheckResult("posterior_contraction", bad == 0, f"{steps - bad}/{steps} filter steps satisfied")


# ----------------------------------------------------------------------
# 6. pose integration vs a fine Euler oracle


def euler_oracle(v: float, w: float, duration: float, substeps: int = 1_000_000) -> tuple[float, float]:
    """Forward Euler on the unicycle with ``substeps`` steps (vectorized)."""
    dt = duration / substeps
    theta = w * dt * np.arange(substeps)
    return float(np.sum(v * np.cos(theta)) * dt), float(np.sum(v * np.sin(theta)) * dt)


def check_pose_integration() -> CheckResult:
    straight = integrate_pose(np.ones(10), np.zeros(10), 0.1)
    ok_line = abs(straight[0] - 1.0) <= 1e-9 and abs(straight[1]) <= 1e-9
    quarter = integrate_pose([1.0], [math.pi / 2], 1.0)
    ex, ey = euler_oracle(1.0, math.pi / 2, 1.0)
    dev_oracle = max(abs(quarter[0] - ex), abs(quarter[1] - ey))
    dev_exact = max(abs(quarter[0] - 2 / math.pi), abs(quarter[1] - 2 / math.pi))
    ok = ok_line and dev_exact <= 1e-6 and dev_oracle <= 1e-5
    return CheckResult("pose_integration", ok, f"straight {straight[:2].round(12).tolist()}, quarter-circle "
                       f"deviation {dev_exact:.1e} (Euler oracle {dev_oracle:.1e})")


# ----------------------------------------------------------------------
# 7. every modality subset on a trained checkpoint


def tiny_checkpoint(path, seed: int = 7) -> None:
    sim = SimConfig(world_size=40.0, image_size=8)
    ds = gen_dataset(6, 40, seed, sim)
    mods = tuple(ModalitySpec(m.name, m.kind, m.shape, m.recon_weight) for m in ds.modalities)
    cfg = ModelConfig(mods, deter_dim=16, stoch_dim=4, embed_dim=16, hidden_dim=16, image_channels=(4, 4, 8))
    tc = TrainingConfig(sequence_length=10, batch_size=4, epochs=2, seed=seed)
    model, _ = train_run(ds, tc, cfg)
    save_checkpoint(path, model, {"dataset": "selftest"})


def check_missing_modalities(checkpoint=None, T: int = 6, H: int = 4, seed: int = 8) -> CheckResult:
    with tempfile.TemporaryDirectory() as tmp:
        if checkpoint is None:
            checkpoint = Path(tmp) / "tiny.ckpt"
            tiny_checkpoint(checkpoint)
        model, _ = load_checkpoint(checkpoint)
    cfg = model.config
    rng = np.random.default_rng(seed)
    B = 2
    obs = {m.name: rng.normal(0, 0.5, (T, B) + m.shape).astype(np.float32) for m in cfg.modalities}
    acts = rng.normal(0, 1, (T + H, B, cfg.action_dim)).astype(np.float32)
    names = cfg.names
    subsets = [c for r in range(len(names) + 1) for c in combinations(names, r)]
    if cfg.fusion == "concat":
        subsets = [tuple(names)]
    failed = []
    for sub in subsets:
        try:
            sets = [ObservationSet({n: obs[n][t] for n in sub}) for t in range(T)]
            noise = [np.zeros((B, cfg.stoch_dim), np.float32)] * T
            states = model.rollout_filter(model.initial_state((B,)), list(acts[:T]), sets, noise)
            pred = model.predict_open_loop(states[-1], list(acts[T:]))
            vals = [st.s.data for st in states] + [v.data for _, d in pred for v in d.values()]
            if not all(np.all(np.isfinite(v)) for v in vals):
                failed.append(sub)
        except Exception:  # noqa: BLE001 - any failure counts against totality
            failed.append(sub)
    return CheckResult("missing_modality_totality", not failed,
                       f"{len(subsets) - len(failed)}/{len(subsets)} modality subsets filtered and predicted"
                       + (f"; failed {failed}" if failed else ""))


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "poe": check_poe,
    "kl": check_kl,
    "gradients": check_gradients,
    "fullset": check_fullset_equivalence,
    "contraction": check_contraction,
    "pose": check_pose_integration,
    "missing": check_missing_modalities,
}


def run_all(checkpoint=None, report: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS.items():
        t0 = time.perf_counter()
        res = fn(checkpoint) if name == "missing" else fn()
        res.seconds = time.perf_counter() - t0
        results.append(res)
        if report is not None:
            report(res.line())
    return results
