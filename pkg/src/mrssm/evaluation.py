"""Pose-prediction metrics, the Control baseline and modality ablations.

Every anchor ``t`` of a trajectory is scored the same way: a predictor sees
actions and (possibly ablated) observations up to ``t``, plus the planned
actions for ``t+1 .. t+H``, and returns linear/angular velocities for those
steps. The velocities are integrated from the identity pose and compared
with the pose integrated from the ground-truth velocities.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .model import MRSSM, LatentState, MissingModalityError, ObservationSet
from .simulator import ANG_VEL, LIN_VEL, Dataset, Trajectory, advance_pose, label_transitions


@dataclass(frozen=True)
class EvalConfig:
    horizons: tuple[int, ...] = (10, 30)
    context: int = 20
    subsets: tuple[tuple[str, ...], ...] = ()
    dt: float = 0.1
    stride: int = 5
    chunk: int = 512

    def __post_init__(self):
        if not self.horizons or min(self.horizons) < 1:
            raise ValueError("every horizon must be >= 1")
        if self.context < 1:
            raise ValueError("context must be >= 1")
        if self.dt <= 0 or self.stride < 1:
            raise ValueError("dt must be > 0 and stride >= 1")


@dataclass(frozen=True)
class ErrorStats:
    median: float
    q1: float
    q3: float
    rmse: float
    n: int

    @property
    def empty(self) -> bool:
        return self.n == 0

    @classmethod
    def from_errors(cls, errors) -> "ErrorStats":
        e = np.asarray(errors, dtype=np.float64).ravel()
        if e.size == 0:
            nan = float("nan")
            return cls(nan, nan, nan, nan, 0)
        q1, med, q3 = np.percentile(e, [25, 50, 75])
        return cls(float(med), float(q1), float(q3), float(np.sqrt(np.mean(e * e))), int(e.size))


# ----------------------------------------------------------------------
# pose integration


def integrate_pose(v_seq, w_seq, dt: float, start=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Fold the unicycle arc update over velocity sequences.

    ``v_seq``/``w_seq`` have time on axis 0; any trailing axes are batch
    axes. Returns ``(x, y, theta)`` stacked on axis 0.
    """
    v = np.asarray(v_seq, dtype=np.float64)
    w = np.asarray(w_seq, dtype=np.float64)
    if v.shape != w.shape:
        raise ValueError(f"integrate_pose: v {v.shape} vs omega {w.shape}")
    if v.shape[0] < 1:
        raise ValueError("integrate_pose: need at least one step")
    x, y, th = (np.broadcast_to(np.asarray(c, dtype=np.float64), v.shape[1:]).copy() for c in start)
    for k in range(v.shape[0]):
        x, y, th = advance_pose(x, y, th, v[k], w[k], dt)
    return np.stack([x, y, th])


def final_pose_error(pred_pose, true_pose) -> np.ndarray:
    """Translation distance between poses; rotation is ignored."""
    p = np.asarray(pred_pose, dtype=np.float64)
    q = np.asarray(true_pose, dtype=np.float64)
    return np.hypot(p[0] - q[0], p[1] - q[1])


def control_baseline(actions, dt: float) -> np.ndarray:
    """Final pose if the commanded velocities were attained exactly. ``actions``: (H, ..., 2)."""
    a = np.asarray(actions, dtype=np.float64)
    if a.shape[0] < 1:
        raise ValueError("control_baseline: horizon must be >= 1")
    return integrate_pose(a[..., 0], a[..., 1], dt)


# ----------------------------------------------------------------------
# anchors


@dataclass
class AnchorBatch:
    """Aligned windows around a set of anchors; time is axis 0, anchors axis 1."""

    traj_index: np.ndarray                # (N,)
    t: np.ndarray                         # (N,) anchor step
    context_actions: np.ndarray           # (C, N, 2)
    context_obs: dict[str, np.ndarray]    # name -> (C, N, *shape)
    future_actions: np.ndarray            # (H, N, 2)
    true_velocity: np.ndarray             # (H, N, 2) ground-truth v, omega
    transition: np.ndarray                # (N,) bool

    def __len__(self):
        return len(self.t)

    def take(self, idx) -> "AnchorBatch":
        return AnchorBatch(self.traj_index[idx], self.t[idx], self.context_actions[:, idx],
                           {k: v[:, idx] for k, v in self.context_obs.items()},
                           self.future_actions[:, idx], self.true_velocity[:, idx], self.transition[idx])


def anchor_times(T: int, context: int, horizon: int, stride: int = 5) -> np.ndarray:
    """Anchors ``t`` with a full context window ending at ``t`` and ``t + H`` inside the trajectory."""
    return np.arange(context - 1, T - horizon, stride)


def collect_anchors(dataset: Dataset, context: int, horizon: int, stride: int = 5) -> AnchorBatch:
    idx, ts, ca, fa, tv, tr = [], [], [], [], [], []
    obs: dict[str, list] = {n: [] for n in dataset.trajectories[0].observations} if len(dataset) else {}
    for n, traj in enumerate(dataset.trajectories):
        trans = label_transitions(traj, horizon)
        for t in anchor_times(len(traj), context, horizon, stride):
            idx.append(n)
            ts.append(t)
            ca.append(traj.actions[t - context + 1:t + 1])
            for name in obs:
                obs[name].append(traj.observations[name][t - context + 1:t + 1])
            fa.append(traj.actions[t + 1:t + horizon + 1])
            tv.append(traj.states[t + 1:t + horizon + 1, 3:5])
            tr.append(trans[t])
    stack = lambda xs, tail: (np.stack(xs, axis=1) if xs  # noqa: E731
                              else np.zeros((0, 0) + tail, dtype=np.float32))
    spec_shape = {s.name: tuple(s.shape) for s in dataset.modalities}
    return AnchorBatch(np.asarray(idx, dtype=np.int64), np.asarray(ts, dtype=np.int64),
                       stack(ca, (2,)), {k: stack(v, spec_shape.get(k, ())) for k, v in obs.items()},
                       stack(fa, (2,)), stack(tv, (2,)), np.asarray(tr, dtype=bool))


# ----------------------------------------------------------------------
# predictors


class Predictor(Protocol):
    def predict(self, anchors: AnchorBatch, subset: frozenset) -> np.ndarray:
        """Return predicted (v, omega) of shape (H, N, 2)."""


class ModelPredictor:
    """Filter on the subset-restricted context, then roll the prior mean forward.

    Filtering uses zero noise, i.e. each posterior is represented by its mean.
    """

    def __init__(self, model: MRSSM):
        names = model.config.names
        for m in (LIN_VEL, ANG_VEL):
            if m not in names:
                raise ValueError(f"model has no {m!r} modality to decode")
        self.model = model

    def check_subset(self, subset: frozenset) -> None:
        names = set(self.model.config.names)
        unknown = set(subset) - names
        if unknown:
            raise KeyError(f"unknown modalities {sorted(unknown)}")
        if self.model.config.fusion == "concat" and set(subset) != names:
            raise MissingModalityError(
                f"concat fusion cannot predict with missing modalities (got {sorted(subset)})")

    def predict(self, anchors: AnchorBatch, subset: frozenset) -> np.ndarray:
        self.check_subset(subset)
        m = self.model
        N = len(anchors)
        d_s = m.config.stoch_dim
        dtype = m.params["gru.embed.w"].data.dtype
        zeros = np.zeros((N, d_s), dtype=dtype)
        C = anchors.context_actions.shape[0]
        obs = [ObservationSet({k: v[c].astype(dtype, copy=False) for k, v in anchors.context_obs.items()
                               if k in subset}) for c in range(C)]
        acts = [anchors.context_actions[c].astype(dtype, copy=False) for c in range(C)]
        states = m.rollout_filter(m.initial_state((N,)), acts, obs, [zeros] * C)
        last = states[-1]
        # represent the final belief by the posterior mean
        start = LatentState(last.h, last.posterior.mean, last.prior, last.posterior)
        future = [a.astype(dtype, copy=False) for a in anchors.future_actions]
        steps = m.predict_open_loop(start, future, decode=[LIN_VEL, ANG_VEL])
        v = np.stack([d[LIN_VEL].data[:, 0] for _, d in steps])
        w = np.stack([d[ANG_VEL].data[:, 0] for _, d in steps])
        return np.stack([v, w], axis=-1)


class ControlPredictor:
    def predict(self, anchors: AnchorBatch, subset: frozenset) -> np.ndarray:
        return np.asarray(anchors.future_actions, dtype=np.float64)


class OraclePredictor:
    """Returns the ground-truth velocities; for testing the metric plumbing."""

    def predict(self, anchors: AnchorBatch, subset: frozenset) -> np.ndarray:
        return np.asarray(anchors.true_velocity, dtype=np.float64)


def anchor_errors(predictor, anchors: AnchorBatch, subset: Iterable[str], dt: float,
                  chunk: int = 512) -> np.ndarray:
    subset = frozenset(subset)
    if hasattr(predictor, "check_subset"):
        predictor.check_subset(subset)
    out = np.zeros(len(anchors))
    for lo in range(0, len(anchors), chunk):
        part = anchors.take(slice(lo, lo + chunk))
        vel = np.asarray(predictor.predict(part, subset), dtype=np.float64)
        if not np.all(np.isfinite(vel)):
            raise FloatingPointError("predictor returned non-finite velocities")
        pred = integrate_pose(vel[..., 0], vel[..., 1], dt)
        true = integrate_pose(part.true_velocity[..., 0], part.true_velocity[..., 1], dt)
        out[lo:lo + len(part)] = final_pose_error(pred, true)
    return out


def transition_breakdown(errors, transition_masks) -> tuple[ErrorStats, ErrorStats]:
    e = np.asarray(errors, dtype=np.float64)
    m = np.asarray(transition_masks, dtype=bool)
    if e.shape != m.shape:
        raise ValueError(f"transition_breakdown: errors {e.shape} vs mask {m.shape}")
    return ErrorStats.from_errors(e[m]), ErrorStats.from_errors(e[~m])


# ----------------------------------------------------------------------
# ablation study


@dataclass
class ResultRow:
    ablation_subset: str
    horizon_s: float
    group: str
    median_m: float
    q1_m: float
    q3_m: float
    rmse_m: float
    n: int


def subset_label(subset: Iterable[str]) -> str:
    s = sorted(subset)
    return "+".join(s) if s else "none"


@dataclass
class EvalResult:
    rows: list[ResultRow] = field(default_factory=list)
    errors: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    transition: dict[int, np.ndarray] = field(default_factory=dict)

    def stats(self, label: str, horizon_s: float, group: str = "all") -> ErrorStats:
        for r in self.rows:
            if r.ablation_subset == label and math.isclose(r.horizon_s, horizon_s) and r.group == group:
                return ErrorStats(r.median_m, r.q1_m, r.q3_m, r.rmse_m, r.n)
        raise KeyError((label, horizon_s, group))

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = list(ResultRow.__dataclass_fields__)
        with open(out / "results.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow(asdict(r))
        summary = [{k: (None if isinstance(v, float) and math.isnan(v) else v)
                    for k, v in asdict(r).items()} for r in self.rows]
        (out / "results.json").write_text(json.dumps(summary, indent=2))

    @classmethod
    def read(cls, out_dir) -> "EvalResult":
        """Rows only; per-anchor errors are not persisted."""
        rows = json.loads((Path(out_dir) / "results.json").read_text())
        nan = float("nan")
        return cls([ResultRow(**{k: (nan if v is None else v) for k, v in r.items()}) for r in rows])


CONTROL = "control"


def ablation_eval(predictor, dataset: Dataset, config: EvalConfig,
                  subsets: Sequence[Iterable[str]] | None = None, include_control: bool = True) -> EvalResult:
    """Score ``predictor`` on every anchor for every (subset, horizon) pair.

    Rows are produced for the groups ``all``, ``transition`` and
    ``steady``. The Control baseline is added under the label ``control``.
    """
    if subsets is None:
        subsets = config.subsets or (tuple(s.name for s in dataset.modalities),)
    subsets = [frozenset(s) for s in subsets]
    if hasattr(predictor, "check_subset"):
        for s in subsets:
            predictor.check_subset(s)
    res = EvalResult()
    for H in config.horizons:
        anchors = collect_anchors(dataset, config.context, H, config.stride)
        res.transition[H] = anchors.transition
        runs = [(subset_label(s), predictor, s) for s in subsets]
        if include_control:
            runs.append((CONTROL, ControlPredictor(), frozenset()))
        for label, pred, s in runs:
            err = anchor_errors(pred, anchors, s, config.dt, config.chunk)
            res.errors[(label, H)] = err
            on, off = transition_breakdown(err, anchors.transition)
            for group, st in (("all", ErrorStats.from_errors(err)), ("transition", on), ("steady", off)):
                res.rows.append(ResultRow(label, round(H * config.dt, 6), group, st.median, st.q1,
                                          st.q3, st.rmse, st.n))
    return res
