"""Training objectives and the optimisation loop.

Two variational objectives are provided:

* ``mvae``: filter on a modality subset and reconstruct only that subset,
  with the KL taken between the subset posterior and the subset prior.
* ``new``: filter on a subset but reconstruct *every* modality, and take the
  KL between the full-set posterior (from a full-set rollout sharing the
  same noise) and the prior of the subset rollout. Importance ratios are
  fixed to one.

``elbo_mvae`` and ``elbo_new`` are literal per-subset implementations on
top of :meth:`MRSSM.rollout_filter`. ``schedule_loss`` evaluates a whole
subset schedule in one pass by stacking the subsets along an extra batch
axis; it is what ``train_run`` uses and is tested against the literal
versions.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import Tape, Tensor
from .distributions import DiagGaussian, kl, log_prob
from .model import MRSSM, LatentState, ModelConfig, ObservationSet
from .rng import substream
from .simulator import Dataset

log = logging.getLogger(__name__)

ELBO_VARIANTS = ("mvae", "new", "concat")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    beta: float = 1.0
    importance_ratio_mode: str = "fixed-one"
    subsets_per_batch: int = 1
    sequence_length: int = 25
    batch_size: int = 16
    learning_rate: float = 6e-3
    final_lr_ratio: float = 0.02        # cosine decay to learning_rate * ratio; 1.0 keeps it constant
    grad_clip_norm: float = 10.0
    epochs: int = 20
    seed: int = 0
    elbo_variant: str = "new"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.sequence_length < 2:
            raise ValueError("sequence_length must be >= 2")
        if self.subsets_per_batch < 1:
            raise ValueError("subsets_per_batch must be >= 1")
        if self.learning_rate <= 0 or not 0 < self.final_lr_ratio <= 1:
            raise ValueError("learning_rate must be > 0 and final_lr_ratio in (0, 1]")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.importance_ratio_mode != "fixed-one":
            raise ValueError("only importance_ratio_mode='fixed-one' is supported")
        if self.elbo_variant not in ELBO_VARIANTS:
            raise ValueError(f"elbo_variant must be one of {ELBO_VARIANTS}")


@dataclass(frozen=True)
class SubsetSchedule:
    subsets: tuple[frozenset, ...]

    def __post_init__(self):
        if not self.subsets:
            raise ValueError("schedule is empty")
        full = self.subsets[0]
        if any(not s <= full for s in self.subsets):
            raise ValueError("every subset must be contained in the first (full) subset")

    @property
    def full(self) -> frozenset:
        return self.subsets[0]

    def __len__(self):
        return len(self.subsets)

    def __iter__(self):
        return iter(self.subsets)


def sample_subsets(modalities: Sequence[str], k: int, rng: np.random.Generator) -> SubsetSchedule:
    """Full set first, then every singleton, then ``k`` random nonempty proper subsets."""
    mods = list(modalities)
    if not mods:
        raise ValueError("sample_subsets: no modalities")
    if k < 0:
        raise ValueError("sample_subsets: k must be >= 0")
    full = frozenset(mods)
    out = [full] + [frozenset([m]) for m in mods]
    proper = [frozenset(c) for r in range(1, len(mods)) for c in itertools.combinations(mods, r)]
    if k and not proper:
        raise ValueError("sample_subsets: a single modality has no nonempty proper subsets")
    for _ in range(k):
        out.append(proper[int(rng.integers(len(proper)))])
    return SubsetSchedule(tuple(out))


# ----------------------------------------------------------------------
# batches


@dataclass
class Batch:
    actions: np.ndarray                  # (T, B, A)
    observations: dict[str, np.ndarray]  # name -> (T, B, *shape)

    @property
    def length(self) -> int:
        return self.actions.shape[0]

    @property
    def size(self) -> int:
        return self.actions.shape[1]

    def observation_sets(self, subset: Iterable[str]) -> list[ObservationSet]:
        keep = [n for n in self.observations if n in set(subset)]
        return [ObservationSet({n: self.observations[n][t] for n in keep}) for t in range(self.length)]


def make_batch(dataset: Dataset, windows: Sequence[tuple[int, int]], T: int) -> Batch:
    trajs = dataset.trajectories
    actions = np.stack([trajs[i].actions[s:s + T] for i, s in windows], axis=1)
    names = [m.name for m in dataset.modalities]
    obs = {n: np.stack([trajs[i].observations[n][s:s + T] for i, s in windows], axis=1) for n in names}
    return Batch(actions, obs)


def epoch_windows(dataset: Dataset, T: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Non-overlapping length-T windows per trajectory with a random offset, shuffled."""
    windows = []
    for i, traj in enumerate(dataset.trajectories):
        n = len(traj)
        if n < T:
            continue
        off = int(rng.integers(n - T + 1)) % T
        windows += [(i, s) for s in range(off, n - T + 1, T)]
    order = rng.permutation(len(windows))
    return [windows[j] for j in order]


def draw_noise(rng: np.random.Generator, T: int, B: int, d_s: int) -> np.ndarray:
    """Standard-normal draws for ``s_0`` (index 0) and each of the T steps."""
    return rng.standard_normal((T + 1, B, d_s)).astype(np.float32)


# ----------------------------------------------------------------------
# literal per-subset objectives


def rollout(model: MRSSM, batch: Batch, subset: Iterable[str], noise: np.ndarray) -> list[LatentState]:
    init = model.initial_state((batch.size,), noise=noise[0])
    return model.rollout_filter(init, list(batch.actions), batch.observation_sets(subset), list(noise[1:]))


def sequence_elbo(decoded: Sequence[Mapping[str, DiagGaussian]], observations: Sequence[Mapping[str, np.ndarray]],
                  weights: Mapping[str, float], posteriors: Sequence[DiagGaussian],
                  priors: Sequence[DiagGaussian], beta: float) -> tuple[Tensor, dict]:
    """Negative ELBO, summed over time and averaged over the batch.

    ``decoded[t]`` names the modalities that enter the reconstruction sum at
    step ``t``; each term is ``weights[name] * log_prob``.
    """
    total = None
    kl_total = None
    for t, dec in enumerate(decoded):
        step = None
        for name, dist in dec.items():
            term = weights[name] * log_prob(dist, observations[t][name])
            step = term if step is None else step + term
        k = kl(posteriors[t], priors[t])
        kl_total = k if kl_total is None else kl_total + k
        step = -beta * k if step is None else step - beta * k
        total = step if total is None else total + step
    loss = -dm.mean(total)
    return loss, {"kl": float(np.mean(kl_total.data))}


def _weights(model: MRSSM) -> dict[str, float]:
    return {m.name: m.recon_weight for m in model.config.modalities}


def elbo_mvae(model: MRSSM, batch: Batch, subset: Iterable[str], noise: np.ndarray,
              beta: float = 1.0) -> Tensor:
    subset = [n for n in model.config.names if n in set(subset)]
    states = rollout(model, batch, subset, noise)
    specs = [model.config.spec(n) for n in subset]
    decoded = [{sp.name: model.decode(sp, st.h, st.s) for sp in specs} for st in states]
    obs = [{n: batch.observations[n][t] for n in subset} for t in range(batch.length)]
    loss, _ = sequence_elbo(decoded, obs, _weights(model), [st.posterior for st in states],
                            [st.prior for st in states], beta)
    return loss


def fullset_posteriors(model: MRSSM, batch: Batch, noise: np.ndarray) -> list[DiagGaussian]:
    return [st.posterior for st in rollout(model, batch, model.config.names, noise)]


def elbo_new(model: MRSSM, batch: Batch, subset: Iterable[str], cached_fullset_posteriors,
             noise: np.ndarray, beta: float = 1.0) -> Tensor:
    if cached_fullset_posteriors is None:
        raise ValueError("elbo_new: the full-set posteriors must be computed first")
    if len(cached_fullset_posteriors) != batch.length:
        raise ValueError("elbo_new: cached posteriors do not match the batch length")
    states = rollout(model, batch, subset, noise)
    specs = list(model.config.modalities)
    decoded = [{sp.name: model.decode(sp, st.h, st.s) for sp in specs} for st in states]
    obs = [{sp.name: batch.observations[sp.name][t] for sp in specs} for t in range(batch.length)]
    loss, _ = sequence_elbo(decoded, obs, _weights(model), list(cached_fullset_posteriors),
                            [st.prior for st in states], beta)
    return loss


# ----------------------------------------------------------------------
# fused objective used for training


def _tile_blocks(x: Tensor, R: int) -> Tensor:
    """(T, B, ...) -> (T, R, B, ...) by repeating along a new block axis."""
    t = dm.expand(x, (R,) + x.shape)
    axes = (1, 0) + tuple(range(2, x.ndim + 1))
    return dm.transpose(t, axes)


def _const_blocks(arr: np.ndarray, R: int, dtype) -> Tensor:
    tiled = np.broadcast_to(arr[:, None], (arr.shape[0], R) + arr.shape[1:])
    return Tensor._wrap(np.ascontiguousarray(tiled, dtype=dtype))


def schedule_loss(model: MRSSM, batch: Batch, schedule: SubsetSchedule, noise: np.ndarray, beta: float,
                  variant: str) -> tuple[Tensor, dict]:
    """Summed negative ELBO over every subset of ``schedule`` in one stacked rollout.

    Block 0 is the full set; its posteriors feed the KL of every block when
    ``variant == "new"``.
    """
    if variant not in ("mvae", "new"):
        raise ValueError(f"schedule_loss handles 'mvae' and 'new', got {variant!r}")
    cfg = model.config
    names = cfg.names
    T, B = batch.length, batch.size
    R = len(schedule)
    dtype = model.params["gru.hidden.w"].data.dtype
    mask = np.array([[1.0 if n in sub else 0.0 for n in names] for sub in schedule], dtype=dtype)  # (R, N)

    # experts depend on the observation alone, so encode all steps at once
    prec_sum = None
    wmean_sum = None
    for i, spec in enumerate(cfg.modalities):
        if not mask[:, i].any():
            continue
        e = model.encode_expert(spec, batch.observations[spec.name].astype(dtype, copy=False))
        p = 1.0 / e.variance                       # (T, B, d)
        col = np.broadcast_to(mask[:, i].reshape(R, 1, 1), (R, B, cfg.stoch_dim))
        p_blocks = dm.mul(_tile_blocks(p, R), Tensor._wrap(np.ascontiguousarray(col)))
        w_blocks = dm.mul(_tile_blocks(e.mean, R), p_blocks)
        prec_sum = p_blocks if prec_sum is None else prec_sum + p_blocks
        wmean_sum = w_blocks if wmean_sum is None else wmean_sum + w_blocks

    tiled_noise = np.ascontiguousarray(np.broadcast_to(noise[:, None], (T + 1, R, B, cfg.stoch_dim)), dtype=dtype)
    tiled_actions = np.ascontiguousarray(np.broadcast_to(batch.actions[:, None], (T, R) + batch.actions.shape[1:]),
                                         dtype=dtype)
    h = Tensor._wrap(np.zeros((R, B, cfg.deter_dim), dtype=dtype))
    s = Tensor._wrap(tiled_noise[0])
    hs, ss, pri_m, pri_s, post_m, post_s = [], [], [], [], [], []
    for t in range(T):
        h = model.deterministic_step(h, s, tiled_actions[t])
        prior = model.prior_head(h)
        prec = 1.0 / prior.variance
        wmean = prior.mean * prec
        if prec_sum is not None:
            prec = prec + prec_sum[t]
            wmean = wmean + wmean_sum[t]
        var = 1.0 / prec
        mean = wmean * var
        std = dm.sqrt(var)
        s = mean + std * Tensor._wrap(tiled_noise[t + 1])
        hs.append(h)
        ss.append(s)
        pri_m.append(prior.mean)
        pri_s.append(prior.stddev)
        post_m.append(mean)
        post_s.append(std)

    H, S = dm.stack(hs), dm.stack(ss)                                  # (T, R, B, .)
    prior_seq = DiagGaussian(dm.stack(pri_m), dm.stack(pri_s))
    if variant == "new":
        full = DiagGaussian(_tile_blocks(dm.stack(post_m)[:, 0], R), _tile_blocks(dm.stack(post_s)[:, 0], R))
    else:
        full = DiagGaussian(dm.stack(post_m), dm.stack(post_s))
    kl_rows = dm.sum(kl(full, prior_seq), axis=0)                     # (R, B)
    objective = -beta * kl_rows
    stats = {"kl": float(np.mean(kl_rows.data)) / T}

    for i, spec in enumerate(cfg.modalities):
        blocks = list(range(R)) if variant == "new" else [r for r in range(R) if mask[r, i]]
        if not blocks:
            continue
        if len(blocks) == R:
            Hb, Sb = H, S
        else:
            Hb = dm.concat([H[:, r:r + 1] for r in blocks], axis=1)
            Sb = dm.concat([S[:, r:r + 1] for r in blocks], axis=1)
        dist = model.decode(spec, Hb, Sb)
        obs = batch.observations[spec.name]
        lp = log_prob(dist, _const_blocks(obs, len(blocks), dtype))   # (T, len(blocks), B)
        lp_rows = dm.sum(lp, axis=0) * spec.recon_weight
        if len(blocks) < R:
            # scatter back into (R, B) with zeros for blocks that skip this modality
            parts, j = [], 0
            zero = Tensor._wrap(np.zeros((1, B), dtype=dtype))
            for r in range(R):
                if j < len(blocks) and blocks[j] == r:
                    parts.append(lp_rows[j:j + 1])
                    j += 1
                else:
                    parts.append(zero)
            lp_rows = dm.concat(parts, axis=0)
        objective = objective + lp_rows
        err = dist.mean.data[:, 0] - obs
        stats[f"recon_{spec.name}"] = float(np.mean(err * err))
    loss = -dm.sum(objective) * (1.0 / B)
    return loss, stats


def concat_loss(model: MRSSM, batch: Batch, noise: np.ndarray, beta: float) -> tuple[Tensor, dict]:
    """Negative ELBO of the concatenation baseline (all modalities, no subsets)."""
    cfg = model.config
    dtype = model.params["gru.hidden.w"].data.dtype
    T, B = batch.length, batch.size
    feats = [model.features(spec, batch.observations[spec.name].astype(dtype, copy=False))
             for spec in cfg.modalities]
    F = dm.concat(feats, axis=-1)                                       # (T, B, N*e)
    h = Tensor._wrap(np.zeros((B, cfg.deter_dim), dtype=dtype))
    s = Tensor._wrap(noise[0].astype(dtype))
    hs, ss, pri_m, pri_s, post_m, post_s = [], [], [], [], [], []
    d = cfg.stoch_dim
    for t in range(T):
        h = model.deterministic_step(h, s, batch.actions[t].astype(dtype, copy=False))
        prior = model.prior_head(h)
        x = dm.tanh(model._linear("concat.hidden", dm.concat([F[t], h], axis=-1)))
        out = model._linear("concat.out", x)
        post = DiagGaussian.from_raw(out[..., :d], out[..., d:])
        s = post.mean + post.stddev * Tensor._wrap(noise[t + 1].astype(dtype))
        hs.append(h)
        ss.append(s)
        pri_m.append(prior.mean)
        pri_s.append(prior.stddev)
        post_m.append(post.mean)
        post_s.append(post.stddev)
    H, S = dm.stack(hs), dm.stack(ss)
    k = dm.sum(kl(DiagGaussian(dm.stack(post_m), dm.stack(post_s)),
                  DiagGaussian(dm.stack(pri_m), dm.stack(pri_s))), axis=0)
    objective = -beta * k
    stats = {"kl": float(np.mean(k.data)) / T}
    for spec in cfg.modalities:
        dist = model.decode(spec, H, S)
        obs = batch.observations[spec.name]
        objective = objective + dm.sum(log_prob(dist, obs), axis=0) * spec.recon_weight
        err = dist.mean.data - obs
        stats[f"recon_{spec.name}"] = float(np.mean(err * err))
    return -dm.mean(objective), stats


# ----------------------------------------------------------------------
# optimisation


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def batch_loss(model: MRSSM, batch: Batch, config: TrainingConfig, subset_rng: np.random.Generator,
               noise: np.ndarray) -> tuple[Tensor, dict]:
    if config.elbo_variant == "concat":
        return concat_loss(model, batch, noise, config.beta)
    schedule = sample_subsets(model.config.names, config.subsets_per_batch, subset_rng)
    return schedule_loss(model, batch, schedule, noise, config.beta, config.elbo_variant)


def train_step(model: MRSSM, optimizer: Adam, batch: Batch, config: TrainingConfig,
               subset_rng: np.random.Generator, noise_rng: np.random.Generator) -> dict:
    noise = draw_noise(noise_rng, batch.length, batch.size, model.config.stoch_dim)
    with Tape() as tape:
        try:
            loss, stats = batch_loss(model, batch, config, subset_rng, noise)
        except ValueError as err:
            # a NaN upstream surfaces as an invalid stddev before the loss exists
            where = tape.first_nonfinite()
            if where is None:
                raise
            raise TrainingDivergedError(f"non-finite forward pass; first non-finite tensor: {where}") from err
    if not np.isfinite(loss.data):
        where = tape.first_nonfinite() or "loss"
        raise TrainingDivergedError(f"non-finite loss; first non-finite tensor: {where}")
    grads = tape.gradient(loss, model.params)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for parameter {k!r}")
    stats["grad_norm"] = clip_global_norm(grads, config.grad_clip_norm)
    optimizer.step(grads)
    stats["loss"] = float(loss.data)
    return stats


def lr_at(config: TrainingConfig, progress: float) -> float:
    """Cosine schedule from ``learning_rate`` at progress 0 to ``learning_rate * final_lr_ratio`` at 1."""
    lo = config.learning_rate * config.final_lr_ratio
    return lo + 0.5 * (config.learning_rate - lo) * (1 + math.cos(math.pi * min(max(progress, 0.0), 1.0)))


def train_run(dataset: Dataset, config: TrainingConfig, model_config: ModelConfig,
              metrics_path=None, progress=None) -> tuple[MRSSM, list[dict]]:
    """Train from scratch; deterministic given ``config.seed``.

    Writes one JSON line per epoch to ``metrics_path`` when given and
    returns the trained model with the per-epoch records.
    """
    if len(dataset) == 0:
        raise ValueError("train_run: empty dataset")
    have = {m.name: tuple(m.shape) for m in dataset.modalities}
    want = {m.name: tuple(m.shape) for m in model_config.modalities}
    if have != want:
        raise ValueError(f"train_run: dataset modalities {have} do not match the model {want}")
    fusion = "concat" if config.elbo_variant == "concat" else "poe"
    model_config = replace(model_config, fusion=fusion)
    model = MRSSM(model_config, rng=substream(config.seed, "init"))
    data_rng = substream(config.seed, "data")
    noise_rng = substream(config.seed, "noise")
    subset_rng = substream(config.seed, "subsets")
    opt = Adam(model.params, lr=config.learning_rate)
    T, B = config.sequence_length, config.batch_size
    history = []
    sink = open(metrics_path, "w") if metrics_path is not None else None
    try:
        for epoch in range(1, config.epochs + 1):
            windows = epoch_windows(dataset, T, data_rng)
            n_batches = len(windows) // B
            if n_batches == 0:
                raise ValueError(f"train_run: no full batch of {B} windows of length {T}")
            acc: dict[str, float] = {}
            for b in range(n_batches):
                opt.lr = lr_at(config, (epoch - 1 + b / n_batches) / config.epochs)
                batch = make_batch(dataset, windows[b * B:(b + 1) * B], T)
                stats = train_step(model, opt, batch, config, subset_rng, noise_rng)
                for k, v in stats.items():
                    acc[k] = acc.get(k, 0.0) + v
            record = {"epoch": epoch, **{k: v / n_batches for k, v in acc.items()}}
            record = {"epoch": epoch, "loss": record.pop("loss"), "kl": record.pop("kl"),
                      **{k: v for k, v in record.items() if k != "epoch"}}
            history.append(record)
            log.info("epoch %d loss %.4f kl %.4f", epoch, record["loss"], record["kl"])
            if sink is not None:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if progress is not None:
                progress(record)
    finally:
        if sink is not None:
            sink.close()
    return model, history
