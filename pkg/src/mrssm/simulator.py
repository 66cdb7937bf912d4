"""2-D variable-traction terrain world.

A unicycle robot tracks commanded forward and turn rates with a
first-order lag whose gain depends on the friction of the cell under it.
Each step yields proprioceptive readings (linear velocity, angular
velocity, a finite-difference acceleration) and a small ego-centric colour
image of the terrain ahead.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .model import DENSE, IMAGE, ModalitySpec, ObservationSet

SCHEMA_VERSION = 1
OOB_COLOR = (1.0, 0.0, 1.0)
DEFAULT_COLORS = ((0.5, 0.5, 0.5), (0.55, 0.35, 0.15), (0.9, 0.95, 1.0))

LIN_VEL, ANG_VEL, ACCEL, IMAGE_NAME = "lin_vel", "ang_vel", "accel", "image"
PROPRIO = (LIN_VEL, ANG_VEL, ACCEL)
VELOCITY = (LIN_VEL, ANG_VEL)


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass(frozen=True)
class SimConfig:
    world_size: float = 100.0
    cell_size: float = 0.5
    frictions: tuple[float, ...] = (1.0, 0.5, 0.15)
    blob_scale: float = 3.0
    v_max: float = 2.0
    gain: float = 10.0
    sigma_dyn: float = 0.01
    sigma_obs: float = 0.02
    sigma_img: float = 0.02
    dt: float = 0.1
    image_size: int = 16
    pixel_size: float = 0.5
    action_hold: int = 10
    steer_std: float = 0.3
    map_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frictions", tuple(float(m) for m in self.frictions))


# Likelihood weights per modality. The dense sensors are weighted close to
# their inverse noise variance; at unit weight the KL price of encoding the
# velocity outweighs the reconstruction gain and the latent ignores it.
DEFAULT_WEIGHTS = {LIN_VEL: 1000.0, ANG_VEL: 1000.0, ACCEL: 50.0, IMAGE_NAME: 2.0}


def default_modalities(image_size: int = 16, weights=None) -> tuple[ModalitySpec, ...]:
    w = dict(DEFAULT_WEIGHTS)
    w.update(weights or {})
    return (
        ModalitySpec(LIN_VEL, DENSE, (1,), w[LIN_VEL]),
        ModalitySpec(ANG_VEL, DENSE, (1,), w[ANG_VEL]),
        ModalitySpec(ACCEL, DENSE, (1,), w[ACCEL]),
        ModalitySpec(IMAGE_NAME, IMAGE, (3, image_size, image_size), w[IMAGE_NAME]),
    )


@dataclass
class TerrainMap:
    classes: np.ndarray          # (rows, cols) int, row index grows with y
    frictions: tuple[float, ...]
    cell_size: float
    colors: tuple[tuple[float, float, float], ...] = DEFAULT_COLORS

    def __post_init__(self):
        if self.classes.ndim != 2:
            raise ValueError("terrain grid must be 2-D")
        if any(not (0 < m <= 1) for m in self.frictions):
            raise ValueError(f"frictions must lie in (0, 1], got {self.frictions}")

    @property
    def extent(self) -> tuple[float, float]:
        rows, cols = self.classes.shape
        return cols * self.cell_size, rows * self.cell_size

    def contains(self, x: float, y: float) -> bool:
        w, h = self.extent
        return 0.0 <= x < w and 0.0 <= y < h

    def class_at(self, x: float, y: float) -> int:
        i = min(int(y // self.cell_size), self.classes.shape[0] - 1)
        j = min(int(x // self.cell_size), self.classes.shape[1] - 1)
        return int(self.classes[i, j])

    def friction_at(self, x: float, y: float) -> float:
        return self.frictions[self.class_at(x, y)]

    def color_grid(self) -> np.ndarray:
        return np.asarray(self.colors, dtype=np.float64)[self.classes].transpose(2, 0, 1)


def make_terrain(cfg: SimConfig, seed: int | None = None) -> TerrainMap:
    """Random blobs of equal-area terrain classes."""
    rng = np.random.default_rng(cfg.map_seed if seed is None else seed)
    n = int(round(cfg.world_size / cfg.cell_size))
    field_ = gaussian_filter(rng.normal(size=(n, n)), sigma=cfg.blob_scale / cfg.cell_size, mode="wrap")
    k = len(cfg.frictions)
    edges = np.quantile(field_, np.linspace(0, 1, k + 1)[1:-1])
    classes = np.searchsorted(edges, field_).astype(np.int64)
    colors = DEFAULT_COLORS if k == len(DEFAULT_COLORS) else tuple(
        tuple(float(c) for c in rng.uniform(0.1, 0.9, 3)) for _ in range(k))
    return TerrainMap(classes, cfg.frictions, cfg.cell_size, colors)


@dataclass
class RobotState:
    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0
    v: float = 0.0
    omega: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v, self.omega])


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    return math.pi - (math.pi - theta) % (2 * math.pi)


def advance_pose(x, y, theta, v, omega, dt):
    """Exact unicycle motion at constant (v, omega) over dt.

    Uses the half-angle form of the arc, ``chord = v*dt*sinc(phi/2)`` along
    ``theta + phi/2`` with ``phi = omega*dt``, which equals the textbook
    ``(v/omega)(sin - sin)`` expression but stays accurate as omega -> 0.
    Turn rates below 1e-8 rad/s are treated as straight-line motion.
    Accepts scalars or broadcastable arrays.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if np.ndim(omega) == 0 and np.ndim(theta) == 0 and np.ndim(v) == 0:
        if abs(omega) < 1e-8:
            return x + v * dt * math.cos(theta), y + v * dt * math.sin(theta), wrap_angle(theta)
        half = 0.5 * omega * dt
        chord = v * dt * math.sin(half) / half
        mid = theta + half
        return x + chord * math.cos(mid), y + chord * math.sin(mid), wrap_angle(theta + 2 * half)
    omega = np.where(np.abs(omega) < 1e-8, 0.0, omega)
    half = 0.5 * omega * dt
    chord = v * dt * np.sinc(half / math.pi)
    mid = theta + half
    return x + chord * np.cos(mid), y + chord * np.sin(mid), wrap_angle(theta + 2 * half)


def step_dynamics(state: RobotState, action, mu: float, dt: float, rng: np.random.Generator | None = None,
                  gain: float = 10.0, sigma_dyn: float = 0.01) -> RobotState:
    """Traction-limited first-order velocity tracking, then an exact arc.

    ``rng=None`` switches the process noise off.
    """
    g = min(1.0, gain * mu * dt)
    a_v, a_w = float(action[0]), float(action[1])
    ev, ew = (0.0, 0.0) if rng is None else rng.normal(0.0, sigma_dyn, size=2)
    v = state.v + g * (a_v - state.v) + ev
    w = state.omega + g * (a_w - state.omega) + ew
    x, y, th = advance_pose(state.x, state.y, state.theta, v, w, dt)
    return RobotState(x, y, th, v, w)


def render_patch(terrain: TerrainMap, state: RobotState, size: int = 16, pixel_size: float = 0.5,
                 sigma_img: float = 0.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Heading-aligned view ahead of the robot, robot at bottom centre; (3, size, size) in [0, 1]."""
    rows = np.arange(size)
    fwd = (size - rows - 0.5) * pixel_size
    lat = (np.arange(size) - (size - 1) / 2) * pixel_size
    f, lt = np.meshgrid(fwd, lat, indexing="ij")
    c, s = math.cos(state.theta), math.sin(state.theta)
    px = state.x + f * c + lt * s
    py = state.y + f * s - lt * c
    coords = np.stack([py / terrain.cell_size - 0.5, px / terrain.cell_size - 0.5])
    grid = terrain.color_grid()
    img = np.stack([map_coordinates(grid[ch], coords, order=1, mode="constant", cval=OOB_COLOR[ch])
                    for ch in range(3)])
    if rng is not None and sigma_img > 0:
        img = img + rng.normal(0.0, sigma_img, size=img.shape)
    return np.clip(img, 0.0, 1.0)


@dataclass
class Trajectory:
    """Time-aligned record; ``actions[t]`` is the command executed over the step ending at ``t``."""

    actions: np.ndarray                 # (T, 2)
    observations: dict[str, np.ndarray]  # name -> (T, *shape)
    states: np.ndarray                  # (T, 5): x, y, theta, v, omega
    terrain: np.ndarray                 # (T,) class under the robot
    friction: np.ndarray                # (T,)
    dt: float = 0.1
    seed: int = 0
    masks: np.ndarray | None = None     # (T, n_modalities) presence, 1.0 = present

    def __post_init__(self):
        n = len(self.actions)
        for name, arr in self.observations.items():
            if len(arr) != n:
                raise ValueError(f"observation {name!r} has length {len(arr)}, expected {n}")
        for name in ("states", "terrain", "friction"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length mismatch")
        if self.masks is None:
            self.masks = np.ones((n, len(self.observations)), dtype=np.float32)

    def __len__(self):
        return len(self.actions)

    def observation_set(self, t: int, subset: Sequence[str] | None = None) -> ObservationSet:
        names = list(self.observations)
        keep = set(names if subset is None else subset)
        return ObservationSet({n: self.observations[n][t] for i, n in enumerate(names)
                               if n in keep and self.masks[t, i] > 0})


@dataclass
class Dataset:
    trajectories: list[Trajectory]
    modalities: tuple[ModalitySpec, ...]
    dt: float = 0.1
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trajectories)

    def split(self, n_val: int) -> tuple["Dataset", "Dataset"]:
        """First ``len - n_val`` trajectories for training, the rest held out."""
        k = len(self.trajectories) - n_val
        if k < 1 or n_val < 0:
            raise ValueError(f"cannot hold out {n_val} of {len(self.trajectories)} trajectories")
        mk = lambda ts: Dataset(ts, self.modalities, self.dt, dict(self.info))  # noqa: E731
        return mk(self.trajectories[:k]), mk(self.trajectories[k:])


def gen_trajectory(terrain: TerrainMap, T: int, seed: int, cfg: SimConfig = SimConfig()) -> Trajectory:
    """Random exploration: throttle around half speed, steering around zero, held for ``action_hold`` steps."""
    if T < 2:
        raise ValueError("T must be >= 2")
    ss = np.random.SeedSequence(seed)
    r_start, r_act, r_dyn, r_obs, r_img = (np.random.default_rng(s) for s in ss.spawn(5))
    w, h = terrain.extent
    x0 = r_start.uniform(0.25 * w, 0.75 * w)
    y0 = r_start.uniform(0.25 * h, 0.75 * h)
    state = RobotState(x0, y0, wrap_angle(r_start.uniform(-math.pi, math.pi)), 0.0, 0.0)
    phase = int(r_start.integers(cfg.action_hold))

    acts, states, terr, fric = [], [], [], []
    lin, ang, acc, imgs = [], [], [], []
    cmd = np.zeros(2)
    v_prev = state.v
    for t in range(T):
        if t == 0 or (t + phase) % cfg.action_hold == 0:
            a_v = np.clip(r_act.normal(0.5 * cfg.v_max, 0.15 * cfg.v_max), 0.0, cfg.v_max)
            cmd = np.array([a_v, r_act.normal(0.0, cfg.steer_std)])
        mu = terrain.friction_at(state.x, state.y)
        nxt = step_dynamics(state, cmd, mu, cfg.dt, r_dyn, cfg.gain, cfg.sigma_dyn)
        if not terrain.contains(nxt.x, nxt.y):
            break
        state = nxt
        acts.append(cmd.copy())
        states.append(state.as_array())
        terr.append(terrain.class_at(state.x, state.y))
        fric.append(terrain.friction_at(state.x, state.y))
        noise = r_obs.normal(0.0, cfg.sigma_obs, size=3)
        lin.append([state.v + noise[0]])
        ang.append([state.omega + noise[1]])
        acc.append([(state.v - v_prev) / cfg.dt + noise[2]])
        imgs.append(render_patch(terrain, state, cfg.image_size, cfg.pixel_size, cfg.sigma_img, r_img))
        v_prev = state.v
    if len(acts) < 2:
        raise RuntimeError(f"trajectory {seed} left the map after {len(acts)} steps")
    f32 = lambda a: np.asarray(a, dtype=np.float32)  # noqa: E731
    obs = {LIN_VEL: f32(lin), ANG_VEL: f32(ang), ACCEL: f32(acc), IMAGE_NAME: f32(imgs)}
    return Trajectory(f32(acts), obs, f32(states), f32(terr), f32(fric), cfg.dt, seed)


def gen_dataset(n: int, T: int, seed: int, cfg: SimConfig = SimConfig()) -> Dataset:
    terrain = make_terrain(cfg)
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    trajs = [gen_trajectory(terrain, T, s, cfg) for s in seeds]
    return Dataset(trajs, default_modalities(cfg.image_size), cfg.dt, {"sim": asdict(cfg), "seed": seed})


def label_transitions(traj: Trajectory, window: int) -> np.ndarray:
    """``mask[t]`` is true iff the terrain class changes at some step in ``[t, t + window]``.

    A change at step ``u`` means ``terrain[u] != terrain[u - 1]``.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    terr = np.asarray(traj.terrain)
    change = np.zeros(len(terr), dtype=bool)
    change[1:] = terr[1:] != terr[:-1]
    csum = np.concatenate([[0], np.cumsum(change)])
    t = np.arange(len(terr))
    hi = np.minimum(t + window + 1, len(terr))
    return (csum[hi] - csum[t]) > 0


# ----------------------------------------------------------------------
# dataset directory: meta.json + traj_<n>.json + traj_<n>.f32


def _fields(traj: Trajectory) -> list[tuple[str, np.ndarray]]:
    out = [("actions", traj.actions)]
    out += [(f"obs.{k}", v) for k, v in traj.observations.items()]
    out += [("states", traj.states), ("terrain", traj.terrain), ("friction", traj.friction), ("masks", traj.masks)]
    return out


def write_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "dt": dataset.dt,
        "modalities": [asdict(m) for m in dataset.modalities],
        "n_trajectories": len(dataset),
        "info": dataset.info,
    }
    for n, traj in enumerate(dataset.trajectories):
        entries, blobs, offset = [], [], 0
        for name, arr in _fields(traj):
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
            blobs.append(blob)
            offset += len(blob)
        payload = b"".join(blobs)
        header = {"index": n, "length": len(traj), "seed": int(traj.seed), "dt": traj.dt,
                  "payload": f"traj_{n}.f32", "payload_bytes": len(payload),
                  "crc32": zlib.crc32(payload), "fields": entries}
        (d / f"traj_{n}.f32").write_bytes(payload)
        (d / f"traj_{n}.json").write_text(json.dumps(header, indent=1))
    (d / "meta.json").write_text(json.dumps(meta, indent=1))


def _read_trajectory(d: Path, n: int, modality_names: list[str]) -> Trajectory:
    jpath = d / f"traj_{n}.json"
    try:
        header = json.loads(jpath.read_text())
    except FileNotFoundError:
        raise DatasetError(f"{jpath}: missing trajectory header") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{jpath}: malformed JSON ({exc})") from None
    for key in ("length", "payload", "payload_bytes", "crc32", "fields"):
        if key not in header:
            raise DatasetError(f"{jpath}: missing field {key!r}")
    ppath = d / header["payload"]
    if not ppath.exists():
        raise DatasetError(f"trajectory {n}: payload file {ppath} missing")
    payload = ppath.read_bytes()
    if len(payload) != header["payload_bytes"]:
        raise DatasetError(f"trajectory {n} ({ppath.name}): payload has {len(payload)} bytes, "
                           f"header declares {header['payload_bytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise DatasetError(f"trajectory {n} ({ppath.name}): payload checksum mismatch")
    arrays = {}
    for entry in header["fields"]:
        try:
            shape = tuple(entry["shape"])
            count, offset = entry["count"], entry["offset"]
        except KeyError as exc:
            raise DatasetError(f"{jpath}: field entry {entry.get('name', '?')!r} lacks {exc}") from None
        if int(np.prod(shape)) != count or offset + 4 * count > len(payload):
            raise DatasetError(f"{jpath}: field {entry['name']!r} has inconsistent shape/offset")
        arrays[entry["name"]] = np.frombuffer(payload, dtype="<f4", count=count, offset=offset) \
            .astype(np.float32).reshape(shape)
    try:
        obs = {m: arrays[f"obs.{m}"] for m in modality_names}
        return Trajectory(arrays["actions"], obs, arrays["states"], arrays["terrain"], arrays["friction"],
                          float(header.get("dt", 0.1)), int(header.get("seed", 0)), arrays["masks"])
    except KeyError as exc:
        raise DatasetError(f"{jpath}: missing field {exc}") from None
    except ValueError as exc:
        raise DatasetError(f"{jpath}: {exc}") from None


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "meta.json"
    if not d.is_dir() or not any(d.iterdir()):
        raise EmptyDatasetError(f"{d}: dataset directory is empty or missing")
    if not mpath.exists():
        raise EmptyDatasetError(f"{d}: no meta.json, not a dataset")
    try:
        meta = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: malformed JSON ({exc})") from None
    for key in ("schema_version", "modalities", "n_trajectories", "dt"):
        if key not in meta:
            raise DatasetError(f"{mpath}: missing field {key!r}")
    if meta["schema_version"] != SCHEMA_VERSION:
        raise DatasetError(f"{mpath}: unsupported schema_version {meta['schema_version']}")
    if meta["n_trajectories"] < 1:
        raise EmptyDatasetError(f"{d}: dataset has no trajectories")
    try:
        modalities = tuple(ModalitySpec(**m) for m in meta["modalities"])
    except (TypeError, ValueError) as exc:
        raise DatasetError(f"{mpath}: field 'modalities' invalid ({exc})") from None
    names = [m.name for m in modalities]
    trajs = [_read_trajectory(d, n, names) for n in range(meta["n_trajectories"])]
    return Dataset(trajs, modalities, float(meta["dt"]), meta.get("info", {}))
