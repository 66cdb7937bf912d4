"""Multimodal recurrent state-space model.

The latent state has a deterministic part ``h`` (a GRU over embedded
``(s, a)`` pairs) and a stochastic part ``s``. The prior over ``s`` comes
from ``h``; the posterior is a product of that prior with one Gaussian
expert per observed modality, each expert seeing only its own current
observation. With ``fusion="concat"`` the posterior instead comes from a
single head over the concatenated per-modality features and ``h``; that
variant cannot run with modalities missing.

All operations accept unbatched inputs (``h`` of shape ``(d_h,)``) or any
number of leading batch axes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import ShapeError, Tensor
from .distributions import DiagGaussian, poe_fuse, rsample

DENSE = "dense"
IMAGE = "image"


class MissingModalityError(ValueError):
    """The concatenation posterior was asked to run without every modality."""


@dataclass(frozen=True)
class ModalitySpec:
    """One sensor stream. ``recon_weight`` scales its reconstruction log-likelihood."""

    name: str
    kind: str
    shape: tuple[int, ...]
    recon_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if self.kind not in (DENSE, IMAGE):
            raise ValueError(f"modality {self.name!r}: unknown kind {self.kind!r}")
        if self.kind == DENSE and len(self.shape) != 1:
            raise ValueError(f"modality {self.name!r}: dense shape must be (d,)")
        if self.kind == IMAGE:
            if len(self.shape) != 3 or self.shape[1] % 8 or self.shape[2] % 8:
                raise ValueError(f"modality {self.name!r}: image shape must be (C, H, W) with H, W divisible by 8")
        if not self.recon_weight >= 0:
            raise ValueError(f"modality {self.name!r}: recon_weight must be >= 0")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[ModalitySpec, ...]
    action_dim: int = 2
    deter_dim: int = 64
    stoch_dim: int = 16
    embed_dim: int = 64
    hidden_dim: int = 64
    image_channels: tuple[int, int, int] = (8, 16, 32)
    fusion: str = "poe"

    def __post_init__(self):
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValueError(f"modality names must be unique, got {names}")
        if self.fusion not in ("poe", "concat"):
            raise ValueError(f"fusion must be 'poe' or 'concat', got {self.fusion!r}")
        object.__setattr__(self, "image_channels", tuple(self.image_channels))

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def spec(self, name: str) -> ModalitySpec:
        for m in self.modalities:
            if m.name == name:
                return m
        raise KeyError(f"unknown modality {name!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = [asdict(m) for m in self.modalities]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        d["modalities"] = tuple(ModalitySpec(**m) for m in d["modalities"])
        return cls(**d)


class ObservationSet:
    """Observations at one timestep; a modality is present iff it has a value."""

    def __init__(self, values: Mapping[str, np.ndarray] | None = None):
        self.values = {k: v for k, v in (values or {}).items() if v is not None}

    @classmethod
    def empty(cls) -> "ObservationSet":
        return cls({})

    def present(self) -> set[str]:
        return set(self.values)

    def mask(self, names: Iterable[str]) -> dict[str, bool]:
        return {n: n in self.values for n in names}

    def restrict(self, subset: Iterable[str]) -> "ObservationSet":
        keep = set(subset)
        return ObservationSet({k: v for k, v in self.values.items() if k in keep})


@dataclass
class LatentState:
    h: Tensor
    s: Tensor
    prior: DiagGaussian
    posterior: DiagGaussian


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class MRSSM:
    def __init__(self, config: ModelConfig, params: Mapping[str, Tensor] | None = None,
                 rng: np.random.Generator | None = None):
        self.config = config
        if params is None:
            params = init_params(config, rng if rng is not None else np.random.default_rng(0))
        self.params: dict[str, Tensor] = dict(params)

    # -- parameter plumbing -------------------------------------------

    def astype(self, dtype) -> "MRSSM":
        with dm.precision(dtype):
            params = {k: Tensor(np.array(v.data, dtype=dtype), requires_grad=v.requires_grad)
                      for k, v in self.params.items()}
        return MRSSM(self.config, params)

    def parameter_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {}
        for name in self.params:
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] in ("enc", "dec") else parts[0]
            groups.setdefault(key, []).append(name)
        return groups

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return dm.matmul(x, self.params[prefix + ".w"]) + self.params[prefix + ".b"]

    # -- transition ---------------------------------------------------

    def deterministic_step(self, h_prev, s_prev, a_prev) -> Tensor:
        """GRU update on a learned embedding of ``concat(s_prev, a_prev)``."""
        cfg = self.config
        h_prev, s_prev, a_prev = _t(h_prev), _t(s_prev), _t(a_prev)
        if h_prev.shape[-1] != cfg.deter_dim or s_prev.shape[-1] != cfg.stoch_dim or a_prev.shape[-1] != cfg.action_dim:
            raise ShapeError("deterministic_step", f"got h {h_prev.shape}, s {s_prev.shape}, a {a_prev.shape}")
        x = dm.tanh(self._linear("gru.embed", dm.concat([s_prev, a_prev], axis=-1)))
        d = cfg.deter_dim
        xw = self._linear("gru.input", x)
        hw = dm.matmul(h_prev, self.params["gru.hidden.w"])
        z = dm.sigmoid(xw[..., :d] + hw[..., :d])
        r = dm.sigmoid(xw[..., d:2 * d] + hw[..., d:2 * d])
        n = dm.tanh(xw[..., 2 * d:] + r * hw[..., 2 * d:])
        return n + z * (h_prev - n)

    def prior_head(self, h) -> DiagGaussian:
        h = _t(h)
        x = dm.tanh(self._linear("prior.hidden", h))
        out = self._linear("prior.out", x)
        d = self.config.stoch_dim
        return DiagGaussian.from_raw(out[..., :d], out[..., d:])

    # -- experts and decoders -----------------------------------------

    def features(self, spec: ModalitySpec, o) -> Tensor:
        """Per-modality embedding of a raw observation (shared by both fusion modes)."""
        o = _t(o)
        nd = len(spec.shape)
        if o.shape[o.ndim - nd:] != spec.shape:
            raise ShapeError(f"encode[{spec.name}]", f"observation {o.shape} does not end with {spec.shape}")
        lead = o.shape[:o.ndim - nd]
        p = f"enc.{spec.name}"
        if spec.kind == DENSE:
            x = dm.tanh(self._linear(p + ".l1", o))
            return dm.tanh(self._linear(p + ".l2", x))
        x = dm.reshape(o, (-1,) + spec.shape)
        for i in range(3):
            x = dm.tanh(dm.conv2d(x, self.params[f"{p}.conv{i}.w"], stride=2, padding=1,
                                  bias=self.params[f"{p}.conv{i}.b"]))
        x = dm.reshape(x, lead + (-1,))
        return dm.tanh(self._linear(p + ".l1", x))

    def encode_expert(self, spec: ModalitySpec, o) -> DiagGaussian:
        """Gaussian over ``s`` from this modality's current observation alone."""
        out = self._linear(f"enc.{spec.name}.head", self.features(spec, o))
        d = self.config.stoch_dim
        return DiagGaussian.from_raw(out[..., :d], out[..., d:])

    def decode(self, spec: ModalitySpec, h, s) -> DiagGaussian:
        """Unit-stddev Gaussian over the modality, conditioned on ``concat(h, s)``."""
        h, s = _t(h), _t(s)
        if h.shape[:-1] != s.shape[:-1]:
            raise ShapeError(f"decode[{spec.name}]", f"h {h.shape} and s {s.shape} batch shapes differ")
        lead = h.shape[:-1]
        p = f"dec.{spec.name}"
        x = dm.concat([h, s], axis=-1)
        if spec.kind == DENSE:
            x = dm.tanh(self._linear(p + ".l1", x))
            x = dm.tanh(self._linear(p + ".l2", x))
            mean = self._linear(p + ".out", x)
        else:
            c, hh, ww = spec.shape
            ch = self.config.image_channels
            x = dm.tanh(self._linear(p + ".l1", x))
            x = dm.reshape(x, (-1, ch[2], hh // 8, ww // 8))
            for i, (size, act) in enumerate(((hh // 4, True), (hh // 2, True), (hh, False))):
                x = dm.conv_transpose2d(x, self.params[f"{p}.tconv{i}.w"], stride=2, padding=1,
                                        output_size=(size, size * ww // hh), bias=self.params[f"{p}.tconv{i}.b"])
                if act:
                    x = dm.tanh(x)
            mean = dm.reshape(x, lead + spec.shape)
        ones = Tensor._wrap(np.ones(mean.shape, dtype=mean.data.dtype))
        return DiagGaussian(mean, ones, event_ndim=len(spec.shape))

    def encode_concat(self, obs: ObservationSet, h) -> DiagGaussian:
        """Baseline posterior from concatenated features; every modality must be present."""
        if "concat.hidden.w" not in self.params:
            raise ValueError("encode_concat: model was built without a concatenation head")
        missing = [n for n in self.config.names if n not in obs.values]
        if missing:
            raise MissingModalityError(f"concatenation fusion needs every modality; missing {missing}")
        h = _t(h)
        feats = [self.features(spec, obs.values[spec.name]) for spec in self.config.modalities]
        x = dm.tanh(self._linear("concat.hidden", dm.concat(feats + [h], axis=-1)))
        out = self._linear("concat.out", x)
        d = self.config.stoch_dim
        return DiagGaussian.from_raw(out[..., :d], out[..., d:])

    # -- filtering and prediction -------------------------------------

    def initial_state(self, batch_shape=(), noise=None) -> LatentState:
        """``h = 0``; ``s`` is ``noise`` (a standard-normal draw) or zero."""
        cfg = self.config
        batch_shape = tuple(batch_shape)
        h = Tensor(np.zeros(batch_shape + (cfg.deter_dim,)))
        s = Tensor(np.zeros(batch_shape + (cfg.stoch_dim,)) if noise is None else noise)
        std_normal = DiagGaussian.standard(batch_shape + (cfg.stoch_dim,))
        return LatentState(h, s, std_normal, std_normal)

    def posterior(self, prior: DiagGaussian, obs: ObservationSet, h) -> DiagGaussian:
        unknown = obs.present() - set(self.config.names)
        if unknown:
            raise KeyError(f"unknown modalities {sorted(unknown)}")
        if self.config.fusion == "concat":
            return self.encode_concat(obs, h)
        # fuse in declaration order so the result ignores listing order
        experts = [self.encode_expert(spec, obs.values[spec.name])
                   for spec in self.config.modalities if spec.name in obs.values]
        return poe_fuse([prior] + experts)

    def filter_step(self, prev: LatentState, a_prev, obs: ObservationSet, noise) -> LatentState:
        h = self.deterministic_step(prev.h, prev.s, a_prev)
        prior = self.prior_head(h)
        post = self.posterior(prior, obs, h)
        return LatentState(h, rsample(post, noise), prior, post)

    def rollout_filter(self, init: LatentState, actions: Sequence, observations: Sequence[ObservationSet],
                       noises: Sequence) -> list[LatentState]:
        if not (len(actions) == len(observations) == len(noises)):
            raise ValueError(f"length mismatch: {len(actions)} actions, {len(observations)} observations, "
                             f"{len(noises)} noise draws")
        states = []
        state = init
        for a, obs, eps in zip(actions, observations, noises):
            state = self.filter_step(state, a, obs, eps)
            states.append(state)
        return states

    def predict_open_loop(self, state: LatentState, future_actions: Sequence, noises: Sequence | None = None,
                          decode: Sequence[str] | None = None, sample: bool = False):
        """Roll the prior forward under planned actions.

        Returns one ``(prior, {modality: decoded mean})`` pair per step. By
        default the prior mean is propagated (deterministic); with
        ``sample=True`` the supplied ``noises`` draw from each prior.
        """
        if len(future_actions) == 0:
            raise ValueError("predict_open_loop: horizon must be >= 1")
        if sample and (noises is None or len(noises) != len(future_actions)):
            raise ValueError("predict_open_loop: sampled mode needs one noise draw per step")
        names = list(decode) if decode is not None else self.config.names
        specs = [self.config.spec(n) for n in names]
        h, s = state.h, state.s
        out = []
        for k, a in enumerate(future_actions):
            h = self.deterministic_step(h, s, a)
            prior = self.prior_head(h)
            s = rsample(prior, noises[k]) if sample else prior.mean
            out.append((prior, {spec.name: self.decode(spec, h, s).mean for spec in specs}))
        return out


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    cfg = config
    shapes: dict[str, tuple] = {}

    def linear(prefix, n_in, n_out):
        shapes[prefix + ".w"] = ("glorot", (n_in, n_out), n_in, n_out)
        shapes[prefix + ".b"] = ("zeros", (n_out,))

    d_h, d_s, d_e, d_hid = cfg.deter_dim, cfg.stoch_dim, cfg.embed_dim, cfg.hidden_dim
    linear("gru.embed", d_s + cfg.action_dim, d_e)
    linear("gru.input", d_e, 3 * d_h)
    shapes["gru.hidden.w"] = ("glorot", (d_h, 3 * d_h), d_h, d_h)
    linear("prior.hidden", d_h, d_hid)
    linear("prior.out", d_hid, 2 * d_s)
    ch = cfg.image_channels
    for spec in cfg.modalities:
        e, dcd = f"enc.{spec.name}", f"dec.{spec.name}"
        if spec.kind == DENSE:
            linear(e + ".l1", spec.size, d_hid)
            linear(e + ".l2", d_hid, d_e)
            linear(dcd + ".l1", d_h + d_s, d_hid)
            linear(dcd + ".l2", d_hid, d_hid)
            linear(dcd + ".out", d_hid, spec.size)
        else:
            c, hh, ww = spec.shape
            enc_ch = (c,) + ch
            for i in range(3):
                fan_in, fan_out = enc_ch[i] * 16, enc_ch[i + 1] * 16
                shapes[f"{e}.conv{i}.w"] = ("glorot", (enc_ch[i + 1], enc_ch[i], 4, 4), fan_in, fan_out)
                shapes[f"{e}.conv{i}.b"] = ("zeros", (enc_ch[i + 1],))
            linear(e + ".l1", ch[2] * (hh // 8) * (ww // 8), d_e)
            linear(dcd + ".l1", d_h + d_s, ch[2] * (hh // 8) * (ww // 8))
            # transposed-conv weights use the matching conv layout (C_small, C_big, k, k)
            dec_ch = (ch[2], ch[1], ch[0], c)
            for i in range(3):
                fan_in, fan_out = dec_ch[i] * 4, dec_ch[i + 1] * 4
                shapes[f"{dcd}.tconv{i}.w"] = ("glorot", (dec_ch[i], dec_ch[i + 1], 4, 4), fan_in, fan_out)
                shapes[f"{dcd}.tconv{i}.b"] = ("zeros", (dec_ch[i + 1],))
        linear(e + ".head", d_e, 2 * d_s)
    if cfg.fusion == "concat":
        linear("concat.hidden", d_e * len(cfg.modalities) + d_h, d_hid)
        linear("concat.out", d_hid, 2 * d_s)

    params = {}
    for name, spec in shapes.items():
        if spec[0] == "zeros":
            arr = np.zeros(spec[1])
        else:
            arr = _glorot(rng, spec[2], spec[3], spec[1])
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return params


# ----------------------------------------------------------------------
# checkpoint container:
#   8 bytes magic b"MRSSMCK1"
#   8 bytes little-endian uint64 manifest length N
#   N bytes UTF-8 JSON manifest {"format", "config", "tensors": [{name, shape, offset}], "extra"}
#   payload of little-endian float32 values; offsets are bytes from payload start

CHECKPOINT_MAGIC = b"MRSSMCK1"


def save_checkpoint(path, model: MRSSM, extra: Mapping | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, t in model.params.items():
        blob = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps({"format": 1, "config": model.config.to_dict(), "tensors": entries,
                           "extra": dict(extra or {})}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[MRSSM, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    payload = memoryview(raw)[16 + n:]
    params = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 4 * count > len(payload):
            raise ValueError(f"{path}: payload truncated in tensor {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).astype(np.float32).reshape(shape)
        params[entry["name"]] = Tensor(arr, requires_grad=True)
    config = ModelConfig.from_dict(manifest["config"])
    return MRSSM(config, params), manifest.get("extra", {})


def with_fusion(config: ModelConfig, fusion: str) -> ModelConfig:
    return replace(config, fusion=fusion)
