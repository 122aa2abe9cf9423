"""Encoder, decoders, factor map, diffusion generator and factor classifiers.

Tensor layouts used throughout (B = batch, N = factors):

* signals: (B, 2, L) with rows I and Q
* factor/space codes: (B, N, d_C)
* space field: (B, N, d_S) with d_S = L
* factor map: (B, L, d_F)
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from ._io import DataError, atomic_write
from .autodiff import ContractError, Tensor

ENCODER_CHANNELS = (16, 32, 64, 64)
ENCODER_KERNEL = 5
DENOISER_KERNEL = 5
SPACE_CHANNELS = 8
TIME_EMBED_DIM = 32
# per-coordinate variance of a unit-power complex signal
DATA_VAR = 0.5


# ---------------------------------------------------------------- building blocks

class Linear:
    def __init__(self, params: "ParamStore", name: str, d_in: int, d_out: int, zero: bool = False):
        scale = 0.0 if zero else math.sqrt(2.0 / d_in)
        self.w = params.add(f"{name}.w", (d_in, d_out), scale)
        self.b = params.add(f"{name}.b", (d_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b


class Conv1d:
    def __init__(self, params: "ParamStore", name: str, c_in: int, c_out: int, k: int,
                 zero: bool = False):
        scale = 0.0 if zero else math.sqrt(2.0 / (c_in * k))
        self.w = params.add(f"{name}.w", (c_out, c_in, k), scale)
        self.b = params.add(f"{name}.b", (c_out,), 0.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b)


class ParamStore:
    """Named parameters in creation order, initialised from one seeded stream."""

    def __init__(self, seed: int):
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA11]))
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, shape: tuple[int, ...], scale: float) -> Tensor:
        if name in self.tensors:
            raise ContractError(f"duplicate parameter {name}")
        data = self._rng.standard_normal(shape) * scale
        t = Tensor(data, requires_grad=True, name=name)
        self.tensors[name] = t
        return t


def avg_pool2(x: Tensor) -> Tensor:
    b, c, n = x.shape
    return ad.mean(ad.reshape(x, (b, c, n // 2, 2)), axis=3)


def upsample2(x: Tensor) -> Tensor:
    b, c, n = x.shape
    col = ad.reshape(x, (b, c, n, 1))
    return ad.reshape(ad.concat([col, col], axis=3), (b, c, 2 * n))


def timestep_embedding(t: np.ndarray, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=float)[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


# ---------------------------------------------------------------- data types

@dataclass
class Representations:
    factor_codes: Tensor  # (B, N, d_C)
    space_codes: Tensor   # (B, N, d_C)

    @property
    def n_factors(self) -> int:
        return self.factor_codes.shape[1]

    def vectors(self) -> list[np.ndarray]:
        """The 2N code vectors of the first signal, factor codes first."""
        return [self.factor_codes.data[0, n] for n in range(self.n_factors)] + \
               [self.space_codes.data[0, n] for n in range(self.n_factors)]


@dataclass
class FactorMap:
    components: list[Tensor]  # N tensors (B, L, d_F), each rank-1 per signal

    @property
    def map(self) -> Tensor:
        total = self.components[0]
        for c in self.components[1:]:
            total = total + c
        return total


class NoiseSchedule:
    """Linear beta schedule; index t runs 1..T, alpha_bar[0] = 1 by convention."""

    def __init__(self, steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.07):
        if steps < 1:
            raise ContractError("schedule needs at least one step")
        beta = np.linspace(beta_start, beta_end, steps)
        if not (0 < beta[0] and beta[-1] < 1 and np.all(np.diff(beta) >= 0)):
            raise ContractError("betas must be non-decreasing inside (0, 1)")
        self.steps = steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.beta = np.concatenate([[0.0], beta])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)
        if not np.all(np.diff(self.alpha_bar) < 0):
            raise ContractError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] >= 0.05:
            raise ContractError(
                f"alpha_bar_T = {self.alpha_bar[-1]:.3f} >= 0.05; the chain does not reach noise")

    @property
    def T(self) -> int:
        return self.steps

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ContractError(f"diffusion step out of range [1, {self.steps}]")
        return t


def diffuse_forward(x0: np.ndarray, t, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(x_t | x_0): sqrt(ab_t) x_0 + sqrt(1 - ab_t) eps, per leading-axis sample."""
    t = schedule.check_t(t)
    x0 = np.asarray(x0, dtype=float)
    if noise.shape != x0.shape:
        raise ContractError("noise must match x0 shape")
    ab = schedule.alpha_bar[t]
    ab = np.reshape(ab, ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise


def posterior_step(x0_hat: np.ndarray, x_t: np.ndarray, t: int, schedule: NoiseSchedule):
    """Mean and std of q(x_{t-1} | x_t, x0_hat)."""
    ab_t = schedule.alpha_bar[t]
    ab_prev = schedule.alpha_bar[t - 1]
    beta_t = schedule.beta[t]
    c0 = math.sqrt(ab_prev) * beta_t / (1.0 - ab_t)
    ct = math.sqrt(schedule.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab_t)
    var = beta_t * (1.0 - ab_prev) / (1.0 - ab_t)
    return c0 * x0_hat + ct * x_t, math.sqrt(var)


def sample_reverse(denoise: Callable[[np.ndarray, int], np.ndarray], x_start: np.ndarray,
                   schedule: NoiseSchedule, rng: np.random.Generator,
                   t_start: int | None = None) -> np.ndarray:
    """Ancestral sampling from ``t_start`` (default T) down to 0.

    ``denoise(x_t, t)`` returns the predicted clean signal.
    """
    t_start = schedule.T if t_start is None else int(t_start)
    schedule.check_t(t_start)
    x = np.array(x_start, dtype=float)
    for t in range(t_start, 0, -1):
        mu, sigma = posterior_step(denoise(x, t), x, t, schedule)
        x = mu + sigma * rng.standard_normal(x.shape) if t > 1 else mu
    return x


# ---------------------------------------------------------------- the model

@dataclass(frozen=True)
class ModelConfig:
    length: int = 64
    cards: tuple[int, ...] = (3, 3, 3)
    d_c: int = 16
    d_f: int = 32
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.07

    @property
    def n_factors(self) -> int:
        return len(self.cards)

    def to_vector(self) -> np.ndarray:
        return np.array([self.length, self.d_c, self.d_f, self.steps, self.beta_start,
                         self.beta_end, *self.cards], dtype=float)

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "ModelConfig":
        return cls(length=int(v[0]), d_c=int(v[1]), d_f=int(v[2]), steps=int(v[3]),
                   beta_start=float(v[4]), beta_end=float(v[5]),
                   cards=tuple(int(k) for k in v[6:]))


class DisentangleModel:
    """E, D_F, D_S, factor-map projections, denoiser G and the N classifier heads."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        if config.length % 16:
            raise ContractError("signal length must be a multiple of 16")
        self.config = config
        self.schedule = NoiseSchedule(config.steps, config.beta_start, config.beta_end)
        p = self.params = ParamStore(seed)
        n, d_c, d_f, length = config.n_factors, config.d_c, config.d_f, config.length

        chans = (2,) + ENCODER_CHANNELS
        self.enc_convs = [Conv1d(p, f"enc.conv{i}", chans[i], chans[i + 1], ENCODER_KERNEL)
                          for i in range(len(ENCODER_CHANNELS))]
        self.enc_factor_head = Linear(p, "enc.factor_head", chans[-1], n * d_c)
        self.enc_space_head = Linear(p, "enc.space_head", chans[-1], n * d_c)

        self.df = [(Linear(p, f"df{i}.l1", d_c, d_f), Linear(p, f"df{i}.l2", d_f, d_f))
                   for i in range(n)]

        self.ds_in = Linear(p, "ds.in", d_c, SPACE_CHANNELS * (length // 8))
        self.ds_convs = [Conv1d(p, f"ds.conv{i}", SPACE_CHANNELS, SPACE_CHANNELS, 3) for i in range(3)]
        self.ds_out = Conv1d(p, "ds.out", SPACE_CHANNELS, 1, 3)

        self.fm_code = [Linear(p, f"fm{i}.code", d_c, d_f) for i in range(n)]
        self.fm_space_conv = [Conv1d(p, f"fm{i}.space_conv", 1, 4, 3) for i in range(n)]
        self.fm_space_lp = [Linear(p, f"fm{i}.space_lp", 4 * d_c, length) for i in range(n)]

        self.g_time1 = Linear(p, "g.time1", TIME_EMBED_DIM, d_f)
        self.g_time2 = Linear(p, "g.time2", d_f, d_f)
        self.g_in = Conv1d(p, "g.in", 2, d_f, DENOISER_KERNEL)
        self.g_mid = Conv1d(p, "g.mid", d_f, d_f, DENOISER_KERNEL)
        self.g_post = [Conv1d(p, f"g.post{i}", d_f, d_f, DENOISER_KERNEL) for i in range(2)]
        self.g_out = Conv1d(p, "g.out", d_f, 2, DENOISER_KERNEL, zero=True)

        self.heads = [Linear(p, f"cls{i}", d_f, k) for i, k in enumerate(config.cards)]

    # -- parameter access

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params.tensors

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.tensors.values())

    def groups(self) -> dict[str, list[str]]:
        """Parameter names keyed by sub-network (E, D_F, D_S, FM, G, C)."""
        prefix = {"enc": "E", "df": "D_F", "ds": "D_S", "fm": "FM", "g": "G", "cls": "C"}
        out: dict[str, list[str]] = {v: [] for v in prefix.values()}
        for name in self.params.tensors:
            head = name.split(".")[0].rstrip("0123456789")
            out[prefix[head]].append(name)
        return out

    # -- forward pieces

    def _as_batch(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != 2 or x.shape[2] != self.config.length:
            raise ContractError(f"expected signals of shape (B, 2, {self.config.length}), got {x.shape}")
        return x

    def encode(self, x) -> Representations:
        h = self._as_batch(x)
        for conv in self.enc_convs:
            h = avg_pool2(ad.leaky_relu(conv(h)))
        h = ad.mean(h, axis=2)
        b = h.shape[0]
        n, d_c = self.config.n_factors, self.config.d_c
        zc = ad.reshape(self.enc_factor_head(h), (b, n, d_c))
        zs = ad.reshape(self.enc_space_head(h), (b, n, d_c))
        return Representations(zc, zs)

    def decode_factor(self, factor_codes: Tensor) -> list[Tensor]:
        feats = []
        for i, (l1, l2) in enumerate(self.df):
            z = factor_codes[:, i, :]
            feats.append(l2(ad.leaky_relu(l1(z))))
        return feats

    def space_logits(self, space_codes: Tensor) -> Tensor:
        """Shared D_S applied to every space code: (B, N, d_C) -> (B, N, L)."""
        b, n, d_c = space_codes.shape
        length = self.config.length
        h = self.ds_in(ad.reshape(space_codes, (b * n, d_c)))
        h = ad.reshape(ad.leaky_relu(h), (b * n, SPACE_CHANNELS, length // 8))
        for conv in self.ds_convs:
            h = ad.leaky_relu(conv(upsample2(h)))
        h = self.ds_out(h)
        return ad.reshape(h, (b, n, length))

    def decode_space(self, space_codes: Tensor) -> Tensor:
        """Space field: softmax across the N factors at every position."""
        return ad.softmax(self.space_logits(space_codes), axis=1)

    def build_factor_map(self, reprs: Representations) -> FactorMap:
        b, n, d_c = reprs.factor_codes.shape
        comps = []
        for i in range(n):
            zc = self.fm_code[i](reprs.factor_codes[:, i, :])                     # (B, d_F)
            zs = ad.reshape(reprs.space_codes[:, i, :], (b, 1, d_c))
            zs = ad.leaky_relu(self.fm_space_conv[i](zs))
            z_len = self.fm_space_lp[i](ad.reshape(zs, (b, 4 * d_c)))             # (B, L)
            comps.append(ad.reshape(z_len, (b, -1, 1)) * ad.reshape(zc, (b, 1, -1)))
        return FactorMap(comps)

    def _skip_coeff(self, t: np.ndarray) -> np.ndarray:
        ab = self.schedule.alpha_bar[t]
        return np.sqrt(ab) * DATA_VAR / (ab * DATA_VAR + 1.0 - ab)

    def denoise(self, x_t, t, factor_map) -> Tensor:
        """Predict x_0 from x_t.

        The factor map (B, L, d_F) is added to the mid-depth feature map; a fixed
        linear-Gaussian skip c(t) * x_t carries the trivially recoverable part.
        """
        x_t = self._as_batch(x_t)
        b = x_t.shape[0]
        t = self.schedule.check_t(np.broadcast_to(np.asarray(t), (b,)))
        m_f = factor_map.map if isinstance(factor_map, FactorMap) else ad.as_tensor(factor_map)
        if m_f.shape != (b, self.config.length, self.config.d_f):
            raise ContractError(f"factor map shape {m_f.shape} != (B, L, d_F)")
        temb = Tensor(timestep_embedding(t))
        temb = self.g_time2(ad.leaky_relu(self.g_time1(temb)))
        h = ad.leaky_relu(self.g_in(x_t)) + ad.reshape(temb, (b, -1, 1))
        feat = ad.leaky_relu(self.g_mid(h))
        h = feat + ad.transpose(m_f, (0, 2, 1))
        for conv in self.g_post:
            h = ad.leaky_relu(conv(h))
        skip = Tensor(self._skip_coeff(t)[:, None, None] * x_t.data)
        return self.g_out(h) + skip

    def classify(self, n: int, feature: Tensor, frozen: bool = False) -> Tensor:
        """Softmax over K_n classes; ``frozen`` cuts the gradient into the head."""
        head = self.heads[n]
        w, b = (head.w.detach(), head.b.detach()) if frozen else (head.w, head.b)
        return ad.softmax(ad.matmul(feature, w) + b, axis=-1)

    # -- inference helpers (no tape)

    def generate(self, reprs: Representations, base: np.ndarray, t_start: int,
                 rng: np.random.Generator) -> np.ndarray:
        """Noise ``base`` to ``t_start`` and run the reverse chain under the codes' factor map."""
        m_f = self.build_factor_map(reprs).map
        base = np.asarray(base, dtype=float)
        x_t = diffuse_forward(base, np.full(len(base), t_start), rng.standard_normal(base.shape),
                              self.schedule)
        return sample_reverse(lambda x, t: self.denoise(x, t, m_f).data, x_t, self.schedule, rng,
                              t_start)


# ---------------------------------------------------------------- reference classifier

class SignalClassifier:
    """Plain CNN: the encoder trunk followed by one softmax head per target factor."""

    def __init__(self, length: int, cards: Sequence[int], seed: int = 0, prefix: str = "ref"):
        self.length = length
        self.cards = tuple(cards)
        p = self.params = ParamStore(seed)
        chans = (2,) + ENCODER_CHANNELS
        self.convs = [Conv1d(p, f"{prefix}.conv{i}", chans[i], chans[i + 1], ENCODER_KERNEL)
                      for i in range(len(ENCODER_CHANNELS))]
        self.heads = [Linear(p, f"{prefix}.head{i}", chans[-1], k) for i, k in enumerate(self.cards)]

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params.tensors

    def features(self, x) -> Tensor:
        h = ad.as_tensor(x)
        for conv in self.convs:
            h = avg_pool2(ad.leaky_relu(conv(h)))
        return ad.mean(h, axis=2)

    def predict(self, x) -> list[Tensor]:
        h = self.features(x)
        return [ad.softmax(head(h), axis=-1) for head in self.heads]


# ---------------------------------------------------------------- checkpoint format

RFCK_MAGIC = b"RFCK"
RFCK_VERSION = 1


def save_checkpoint(path, tensors: "dict[str, np.ndarray]") -> None:
    """magic, u16 version, u32 count, then per tensor: u16 name length, name,
    u8 rank, u32 extents, f64 payload (all little-endian)."""
    chunks = [RFCK_MAGIC, struct.pack("<HI", RFCK_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    with atomic_write(path) as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != RFCK_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    try:
        version, count = struct.unpack_from("<HI", raw, 4)
        if version != RFCK_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 8 * n > len(raw):
                raise DataError(f"{path}: truncated checkpoint payload for {name}")
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
            out[name] = arr
    except struct.error as e:
        raise DataError(f"{path}: truncated checkpoint ({e})") from None
    if pos != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return out


def model_state(model: DisentangleModel) -> "OrderedDict[str, np.ndarray]":
    state = OrderedDict([("meta.config", model.config.to_vector())])
    for name, t in model.named_parameters().items():
        state[f"param.{name}"] = t.data
    return state


def model_from_state(state: dict) -> DisentangleModel:
    if "meta.config" not in state:
        raise DataError("checkpoint has no model config record")
    model = DisentangleModel(ModelConfig.from_vector(state["meta.config"]))
    for name, t in model.named_parameters().items():
        key = f"param.{name}"
        if key not in state or state[key].shape != t.shape:
            raise DataError(f"checkpoint missing or mis-shaped parameter {name}")
        t.data = state[key].copy()
    return model
