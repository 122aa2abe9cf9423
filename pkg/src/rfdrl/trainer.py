"""Deterministic training loop, Adam, checkpoints and code export."""

from __future__ import annotations

import csv
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from ._io import ConfigError, DataError, atomic_write, parse_bool, read_kv_config
from .autodiff import NumericError, Tensor
from .metrics import ReprDataset
from .model import (DisentangleModel, ModelConfig, SignalClassifier, load_checkpoint,
                    model_from_state, model_state, save_checkpoint)
from .synthrf import FACTOR_NAMES, SignalDataset, read_rfds

SEED_ENV = "RFD_SEED"


# ---------------------------------------------------------------- config

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    use_lc: bool = True   # classification pair: cross-entropy and cross-factor entropy
    use_fd: bool = True
    use_se: bool = True
    use_rc: bool = True
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.07
    d_c: int = 16
    d_f: int = 32
    dataset: str = ""
    checkpoint: str = ""
    trace: str = ""

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (the decorrelation loss needs pairs)")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be positive")
        if not (self.use_lc or self.use_fd or self.use_se or self.use_rc):
            raise ConfigError("at least one loss must be enabled")
        if self.T < 1 or not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError("schedule needs T >= 1 and 0 < beta_start <= beta_end < 1")
        if self.d_c < 1 or self.d_f < 1:
            raise ConfigError("code sizes must be positive")
        return self

    def model_config(self, length: int, cards: Sequence[int]) -> ModelConfig:
        return ModelConfig(length=length, cards=tuple(cards), d_c=self.d_c, d_f=self.d_f,
                           steps=self.T, beta_start=self.beta_start, beta_end=self.beta_end)

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "TrainConfig":
        cfg = cls()
        wkw = {}
        simple = {f.name: f.type for f in fields(cls) if f.name != "weights"}
        for key, value in kv.items():
            try:
                if key.startswith("lambda_") and key[7:] in {f.name for f in fields(L.LossWeights)}:
                    wkw[key[7:]] = float(value)
                elif key.startswith("use_") and key in simple:
                    setattr(cfg, key, parse_bool(value, key))
                elif key in ("epochs", "batch_size", "seed", "T", "d_c", "d_f"):
                    setattr(cfg, key, int(value))
                elif key in ("learning_rate", "beta_start", "beta_end"):
                    setattr(cfg, key, float(value))
                elif key in ("dataset", "checkpoint", "trace"):
                    setattr(cfg, key, value)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except ValueError as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"{key}: {e}") from None
        try:
            cfg.weights = L.LossWeights(**wkw)
        except ad.ContractError as e:
            raise ConfigError(str(e)) from None
        return cfg.validate()

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(read_kv_config(path))


def resolve_seed(config_seed: int, flag_seed: int | None = None) -> int:
    """Explicit flag beats the environment, which beats the config file."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} is not an integer: {env!r}") from None
    return int(config_seed)


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_records(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict([("adam.step", np.array(float(self.step)))])
        for k in self.m:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_records(cls, rec: dict) -> "AdamState":
        st = cls(step=int(rec.get("adam.step", 0)))
        for key, arr in rec.items():
            if key.startswith("adam.m."):
                st.m[key[7:]] = arr.copy()
            elif key.startswith("adam.v."):
                st.v[key[7:]] = arr.copy()
        return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """One bias-corrected Adam update; returns new arrays and advances ``state``."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        out[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return out


def _apply_adam(tensors: "OrderedDict[str, Tensor]", state: AdamState, lr: float) -> None:
    params = {k: t.data for k, t in tensors.items()}
    grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
    with np.errstate(over="ignore", invalid="ignore"):
        new = adam_step(params, grads, state, lr)
    for k, arr in new.items():
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {k} became non-finite after the optimizer step")
    for k, arr in new.items():
        tensors[k].data = arr
        tensors[k].grad = None


# ---------------------------------------------------------------- loss assembly

def compute_losses(model: DisentangleModel, x: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator) -> dict[str, Tensor]:
    """Forward pass producing every enabled loss component (call inside a tape)."""
    reprs = model.encode(x)
    n = model.config.n_factors
    comps: dict[str, Tensor] = {}
    if cfg.use_rc:
        b = x.shape[0]
        t = rng.integers(1, model.schedule.T + 1, size=b)
        noise = rng.standard_normal(x.shape)
        comps["rc"] = L.loss_rc(model.denoise, x, t, noise, model.build_factor_map(reprs),
                                model.schedule)
    if cfg.use_fd:
        comps["fd"] = L.loss_fd(reprs.factor_codes)
    if cfg.use_se:
        comps["se"] = L.loss_se(model.decode_space(reprs.space_codes))
    if cfg.use_lc:
        feats = model.decode_factor(reprs.factor_codes)
        comps["ce"] = L.loss_ce([model.classify(i, f) for i, f in enumerate(feats)], labels)
        comps["ie"] = L.loss_ie({(a, c): model.classify(c, feats[a], frozen=True)
                                 for a in range(n) for c in range(n) if a != c})
    return comps


TRACE_FIELDS = ("epoch", "step", "l_total", "l_rc", "l_fd", "l_se", "l_ce", "l_ie")


@dataclass
class TraceRecord:
    epoch: int
    step: int
    l_total: float
    l_rc: float
    l_fd: float
    l_se: float
    l_ce: float
    l_ie: float


@dataclass
class TrainResult:
    model: DisentangleModel
    trace: list[TraceRecord]
    optimizer: AdamState
    config: TrainConfig


def _batches(m: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(m)
    return np.array_split(perm, max(1, m // batch))


def train(cfg: TrainConfig, dataset: SignalDataset | None = None,
          log: Callable[[TraceRecord], None] | None = None) -> TrainResult:
    cfg.validate()
    if dataset is None:
        if not cfg.dataset:
            raise ConfigError("no dataset given")
        dataset = read_rfds(cfg.dataset)
    x_all = dataset.as_real()
    y_all = np.asarray(dataset.labels)
    if len(x_all) < 2:
        raise DataError("dataset needs at least two signals")

    model = DisentangleModel(cfg.model_config(x_all.shape[2], dataset.cards), seed=cfg.seed)
    params = model.named_parameters()
    opt = AdamState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5F1E]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0xD1FF]))
    trace: list[TraceRecord] = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = dict.fromkeys(("total",) + L.COMPONENTS, 0.0)
        batches = _batches(len(x_all), cfg.batch_size, shuffle_rng)
        for idx in batches:
            step += 1
            try:
                with ad.Tape() as tape:
                    comps = compute_losses(model, x_all[idx], y_all[idx], cfg, noise_rng)
                    total = L.loss_total(comps, cfg.weights)
                    if not math.isfinite(total.item()):
                        raise NumericError("non-finite total loss")
                    tape.backward(total)
                _apply_adam(params, opt, cfg.learning_rate)
            except NumericError as e:
                raise NumericError(f"step {step} (epoch {epoch}): {e}") from None
            sums["total"] += total.item()
            for k, v in comps.items():
                sums[k] += v.item()
        nb = len(batches)
        rec = TraceRecord(epoch, step, sums["total"] / nb, *(sums[k] / nb for k in L.COMPONENTS))
        trace.append(rec)
        if log is not None:
            log(rec)
    result = TrainResult(model, trace, opt, cfg)
    if cfg.checkpoint:
        save_trained(cfg.checkpoint, result)
    if cfg.trace:
        write_trace(cfg.trace, trace)
    return result


def write_trace(path, trace: Sequence[TraceRecord]) -> None:
    with atomic_write(path, "w") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.epoch, r.step] + [repr(float(getattr(r, k))) for k in TRACE_FIELDS[2:]])


def read_trace(path) -> list[TraceRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"trace not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != TRACE_FIELDS:
        raise DataError(f"{path}: bad trace header")
    return [TraceRecord(int(r[0]), int(r[1]), *map(float, r[2:])) for r in rows[1:]]


def save_trained(path, result: TrainResult) -> None:
    state = model_state(result.model)
    state.update(result.optimizer.to_records())
    save_checkpoint(path, state)


def load_trained(path) -> tuple[DisentangleModel, AdamState]:
    state = load_checkpoint(path)
    return model_from_state(state), AdamState.from_records(state)


# ---------------------------------------------------------------- inference helpers

def _chunks(m: int, size: int):
    for start in range(0, m, size):
        yield slice(start, min(m, start + size))


def encode_all(model: DisentangleModel, x: np.ndarray, chunk: int = 256):
    """Factor and space codes for every signal, as numpy arrays (B, N, d_C)."""
    zc, zs = [], []
    for sl in _chunks(len(x), chunk):
        r = model.encode(x[sl])
        zc.append(r.factor_codes.data)
        zs.append(r.space_codes.data)
    return np.concatenate(zc), np.concatenate(zs)


def export_representations(model: DisentangleModel, dataset: SignalDataset) -> ReprDataset:
    """Concatenated factor codes (M, N * d_C) with the dataset's factor labels."""
    zc, _ = encode_all(model, dataset.as_real())
    return ReprDataset(zc.reshape(len(zc), -1), np.asarray(dataset.labels), tuple(dataset.cards),
                       FACTOR_NAMES[:len(dataset.cards)])


def predict_factors(model: DisentangleModel, x: np.ndarray, chunk: int = 256) -> list[np.ndarray]:
    """Per-factor class probabilities from the model's own heads."""
    outs: list[list[np.ndarray]] = [[] for _ in range(model.config.n_factors)]
    for sl in _chunks(len(x), chunk):
        feats = model.decode_factor(model.encode(x[sl]).factor_codes)
        for i, f in enumerate(feats):
            outs[i].append(model.classify(i, f).data)
    return [np.concatenate(o) for o in outs]


def fit_classifier(clf: SignalClassifier, x: np.ndarray, labels: np.ndarray, epochs: int = 30,
                   batch_size: int = 64, learning_rate: float = 1e-3, seed: int = 0) -> list[float]:
    """Cross-entropy training of a plain CNN; ``labels`` is (M, heads). Returns per-epoch loss."""
    labels = np.asarray(labels, dtype=np.int64).reshape(len(x), -1)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1A5]))
    opt = AdamState()
    hist = []
    for _ in range(epochs):
        tot, batches = 0.0, _batches(len(x), batch_size, rng)
        for idx in batches:
            with ad.Tape() as tape:
                loss = L.loss_ce(clf.predict(x[idx]), labels[idx])
                tape.backward(loss)
            _apply_adam(clf.named_parameters(), opt, learning_rate)
            tot += loss.item()
        hist.append(tot / len(batches))
    return hist


def classifier_probs(clf: SignalClassifier, x: np.ndarray, chunk: int = 256) -> list[np.ndarray]:
    outs: list[list[np.ndarray]] = [[] for _ in clf.heads]
    for sl in _chunks(len(x), chunk):
        for i, p in enumerate(clf.predict(x[sl])):
            outs[i].append(p.data)
    return [np.concatenate(o) for o in outs]
