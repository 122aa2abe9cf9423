"""Synthetic factor-labelled I/Q signals.

Every signal goes through the same transmitter -> channel chain::

    bits -> constellation -> rectangular pulses -> IQ imbalance (+ DC)
         -> cubic PA -> CFO ramp -> AWGN

The three labelled factors are the SNR class (channel), the modulation family
and the transmitter identity, whose hardware profile fixes the impairments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._io import ConfigError, DataError, atomic_write, read_kv_config

FAMILIES = ("ASK", "PSK", "PAM", "QAM", "QAM_cross")
VALID_ORDERS = {
    "ASK": (2, 4),
    "PAM": (2, 4),
    "PSK": (2, 4, 8),
    "QAM": (16, 64),
    "QAM_cross": (32, 128),
}
# one order per family keeps the five constellations pairwise disjoint
DEFAULT_ORDER = {"ASK": 4, "PSK": 4, "PAM": 4, "QAM": 16, "QAM_cross": 32}

# half-widths of the transmitter profile grids at impairment_scale = 1
GAIN_RANGE = 0.06
PHASE_RANGE = 0.05
CFO_RANGE = 0.004
PA_RANGE = (-0.02, -0.005)
DC_RANGE = 0.02

FACTOR_NAMES = ("snr", "mod", "tx")


def constellation(family: str, order: int) -> np.ndarray:
    """Unit-mean-power constellation points in a fixed index order."""
    if family not in VALID_ORDERS or order not in VALID_ORDERS[family]:
        raise ConfigError(f"unsupported modulation {family}/{order}")
    if family == "ASK":
        pts = np.arange(1, order + 1, dtype=float).astype(complex)
    elif family == "PAM":
        pts = np.arange(-(order - 1), order, 2, dtype=float).astype(complex)
    elif family == "PSK":
        pts = np.exp(2j * np.pi * np.arange(order) / order)
        pts = np.round(pts.real, 15) + 1j * np.round(pts.imag, 15)
    else:
        side = int(math.isqrt(order))
        if family == "QAM_cross":
            side = int(round(math.sqrt(order * 9 / 8)))
        axis = np.arange(-(side - 1), side, 2, dtype=float)
        grid = (axis[None, :] + 1j * axis[:, None]).ravel()
        if family == "QAM_cross":
            corner = int(math.isqrt((side * side - order) // 4))
            edge = side - 1 - 2 * corner
            keep = ~((np.abs(grid.real) > edge) & (np.abs(grid.imag) > edge))
            grid = grid[keep]
        pts = grid
    if len(pts) != order:
        raise AssertionError(f"{family}/{order}: built {len(pts)} points")
    return pts / np.sqrt(np.mean(np.abs(pts) ** 2))


def map_symbols(family: str, order: int, bits) -> np.ndarray:
    """Map a 0/1 bit stream to constellation symbols, MSB first per symbol."""
    points = constellation(family, order)
    k = int(math.log2(order))
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size % k:
        raise ConfigError(f"bit count {bits.size} is not a multiple of {k}")
    groups = bits.reshape(-1, k)
    idx = groups @ (1 << np.arange(k - 1, -1, -1))
    return points[idx]


def pulse_shape(symbols, samples_per_symbol: int, length: int) -> np.ndarray:
    symbols = np.asarray(symbols, dtype=complex)
    if symbols.size == 0:
        raise ConfigError("pulse_shape needs at least one symbol")
    x = np.repeat(symbols, samples_per_symbol)[:length]
    if x.size < length:
        x = np.concatenate([x, np.zeros(length - x.size, dtype=complex)])
    return _unit_power(x)


def _unit_power(x: np.ndarray) -> np.ndarray:
    p = np.mean(np.abs(x) ** 2)
    if p <= 0:
        raise DataError("cannot normalize an all-zero signal")
    return x / np.sqrt(p)


def apply_iq_imbalance(x, gain: float, phase: float) -> np.ndarray:
    """I' = (1+g) I,  Q' = Q cos(phi) + I sin(phi)."""
    x = np.asarray(x, dtype=complex)
    i, q = x.real, x.imag
    return (1.0 + gain) * i + 1j * (q * np.cos(phase) + i * np.sin(phase))


def apply_cfo(x, cfo: float) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    n = np.arange(x.shape[-1])
    return x * np.exp(2j * np.pi * cfo * n)


def apply_pa_nonlinearity(x, a3: float) -> np.ndarray:
    """Memoryless cubic compression followed by renormalization to unit power."""
    x = np.asarray(x, dtype=complex)
    return _unit_power(x * (1.0 + a3 * np.abs(x) ** 2))


def apply_awgn(x, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add circular complex Gaussian noise of variance 10^(-snr/10) per sample."""
    x = np.asarray(x, dtype=complex)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    var = 10.0 ** (-snr_db / 10.0)
    noise = rng.standard_normal(x.shape) + 1j * rng.standard_normal(x.shape)
    return x + np.sqrt(var / 2.0) * noise


@dataclass(frozen=True)
class TransmitterProfile:
    iq_gain_imbalance: float
    iq_phase_imbalance: float
    cfo: float
    pa_cubic_coeff: float
    dc_offset: complex = 0j

    def __post_init__(self):
        if not abs(self.iq_gain_imbalance) < 0.5:
            raise ConfigError("iq_gain_imbalance out of range")
        if not abs(self.iq_phase_imbalance) < math.pi / 4:
            raise ConfigError("iq_phase_imbalance out of range")
        if not abs(self.cfo) < 0.05:
            raise ConfigError("cfo out of range")
        if not -0.5 < self.pa_cubic_coeff <= 0:
            raise ConfigError("pa_cubic_coeff out of range")

    def as_tuple(self) -> tuple:
        return (self.iq_gain_imbalance, self.iq_phase_imbalance, self.cfo,
                self.pa_cubic_coeff, self.dc_offset)

    def transmit(self, x: np.ndarray) -> np.ndarray:
        y = apply_iq_imbalance(x, self.iq_gain_imbalance, self.iq_phase_imbalance)
        y = apply_pa_nonlinearity(y + self.dc_offset, self.pa_cubic_coeff)
        return apply_cfo(y, self.cfo)


def _grid(lo: float, hi: float, k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 1:
        return np.array([(lo + hi) / 2.0])
    values = np.linspace(lo, hi, k)
    step = (hi - lo) / (k - 1)
    values = values + rng.uniform(-0.1, 0.1, k) * step
    return values[rng.permutation(k)]


def make_profiles(k_tx: int, seed: int, scale: float = 1.0) -> list[TransmitterProfile]:
    """Evenly spaced impairment grids, jittered by 10% of a step and shuffled.

    Each impairment uses its own permutation so transmitter index carries no
    monotone ordering across parameters.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7F17]))
    gain = _grid(-GAIN_RANGE * scale, GAIN_RANGE * scale, k_tx, rng)
    phase = _grid(-PHASE_RANGE * scale, PHASE_RANGE * scale, k_tx, rng)
    cfo = _grid(-CFO_RANGE * scale, CFO_RANGE * scale, k_tx, rng)
    pa = np.clip(_grid(PA_RANGE[0] * scale, PA_RANGE[1] * scale, k_tx, rng), -0.49, 0.0)
    dc_mag = np.abs(_grid(0.0, DC_RANGE * scale, k_tx, rng))
    dc_ang = rng.uniform(-np.pi, np.pi, k_tx)
    return [
        TransmitterProfile(float(gain[i]), float(phase[i]), float(cfo[i]), float(pa[i]),
                           complex(dc_mag[i] * np.exp(1j * dc_ang[i])))
        for i in range(k_tx)
    ]


@dataclass
class SynthConfig:
    length: int = 64
    snr_grid: tuple[float, ...] = (-15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0)
    mod_families: tuple[str, ...] = FAMILIES
    k_tx: int = 7
    signals_per_cell: int = 100
    seed: int = 0
    samples_per_symbol: int = 4
    impairment_scale: float = 1.0

    @property
    def k_snr(self) -> int:
        return len(self.snr_grid)

    @property
    def k_mod(self) -> int:
        return len(self.mod_families)

    @property
    def cards(self) -> tuple[int, int, int]:
        return (self.k_snr, self.k_mod, self.k_tx)

    def validate(self) -> None:
        for name in ("length", "k_tx", "signals_per_cell", "samples_per_symbol"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not self.snr_grid or not self.mod_families:
            raise ConfigError("snr_grid and mod_families must be non-empty")
        for fam in self.mod_families:
            if fam not in FAMILIES:
                raise ConfigError(f"unknown modulation family {fam!r}")
        if len(set(self.mod_families)) != len(self.mod_families):
            raise ConfigError("duplicate modulation family")
        if max(self.cards) > 0xFFFF:
            raise ConfigError("factor cardinality exceeds u16 label range")
        if self.k_snr * self.k_mod * self.k_tx * self.signals_per_cell > 0xFFFFFFFF:
            raise ConfigError("cell count overflow: dataset exceeds u32 signal count")
        if not 0 < self.impairment_scale <= 6:
            raise ConfigError("impairment_scale must be in (0, 6]")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @classmethod
    def from_file(cls, path) -> "SynthConfig":
        raw = read_kv_config(path)
        known = {"L", "length", "snr_grid", "mod_families", "K_snr", "K_mod", "K_tx",
                 "signals_per_cell", "seed", "samples_per_symbol", "impairment_scale"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        cfg = cls()
        try:
            if "L" in raw or "length" in raw:
                cfg.length = int(raw.get("L", raw.get("length")))
            if "snr_grid" in raw:
                cfg.snr_grid = tuple(float(v) for v in raw["snr_grid"].split(","))
            if "mod_families" in raw:
                cfg.mod_families = tuple(v.strip() for v in raw["mod_families"].split(","))
            if "K_tx" in raw:
                cfg.k_tx = int(raw["K_tx"])
            for key in ("signals_per_cell", "seed", "samples_per_symbol"):
                if key in raw:
                    setattr(cfg, key, int(raw[key]))
            if "impairment_scale" in raw:
                cfg.impairment_scale = float(raw["impairment_scale"])
        except ValueError as e:
            raise ConfigError(f"{path}: {e}") from None
        if "K_snr" in raw and int(raw["K_snr"]) != cfg.k_snr:
            raise ConfigError("K_snr does not match snr_grid length")
        if "K_mod" in raw and int(raw["K_mod"]) != cfg.k_mod:
            raise ConfigError("K_mod does not match mod_families length")
        cfg.validate()
        return cfg


class FactorLabels(NamedTuple):
    snr: int
    mod: int
    tx: int


@dataclass
class SignalDataset:
    """Complex signals (M, L) with integer factor labels (M, 3)."""

    signals: np.ndarray
    labels: np.ndarray
    cards: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.complex128)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.cards = tuple(int(k) for k in self.cards)
        if self.signals.ndim != 2 or self.labels.shape != (len(self.signals), len(self.cards)):
            raise DataError("signals/labels shape mismatch")
        for n, k in enumerate(self.cards):
            if len(self.labels) and (self.labels[:, n].min() < 0 or self.labels[:, n].max() >= k):
                raise DataError(f"label of factor {n} out of range [0, {k})")

    def __len__(self) -> int:
        return len(self.signals)

    def __getitem__(self, i: int) -> tuple[np.ndarray, FactorLabels]:
        return self.signals[i], FactorLabels(*map(int, self.labels[i]))

    @property
    def length(self) -> int:
        return self.signals.shape[1]

    def as_real(self) -> np.ndarray:
        """(M, 2, L) float array of I and Q rows, the model input layout."""
        return np.stack([self.signals.real, self.signals.imag], axis=1)

    def subset(self, idx) -> "SignalDataset":
        return SignalDataset(self.signals[idx], self.labels[idx], self.cards, dict(self.meta))


def clean_signal(cfg: SynthConfig, mod_class: int, rng: np.random.Generator) -> np.ndarray:
    family = cfg.mod_families[mod_class]
    order = DEFAULT_ORDER[family]
    n_sym = -(-cfg.length // cfg.samples_per_symbol)
    bits = rng.integers(0, 2, n_sym * int(math.log2(order)))
    return pulse_shape(map_symbols(family, order, bits), cfg.samples_per_symbol, cfg.length)


def _cell_rng(seed: int, cell: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0xCE11, cell]))


def synth_cell(cfg: SynthConfig, profiles, s: int, m: int, t: int) -> np.ndarray:
    cell = (s * cfg.k_mod + m) * cfg.k_tx + t
    rng = _cell_rng(cfg.seed, cell)
    out = np.empty((cfg.signals_per_cell, cfg.length), dtype=complex)
    for i in range(cfg.signals_per_cell):
        x = profiles[t].transmit(clean_signal(cfg, m, rng))
        out[i] = apply_awgn(x, cfg.snr_grid[s], rng)
    return out


def synth_dataset(cfg: SynthConfig) -> SignalDataset:
    """Generate every (snr, mod, tx) cell; a pure function of ``cfg``."""
    cfg.validate()
    profiles = make_profiles(cfg.k_tx, cfg.seed, cfg.impairment_scale)
    signals, labels = [], []
    for s in range(cfg.k_snr):
        for m in range(cfg.k_mod):
            for t in range(cfg.k_tx):
                signals.append(synth_cell(cfg, profiles, s, m, t))
                labels.append(np.tile([s, m, t], (cfg.signals_per_cell, 1)))
    meta = {"snr_grid": list(cfg.snr_grid), "mod_families": list(cfg.mod_families)}
    return SignalDataset(np.concatenate(signals), np.concatenate(labels), cfg.cards, meta)


# ---------------------------------------------------------------- RFDS file format

RFDS_MAGIC = b"RFDS"
RFDS_VERSION = 1
_HEADER = np.dtype([("magic", "S4"), ("version", "<u2"), ("n", "<u2"), ("count", "<u4"),
                    ("length", "<u4"), ("cards", "<u2", (3,))])


def _record_dtype(length: int) -> np.dtype:
    return np.dtype([("labels", "<u2", (3,)), ("iq", "<f4", (2 * length,))])


def write_rfds(path, dataset: SignalDataset) -> None:
    """Little-endian header then per-signal 3 x u16 labels + interleaved f32 I/Q."""
    if len(dataset.cards) != 3:
        raise DataError("RFDS stores exactly three factors")
    header = np.zeros((), dtype=_HEADER)
    header["magic"] = RFDS_MAGIC
    header["version"] = RFDS_VERSION
    header["n"] = 3
    header["count"] = len(dataset)
    header["length"] = dataset.length
    header["cards"] = dataset.cards
    rec = np.zeros(len(dataset), dtype=_record_dtype(dataset.length))
    rec["labels"] = dataset.labels
    iq = np.empty((len(dataset), 2 * dataset.length), dtype=np.float32)
    iq[:, 0::2] = dataset.signals.real
    iq[:, 1::2] = dataset.signals.imag
    rec["iq"] = iq
    with atomic_write(path) as fh:
        fh.write(header.tobytes())
        fh.write(rec.tobytes())


def read_rfds(path) -> SignalDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"dataset file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.itemsize:
        raise DataError(f"{path}: truncated header")
    header = np.frombuffer(raw[:_HEADER.itemsize], dtype=_HEADER)[0]
    if bytes(header["magic"]) != RFDS_MAGIC:
        raise DataError(f"{path}: bad magic")
    if int(header["version"]) != RFDS_VERSION or int(header["n"]) != 3:
        raise DataError(f"{path}: unsupported version/factor count")
    count, length = int(header["count"]), int(header["length"])
    rdt = _record_dtype(length)
    body = raw[_HEADER.itemsize:]
    if len(body) != count * rdt.itemsize:
        raise DataError(f"{path}: expected {count} records of {rdt.itemsize} bytes")
    rec = np.frombuffer(body, dtype=rdt)
    iq = rec["iq"].astype(np.float64)
    signals = iq[:, 0::2] + 1j * iq[:, 1::2]
    return SignalDataset(signals, rec["labels"].astype(np.int64), tuple(int(k) for k in header["cards"]))
