"""Conditional generation: factor swapping between signals and resampling
factor codes from class-conditional Gaussian pools."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ._io import ConfigError, DataError, atomic_write
from .autodiff import ContractError, Tensor
from .model import DisentangleModel, Representations, SignalClassifier
from .synthrf import SignalDataset, write_rfds
from .trainer import classifier_probs, encode_all, fit_classifier

SOURCE, TARGET = "source", "target"


@dataclass(frozen=True)
class SwapPlan:
    """Take each factor's (factor code, space code) pair from ``source`` or
    ``target``; the target signal is the base that gets noised and regenerated."""

    source: int
    target: int
    origin: tuple[str, ...]
    t_start: int

    def validate(self, n_factors: int, steps: int, n_signals: int | None = None,
                 allow_identity: bool = False) -> "SwapPlan":
        if len(self.origin) != n_factors or any(o not in (SOURCE, TARGET) for o in self.origin):
            raise ContractError(f"origin needs one of {SOURCE!r}/{TARGET!r} per factor")
        if not allow_identity and SOURCE not in self.origin:
            raise ContractError("plan swaps no factor")
        if not 1 <= self.t_start <= steps:
            raise ContractError(f"t_start {self.t_start} outside [1, {steps}]")
        if n_signals is not None:
            for i in (self.source, self.target):
                if not 0 <= i < n_signals:
                    raise ContractError(f"signal id {i} out of range")
        return self


def default_swap_start(model: DisentangleModel) -> int:
    return max(1, model.schedule.T // 2)


def pair_plans(a: int, b: int, n_factors: int, t_start: int) -> list[SwapPlan]:
    """Both directions, every selection except all-source and all-target."""
    plans = []
    for src, dst in ((a, b), (b, a)):
        for sel in itertools.product((TARGET, SOURCE), repeat=n_factors):
            if SOURCE in sel and TARGET in sel:
                plans.append(SwapPlan(src, dst, sel, t_start))
    return plans


def _mix_codes(zc: np.ndarray, zs: np.ndarray, plans: Sequence[SwapPlan]) -> Representations:
    fc = np.empty((len(plans),) + zc.shape[1:])
    sc = np.empty_like(fc)
    for i, p in enumerate(plans):
        for n, o in enumerate(p.origin):
            j = p.source if o == SOURCE else p.target
            fc[i, n], sc[i, n] = zc[j, n], zs[j, n]
    return Representations(Tensor(fc), Tensor(sc))


def _generate(model: DisentangleModel, reprs: Representations, base: np.ndarray, t_start: int,
              seed: int, chunk: int = 128) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E4]))
    out = []
    for s in range(0, len(base), chunk):
        sl = slice(s, s + chunk)
        part = Representations(Tensor(reprs.factor_codes.data[sl]), Tensor(reprs.space_codes.data[sl]))
        out.append(model.generate(part, base[sl], t_start, rng))
    return np.concatenate(out)


def swap_factors(model: DisentangleModel, x: np.ndarray, plans: Sequence[SwapPlan], seed: int = 0,
                 allow_identity: bool = False) -> np.ndarray:
    """Run every plan over signals ``x`` (M, 2, L); returns (P, 2, L).

    Plans are grouped by t_start; each group shares one seeded noise stream.
    """
    if not plans:
        return np.empty((0,) + x.shape[1:])
    for p in plans:
        p.validate(model.config.n_factors, model.schedule.T, len(x), allow_identity)
    used = sorted({i for p in plans for i in (p.source, p.target)})
    remap = {i: k for k, i in enumerate(used)}
    zc, zs = encode_all(model, x[used])
    local = [SwapPlan(remap[p.source], remap[p.target], p.origin, p.t_start) for p in plans]
    out = np.empty((len(plans),) + x.shape[1:])
    for t_start in sorted({p.t_start for p in plans}):
        idx = [i for i, p in enumerate(local) if p.t_start == t_start]
        group = [local[i] for i in idx]
        base = np.stack([x[used][p.target] for p in group])
        out[idx] = _generate(model, _mix_codes(zc, zs, group), base, t_start, seed + t_start)
    return out


def plan_labels(labels: np.ndarray, plans: Sequence[SwapPlan]) -> np.ndarray:
    """Nominal factor labels of each generated signal, taken from the code origins."""
    return np.array([[labels[p.source if o == SOURCE else p.target, n] for n, o in enumerate(p.origin)]
                     for p in plans], dtype=np.int64)


# ---------------------------------------------------------------- resampling

@dataclass
class CodePool:
    """Per (factor, class) mean and covariance of that factor's code."""

    mean: dict
    cov: dict

    def check(self, n: int, k: int) -> None:
        if (n, k) not in self.mean:
            raise DataError(f"empty code pool for factor {n}, class {k}")

    def draw(self, n: int, k: int, count: int, rng: np.random.Generator) -> np.ndarray:
        self.check(n, k)
        mu, cov = self.mean[(n, k)], self.cov[(n, k)]
        w, v = np.linalg.eigh(cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return mu + rng.standard_normal((count, len(mu))) @ root.T


def build_code_pool(model: DisentangleModel, dataset: SignalDataset) -> CodePool:
    zc, _ = encode_all(model, dataset.as_real())
    mean, cov = {}, {}
    for n, k_n in enumerate(dataset.cards):
        for k in range(k_n):
            z = zc[dataset.labels[:, n] == k, n]
            if len(z) == 0:
                continue
            mean[(n, k)] = z.mean(axis=0)
            cov[(n, k)] = np.cov(z, rowvar=False) if len(z) > 1 else np.zeros((z.shape[1],) * 2)
    return CodePool(mean, cov)


def resample_factor(model: DisentangleModel, x: np.ndarray, factor: int, klass: int, pool: CodePool,
                    seed: int = 0, t_start: int | None = None) -> np.ndarray:
    """Replace factor ``factor``'s code with draws from class ``klass``'s pool and regenerate."""
    n = model.config.n_factors
    if not 0 <= factor < n:
        raise ContractError(f"factor index {factor} out of range")
    pool.check(factor, klass)
    t_start = model.schedule.T if t_start is None else int(t_start)
    model.schedule.check_t(t_start)
    x = np.asarray(x, dtype=float)
    zc, zs = encode_all(model, x)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x2E5, factor, klass]))
    zc[:, factor] = pool.draw(factor, klass, len(x), rng)
    return _generate(model, Representations(Tensor(zc), Tensor(zs)), x, t_start, seed)


# ---------------------------------------------------------------- signal statistics

def estimate_noise_power(x: np.ndarray, samples_per_symbol: int = 4) -> np.ndarray:
    """Per-signal noise power from sample differences inside each rectangular symbol.

    ``x`` is (M, 2, L) or complex (M, L). Two noisy samples of the same symbol
    differ by noise only, so half the mean squared difference estimates the
    per-sample noise variance.
    """
    x = np.asarray(x)
    z = x[:, 0] + 1j * x[:, 1] if not np.iscomplexobj(x) else x
    d = np.diff(z, axis=1)
    if samples_per_symbol > 1:
        keep = (np.arange(1, z.shape[1]) % samples_per_symbol) != 0
        d = d[:, keep]
    return (np.abs(d) ** 2).mean(axis=1) / 2.0


def amplitude_cv(x: np.ndarray) -> np.ndarray:
    """Coefficient of variation of |x| per signal."""
    x = np.asarray(x)
    z = x[:, 0] + 1j * x[:, 1] if not np.iscomplexobj(x) else x
    a = np.abs(z)
    return a.std(axis=1) / np.maximum(a.mean(axis=1), 1e-12)


# ---------------------------------------------------------------- probe

@dataclass
class ProbeResult:
    a: int
    b: int
    probs_a_to_b: np.ndarray   # mean classifier output over class-a bases given class-b codes
    probs_b_to_a: np.ndarray
    clean_accuracy: float      # reference classifier on the unswapped signals

    def passes(self) -> bool:
        return bool(self.probs_a_to_b[self.b] > self.probs_a_to_b[self.a]
                    and self.probs_b_to_a[self.a] > self.probs_b_to_a[self.b])


REF_LEARNING_RATE = 3e-3   # at 1e-3 the plain CNN is still under-fit on transmitter after 30 epochs


def train_reference_classifier(dataset: SignalDataset, factor: int, seed: int = 0, epochs: int = 30,
                               learning_rate: float = REF_LEARNING_RATE) -> SignalClassifier:
    clf = SignalClassifier(dataset.length, (dataset.cards[factor],), seed=seed, prefix="ref")
    fit_classifier(clf, dataset.as_real(), dataset.labels[:, factor], epochs=epochs,
                   learning_rate=learning_rate, seed=seed)
    return clf


def swap_probe(model: DisentangleModel, dataset: SignalDataset, a: int, b: int, factor: int = 2,
               classifier: SignalClassifier | None = None, t_start: int | None = None,
               seed: int = 0, max_pairs: int | None = None) -> ProbeResult:
    """Swap one factor's code pair between classes a and b and score the outputs.

    Class-a signals are paired index-wise with class-b signals that share
    every other factor label, so only the probed factor differs.
    """
    if a == b:
        raise ConfigError("swap probe needs two different classes")
    k = dataset.cards[factor]
    if not (0 <= a < k and 0 <= b < k):
        raise ConfigError(f"class ids must be in [0, {k})")
    if classifier is None:
        classifier = train_reference_classifier(dataset, factor, seed)
    t_start = default_swap_start(model) if t_start is None else t_start
    labels = dataset.labels
    others = [n for n in range(len(dataset.cards)) if n != factor]
    origin = tuple(SOURCE if n == factor else TARGET for n in range(len(dataset.cards)))
    plans = []
    for key in sorted({tuple(r) for r in labels[:, others]}):
        same = np.all(labels[:, others] == key, axis=1)
        ia = np.flatnonzero(same & (labels[:, factor] == a))
        ib = np.flatnonzero(same & (labels[:, factor] == b))
        for i, j in zip(ia, ib):
            plans.append(SwapPlan(int(j), int(i), origin, t_start))   # base a, code from b
            plans.append(SwapPlan(int(i), int(j), origin, t_start))   # base b, code from a
    if max_pairs is not None:
        plans = plans[:2 * max_pairs]
    if not plans:
        raise DataError("no signal pairs available for the probe")
    x = dataset.as_real()
    gen = swap_factors(model, x, plans, seed)
    probs = classifier_probs(classifier, gen)[0]
    base_cls = np.array([labels[p.target, factor] for p in plans])
    ref = np.flatnonzero(np.isin(labels[:, factor], (a, b)))
    clean = classifier_probs(classifier, x[ref])[0]
    return ProbeResult(a, b, probs[base_cls == a].mean(axis=0), probs[base_cls == b].mean(axis=0),
                       float(np.mean(clean.argmax(axis=1) == labels[ref, factor])))


# ---------------------------------------------------------------- output

MANIFEST_FIELDS = ("index", "source", "target", "origin", "t_start")


def write_generated(out_dir, signals: np.ndarray, labels: np.ndarray, cards: Sequence[int],
                    plans: Sequence[SwapPlan] | None = None, name: str = "generated") -> tuple:
    """Write generated signals as RFDS plus a CSV manifest; returns both paths."""
    from pathlib import Path

    out_dir = Path(out_dir)
    signals = np.asarray(signals)
    z = signals[:, 0] + 1j * signals[:, 1]
    rfds = out_dir / f"{name}.rfds"
    write_rfds(rfds, SignalDataset(z, labels, tuple(cards), {"generated": True}))
    manifest = out_dir / f"{name}_manifest.csv"
    with atomic_write(manifest, "w") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for i in range(len(signals)):
            if plans is not None:
                p = plans[i]
                w.writerow([i, p.source, p.target, "|".join(p.origin), p.t_start])
            else:
                w.writerow([i, "", "", "", ""])
    return rfds, manifest
