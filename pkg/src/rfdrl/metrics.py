"""Disentanglement metrics over a matrix of codes with ground-truth factor labels.

All discrete information quantities are in nats. Continuous code dimensions
are discretized into equal-population bins (ties stay in one bin, so a
constant dimension carries zero information).

Linear classifiers come from scikit-learn; everything else is computed here.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import roc_auc_score

from ._io import DataError, atomic_write

DEFAULT_BINS = 20


@dataclass
class ReprDataset:
    codes: np.ndarray            # (M, D)
    factors: np.ndarray          # (M, N) integer labels
    cards: tuple[int, ...]
    factor_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=float)
        self.factors = np.asarray(self.factors, dtype=np.int64)
        self.cards = tuple(int(k) for k in self.cards)
        if self.codes.ndim != 2 or self.factors.ndim != 2 or len(self.codes) != len(self.factors):
            raise DataError("codes must be (M, D) and factors (M, N)")
        if self.factors.shape[1] != len(self.cards):
            raise DataError("one cardinality per factor column required")
        if not np.all(np.isfinite(self.codes)):
            raise DataError("codes contain NaN or Inf")
        for n, k in enumerate(self.cards):
            col = self.factors[:, n]
            if col.size and (col.min() < 0 or col.max() >= k):
                raise DataError(f"factor {n} label out of range [0, {k})")
        if not self.factor_names:
            self.factor_names = tuple(f"f{n}" for n in range(len(self.cards)))
        if len(self.codes) < 10 * max(self.cards):
            warnings.warn(f"only {len(self.codes)} samples for factors with up to "
                          f"{max(self.cards)} classes; metric estimates are unreliable",
                          stacklevel=2)

    @property
    def n_factors(self) -> int:
        return len(self.cards)

    def permuted(self, perm: Sequence[int]) -> "ReprDataset":
        return ReprDataset(self.codes[:, perm], self.factors, self.cards, self.factor_names)


# ---------------------------------------------------------------- information estimates

def discretize(codes: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    codes = np.asarray(codes, dtype=float)
    if codes.ndim == 1:
        codes = codes[:, None]
    out = np.empty(codes.shape, dtype=np.int64)
    qs = np.linspace(0, 1, bins + 1)[1:-1]
    for j in range(codes.shape[1]):
        col = codes[:, j]
        edges = np.unique(np.quantile(col, qs))
        out[:, j] = np.searchsorted(edges, col, side="right")
    return out


def entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def joint_entropy(a: np.ndarray, b: np.ndarray) -> float:
    _, counts = np.unique(np.stack([a, b], axis=1), axis=0, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mutual_info(a: np.ndarray, b: np.ndarray) -> float:
    """Plug-in MI of two discrete sequences; exactly symmetric."""
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    joint = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float((joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])).sum())
    return max(mi, 0.0)


def mi_matrix(codes: np.ndarray, factors: np.ndarray, bins: int = DEFAULT_BINS) -> np.ndarray:
    """(D, N) mutual information between binned code dims and factors."""
    disc = discretize(codes, bins)
    factors = np.asarray(factors)
    return np.array([[mutual_info(disc[:, d], factors[:, n]) for n in range(factors.shape[1])]
                     for d in range(disc.shape[1])])


def factor_entropies(factors: np.ndarray) -> np.ndarray:
    return np.array([entropy(factors[:, n]) for n in range(factors.shape[1])])


# ---------------------------------------------------------------- helpers

def _standardize(codes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    std = codes.std(axis=0)
    live = std > 1e-12
    z = (codes - codes.mean(axis=0)) / np.where(live, std, 1.0)
    return z, live


def _fit_linear(x: np.ndarray, y: np.ndarray) -> LogisticRegression:
    clf = LogisticRegression(C=1.0, max_iter=2000)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        clf.fit(x, y)
    return clf


def _split(m: int, frac: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(m)
    cut = int(round(frac * m))
    return perm[:cut], perm[cut:]


def _classify_accuracy(x_tr, y_tr, x_te, y_te) -> float:
    if len(np.unique(y_tr)) < 2:
        return float(np.mean(y_te == y_tr[0]))
    return float(np.mean(_fit_linear(x_tr, y_tr).predict(x_te) == y_te))


# ---------------------------------------------------------------- intervention-style metrics

def z_diff(r: ReprDataset, votes: int = 800, pairs: int = 64, seed: int = 0) -> float:
    """Fixed-factor pair differences -> linear classifier of which factor was fixed."""
    rng = np.random.default_rng(seed)
    z, _ = _standardize(r.codes)
    m = len(z)
    groups = [[np.flatnonzero(r.factors[:, n] == v) for v in range(k)] for n, k in enumerate(r.cards)]
    feats = np.empty((votes, z.shape[1]))
    target = rng.integers(0, r.n_factors, votes)
    for i, k in enumerate(target):
        a = rng.integers(0, m, pairs)
        b = np.empty(pairs, dtype=np.int64)
        for p, ia in enumerate(a):
            pool = groups[k][r.factors[ia, k]]
            b[p] = pool[rng.integers(0, len(pool))]
        feats[i] = np.abs(z[a] - z[b]).mean(axis=0)
    half = votes // 2
    return _classify_accuracy(feats[:half], target[:half], feats[half:], target[half:])


def _majority_vote_accuracy(dims: np.ndarray, target: np.ndarray, n_dims: int, n_factors: int) -> float:
    half = len(dims) // 2
    counts = np.zeros((n_dims, n_factors))
    np.add.at(counts, (dims[:half], target[:half]), 1)
    seen = counts.sum(axis=1) > 0
    mapping = np.where(seen, counts.argmax(axis=1), -1)
    return float(np.mean(mapping[dims[half:]] == target[half:]))


def z_min(r: ReprDataset, votes: int = 800, batch: int = 64, seed: int = 0) -> float:
    """Fix one factor value; the lowest-variance normalized dim votes for that factor."""
    rng = np.random.default_rng(seed)
    z, live = _standardize(r.codes)
    if not live.any():
        return 0.0
    groups = [[np.flatnonzero(r.factors[:, n] == v) for v in range(k)] for n, k in enumerate(r.cards)]
    target = rng.integers(0, r.n_factors, votes)
    dims = np.empty(votes, dtype=np.int64)
    for i, k in enumerate(target):
        pool = groups[k][rng.integers(0, r.cards[k])]
        while len(pool) == 0:
            pool = groups[k][rng.integers(0, r.cards[k])]
        var = z[pool[rng.integers(0, len(pool), batch)]].var(axis=0)
        dims[i] = np.argmin(np.where(live, var, np.inf))
    return _majority_vote_accuracy(dims, target, z.shape[1], r.n_factors)


def z_max(r: ReprDataset, votes: int = 800, batch: int = 64, seed: int = 0) -> float:
    """Group a random batch by one factor; the dim with largest between-class
    variance of means votes for that factor."""
    rng = np.random.default_rng(seed)
    z, live = _standardize(r.codes)
    if not live.any():
        return 0.0
    m = len(z)
    target = rng.integers(0, r.n_factors, votes)
    dims = np.empty(votes, dtype=np.int64)
    for i, k in enumerate(target):
        idx = rng.integers(0, m, batch)
        lab = r.factors[idx, k]
        means = np.array([z[idx[lab == v]].mean(axis=0) for v in np.unique(lab)])
        resp = means.var(axis=0)
        dims[i] = np.argmax(np.where(live, resp, -np.inf))
    return _majority_vote_accuracy(dims, target, z.shape[1], r.n_factors)


# ---------------------------------------------------------------- information-based metrics

def modularity_score(mi: np.ndarray) -> float:
    """Mean over informative dims of 1 - sum_{f != best} MI^2 / (theta^2 (N - 1))."""
    mi = np.asarray(mi, dtype=float)
    n = mi.shape[1]
    theta = mi.max(axis=1)
    keep = theta > 0
    if not keep.any() or n < 2:
        return 0.0
    mi, theta = mi[keep], theta[keep]
    best = mi.argmax(axis=1)
    sq = mi ** 2
    sq[np.arange(len(sq)), best] = 0.0
    dev = sq.sum(axis=1) / (theta ** 2 * (n - 1))
    return float(np.clip(1.0 - dev, 0.0, 1.0).mean())


def dcimig(mi: np.ndarray, entropies: np.ndarray) -> float:
    """Per dim, the top-1 minus top-2 factor MI is credited to the top factor;
    each factor keeps its largest credit; normalized by total factor entropy."""
    mi = np.asarray(mi, dtype=float)
    d, n = mi.shape
    if n < 2:
        return 0.0
    srt = np.sort(mi, axis=1)
    gaps = srt[:, -1] - srt[:, -2]
    best = mi.argmax(axis=1)
    credit = np.zeros(n)
    for j in range(d):
        credit[best[j]] = max(credit[best[j]], gaps[j])
    denom = float(np.sum(entropies))
    return float(np.clip(credit.sum() / denom, 0.0, 1.0)) if denom > 0 else 0.0


def jemmig(codes: np.ndarray, factors: np.ndarray, bins: int = DEFAULT_BINS) -> float:
    """Mean over factors of (H(f, z*) - MI_1 + MI_2) / (H(f) + log bins); lower is better."""
    disc = discretize(codes, bins)
    mi = np.array([[mutual_info(disc[:, d], factors[:, n]) for n in range(factors.shape[1])]
                   for d in range(disc.shape[1])])
    scores = []
    for n in range(factors.shape[1]):
        order = np.argsort(-mi[:, n], kind="stable")
        top = order[0]
        mi1 = mi[top, n]
        mi2 = mi[order[1], n] if len(order) > 1 else 0.0
        h_joint = joint_entropy(disc[:, top], factors[:, n])
        denom = entropy(factors[:, n]) + np.log(bins)
        scores.append((h_joint - mi1 + mi2) / denom)
    return float(np.clip(np.mean(scores), 0.0, 1.0))


def irs(r: ReprDataset, bins: int = DEFAULT_BINS, quantile: float = 0.99,
        per_factor: bool = False):
    """Interventional robustness.

    For factor g, take the code dims whose most informative factor is g (or
    the single top-MI dim if none), and compare their spread while g is held
    at each value against their overall spread. Groups are weighted by size.
    """
    mi = mi_matrix(r.codes, r.factors, bins)
    owner = mi.argmax(axis=1)
    scores = np.zeros(r.n_factors)
    for g in range(r.n_factors):
        dims = np.flatnonzero((owner == g) & (mi[:, g] > 0))
        if dims.size == 0:
            if mi[:, g].max() <= 0:
                continue
            dims = np.array([int(np.argmax(mi[:, g]))])
        z = r.codes[:, dims]
        total = np.quantile(np.linalg.norm(z - z.mean(axis=0), axis=1), quantile)
        if total <= 0:
            continue
        within = 0.0
        for v in np.unique(r.factors[:, g]):
            zv = z[r.factors[:, g] == v]
            dev = np.quantile(np.linalg.norm(zv - zv.mean(axis=0), axis=1), quantile)
            within += dev * len(zv) / len(z)
        scores[g] = np.clip(1.0 - within / total, 0.0, 1.0)
    return scores if per_factor else float(scores.mean())


# ---------------------------------------------------------------- predictor-based metrics

def sap(codes: np.ndarray, factors: np.ndarray, seed: int = 0, split: float = 0.8) -> float:
    """Gap between the two most predictive single dims, averaged over factors.

    Single-dim predictor: nearest class mean on that dim (thresholds at
    midpoints), scored as held-out accuracy above the majority baseline,
    rescaled to [0, 1].
    """
    rng = np.random.default_rng(seed)
    codes = np.asarray(codes, dtype=float)
    tr, te = _split(len(codes), split, rng)
    out = []
    for n in range(factors.shape[1]):
        y_tr, y_te = factors[tr, n], factors[te, n]
        classes = np.unique(y_tr)
        means = np.array([codes[tr][y_tr == c].mean(axis=0) for c in classes])  # (K, D)
        dist = np.abs(codes[te][:, None, :] - means[None, :, :])                 # (M, K, D)
        pred = classes[np.argmin(dist, axis=1)]                                   # (M, D)
        acc = (pred == y_te[:, None]).mean(axis=0)
        base = np.bincount(y_te).max() / len(y_te)
        score = np.clip((acc - base) / max(1e-12, 1.0 - base), 0.0, 1.0)
        top = np.sort(score)[::-1]
        out.append(top[0] - (top[1] if len(top) > 1 else 0.0))
    return float(np.mean(out))


def explicitness_score(codes: np.ndarray, factors: np.ndarray, seed: int = 0,
                       split: float = 0.8) -> float:
    """One-vs-rest ROC-AUC of a linear classifier on the full code, as 2(AUC - 0.5) floored at 0."""
    rng = np.random.default_rng(seed)
    z, _ = _standardize(np.asarray(codes, dtype=float))
    tr, te = _split(len(z), split, rng)
    per_factor = []
    for n in range(factors.shape[1]):
        y_tr, y_te = factors[tr, n], factors[te, n]
        if len(np.unique(y_tr)) < 2:
            per_factor.append(0.0)
            continue
        clf = _fit_linear(z[tr], y_tr)
        prob = clf.predict_proba(z[te])
        aucs = []
        for ci, c in enumerate(clf.classes_):
            pos = y_te == c
            if pos.all() or not pos.any():
                continue
            aucs.append(roc_auc_score(pos, prob[:, ci]))
        auc = float(np.mean(aucs)) if aucs else 0.5
        per_factor.append(max(0.0, 2.0 * (auc - 0.5)))
    return float(np.mean(per_factor))


def apa(codes: np.ndarray, factors: np.ndarray, split: float = 0.8, seed: int = 0) -> np.ndarray:
    """Held-out accuracy of a linear classifier per factor (train fraction ``split``)."""
    rng = np.random.default_rng(seed)
    z, _ = _standardize(np.asarray(codes, dtype=float))
    tr, te = _split(len(z), split, rng)
    return np.array([_classify_accuracy(z[tr], factors[tr, n], z[te], factors[te, n])
                     for n in range(factors.shape[1])])


# ---------------------------------------------------------------- report

@dataclass
class MetricReport:
    z_diff: float
    z_min: float
    z_max: float
    modularity: float
    irs: float
    dcimig: float
    jemmig: float
    sap: float
    explicitness: float
    apa: tuple[float, ...]
    factor_names: tuple[str, ...] = field(default=())

    @property
    def apa_mean(self) -> float:
        return float(np.mean(self.apa))

    def rows(self) -> list[tuple[str, float]]:
        d = asdict(self)
        names = self.factor_names or tuple(f"f{n}" for n in range(len(self.apa)))
        rows = [(k, float(d[k])) for k in ("z_diff", "z_min", "z_max", "modularity", "irs",
                                           "dcimig", "jemmig", "sap", "explicitness")]
        rows.append(("apa", self.apa_mean))
        rows += [(f"apa_{name}", float(v)) for name, v in zip(names, self.apa)]
        return rows


def evaluate(r: ReprDataset, bins: int = DEFAULT_BINS, votes: int = 800, pairs: int = 64,
             seed: int = 0) -> MetricReport:
    mi = mi_matrix(r.codes, r.factors, bins)
    h = factor_entropies(r.factors)
    return MetricReport(
        z_diff=z_diff(r, votes, pairs, seed),
        z_min=z_min(r, votes, pairs, seed),
        z_max=z_max(r, votes, pairs, seed),
        modularity=modularity_score(mi),
        irs=irs(r, bins),
        dcimig=dcimig(mi, h),
        jemmig=jemmig(r.codes, r.factors, bins),
        sap=sap(r.codes, r.factors, seed),
        explicitness=explicitness_score(r.codes, r.factors, seed),
        apa=tuple(float(v) for v in apa(r.codes, r.factors, seed=seed)),
        factor_names=tuple(r.factor_names),
    )


REPORT_FORMAT = "#format=rfdrl-metrics/1"


def write_report(path, report: MetricReport) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(REPORT_FORMAT + "\n")
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for name, value in report.rows():
            w.writerow([name, repr(value)])


def read_report(path) -> dict[str, float]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"report not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != REPORT_FORMAT:
        raise DataError(f"{path}: not a metric report")
    rows = list(csv.reader(lines[1:]))
    if rows[0] != ["metric", "value"]:
        raise DataError(f"{path}: bad header")
    return {name: float(v) for name, v in rows[1:]}


REPR_FORMAT = "#format=rfdrl-repr/1"


def write_repr(path, r: ReprDataset) -> None:
    """CSV: format line, cardinality line, header, then labels followed by codes."""
    with atomic_write(path, "w") as fh:
        fh.write(REPR_FORMAT + "\n")
        fh.write("#cards=" + ",".join(map(str, r.cards)) + "\n")
        w = csv.writer(fh)
        w.writerow(list(r.factor_names) + [f"z{j}" for j in range(r.codes.shape[1])])
        for lab, code in zip(r.factors, r.codes):
            w.writerow([int(v) for v in lab] + [repr(float(v)) for v in code])


def read_repr(path) -> ReprDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"representation file not found: {path}")
    lines = path.read_text().splitlines()
    if len(lines) < 3 or lines[0] != REPR_FORMAT or not lines[1].startswith("#cards="):
        raise DataError(f"{path}: not a representation file")
    cards = tuple(int(v) for v in lines[1][len("#cards="):].split(","))
    rows = list(csv.reader(lines[2:]))
    header, body = rows[0], rows[1:]
    n = len(cards)
    try:
        arr = np.array(body, dtype=float).reshape(len(body), len(header))
    except ValueError as e:
        raise DataError(f"{path}: {e}") from None
    return ReprDataset(arr[:, n:], arr[:, :n].astype(np.int64), cards, tuple(header[:n]))


def oracle_representation(factors: np.ndarray, cards: Sequence[int], block: int = 4,
                          sigma: float = 0.1, seed: int = 0, noise_dims: int = 0) -> np.ndarray:
    """Codes with one dedicated block per factor plus Gaussian noise.

    Each dim in block n holds a fixed random relabelling of factor n's value
    (integer spacing), so every block is linearly separable and each dim is
    informative about exactly one factor.
    """
    rng = np.random.default_rng(seed)
    cols = []
    for n, k in enumerate(cards):
        for _ in range(block):
            perm = rng.permutation(k).astype(float)
            cols.append(perm[factors[:, n]])
    for _ in range(noise_dims):
        cols.append(np.zeros(len(factors)))
    codes = np.stack(cols, axis=1)
    return codes + sigma * rng.standard_normal(codes.shape)
