"""Classification comparison on an 8:2 split: the full model, the same model
trained with the classification losses only, and one plain CNN per factor."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._io import DataError, atomic_write
from .model import SignalClassifier
from .synthrf import FACTOR_NAMES, SignalDataset
from .trainer import TrainConfig, classifier_probs, fit_classifier, predict_factors, train

VARIANTS = ("full", "lc_only", "separate")
COMPARE_FORMAT = "#format=rfdrl-compare/1"


@dataclass
class CompareRow:
    variant: str
    accuracy: tuple[float, ...]

    @property
    def average(self) -> float:
        return float(np.mean(self.accuracy))


def split_indices(m: int, seed: int, train_frac: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17])).permutation(m)
    cut = int(round(train_frac * m))
    return np.sort(perm[:cut]), np.sort(perm[cut:])


def _accuracy(probs: list[np.ndarray], labels: np.ndarray) -> tuple[float, ...]:
    return tuple(float(np.mean(p.argmax(axis=1) == labels[:, n])) for n, p in enumerate(probs))


def classify_compare(dataset: SignalDataset, cfg: TrainConfig) -> list[CompareRow]:
    tr, te = split_indices(len(dataset), cfg.seed)
    train_ds, test_ds = dataset.subset(tr), dataset.subset(te)
    x_te, y_te = test_ds.as_real(), test_ds.labels
    rows = []

    full = train(replace(cfg, checkpoint="", trace=""), train_ds).model
    rows.append(CompareRow("full", _accuracy(predict_factors(full, x_te), y_te)))

    lc_cfg = replace(cfg, use_lc=True, use_fd=False, use_se=False, use_rc=False, checkpoint="", trace="")
    lc = train(lc_cfg, train_ds).model
    rows.append(CompareRow("lc_only", _accuracy(predict_factors(lc, x_te), y_te)))

    probs = []
    x_tr = train_ds.as_real()
    for n, k in enumerate(dataset.cards):
        clf = SignalClassifier(dataset.length, (k,), seed=cfg.seed + n, prefix=f"sep{n}")
        fit_classifier(clf, x_tr, train_ds.labels[:, n], epochs=cfg.epochs,
                       batch_size=cfg.batch_size, learning_rate=cfg.learning_rate, seed=cfg.seed + n)
        probs.append(classifier_probs(clf, x_te)[0])
    rows.append(CompareRow("separate", _accuracy(probs, y_te)))
    return rows


def write_compare(path, rows: list[CompareRow], names=FACTOR_NAMES) -> None:
    n = len(rows[0].accuracy)
    with atomic_write(path, "w") as fh:
        fh.write(COMPARE_FORMAT + "\n")
        w = csv.writer(fh)
        w.writerow(["variant"] + [f"acc_{names[i]}" for i in range(n)] + ["acc_avg"])
        for r in rows:
            w.writerow([r.variant] + [repr(a) for a in r.accuracy] + [repr(r.average)])


def read_compare(path) -> list[CompareRow]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"comparison table not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != COMPARE_FORMAT:
        raise DataError(f"{path}: not a comparison table")
    rows = list(csv.reader(lines[1:]))
    return [CompareRow(r[0], tuple(float(v) for v in r[1:-1])) for r in rows[1:]]
