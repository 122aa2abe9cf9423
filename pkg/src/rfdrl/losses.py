"""Training objectives: decorrelation, space entropy, reconstruction,
cross-entropy and the adversarial cross-classifier entropy."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

LOG_FLOOR = 1e-12


@dataclass
class LossWeights:
    rc: float = 0.1
    d: float = 1.0
    t: float = 1.0
    fd: float = 0.5
    se: float = 0.1
    ce: float = 1.0
    ie: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"loss weight {f.name} must be finite and non-negative")
            setattr(self, f.name, v)


def loss_fd(factor_codes: Tensor) -> Tensor:
    """Sum over ordered factor pairs of |sum_m <z_m^a, z_m^b>| / (M - 1) on unit-normalized codes.

    No mean-centering is applied.
    """
    m, n, _ = factor_codes.shape
    if m < 2:
        raise ContractError("loss_fd needs at least two samples")
    z = ad.l2_normalize(factor_codes, axis=2)
    total = None
    for a in range(n):
        for b in range(n):
            if a == b:
                continue
            dot = ad.sum_(z[:, a, :] * z[:, b, :]) / (m - 1)
            term = ad.abs_(dot)
            total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def loss_se(space_field: Tensor) -> Tensor:
    """Mean over samples and positions of the per-position factor entropy, divided by N."""
    m, n, d_s = space_field.shape
    ent = ad.mul(space_field, ad.log(space_field + LOG_FLOOR))
    return ad.sum_(ent) * (-1.0 / (d_s * m * n))


def reconstruction_error(x0_hat: Tensor, x0) -> Tensor:
    """Batch mean of the per-signal sum of squared errors."""
    x0 = ad.as_tensor(x0)
    if x0_hat.shape != x0.shape:
        raise ContractError(f"reconstruction shape mismatch {x0_hat.shape} vs {x0.shape}")
    d = x0_hat - x0
    return ad.sum_(d * d) / x0_hat.shape[0]


def loss_rc(denoise, x0: np.ndarray, t: np.ndarray, noise: np.ndarray, factor_map, schedule) -> Tensor:
    """Noise x0 to x_t in closed form, denoise under the factor map, score the x0 prediction."""
    from .model import diffuse_forward

    x_t = diffuse_forward(x0, t, noise, schedule)
    return reconstruction_error(denoise(x_t, t, factor_map), x0)


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_ce(predictions: Sequence[Tensor], labels) -> Tensor:
    """-sum_n sum_k y log(p + 1e-12), averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] != len(predictions):
        raise ContractError("labels must be (B, N) for N prediction heads")
    b = labels.shape[0]
    total = None
    for n, p in enumerate(predictions):
        y = Tensor(_one_hot(labels[:, n], p.shape[1]))
        term = ad.sum_(y * ad.log(p + LOG_FLOOR))
        total = term if total is None else total + term
    return total * (-1.0 / b)


def entropy(p: Tensor) -> Tensor:
    """Batch-mean Shannon entropy (nats) of row distributions."""
    return ad.sum_(p * ad.log(p + LOG_FLOOR)) * (-1.0 / p.shape[0])


def loss_ie(cross_predictions: Mapping[tuple[int, int], Tensor]) -> Tensor:
    """Sum of entropies of classifier n2 applied to factor n1's feature, n1 != n2.

    This term is maximized; the caller passes predictions made with the heads'
    weights detached so it only reaches the encoder and factor decoder.
    """
    total = None
    for (n1, n2), p in cross_predictions.items():
        if n1 == n2:
            raise ContractError("loss_ie only takes cross-factor predictions")
        term = entropy(p)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def ie_upper_bound(cards: Sequence[int]) -> float:
    n = len(cards)
    return float(sum(np.log(cards[b]) for a in range(n) for b in range(n) if a != b))


COMPONENTS = ("rc", "fd", "se", "ce", "ie")


def loss_total(components: Mapping[str, object], weights: LossWeights):
    """rc*L_RC + d*(fd*L_FD + se*L_SE) + t*(ce*L_CE - ie*L_IE).

    Missing components count as zero. Works on floats or tensors.
    """
    def get(name):
        return components.get(name, 0.0)

    disent = weights.fd * get("fd") + weights.se * get("se")
    clas = weights.ce * get("ce") - weights.ie * get("ie")
    return weights.rc * get("rc") + weights.d * disent + weights.t * clas
