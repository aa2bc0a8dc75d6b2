"""Per-class diagonal Gaussians over the PersonaNet code.

The bank doubles as the parameters of the Gaussian-mixture losses (trained by
gradient) and as the statistics clients hand to one another (merged by an
exponential moving average).
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_VAR_BOUNDS, NonFiniteError, ShapeError, Tensor

LOG_2PI = math.log(2.0 * math.pi)


class ClassGaussianBank:
    """K diagonal Gaussians, stored as means and log-variances of shape (K, d_p)."""

    def __init__(self, K: int, d_p: int, alpha: float = 0.99,
                 means: np.ndarray | None = None, logvars: np.ndarray | None = None):
        if K < 2 or d_p < 1:
            raise ValueError(f"need K >= 2 and d_p >= 1, got K={K}, d_p={d_p}")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {alpha}")
        self.K, self.d_p, self.alpha = K, d_p, alpha
        m = np.zeros((K, d_p)) if means is None else np.array(means, dtype=np.float64)
        v = np.zeros((K, d_p)) if logvars is None else np.array(logvars, dtype=np.float64)
        if m.shape != (K, d_p) or v.shape != (K, d_p):
            raise ShapeError("ClassGaussianBank", m.shape, v.shape, (K, d_p))
        self.means = Tensor(m, requires_grad=True)
        self.logvars = Tensor(v, requires_grad=True)
        self.clamp_()

    @property
    def prior(self) -> np.ndarray:
        return np.full(self.K, 1.0 / self.K)

    @property
    def variances(self) -> np.ndarray:
        return np.exp(self.logvars.data)

    def parameters(self) -> list[Tensor]:
        return [self.means, self.logvars]

    def clamp_(self) -> None:
        self.logvars.data = np.clip(self.logvars.data, *LOG_VAR_BOUNDS)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.means.data.copy(), self.logvars.data.copy()

    def copy(self) -> "ClassGaussianBank":
        return ClassGaussianBank(self.K, self.d_p, self.alpha, *self.snapshot())


def _check_labels(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels out of range [0, {K}): min={labels.min()}, max={labels.max()}")
    return labels


def class_log_densities(bank: ClassGaussianBank, z_p) -> Tensor:
    """log N(z_p[r]; mu_k, Sigma_k) for every row r and class k, shape (B, K)."""
    z_p = ad.as_tensor(z_p)
    if z_p.data.ndim != 2 or z_p.shape[1] != bank.d_p:
        raise ShapeError("class_log_densities", z_p.shape, (-1, bank.d_p))
    B, d = z_p.shape
    diff = ad.sub(ad.reshape(z_p, (B, 1, d)), ad.reshape(bank.means, (1, bank.K, d)))
    inv_var = ad.exp(ad.neg(ad.reshape(bank.logvars, (1, bank.K, d))))
    maha = ad.sum(ad.mul(ad.square(diff), inv_var), axis=-1)
    logdet = ad.sum(bank.logvars, axis=-1)
    return ad.mul(ad.add(ad.add(maha, logdet), d * LOG_2PI), -0.5)


def _log_joint(bank: ClassGaussianBank, z_p, op: str) -> Tensor:
    joint = ad.add(class_log_densities(bank, z_p), np.log(bank.prior))
    if not np.all(np.isfinite(joint.data)):
        raise NonFiniteError(op, "non-finite class log-density")
    return joint


def gmm_log_posterior(bank: ClassGaussianBank, z_p) -> Tensor:
    """log p(k | z_p) under the mixture with the uniform prior, shape (B, K)."""
    joint = _log_joint(bank, z_p, "gmm_log_posterior")
    return ad.sub(joint, ad.log_sum_exp(joint, axis=-1, keepdims=True))


def loss_cls(bank: ClassGaussianBank, z_p, labels) -> Tensor:
    """Batch-mean cross entropy of the mixture posterior against the labels."""
    labels = _check_labels(labels, bank.K)
    joint = _log_joint(bank, z_p, "loss_cls")
    return ad.softmax_cross_entropy(joint, ad.one_hot(labels, bank.K))


def loss_log(bank: ClassGaussianBank, z_p, labels) -> Tensor:
    """Batch-mean negative log-likelihood of z_p under its own class Gaussian."""
    labels = _check_labels(labels, bank.K)
    z_p = ad.as_tensor(z_p)
    if z_p.data.ndim != 2 or z_p.shape[1] != bank.d_p:
        raise ShapeError("loss_log", z_p.shape, (-1, bank.d_p))
    onehot = ad.one_hot(labels, bank.K)
    mu_y = ad.matmul(onehot, bank.means)
    lv_y = ad.matmul(onehot, bank.logvars)
    quad = ad.mul(ad.square(ad.sub(z_p, mu_y)), ad.exp(ad.neg(lv_y)))
    per_row = ad.mul(ad.sum(ad.add(ad.add(quad, lv_y), LOG_2PI), axis=-1), 0.5)
    return ad.mean(per_row)


def ema_merge(bank: ClassGaussianBank, inherited_means: np.ndarray, inherited_logvars: np.ndarray) -> None:
    """Blend inherited statistics into the bank in place.

    Means mix linearly; variances mix in variance space and are re-logged.
    """
    im = np.asarray(inherited_means, dtype=np.float64)
    iv = np.asarray(inherited_logvars, dtype=np.float64)
    if im.shape != (bank.K, bank.d_p) or iv.shape != (bank.K, bank.d_p):
        raise ShapeError("ema_merge", im.shape, iv.shape, (bank.K, bank.d_p))
    a = bank.alpha
    bank.means.data = a * bank.means.data + (1.0 - a) * im
    var = a * np.exp(bank.logvars.data) + (1.0 - a) * np.exp(iv)
    bank.logvars.data = np.log(var)
    bank.clamp_()
