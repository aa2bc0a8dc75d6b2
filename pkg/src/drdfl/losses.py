"""Learngene, reconstruction and classification losses, plus the loss report.

Gradient routing between the adversarial pair is decided by the caller's
inputs: ``loss_adv`` should see logits computed on a detached code, and
``loss_adv_uniform`` logits computed through a frozen adversary
(``ClientModel.adversary_logits(z_l, frozen=True)``). :func:`adversarial_pair`
wires both up.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class LossWeights:
    cls: float = 1.0
    log: float = 1.0
    kl: float = 1.0
    adv: float = 1.0
    adv_u: float = 1.0
    rec: float = 1.0
    ce: float = 1.0


@dataclass
class LossReport:
    l_cls: float = 0.0
    l_log: float = 0.0
    l_kl: float = 0.0
    l_adv: float = 0.0
    l_adv_u: float = 0.0
    l_rec: float = 0.0
    l_ce: float = 0.0

    @property
    def l_pr(self) -> float:
        return self.l_cls + self.l_log

    @property
    def l_gl(self) -> float:
        return self.l_kl + self.l_adv + self.l_adv_u

    def check_finite(self) -> None:
        bad = {k: v for k, v in asdict(self).items() if not math.isfinite(v)}
        if bad:
            raise FloatingPointError(f"non-finite loss terms: {bad}")

    def to_dict(self) -> dict[str, float]:
        d = asdict(self)
        d["l_pr"] = self.l_pr
        d["l_gl"] = self.l_gl
        return d

    @classmethod
    def mean(cls, reports: list["LossReport"]) -> "LossReport":
        if not reports:
            return cls()
        fields = asdict(reports[0]).keys()
        return cls(**{f: float(np.mean([getattr(r, f) for r in reports])) for f in fields})


def cross_entropy(logits, labels) -> Tensor:
    logits = ad.as_tensor(logits)
    return ad.softmax_cross_entropy(logits, ad.one_hot(labels, logits.shape[-1]))


def loss_kl(mu, logvar) -> Tensor:
    """Batch-mean KL( N(mu, diag(exp(logvar))) || N(0, I) )."""
    mu, logvar = ad.as_tensor(mu), ad.as_tensor(logvar)
    if mu.shape != logvar.shape:
        raise ShapeError("loss_kl", mu.shape, logvar.shape)
    terms = ad.sub(ad.sub(ad.add(ad.square(mu), ad.exp(logvar)), logvar), 1.0)
    return ad.mean(ad.mul(ad.sum(terms, axis=-1), 0.5))


def loss_adv(adversary_logits, labels) -> Tensor:
    """Cross entropy of the adversary's class prediction from the shared code."""
    return cross_entropy(adversary_logits, labels)


def loss_adv_uniform(adversary_logits) -> Tensor:
    """Cross entropy of the adversary's prediction against the uniform
    distribution; its minimum, ln K, is reached at a uniform softmax."""
    logits = ad.as_tensor(adversary_logits)
    return ad.softmax_cross_entropy(logits, np.full(logits.shape, 1.0 / logits.shape[-1]))


def adversarial_pair(model, z_l, labels) -> tuple[Tensor, Tensor]:
    """(l_adv, l_adv_u): the first trains only the adversary, the second only
    what lies upstream of ``z_l``."""
    l_adv = loss_adv(model.adversary_logits(ad.as_tensor(z_l).detach()), labels)
    l_adv_u = loss_adv_uniform(model.adversary_logits(z_l, frozen=True))
    return l_adv, l_adv_u


def reconstruct_with_noise(x, x_rec, noise_sigma, rng: np.random.Generator | None = None):
    """Return ``(l_rec, x_p)``.

    ``l_rec`` is the batch mean of the squared L2 reconstruction error.
    ``x_p`` is the reconstruction plus N(0, noise_sigma^2) noise, detached from
    the decoder graph. ``noise_sigma`` may be a scalar or a per-dimension vector.
    """
    x, x_rec = ad.as_tensor(x), ad.as_tensor(x_rec)
    if x.shape != x_rec.shape:
        raise ShapeError("reconstruct_with_noise", x.shape, x_rec.shape)
    l_rec = ad.mean(ad.sum(ad.square(ad.sub(x, x_rec)), axis=-1))
    sigma = np.asarray(noise_sigma, dtype=np.float64)
    if np.all(sigma == 0.0):
        x_p = x_rec.data.copy()
    else:
        if rng is None:
            raise ValueError("reconstruct_with_noise: rng required for nonzero noise")
        x_p = x_rec.data + sigma * rng.standard_normal(x_rec.shape)
    return l_rec, Tensor(x_p)


def loss_ce_dual(classifier, x, x_p, labels) -> Tensor:
    """CE(f(x), y) + CE(f(x_p), y), each averaged over its batch."""
    return ad.add(cross_entropy(classifier(x), labels), cross_entropy(classifier(x_p), labels))
