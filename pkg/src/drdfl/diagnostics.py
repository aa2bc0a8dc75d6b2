"""Accuracy metrics, heterogeneity measures and convergence estimates.

The convergence quantities are empirical stand-ins for the constants in the
smoothness / bounded-variance / bounded-drift assumptions: a gradient
variance ``sigma2``, a secant Lipschitz constant ``L1``, and the largest
Learngene drift ``delta2`` seen before a merge.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .class_stats import loss_cls, loss_log
from .data import Dataset, PartitionPlan, label_distribution, label_entropy
from .losses import adversarial_pair, loss_ce_dual, loss_kl, reconstruct_with_noise


@dataclass
class AccuracyReport:
    local_t: list[float]
    global_t: list[float]

    @property
    def mean_local_t(self) -> float:
        return float(np.mean(self.local_t))

    @property
    def mean_global_t(self) -> float:
        return float(np.mean(self.global_t))

    def to_dict(self) -> dict:
        return {"local_t": self.local_t, "global_t": self.global_t,
                "mean_local_t": self.mean_local_t, "mean_global_t": self.mean_global_t}


def evaluate(clients: Sequence, ds: Dataset, plan: PartitionPlan, inference: str = "raw") -> AccuracyReport:
    """Local-T on each client's own test indices, Global-T on the union of all
    clients' test indices. ``clients[i].predict(x, inference)`` must return labels."""
    union = np.sort(np.concatenate(plan.client_test))
    if union.size == 0:
        raise ValueError("empty test set")
    local, glob = [], []
    for i, c in enumerate(clients):
        own = plan.client_test[i]
        if own.size == 0:
            raise ValueError(f"client {i} has an empty test set")
        pred = c.predict(ds.inputs[union], inference)
        correct = pred == ds.labels[union]
        local.append(float(np.mean(correct[np.isin(union, own)])))
        glob.append(float(np.mean(correct)))
    return AccuracyReport(local, glob)


def heterogeneity_metrics(plan: PartitionPlan, ds: Dataset) -> dict:
    """Per-client train label entropy and the largest pairwise total-variation
    distance between client label distributions."""
    dists = [label_distribution(ds.labels, idx, ds.K) for idx in plan.client_train]
    entropy = [label_entropy(p) for p in dists]
    tv = np.zeros((len(dists), len(dists)))
    for i in range(len(dists)):
        for j in range(i + 1, len(dists)):
            tv[i, j] = tv[j, i] = 0.5 * np.abs(dists[i] - dists[j]).sum()
    return {"entropy": entropy, "mean_entropy": float(np.mean(entropy)),
            "max_tv": float(tv.max()), "tv": tv.tolist()}


# --- full-model gradients ---------------------------------------------------------------


def _all_params(client) -> list[ad.Tensor]:
    return client.model.parameters() + client.bank.parameters()


def get_flat(client) -> np.ndarray:
    return np.concatenate([p.data.ravel() for p in _all_params(client)])


def set_flat(client, values: np.ndarray) -> None:
    off = 0
    for p in _all_params(client):
        p.data = values[off:off + p.size].reshape(p.shape).copy()
        off += p.size


def full_gradient(client, x: np.ndarray, y: np.ndarray, noise_seed: int = 0) -> np.ndarray:
    """Gradient of the complete local model at its current parameters, using
    the same routing as training (each network gets the gradient of the loss
    that trains it). Sampling noise is drawn from ``noise_seed`` so repeated
    calls at the same point agree."""
    m, bank = client.model, client.bank
    rng = np.random.default_rng(noise_seed)
    params = _all_params(client)
    ad.zero_grad(params)
    z_p = m.encode_persona(x)
    ad.backward(ad.add(loss_cls(bank, z_p, y), loss_log(bank, z_p, y)))
    mu, logvar, z_l = m.encode_learngene(x, rng)
    l_adv, l_adv_u = adversarial_pair(m, z_l, y)
    ad.backward(l_adv)
    ad.backward(ad.add(loss_kl(mu, logvar), l_adv_u))
    x_rec = m.decode(z_p.detach(), z_l.detach())
    l_rec, x_p = reconstruct_with_noise(x, x_rec, client.noise_scale, rng)
    ad.backward(l_rec)
    ad.backward(loss_ce_dual(m.classifier, x, x_p, y))
    g = np.concatenate([(p.grad if p.grad is not None else np.zeros_like(p.data)).ravel() for p in params])
    ad.zero_grad(params)
    return g


def estimate_sigma2(client, n_batches: int, batch_size: int, seed: int = 0) -> float:
    """Sum over coordinates of the sample variance of minibatch gradients."""
    if n_batches < 2:
        raise ValueError("n_batches must be >= 2")
    rng = np.random.default_rng(seed)
    n = len(client.x_train)
    bs = min(batch_size, n)
    grads = []
    for _ in range(n_batches):
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        grads.append(full_gradient(client, client.x_train[idx], client.y_train[idx], noise_seed=seed))
    G = np.stack(grads)
    return float(np.sum(np.var(G, axis=0, ddof=1)))


def estimate_lipschitz(grad_fn: Callable[[np.ndarray], np.ndarray], w0: np.ndarray, n_pairs: int,
                       radius: float, seed: int = 0) -> float:
    """Max secant ratio ||g(w1) - g(w2)|| / ||w1 - w2|| over random pairs drawn
    in a ball of ``radius`` around ``w0``."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_pairs):
        w1 = w0 + radius * _unit_ball(rng, w0.size)
        w2 = w0 + radius * _unit_ball(rng, w0.size)
        dw = np.linalg.norm(w1 - w2)
        if dw == 0:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(w1) - grad_fn(w2)) / dw))
    return best


def _unit_ball(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v) * rng.uniform() ** (1.0 / n)


def estimate_L1(client, n_pairs: int, radius: float, seed: int = 0) -> float:
    """Secant Lipschitz estimate of the full-batch gradient of the complete model."""
    w0 = get_flat(client)
    x, y = client.x_train, client.y_train

    def grad_fn(w):
        set_flat(client, w)
        return full_gradient(client, x, y, noise_seed=seed)

    try:
        return estimate_lipschitz(grad_fn, w0, n_pairs, radius, seed)
    finally:
        set_flat(client, w0)


# --- rates and bounds -------------------------------------------------------------------


def running_average(series: Sequence[float]) -> list[float]:
    s = np.asarray(series, dtype=np.float64)
    return (np.cumsum(s) / np.arange(1, len(s) + 1)).tolist()


def moving_average(series: Sequence[float], window: int = 5) -> list[float]:
    s = np.asarray(series, dtype=np.float64)
    if len(s) < window:
        return []
    return np.convolve(s, np.ones(window) / window, mode="valid").tolist()


@dataclass
class RateFit:
    c: float
    residual: float          # RMS of (A_t - c/t) relative to RMS of A_t
    good_fit: bool
    nonincreasing_last_half: bool
    curve: list[float] = field(repr=False)


def check_rate(series: Sequence[float], running: bool = True, tol: float = 0.1) -> RateFit:
    """Least-squares fit of ``c / t`` to the running average of ``series``
    (or to the series itself with ``running=False``)."""
    if len(series) < 10:
        raise ValueError("need at least 10 rounds")
    a = np.asarray(running_average(series) if running else series, dtype=np.float64)
    inv_t = 1.0 / np.arange(1, len(a) + 1)
    c = float(np.dot(a, inv_t) / np.dot(inv_t, inv_t))
    scale = np.sqrt(np.mean(a * a))
    resid = float(np.sqrt(np.mean((a - c * inv_t) ** 2)) / scale) if scale > 0 else 0.0
    half = a[len(a) // 2:]
    return RateFit(c, resid, resid <= tol, bool(np.all(np.diff(half) <= 0)), a.tolist())


def lr_bound(eps: float, delta2: float, L1: float, E: int, sigma2: float) -> float | None:
    """Largest admissible learning rate 2(eps - delta2) / (L1 (eps + E sigma2));
    ``None`` when eps <= delta2 (no admissible rate)."""
    if eps <= delta2 or L1 <= 0:
        return None
    return 2.0 * (eps - delta2) / (L1 * (eps + E * sigma2))


@dataclass
class ConvergenceDiagnostics:
    sigma2_hat: float
    delta2_hat: float
    L1_hat: float
    grad_norm_series: list[float]
    eps: float
    lr_bound: float | None
    lr: float
    rate: dict
    round_inequality: list[dict]

    def to_dict(self) -> dict:
        return asdict(self)


def diagnose(clients: Sequence, cfg, grad_series: Sequence[float], delta2_series: Sequence,
             records: Sequence[dict] = (), n_batches: int = 20, n_pairs: int = 5,
             radius: float = 1e-3, seed: int = 0) -> ConvergenceDiagnostics:
    """Estimate the convergence constants on trained clients, given the
    per-round gradient-norm and drift series logged during the run."""
    sigma2 = max(estimate_sigma2(c, n_batches, cfg.batch_size, seed) for c in clients)
    L1 = max(estimate_L1(c, n_pairs, radius, seed) for c in clients)
    d2 = [d for d in delta2_series if d is not None]
    delta2 = max(d2) if d2 else 0.0
    eps = running_average(grad_series)[-1]
    rate = {}
    if len(grad_series) >= 10:
        fit = check_rate(grad_series)
        rate = {"c": fit.c, "residual": fit.residual, "good_fit": fit.good_fit,
                "nonincreasing_last_half": fit.nonincreasing_last_half}
    return ConvergenceDiagnostics(sigma2, delta2, L1, list(grad_series), eps,
                                  lr_bound(eps, delta2, L1, cfg.E, sigma2), cfg.lr, rate,
                                  round_inequality(records, grad_series, delta2_series, cfg, L1, sigma2))


def diagnose_result(result, **kwargs) -> ConvergenceDiagnostics:
    alive = [c for c, up in zip(result.clients, result.alive) if up]
    return diagnose(alive, result.config, result.grad_norm_series, result.delta2_series,
                    result.records, **kwargs)


def round_inequality(records: Sequence[dict], grad_series: Sequence[float], delta2_series: Sequence,
                     cfg, L1: float, sigma2: float) -> list[dict]:
    """Per-round check of the one-round descent inequality with estimated
    constants: next-round loss vs current loss plus the gradient, variance
    and drift terms. Logged, not enforced."""
    lr = cfg.lr
    start: dict[int, list[float]] = {}
    for r in records:
        if r.get("trained") and "l_rec" in r:
            start.setdefault(r["round"], []).append(r["l_pr"] + r["l_gl"] + r["l_rec"] + r["l_ce"])
    rounds = sorted(start)
    out = []
    for t, t_next in zip(rounds[:-1], rounds[1:]):
        lhs = float(np.mean(start[t_next]))
        g = grad_series[t] * cfg.E
        d2 = delta2_series[t_next] or 0.0
        rhs = float(np.mean(start[t]) + (L1 * lr * lr / 2 - lr) * g
                    + L1 * cfg.E * lr * lr * sigma2 / 2 + lr * d2)
        out.append({"round": t, "lhs": lhs, "rhs": rhs, "holds": bool(lhs <= rhs)})
    return out
