"""Reference experiment protocols on Gaussian blobs.

The standard setup is K=4 classes in D=8 with separation 6, split across
M=4 clients by shards of s=2 classes, trained for T=60 rounds of E=5
epochs at lr 1e-3 and EMA coefficient 0.99.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, PartitionPlan, make_blobs, partition_shard
from .diagnostics import moving_average, running_average
from .orchestrator import (Client, ExperimentResult, TrainConfig, init_new_client, local_global,
                           run_experiment)
from .ring import FaultEvent
from .seeds import derive_seed


@dataclass(frozen=True)
class BlobSetup:
    K: int = 4
    per_class: int = 200
    D: int = 8
    separation: float = 6.0
    M: int = 4
    s: int = 2
    T: int = 60
    E: int = 5
    lr: float = 1e-3
    alpha: float = 0.99

    def dataset(self, seed: int) -> Dataset:
        return make_blobs(self.K, self.per_class, self.D, self.separation, derive_seed(seed, "data"))

    def plan(self, ds: Dataset, seed: int, M: int | None = None) -> PartitionPlan:
        return partition_shard(ds, M or self.M, self.s, derive_seed(seed, "partition"))

    def config(self, seed: int, **overrides) -> TrainConfig:
        cfg = TrainConfig(M=self.M, T=self.T, E=self.E, lr=self.lr, alpha=self.alpha, seed=seed)
        return replace(cfg, **overrides)


def run_arm(setup: BlobSetup, seed: int, **overrides) -> ExperimentResult:
    ds = setup.dataset(seed)
    return run_experiment(setup.config(seed, **overrides), ds, setup.plan(ds, seed))


def surviving_local_t(result: ExperimentResult, survivors: list[int]) -> float:
    last = result.config.T - 1
    rows = [r for r in result.records if r["round"] == last and r["client"] in survivors]
    return float(np.mean([r["local_t"] for r in rows]))


def fault_comparison(setup: BlobSetup, seed: int, kill_round: int = 10, victim: int = 3) -> dict:
    """Surviving clients' final Local-T with and without one client killed."""
    faulty = run_arm(setup, seed, faults=[FaultEvent(kill_round, victim)])
    clean = run_arm(setup, seed)
    survivors = [c for c in range(setup.M) if c != victim]
    return {"fault_local_t": surviving_local_t(faulty, survivors),
            "clean_local_t": surviving_local_t(clean, survivors),
            "rounds_completed": len(faulty.grad_norm_series),
            "skips": len(faulty.ring.ledger.skips)}


def gradient_trend(result: ExperimentResult) -> dict:
    """Running-average squared gradient norm at T vs T/4, and whether the
    5-round moving average of the drift is non-increasing over the last third."""
    avg = running_average(result.grad_norm_series)
    T = len(avg)
    d2 = [d if d is not None else np.nan for d in result.delta2_series]
    ma = moving_average(d2[T - T // 3:], 5)
    return {"ratio": avg[-1] / avg[T // 4 - 1],
            "delta2_ma_nonincreasing": bool(np.all(np.diff(ma) <= 0)) if ma else False,
            "delta2_ma": ma}


def epochs_to_reach(client: Client, cfg: TrainConfig, ds: Dataset, test_idx: np.ndarray,
                    threshold: float, max_epochs: int) -> int | None:
    """Local epochs until the client's Local-T first reaches ``threshold``."""
    one = replace(cfg, E=1)
    for e in range(1, max_epochs + 1):
        client.local_train(None, one, e)
        local_t, _ = local_global(client, ds, test_idx, test_idx, cfg.inference)
        if local_t >= threshold:
            return e
    return None


def new_client_speedup(setup: BlobSetup, seed: int, max_epochs: int = 300) -> dict:
    """Train a cohort on the first M of M+1 shard clients, then bring in the
    last one warm (final Learngene and class statistics) and cold (fresh),
    counting epochs to 80% of the cohort's mean final Local-T."""
    ds = setup.dataset(seed)
    full = setup.plan(ds, seed, M=setup.M + 1)
    cohort = PartitionPlan(full.client_train[:setup.M], full.client_test[:setup.M], full.scheme,
                           full.param, full.seed)
    cfg = setup.config(seed)
    result = run_experiment(cfg, ds, cohort)
    target = 0.8 * result.final_accuracy()[0]
    new_id = setup.M
    msg = result.final_message
    warm = init_new_client(cfg, ds, full.client_train[new_id], new_id, msg.learngene_params,
                           msg.class_means, msg.class_logvars)
    cold = init_new_client(cfg, ds, full.client_train[new_id], new_id)
    test = full.client_test[new_id]
    e_warm = epochs_to_reach(warm, cfg, ds, test, target, max_epochs)
    e_cold = epochs_to_reach(cold, cfg, ds, test, target, max_epochs)
    return {"target": target, "warm_epochs": e_warm, "cold_epochs": e_cold,
            "ratio": None if (e_warm is None or e_cold is None) else e_warm / e_cold}
