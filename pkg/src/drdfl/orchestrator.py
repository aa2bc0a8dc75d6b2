"""Round-by-round training of a ring of clients.

Each visited client inherits the neighbour's class statistics (EMA) and
Learngene (averaging), then runs E local epochs of the four-phase update:

1. PersonaNet and class Gaussians on the mixture losses,
2. adversary on the detached Learngene code, then Learngene on KL plus the
   uniform-adversary loss,
3. decoder on reconstruction,
4. classifier on the raw batch and its noisy reconstruction,

and finally emits its Learngene and class statistics to the next client.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .class_stats import ClassGaussianBank, ema_merge, loss_cls, loss_log
from .data import Dataset, PartitionPlan
from .losses import (LossReport, LossWeights, adversarial_pair, loss_ce_dual, loss_kl,
                     reconstruct_with_noise)
from .networks import ClientModel, ModelDims, init_client
from .ring import (FaultEvent, Ring, RingMessage, RingTopology, merge_learngene, message_size,
                   parse_fault)
from .seeds import derive_seed, stream

log = logging.getLogger(__name__)

Hook = Callable[[str, dict], None]


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, dump: dict):
        self.dump = dump
        super().__init__(message)


@dataclass
class TrainConfig:
    M: int = 4
    T: int = 60
    E: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    alpha: float = 0.99
    noise_sigma: float = 0.1  # multiple of each input dimension's std
    mode: str = "sequential"
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    disable_l_pr: bool = False
    disable_l_gl: bool = False
    communicate: bool = True
    inference: str = "raw"  # "raw": f(x); "avg": mean of f(x) and f(x') logits
    d_p: int = 4
    d_l: int = 4
    hidden: int = 32
    n_hidden: int = 2
    wire_dtype: str = "f32"
    faults: list[FaultEvent] = field(default_factory=list)

    def validate(self) -> None:
        problems = []
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if not 0.0 < self.alpha <= 1.0:
            problems.append("alpha must be in (0, 1]")
        if self.E < 0:
            problems.append("E must be >= 0")
        if self.T < 1:
            problems.append("T must be >= 1")
        if self.M < 1:
            problems.append("M must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.mode not in ("sequential", "parallel_snapshot"):
            problems.append(f"unknown mode {self.mode!r}")
        if self.inference not in ("raw", "avg"):
            problems.append(f"unknown inference {self.inference!r}")
        if self.wire_dtype not in ("f32", "f64"):
            problems.append(f"unknown wire dtype {self.wire_dtype!r}")
        if self.noise_sigma < 0:
            problems.append("noise_sigma must be >= 0")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def dims(self, D: int, K: int) -> ModelDims:
        return ModelDims(D, self.d_p, self.d_l, K, self.hidden, self.n_hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["faults"] = [[f.round, f.client, "up" if f.up else "down"] for f in self.faults]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "loss_weights" in d:
            d["loss_weights"] = LossWeights(**d["loss_weights"])
        if "faults" in d:
            d["faults"] = [_fault_from(f) for f in d["faults"]]
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _fault_from(item) -> FaultEvent:
    if isinstance(item, str):
        return parse_fault(item)
    r, c, *rest = item
    return FaultEvent(int(r), int(c), bool(rest) and rest[0] == "up")


@dataclass
class RoundStats:
    reports: list[LossReport]  # one per local epoch
    grad_sq_norm: float        # mean over steps of the full-model squared gradient norm
    delta2: float | None       # ||phi_received - phi||^2 before merging, if merged
    steps: int


class Client:
    """One participant: its model, class bank, data indices and random streams."""

    def __init__(self, model: ClientModel, bank: ClassGaussianBank, x_train: np.ndarray,
                 y_train: np.ndarray, seed: int, noise_sigma: float):
        self.model = model
        self.bank = bank
        self.x_train = x_train
        self.y_train = y_train
        cid = model.client_id
        self.batch_rng = stream(seed, "minibatch", cid)
        self.reparam_rng = stream(seed, "reparam", cid)
        self.noise_rng = stream(seed, "recnoise", cid)
        std = x_train.std(axis=0) if len(x_train) > 1 else np.ones(x_train.shape[1])
        self.noise_scale = noise_sigma * std
        self.hooks: list[Hook] = []

    @property
    def client_id(self) -> int:
        return self.model.client_id

    def _emit(self, event: str, **info) -> None:
        for h in self.hooks:
            h(event, {"client": self.client_id, **info})

    def outgoing(self, round_idx: int) -> RingMessage:
        return RingMessage(round_idx, self.client_id, self.model.learngene.flat(),
                           self.bank.means.data.copy(), self.bank.logvars.data.copy())

    def inherit(self, msg: RingMessage) -> float:
        """EMA-merge the class statistics and average the Learngene; returns
        the squared distance between the two Learngenes before merging."""
        self._emit("ema_merge")
        ema_merge(self.bank, msg.class_means, msg.class_logvars)
        phi = self.model.learngene.flat()
        delta2 = float(np.sum((msg.learngene_params - phi) ** 2))
        self._emit("merge_learngene")
        self.model.learngene.load_flat(merge_learngene(phi, msg.learngene_params))
        return delta2

    def train_step(self, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> tuple[LossReport, float]:
        """One minibatch of the four-phase update. Returns losses and the squared
        norm of all gradients applied."""
        m, bank, w, lr = self.model, self.bank, cfg.loss_weights, cfg.lr
        self._emit("step")
        sq = 0.0

        # PersonaNet and class Gaussians
        z_p = m.encode_persona(x)
        l_cls, l_log = loss_cls(bank, z_p, y), loss_log(bank, z_p, y)
        if not cfg.disable_l_pr:
            params = m.persona_net.parameters() + bank.parameters()
            ad.zero_grad(params)
            ad.backward(ad.add(ad.mul(l_cls, w.cls), ad.mul(l_log, w.log)))
            sq += _sq_norm(params)
            ad.sgd_step(params, lr)
            bank.clamp_()
            z_p = m.encode_persona(x)

        # Learngene against the adversary. l_adv sees a detached code and
        # l_adv_u a frozen adversary, so one backward pass yields both
        # gradients; the adversary step is applied first.
        mu, logvar, z_l = m.encode_learngene(x, self.reparam_rng)
        l_kl = loss_kl(mu, logvar)
        l_adv, l_adv_u = adversarial_pair(m, z_l, y)
        if not cfg.disable_l_gl:
            adv_params = m.adversary.parameters()
            lg_params = m.learngene.parameters()
            ad.zero_grad(adv_params + lg_params)
            ad.backward(ad.add(ad.mul(l_adv, w.adv),
                               ad.add(ad.mul(l_kl, w.kl), ad.mul(l_adv_u, w.adv_u))))
            sq += _sq_norm(adv_params) + _sq_norm(lg_params)
            ad.sgd_step(adv_params, lr)
            ad.sgd_step(lg_params, lr)
            _, _, z_l = m.encode_learngene(x, self.reparam_rng)

        # decoder, then classifier on raw and perturbed inputs (x_p is detached
        # from the decoder, so the two losses share one backward pass)
        x_rec = m.decode(z_p.detach(), z_l.detach())
        l_rec, x_p = reconstruct_with_noise(x, x_rec, self.noise_scale, self.noise_rng)
        l_ce = loss_ce_dual(m.classifier, x, x_p, y)
        dec_params = m.decoder.parameters()
        clf_params = m.classifier.parameters()
        ad.zero_grad(dec_params + clf_params)
        ad.backward(ad.add(ad.mul(l_rec, w.rec), ad.mul(l_ce, w.ce)))
        sq += _sq_norm(dec_params) + _sq_norm(clf_params)
        ad.sgd_step(dec_params, lr)
        ad.sgd_step(clf_params, lr)

        report = LossReport(l_cls.item(), l_log.item(), l_kl.item(), l_adv.item(),
                            l_adv_u.item(), l_rec.item(), l_ce.item())
        return report, sq

    def local_train(self, inherited: RingMessage | None, cfg: TrainConfig,
                    round_idx: int) -> tuple[RingMessage, RoundStats]:
        delta2 = None
        if inherited is not None and cfg.communicate:
            delta2 = self.inherit(inherited)
        reports, sqs = [], []
        n = len(self.x_train)
        for epoch in range(cfg.E):
            order = self.batch_rng.permutation(n)
            epoch_reports = []
            for start in range(0, n, cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                rep = None
                try:
                    rep, sq = self.train_step(self.x_train[idx], self.y_train[idx], cfg)
                    rep.check_finite()
                except (FloatingPointError, ad.NonFiniteError) as exc:
                    raise TrainingDiverged(str(exc), {"round": round_idx, "client": self.client_id,
                                                      "epoch": epoch,
                                                      "losses": rep.to_dict() if rep else None}) from exc
                epoch_reports.append(rep)
                sqs.append(sq)
            reports.append(LossReport.mean(epoch_reports))
        stats = RoundStats(reports, float(np.mean(sqs)) if sqs else 0.0, delta2, len(sqs))
        return self.outgoing(round_idx), stats

    def predict_logits(self, x: np.ndarray, inference: str = "raw") -> np.ndarray:
        logits = self.model.classify(x).data
        if inference == "avg":
            z_p = self.model.encode_persona(x)
            _, _, z_l = self.model.encode_learngene(x)
            logits = 0.5 * (logits + self.model.classify(self.model.decode(z_p, z_l)).data)
        return logits

    def predict(self, x: np.ndarray, inference: str = "raw") -> np.ndarray:
        return np.argmax(self.predict_logits(x, inference), axis=1)


def _sq_norm(params) -> float:
    return float(sum(np.vdot(p.grad, p.grad) for p in params if p.grad is not None))


def make_clients(cfg: TrainConfig, ds: Dataset, plan: PartitionPlan) -> list[Client]:
    dims = cfg.dims(ds.D, ds.K)
    bundle = dims.bundle(seed=derive_seed(cfg.seed, "init", 0))
    shared = derive_seed(cfg.seed, "init", 1)
    clients = []
    for m in range(plan.M):
        model = init_client(bundle, m, shared)
        bank = ClassGaussianBank(ds.K, cfg.d_p, cfg.alpha)
        idx = plan.client_train[m]
        clients.append(Client(model, bank, ds.inputs[idx], ds.labels[idx], cfg.seed, cfg.noise_sigma))
    return clients


def init_new_client(cfg: TrainConfig, ds: Dataset, train_idx: np.ndarray, client_id: int,
                    learngene: np.ndarray | None = None, means: np.ndarray | None = None,
                    logvars: np.ndarray | None = None) -> Client:
    """A client joining after training. With ``learngene``/``means``/``logvars``
    it starts from the shared artifacts (warm); without them it is identical to
    a client created at the start of the run (cold)."""
    dims = cfg.dims(ds.D, ds.K)
    bundle = dims.bundle(seed=derive_seed(cfg.seed, "init", 0))
    model = init_client(bundle, client_id, derive_seed(cfg.seed, "init", 1))
    if learngene is not None:
        model.learngene.load_flat(learngene)
    bank = ClassGaussianBank(ds.K, cfg.d_p, cfg.alpha, means, logvars)
    return Client(model, bank, ds.inputs[train_idx], ds.labels[train_idx], cfg.seed, cfg.noise_sigma)


def load_clients(cfg: TrainConfig, ds: Dataset, plan: PartitionPlan, art_dir: str | Path) -> list[Client]:
    """Rebuild trained clients from the ``client_*.npz`` files of a run."""
    clients = make_clients(cfg, ds, plan)
    for c in clients:
        with np.load(Path(art_dir) / f"client_{c.client_id}.npz") as z:
            c.model.load_state({k: z[k] for k in c.model.nets()})
            c.bank.means.data = z["class_means"].copy()
            c.bank.logvars.data = z["class_logvars"].copy()
    return clients


# --- evaluation helpers used every round ---------------------------------------------


def accuracy(pred: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty test set")
    return float(np.mean(pred == y))


def local_global(client: Client, ds: Dataset, own_test: np.ndarray, union_test: np.ndarray,
                 inference: str = "raw") -> tuple[float, float]:
    pred = client.predict(ds.inputs[union_test], inference)
    y = ds.labels[union_test]
    own = np.isin(union_test, own_test)
    return accuracy(pred[own], y[own]), accuracy(pred, y)


@dataclass
class ExperimentResult:
    config: TrainConfig
    clients: list[Client]
    ring: Ring
    records: list[dict]                 # one per client per round
    grad_norm_series: list[float]       # per round, mean over trained clients
    delta2_series: list[float | None]   # per round, max over merging clients
    final_message: RingMessage | None
    alive: list[bool]

    def final_accuracy(self, only_alive: bool = True) -> tuple[float, float]:
        last = max(r["round"] for r in self.records)
        rows = [r for r in self.records if r["round"] == last and (r["alive"] or not only_alive)]
        return (float(np.mean([r["local_t"] for r in rows])), float(np.mean([r["global_t"] for r in rows])))

    def accuracy_curve(self) -> list[tuple[int, float, float]]:
        out = []
        for t in sorted({r["round"] for r in self.records}):
            rows = [r for r in self.records if r["round"] == t and r["alive"]]
            out.append((t, float(np.mean([r["local_t"] for r in rows])),
                        float(np.mean([r["global_t"] for r in rows]))))
        return out


def run_experiment(cfg: TrainConfig, ds: Dataset, plan: PartitionPlan, out_dir: str | Path | None = None,
                   hooks: list[Hook] | None = None, trace: bool = False) -> ExperimentResult:
    """Run T rounds of ring training and, with ``out_dir``, write
    ``metrics.jsonl``, ``summary.json``, ``curves.csv`` and final artifacts."""
    cfg.validate()
    if plan.M != cfg.M:
        raise ValueError(f"plan has {plan.M} clients but config says M={cfg.M}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    clients = make_clients(cfg, ds, plan)
    for c in clients:
        c.hooks.extend(hooks or [])
    P = clients[0].model.learngene.num_parameters()
    topology = RingTopology.ring(cfg.M, cfg.mode)
    ring = Ring(topology, cfg.wire_dtype, expected_params=P,
                trace_dir=(out / "trace") if (out is not None and trace) else None,
                communicate=cfg.communicate)
    union_test = np.sort(np.concatenate(plan.client_test))
    records: list[dict] = []
    grad_series: list[float] = []
    delta2_series: list[float | None] = []
    metrics_fh = open(out / "metrics.jsonl", "w") if out is not None else None
    try:
        for t in range(cfg.T):
            topology.apply_faults(t, cfg.faults)
            stats: dict[int, RoundStats] = {}

            def train_fn(cid: int, inherited: RingMessage | None) -> RingMessage:
                msg, st = clients[cid].local_train(inherited, cfg, t)
                stats[cid] = st
                return msg

            try:
                deliveries = ring.run_round(t, train_fn)
            except TrainingDiverged as exc:
                if out is not None:
                    (out / "diverged.json").write_text(json.dumps(exc.dump, indent=2))
                raise
            sent = {d.client: d.nbytes for d in deliveries}
            round_sq = [s.grad_sq_norm for s in stats.values() if s.steps]
            grad_series.append(float(np.mean(round_sq)) if round_sq else 0.0)
            d2 = [s.delta2 for s in stats.values() if s.delta2 is not None]
            delta2_series.append(max(d2) if d2 else None)
            for cid, client in enumerate(clients):
                local_t, global_t = local_global(client, ds, plan.client_test[cid], union_test, cfg.inference)
                st = stats.get(cid)
                rec = {"event": "round", "round": t, "client": cid,
                       "alive": bool(topology.alive[cid]), "trained": st is not None,
                       "local_t": local_t, "global_t": global_t, "bytes_sent": sent.get(cid, 0)}
                if st is not None:
                    rec.update(st.reports[-1].to_dict() if st.reports else {})
                    rec["grad_sq_norm"] = st.grad_sq_norm
                    rec["delta2"] = st.delta2
                records.append(rec)
                if metrics_fh is not None:
                    if st is not None:
                        for e, rep in enumerate(st.reports):
                            metrics_fh.write(json.dumps({"event": "epoch", "round": t, "client": cid,
                                                         "epoch": e, **rep.to_dict()}) + "\n")
                    metrics_fh.write(json.dumps(rec) + "\n")
            if metrics_fh is not None:
                metrics_fh.write(json.dumps({"event": "diagnostics", "round": t,
                                             "grad_sq_norm": grad_series[-1],
                                             "delta2": delta2_series[-1],
                                             "round_bytes": ring.ledger.bytes_in_round(t)}) + "\n")
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    result = ExperimentResult(cfg, clients, ring, records, grad_series, delta2_series,
                              ring.last_message, [bool(topology.alive[c]) for c in range(cfg.M)])
    if out is not None:
        write_outputs(result, out, P, ds.K)
    return result


def write_outputs(result: ExperimentResult, out: Path, P: int, K: int) -> None:
    from .diagnostics import running_average
    from .ring import encode

    cfg = result.config
    local_t, global_t = result.final_accuracy()
    summary = {
        "config": cfg.to_dict(),
        "final_local_t": local_t,
        "final_global_t": global_t,
        "total_bytes": result.ring.ledger.total_bytes,
        "messages": len(result.ring.ledger.messages),
        "skips": [list(s) for s in result.ring.ledger.skips],
        "message_bytes": message_size(P, K, cfg.d_p, cfg.wire_dtype),
        "learngene_params": P,
        "alive": result.alive,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    avg = running_average(result.grad_norm_series)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "mean_local_t", "mean_global_t", "grad_sq_norm_running_avg", "delta2"])
        for (t, lt, gt), a, d2 in zip(result.accuracy_curve(), avg, result.delta2_series):
            w.writerow([t, repr(lt), repr(gt), repr(a), "" if d2 is None else repr(d2)])
    art = out / "artifacts"
    art.mkdir(exist_ok=True)
    if result.final_message is not None:
        (art / "final_learngene.msg").write_bytes(encode(result.final_message, "f64"))
    for c in result.clients:
        np.savez(art / f"client_{c.client_id}.npz", **c.model.state_dict(),
                 class_means=c.bank.means.data, class_logvars=c.bank.logvars.data)
