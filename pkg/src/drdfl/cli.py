"""Command-line entry point.

Verbs: ``gen-data``, ``partition``, ``train``, ``eval``, ``diag``, ``ablate``.
Exit status is 0 on success, 2 for usage, missing-file and config errors,
and 1 for failures during a run. Errors are reported on stderr as one JSON
object.

A run configuration is a TOML (or JSON) file::

    seed = 1

    [data]            # either path = "blobs.drdf" or generator settings
    k = 4
    per_class = 200
    d = 8
    sep = 6.0

    [partition]       # either path = "plan.json" or scheme + param
    scheme = "shard"
    param = 2

    [train]           # any TrainConfig field
    M = 4
    T = 60
"""

from __future__ import annotations

import argparse
import copy
import csv
import datetime as dt
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (Dataset, PartitionPlan, load_external, make_blobs, partition_dirichlet,
                   partition_shard, save_dataset)
from .diagnostics import diagnose, evaluate, heterogeneity_metrics
from .orchestrator import TrainConfig, load_clients, run_experiment
from .ring import parse_fault
from .seeds import derive_seed

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_DATA = {"k": 4, "per_class": 200, "d": 8, "sep": 6.0, "test_fraction": 0.2}
DEFAULT_PARTITION = {"scheme": "shard", "param": 2}
ARMS = {"full": {}, "no_l_pr": {"disable_l_pr": True}, "no_l_gl": {"disable_l_gl": True},
        "local": {"communicate": False}}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config --------------------------------------------------------------------------


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    text = path.read_bytes()
    try:
        raw = json.loads(text) if path.suffix == ".json" else tomllib.loads(text.decode())
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    base = path.parent
    for section in ("data", "partition"):
        p = raw.get(section, {}).get("path")
        if p is not None and not Path(p).is_absolute():
            raw[section]["path"] = str(base / p)
    return raw


def resolve_config(raw: dict, args: argparse.Namespace) -> dict:
    """Merge the file config with command-line overrides into a complete,
    self-contained run description."""
    unknown = set(raw) - {"seed", "data", "partition", "train"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    cfg = {"seed": int(raw.get("seed", 0)),
           "data": {**DEFAULT_DATA, **raw.get("data", {})},
           "partition": {**DEFAULT_PARTITION, **raw.get("partition", {})},
           "train": dict(raw.get("train", {}))}
    if "path" in raw.get("data", {}):
        cfg["data"] = {"path": raw["data"]["path"]}
    if "path" in raw.get("partition", {}):
        cfg["partition"] = {"path": raw["partition"]["path"]}
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    t = cfg["train"]
    if getattr(args, "mode", None):
        t["mode"] = "parallel_snapshot" if args.mode == "parallel" else "sequential"
    if getattr(args, "rounds", None) is not None:
        t["T"] = args.rounds
    if getattr(args, "clients", None) is not None:
        t["M"] = args.clients
    if getattr(args, "fault", None):
        t["faults"] = list(t.get("faults", [])) + list(args.fault)
    if getattr(args, "local_only", False):
        t["communicate"] = False
    if getattr(args, "partition", None):
        cfg["partition"] = parse_partition(args.partition)
    if getattr(args, "data", None):
        cfg["data"] = {"path": str(args.data)}
    t["seed"] = cfg["seed"]
    train_config(cfg)  # validate early
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(copy.deepcopy(cfg["train"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid [train] config: {exc}") from exc


def parse_partition(text: str) -> dict:
    scheme, _, value = text.partition(":")
    try:
        if scheme == "dirichlet":
            return {"scheme": "dirichlet", "param": float(value)}
        if scheme == "shard":
            return {"scheme": "shard", "param": int(value)}
    except ValueError:
        pass
    raise UsageError(f"bad --partition {text!r}; expected dirichlet:BETA or shard:S")


def build_dataset(spec: dict, master: int) -> Dataset:
    if "path" in spec:
        if not Path(spec["path"]).exists():
            raise UsageError(f"dataset not found: {spec['path']}")
        return load_external(spec["path"])
    return make_blobs(int(spec["k"]), int(spec["per_class"]), int(spec["d"]), float(spec["sep"]),
                      derive_seed(master, "data"), float(spec.get("test_fraction", 0.2)))


def build_plan(spec: dict, ds: Dataset, M: int, master: int) -> PartitionPlan:
    if "path" in spec:
        if not Path(spec["path"]).exists():
            raise UsageError(f"partition plan not found: {spec['path']}")
        return PartitionPlan.from_json(Path(spec["path"]).read_text())
    seed = derive_seed(master, "partition")
    if spec["scheme"] == "dirichlet":
        return partition_dirichlet(ds, M, float(spec["param"]), seed)
    if spec["scheme"] == "shard":
        return partition_shard(ds, M, int(spec["param"]), seed)
    raise UsageError(f"unknown partition scheme {spec['scheme']!r}")


# --- manifest ------------------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path: Path, command: str, started: str, outputs: list[Path], config: dict | None = None,
                   dataset_hash: str | None = None, partition_hash: str | None = None) -> None:
    """Record what produced ``outputs``. Timestamps live only here, never in
    metrics files, so reruns produce byte-identical metrics."""
    manifest = {
        "command": command,
        "config": config,
        "seed": None if config is None else config.get("seed"),
        "dataset_hash": dataset_hash,
        "partition_hash": partition_hash,
        "build": _build_id(),
        "started": started,
        "finished": _now(),
        "outputs": {str(p): file_hash(p) for p in sorted(outputs) if Path(p).is_file()},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- commands ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    started = _now()
    ds = make_blobs(args.k, args.per_class, args.d, args.sep, derive_seed(args.seed, "data"),
                    args.test_fraction)
    out = Path(args.out)
    save_dataset(ds, out)
    cfg = {"seed": args.seed, "data": {"k": args.k, "per_class": args.per_class, "d": args.d,
                                       "sep": args.sep, "test_fraction": args.test_fraction}}
    write_manifest(Path(f"{out}.manifest.json"), "gen-data", started, [out], cfg, ds.content_hash())
    print(json.dumps({"path": str(out), "N": ds.N, "D": ds.D, "K": ds.K}))
    return 0


def cmd_partition(args) -> int:
    started = _now()
    if not Path(args.data).exists():
        raise UsageError(f"dataset not found: {args.data}")
    ds = load_external(args.data)
    spec = parse_partition(args.partition)
    plan = build_plan(spec, ds, args.clients, args.seed)
    out = Path(args.out)
    out.write_text(plan.to_json())
    write_manifest(Path(f"{out}.manifest.json"), "partition", started, [out],
                   {"seed": args.seed, "partition": spec, "M": args.clients},
                   ds.content_hash(), plan.content_hash())
    het = heterogeneity_metrics(plan, ds)
    print(json.dumps({"path": str(out), "M": plan.M, "mean_entropy": het["mean_entropy"],
                      "max_tv": het["max_tv"]}))
    return 0


def _prepare(args) -> tuple[dict, TrainConfig, Dataset, PartitionPlan]:
    raw = load_config(args.config) if args.config else {}
    cfg = resolve_config(raw, args)
    tcfg = train_config(cfg)
    ds = build_dataset(cfg["data"], cfg["seed"])
    plan = build_plan(cfg["partition"], ds, tcfg.M, cfg["seed"])
    return cfg, tcfg, ds, plan


def _run_dir_outputs(out: Path) -> list[Path]:
    return [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]


def cmd_train(args) -> int:
    started = _now()
    cfg, tcfg, ds, plan = _prepare(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out / "dataset.drdf")
    (out / "plan.json").write_text(plan.to_json())
    stored = copy.deepcopy(cfg)
    stored["data"] = {"path": "dataset.drdf"}
    stored["partition"] = {"path": "plan.json"}
    stored["train"] = tcfg.to_dict()
    (out / "config.json").write_text(json.dumps(stored, indent=2, sort_keys=True) + "\n")
    try:
        result = run_experiment(tcfg, ds, plan, out, trace=args.trace)
    finally:
        write_manifest(out / "manifest.json", "train", started, _run_dir_outputs(out), stored,
                       ds.content_hash(), plan.content_hash())
    local_t, global_t = result.final_accuracy()
    print(json.dumps({"out_dir": str(out), "final_local_t": local_t, "final_global_t": global_t,
                      "total_bytes": result.ring.ledger.total_bytes}))
    return 0


def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    if not (run_dir / "config.json").exists():
        raise UsageError(f"not a run directory (no config.json): {run_dir}")
    cfg = load_config(run_dir / "config.json")
    tcfg = train_config(cfg)
    ds = load_external(cfg["data"]["path"])
    plan = PartitionPlan.from_json(Path(cfg["partition"]["path"]).read_text())
    clients = load_clients(tcfg, ds, plan, run_dir / "artifacts")
    return tcfg, ds, plan, clients


def cmd_eval(args) -> int:
    started = _now()
    tcfg, ds, plan, clients = _load_run(args.run_dir)
    report = evaluate(clients, ds, plan, args.inference or tcfg.inference)
    out = Path(args.out) if args.out else Path(args.run_dir) / "eval.json"
    out.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_manifest(Path(f"{out}.manifest.json"), "eval", started, [out])
    print(json.dumps(report.to_dict()))
    return 0


def cmd_diag(args) -> int:
    started = _now()
    run_dir = Path(args.run_dir)
    tcfg, ds, plan, clients = _load_run(run_dir)
    grad, delta2, records = [], [], []
    with open(run_dir / "metrics.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["event"] == "diagnostics":
                grad.append(rec["grad_sq_norm"])
                delta2.append(rec["delta2"])
            elif rec["event"] == "round":
                records.append(rec)
    alive = [clients[r["client"]] for r in records if r["round"] == len(grad) - 1 and r["alive"]]
    diag = diagnose(alive, tcfg, grad, delta2, records, n_batches=args.n_batches,
                    n_pairs=args.n_pairs, radius=args.radius, seed=derive_seed(tcfg.seed, "diagnostics"))
    out = Path(args.out) if args.out else run_dir / "diag.json"
    payload = diag.to_dict()
    payload["heterogeneity"] = heterogeneity_metrics(plan, ds)
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(Path(f"{out}.manifest.json"), "diag", started, [out])
    summary = {k: payload[k] for k in ("sigma2_hat", "delta2_hat", "L1_hat", "eps", "lr_bound", "lr")}
    print(json.dumps(summary))
    return 0


def cmd_ablate(args) -> int:
    started = _now()
    cfg, tcfg, ds, plan = _prepare(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg["seed"]]
    arms = ["full", "no_l_pr", "no_l_gl"] + (["local"] if args.with_local else [])
    rows = []
    for arm in arms:
        per_seed = []
        for s in seeds:
            run_cfg = copy.deepcopy(cfg)
            run_cfg["seed"] = s
            run_cfg["train"].update(ARMS[arm], seed=s)
            t = train_config(run_cfg)
            d = build_dataset(run_cfg["data"], s)
            p = build_plan(run_cfg["partition"], d, t.M, s)
            per_seed.append(run_experiment(t, d, p).final_accuracy())
        acc = np.asarray(per_seed)
        rows.append({"arm": arm, "local_t": float(np.median(acc[:, 0])),
                     "global_t": float(np.median(acc[:, 1])),
                     "per_seed": [{"seed": s, "local_t": a[0], "global_t": a[1]}
                                  for s, a in zip(seeds, per_seed)]})
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps({"seeds": seeds, "arms": rows}, indent=2) + "\n")
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "median_local_t", "median_global_t"])
        for r in rows:
            w.writerow([r["arm"], repr(r["local_t"]), repr(r["global_t"])])
    write_manifest(out / "ablation.manifest.json", "ablate", started,
                   [out / "ablation.json", out / "ablation.csv"], cfg)
    print(f"{'arm':<10} {'Local-T':>8} {'Global-T':>9}")
    for r in rows:
        print(f"{r['arm']:<10} {100 * r['local_t']:8.2f} {100 * r['global_t']:9.2f}")
    return 0


# --- parser --------------------------------------------------------------------------


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--mode", choices=["sequential", "parallel"])
    p.add_argument("--rounds", type=int, help="number of rounds T")
    p.add_argument("--clients", type=int, help="number of clients M")
    p.add_argument("--partition", help="dirichlet:BETA or shard:S")
    p.add_argument("--fault", action="append", type=_fault_arg, metavar="ROUND:CLIENT[:up]",
                   help="take a client down (or back up) at a round; repeatable")
    p.add_argument("--data", help="dataset file; overrides [data]")
    p.add_argument("--local-only", action="store_true", help="disable communication (baseline)")


def _fault_arg(text: str) -> str:
    try:
        parse_fault(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="drdfl", description="Ring-topology decentralized federated learning simulator")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a Gaussian-blob dataset")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--sep", type=float, default=6.0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("partition", help="split a dataset across clients")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=4)
    p.add_argument("--partition", default="shard:2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="run an experiment")
    _run_flags(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--trace", action="store_true", help="dump every round's wire messages")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Local-T / Global-T of a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--inference", choices=["raw", "avg"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diag", help="convergence diagnostics of a finished run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--n-batches", type=int, default=20)
    p.add_argument("--n-pairs", type=int, default=5)
    p.add_argument("--radius", type=float, default=1e-3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diag)

    p = sub.add_parser("ablate", help="full vs w/o L_PR vs w/o L_GL")
    _run_flags(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p.add_argument("--with-local", action="store_true", help="add the local-only arm")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_ablate)
    return ap


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(2, exc)
    except FileNotFoundError as exc:
        return _fail(2, exc)
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit 1
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
