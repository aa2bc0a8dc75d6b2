"""Synthetic blob datasets, the binary dataset format, and non-IID partitioners.

Binary layout (little-endian)::

    "DRDF" | version u16 | N u64 | D u32 | K u32
    N*D float32 inputs | N uint16 labels | N uint8 split tags (0 train, 1 test)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DRDF"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQII")
TRAIN, TEST = 0, 1


class DatasetFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class PartitionError(ValueError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, D) float64, float32-representable
    labels: np.ndarray  # (N,) int64
    split: np.ndarray   # (N,) uint8
    K: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.uint8)
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2 or self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("inputs, labels and split must agree on N")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs must be finite")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.K):
            raise ValueError(f"labels must lie in [0, {self.K})")

    @property
    def N(self) -> int:
        return self.inputs.shape[0]

    @property
    def D(self) -> int:
        return self.inputs.shape[1]

    @property
    def train_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split == TRAIN)

    @property
    def test_idx(self) -> np.ndarray:
        return np.flatnonzero(self.split == TEST)

    def check_class_coverage(self) -> None:
        for name, idx in (("train", self.train_idx), ("test", self.test_idx)):
            missing = set(range(self.K)) - set(self.labels[idx].tolist())
            if missing:
                raise ValueError(f"classes {sorted(missing)} absent from {name} split")

    def content_hash(self) -> str:
        import hashlib
        return hashlib.sha256(to_bytes(self)).hexdigest()


def make_blobs(K: int, per_class: int, D: int, separation: float, seed: int,
               test_fraction: float = 0.2) -> Dataset:
    """K unit-variance Gaussian clusters centred at ``separation`` times random
    unit directions, with a per-class train/test split.

    Values are rounded to float32 so the dataset survives the binary format
    bit for bit.
    """
    if K < 2 or D < 2:
        raise ValueError(f"need K >= 2 and D >= 2, got K={K}, D={D}")
    if separation < 0 or not np.isfinite(separation):
        raise ValueError(f"separation must be finite and >= 0, got {separation}")
    n_test = int(round(per_class * test_fraction))
    if n_test < 1 or per_class - n_test < 1:
        raise ValueError(f"per_class={per_class} leaves an empty train or test split")
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((K, D))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    centres = separation * directions
    inputs, labels, split = [], [], []
    for k in range(K):
        inputs.append(centres[k] + rng.standard_normal((per_class, D)))
        labels.append(np.full(per_class, k))
        tags = np.zeros(per_class, dtype=np.uint8)
        tags[rng.permutation(per_class)[:n_test]] = TEST
        split.append(tags)
    x = np.concatenate(inputs).astype(np.float32).astype(np.float64)
    order = rng.permutation(K * per_class)
    return Dataset(x[order], np.concatenate(labels)[order], np.concatenate(split)[order], K)


# --- binary format ------------------------------------------------------------


def to_bytes(ds: Dataset) -> bytes:
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, ds.N, ds.D, ds.K)
    return b"".join([
        header,
        ds.inputs.astype("<f4").tobytes(),
        ds.labels.astype("<u2").tobytes(),
        ds.split.astype("u1").tobytes(),
    ])


def from_bytes(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}", len(buf))
    magic, version, n, d, k = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if d == 0 or k < 2:
        raise DatasetFormatError(f"invalid header dims D={d} K={k}", 14)
    expected = _HEADER.size + n * d * 4 + n * 2 + n
    if len(buf) != expected:
        raise DatasetFormatError(f"payload length mismatch: expected {expected} bytes, got {len(buf)}",
                                 min(len(buf), expected))
    off = _HEADER.size
    x = np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d)
    off += n * d * 4
    y = np.frombuffer(buf, dtype="<u2", count=n, offset=off)
    off += n * 2
    s = np.frombuffer(buf, dtype="u1", count=n, offset=off)
    if y.size and y.max() >= k:
        raise DatasetFormatError(f"label {int(y.max())} out of range for K={k}", _HEADER.size + n * d * 4)
    if s.size and s.max() > TEST:
        raise DatasetFormatError("split tag must be 0 or 1", off)
    return Dataset(x.astype(np.float64), y.astype(np.int64), s.copy(), int(k))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load_external(path: str | Path, format: str = "drdf") -> Dataset:  # noqa: A002
    if format != "drdf":
        raise ValueError(f"unknown dataset format {format!r}")
    return from_bytes(Path(path).read_bytes())


# --- partitions -----------------------------------------------------------------


@dataclass
class PartitionPlan:
    client_train: list[np.ndarray]
    client_test: list[np.ndarray]
    scheme: str                 # "dirichlet" or "shard"
    param: float                # beta or s
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.client_train)

    def to_json(self) -> str:
        return json.dumps({
            "scheme": self.scheme,
            "param": self.param,
            "seed": self.seed,
            "clients": [{"train": tr.tolist(), "test": te.tolist()}
                        for tr, te in zip(self.client_train, self.client_test)],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        d = json.loads(text)
        return cls([np.asarray(c["train"], dtype=np.int64) for c in d["clients"]],
                   [np.asarray(c["test"], dtype=np.int64) for c in d["clients"]],
                   d["scheme"], d["param"], d["seed"])

    def content_hash(self) -> str:
        import hashlib
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` closest to ``proportions * total``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in client order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _split_by_counts(idx: np.ndarray, counts: np.ndarray) -> list[np.ndarray]:
    return np.split(idx, np.cumsum(counts)[:-1])


def partition_dirichlet(ds: Dataset, M: int, beta: float, seed: int, max_redraws: int = 100) -> PartitionPlan:
    """Class-wise Dirichlet split: for each class, client shares ~ Dir(beta).

    The test split of each class is divided with the same shares. A draw that
    leaves some client without train or test samples is redrawn.
    """
    if beta <= 0:
        raise PartitionError(f"beta must be positive, got {beta}")
    if M < 2:
        raise PartitionError(f"need at least 2 clients, got {M}")
    rng = np.random.default_rng(seed)
    train_by_class = [ds.train_idx[ds.labels[ds.train_idx] == k] for k in range(ds.K)]
    test_by_class = [ds.test_idx[ds.labels[ds.test_idx] == k] for k in range(ds.K)]
    for attempt in range(max_redraws):
        train = [[] for _ in range(M)]
        test = [[] for _ in range(M)]
        for k in range(ds.K):
            shares = rng.dirichlet(np.full(M, beta))
            tr = rng.permutation(train_by_class[k])
            te = rng.permutation(test_by_class[k])
            for m, part in enumerate(_split_by_counts(tr, largest_remainder(shares, tr.size))):
                train[m].append(part)
            for m, part in enumerate(_split_by_counts(te, largest_remainder(shares, te.size))):
                test[m].append(part)
        train = [np.sort(np.concatenate(p)) for p in train]
        test = [np.sort(np.concatenate(p)) for p in test]
        if all(t.size for t in train) and all(t.size for t in test):
            return PartitionPlan(train, test, "dirichlet", float(beta), seed, {"redraws": attempt})
    raise PartitionError(f"no Dirichlet draw gave every client data after {max_redraws} attempts")


def assign_shards(K: int, M: int, s: int, rng: np.random.Generator) -> list[list[int]]:
    """Give each client ``s`` distinct classes, always picking the least-used
    classes first (random tie-break) so every class is used when M*s >= K."""
    usage = np.zeros(K, dtype=np.int64)
    out = []
    for _ in range(M):
        tiebreak = rng.permutation(K)
        order = sorted(range(K), key=lambda c: (usage[c], tiebreak[c]))
        chosen = sorted(order[:s])
        usage[chosen] += 1
        out.append(chosen)
    return out


def partition_shard(ds: Dataset, M: int, s: int, seed: int) -> PartitionPlan:
    """Each client holds ``s`` classes; every class's samples are cut into
    equal slices, one per client holding it. Test samples follow the same rule."""
    if not 1 <= s <= ds.K:
        raise PartitionError(f"s must be in [1, K={ds.K}], got {s}")
    if M < 2:
        raise PartitionError(f"need at least 2 clients, got {M}")
    rng = np.random.default_rng(seed)
    classes = assign_shards(ds.K, M, s, rng)
    holders = [[m for m in range(M) if k in classes[m]] for k in range(ds.K)]
    train = [[] for _ in range(M)]
    test = [[] for _ in range(M)]
    for k in range(ds.K):
        if not holders[k]:
            continue
        for split_idx, sink in ((ds.train_idx, train), (ds.test_idx, test)):
            pool = rng.permutation(split_idx[ds.labels[split_idx] == k])
            if pool.size < len(holders[k]):
                raise PartitionError(f"class {k} has {pool.size} samples for {len(holders[k])} holders")
            for m, part in zip(holders[k], np.array_split(pool, len(holders[k]))):
                sink[m].append(part)
    train = [np.sort(np.concatenate(p)) for p in train]
    test = [np.sort(np.concatenate(p)) for p in test]
    return PartitionPlan(train, test, "shard", int(s), seed, {"classes": classes})


def label_distribution(labels: np.ndarray, idx: np.ndarray, K: int) -> np.ndarray:
    counts = np.bincount(labels[idx], minlength=K).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


def label_entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())
