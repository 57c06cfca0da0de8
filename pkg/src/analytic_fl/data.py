"""Embedding datasets, label encoding, non-IID partitioners and AFLE files."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError


@dataclass(frozen=True)
class EmbeddingDataset:
    """``N x d`` embeddings with integer labels in ``[0, C)``.

    ``C`` is the global class count and is kept even when a subset holds
    no samples of some class.
    """

    X: np.ndarray
    labels: np.ndarray
    C: int

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise ContractError(f"X must be 2-D, got shape {X.shape}")
        if labels.shape[0] != X.shape[0]:
            raise ContractError(f"{labels.shape[0]} labels for {X.shape[0]} rows")
        if self.C < 1:
            raise ContractError("class count must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.C):
            raise ContractError(f"labels must lie in [0, {self.C})")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def Y(self) -> np.ndarray:
        return one_hot(self.labels, self.C)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.C == other.C
            and self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None


def one_hot(labels, C: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ContractError(f"label out of range [0, {C})")
    Y = np.zeros((labels.size, C))
    Y[np.arange(labels.size), labels] = 1.0
    return Y


def gen_dummy(N: int, d: int, C: int, seed, *, separation: float = 1.0,
              return_means: bool = False):
    """Gaussian class clusters with ``N / C`` samples per class.

    Each class mean is drawn once from ``N(0, separation^2 I)``; samples
    add unit-variance noise. Rows are returned in a seeded random order.
    """
    if C < 1 or N < 0 or d < 0:
        raise ContractError("need N >= 0, d >= 0, C >= 1")
    if N % C:
        raise ContractError(f"C={C} does not divide N={N}")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, separation, size=(C, d))
    labels = np.repeat(np.arange(C), N // C)
    labels = labels[rng.permutation(N)]
    X = means[labels] + rng.standard_normal((N, d))
    ds = EmbeddingDataset(X, labels, C)
    return (ds, means) if return_means else ds


def subset(ds: EmbeddingDataset, indices) -> EmbeddingDataset:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size:
        if idx.min() < 0 or idx.max() >= ds.n:
            raise ContractError(f"index out of range [0, {ds.n})")
        if np.unique(idx).size != idx.size:
            raise ContractError("subset indices must be distinct")
    return EmbeddingDataset(ds.X[idx], ds.labels[idx], ds.C)


STRATEGIES = ("iid", "dirichlet", "sharding")


@dataclass(frozen=True)
class PartitionSpec:
    strategy: str = "iid"
    K: int = 1
    seed: int = 0
    alpha: float | None = None
    shards: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}")
        if self.K < 1:
            raise ContractError("K must be >= 1")
        if self.strategy == "dirichlet" and not (self.alpha and self.alpha > 0):
            raise ContractError("dirichlet partition needs alpha > 0")
        if self.strategy == "sharding" and not (self.shards and self.shards >= 1):
            raise ContractError("sharding partition needs shards >= 1")


@dataclass
class Partition:
    assignment: list[np.ndarray] = field(default_factory=list)

    @property
    def K(self) -> int:
        return len(self.assignment)

    def sizes(self) -> list[int]:
        return [int(a.size) for a in self.assignment]


def partition(ds: EmbeddingDataset, spec: PartitionSpec) -> Partition:
    """Split sample indices ``0..N-1`` among ``spec.K`` clients.

    * ``iid``: seeded shuffle dealt round-robin.
    * ``dirichlet``: per class, a ``Dirichlet(alpha)`` proportion vector over
      clients followed by a multinomial allocation of that class's samples.
      Clients may end up empty.
    * ``sharding``: label-sorted indices cut into ``shards * K`` equal shards
      (leftover samples join the final shard), ``shards`` dealt per client.
    """
    N, K = ds.n, spec.K
    rng = np.random.default_rng(spec.seed)
    if spec.strategy == "iid":
        perm = rng.permutation(N)
        parts = [perm[k::K] for k in range(K)]
    elif spec.strategy == "dirichlet":
        buckets: list[list[np.ndarray]] = [[] for _ in range(K)]
        for c in range(ds.C):
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.permutation(idx.size)]
            p = rng.dirichlet(np.full(K, spec.alpha))
            p = np.nan_to_num(p)
            p = p / p.sum() if p.sum() > 0 else np.full(K, 1.0 / K)
            counts = rng.multinomial(idx.size, p)
            for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                buckets[k].append(chunk)
        parts = [np.concatenate(b) if b else np.zeros(0, np.int64) for b in buckets]
    else:
        n_shards = spec.shards * K
        if n_shards > N:
            raise ContractError(f"shards*K = {n_shards} exceeds N = {N}")
        order = np.argsort(ds.labels, kind="stable")
        size = N // n_shards
        cuts = [order[i * size:(i + 1) * size] for i in range(n_shards - 1)]
        cuts.append(order[(n_shards - 1) * size:])
        deal = rng.permutation(n_shards)
        parts = [np.concatenate([cuts[j] for j in deal[k * spec.shards:(k + 1) * spec.shards]])
                 for k in range(K)]
    return Partition([np.asarray(p, dtype=np.int64) for p in parts])


# --- AFLE binary embedding files -------------------------------------------

AFLE_MAGIC = b"AFLE"
AFLE_VERSION = 1
_AFLE_HEADER = struct.Struct("<4sHBBQQQ")


def write_embeddings(ds: EmbeddingDataset, path) -> None:
    header = _AFLE_HEADER.pack(AFLE_MAGIC, AFLE_VERSION, 0, 0, ds.n, ds.d, ds.C)
    with open(path, "wb") as f:
        f.write(header)
        f.write(ds.labels.astype("<u4").tobytes())
        f.write(np.ascontiguousarray(ds.X, dtype="<f8").tobytes())


def read_embeddings(path) -> EmbeddingDataset:
    buf = Path(path).read_bytes()
    hsize = _AFLE_HEADER.size
    if len(buf) < 4 or buf[:4] != AFLE_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {AFLE_MAGIC!r}", 0)
    if len(buf) < hsize:
        raise FormatError("truncated header", len(buf))
    _, version, dtype, _reserved, N, d, C = _AFLE_HEADER.unpack_from(buf)
    if version != AFLE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}", 6)
    if C < 1:
        raise FormatError("class count must be >= 1", 24)
    expected = hsize + 4 * N + 8 * N * d
    if len(buf) < expected:
        raise FormatError(f"truncated payload: need {expected} bytes, have {len(buf)}", len(buf))
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    labels = np.frombuffer(buf, dtype="<u4", count=N, offset=hsize).astype(np.int64)
    bad = np.flatnonzero(labels >= C)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= C={C}", hsize + 4 * int(bad[0]))
    X = np.frombuffer(buf, dtype="<f8", count=N * d, offset=hsize + 4 * N)
    return EmbeddingDataset(X.reshape(N, d).astype(np.float64), labels, int(C))
