"""Experiment orchestration: configs, seeded runs, metrics and reports.

Random streams
--------------
Every stage draws from numpy's PCG64 bit generator seeded by
``SeedSequence(master_seed, spawn_key=(stage,))`` with the stage numbers in
:data:`STAGES`. Integer seeds handed to lower layers are the first 64-bit
word of ``generate_state`` on that sequence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import aggregation as agg
from .baseline import FedAvgConfig, fedavg_train
from .data import (EmbeddingDataset, PartitionSpec, gen_dummy, partition,
                   read_embeddings, subset)
from .errors import AFLError, ConfigError, ContractError, RankError

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = {"dataset": 0, "holdout": 1, "partition": 2, "order": 3, "baseline": 4}
ORDERS = ("sequential", "shuffled", "tree")


def stage_seed(master: int, stage: str) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(STAGES[stage],))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stage_rng(master: int, stage: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(master, spawn_key=(STAGES[stage],))))


# --- configuration ----------------------------------------------------------

@dataclass
class DatasetConfig:
    kind: str = "dummy"
    n: int = 1000
    d: int = 16
    c: int = 10
    separation: float = 1.0
    path: str | None = None


@dataclass
class PartitionConfig:
    strategy: str = "iid"
    K: int = 10
    alpha: float | None = None
    shards: int | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    holdout_fraction: float = 0.2
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    gamma: float = 1.0
    ri: bool = True
    order: str = "sequential"
    order_seed: int | None = None
    baseline: FedAvgConfig | None = None
    output_path: str | None = None
    weights_path: str | None = None
    workers: int = 1
    # "error" raises on gamma = 0 with rank-deficient data; "pinv" pushes on
    # with pseudoinverses to expose the unregularized failure mode
    rank_deficient: str = "error"

    def validate(self) -> "ExperimentConfig":
        ds = self.dataset
        if ds.kind not in ("dummy", "file"):
            raise ConfigError(f"dataset.kind must be 'dummy' or 'file', got {ds.kind!r}")
        if ds.kind == "file" and not ds.path:
            raise ConfigError("dataset.path is required for kind 'file'")
        if not 0 <= self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in [0, 1)")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}")
        if self.rank_deficient not in ("error", "pinv"):
            raise ConfigError("rank_deficient must be 'error' or 'pinv'")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.partition_spec()
        except ContractError as exc:
            raise ConfigError(f"partition: {exc}") from exc
        if self.gamma == 0 and ds.kind == "dummy":
            per_client = ds.n * (1 - self.holdout_fraction) / self.partition.K
            if per_client < ds.d:
                log.warning("gamma = 0 with about %.0f samples per client < d = %d; "
                            "expect rank errors", per_client, ds.d)
        return self

    def partition_spec(self) -> PartitionSpec:
        p = self.partition
        return PartitionSpec(p.strategy, p.K, stage_seed(self.seed, "partition"),
                             p.alpha, p.shards)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        return _build(cls, raw, "config").validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)


_NESTED = {"dataset": DatasetConfig, "partition": PartitionConfig, "baseline": FedAvgConfig}


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    kw = {}
    for key, value in raw.items():
        if key in _NESTED and value is not None:
            value = _build(_NESTED[key], value, f"{where}.{key}")
        kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def with_override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Copy of ``cfg`` with a (possibly nested, dot-separated) field replaced."""
    raw = cfg.to_dict()
    node = raw
    *parents, leaf = dotted.split(".")
    for p in parents:
        if not isinstance(node.get(p), dict):
            if p == "baseline" and node.get(p) is None:
                node[p] = asdict(FedAvgConfig())
            else:
                raise ConfigError(f"cannot vary {dotted!r}: {p!r} is not a section")
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"unknown field {dotted!r}")
    node[leaf] = value
    return ExperimentConfig.from_dict(raw)


# --- metrics ----------------------------------------------------------------

def delta_w(A, B) -> float:
    """Entrywise L1 distance between two weight matrices."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape:
        raise ContractError(f"shape mismatch {A.shape} vs {B.shape}")
    return float(np.abs(A - B).sum())


def accuracy(W, ds: EmbeddingDataset) -> float:
    if ds.n == 0:
        raise ContractError("accuracy of an empty dataset is undefined")
    return float(np.mean(agg.predict(W, ds.X) == ds.labels))


def checksum(W) -> str:
    return hashlib.sha256(np.ascontiguousarray(W, dtype="<f8").tobytes()).hexdigest()


# --- runs -------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    client_sizes: list[int]
    delta_w: float
    accuracy_afl: float | None
    accuracy_joint: float | None
    accuracy_fedavg: float | None
    weight_checksum: str
    weight_l1: float
    timings: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def deterministic_part(self) -> dict:
        out = self.to_dict()
        out.pop("timings")
        return out


class _Timer:
    def __init__(self):
        self.timings: dict[str, float] = {}

    def stage(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timer.timings[name] = time.perf_counter() - self.t0
                if isinstance(exc, AFLError) and not hasattr(exc, "stage"):
                    exc.stage = name
                    exc.args = (f"[{name}] {exc}",) + exc.args[1:]
                return False

        return _Ctx()


def load_dataset(cfg: ExperimentConfig) -> EmbeddingDataset:
    ds = cfg.dataset
    if ds.kind == "file":
        return read_embeddings(ds.path)
    return gen_dummy(ds.n, ds.d, ds.c, stage_seed(cfg.seed, "dataset"),
                     separation=ds.separation)


def holdout_split(ds: EmbeddingDataset, fraction: float, seed: int):
    n_test = int(round(fraction * ds.n))
    perm = stage_rng(seed, "holdout").permutation(ds.n)
    test = np.sort(perm[:n_test])
    train = np.sort(perm[n_test:])
    return subset(ds, train), subset(ds, test)


def client_updates(parts, gamma: float, workers: int = 1, rank_deficient: str = "error"):
    """Local stage for every client, on a bounded thread pool, in client order."""
    allow = rank_deficient == "pinv"

    def job(p):
        return agg.train_client(p, gamma, allow_rank_deficient=allow)

    if workers == 1:
        return [job(p) for p in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, parts))


def aggregate(updates, order: str = "sequential", order_seed: int = 0,
              workers: int = 1, rank_deficient: str = "error") -> agg.AggregateState:
    allow = rank_deficient == "pinv"
    if order == "sequential":
        return agg.fold(updates, allow_singular=allow)
    if order == "shuffled":
        perm = np.random.default_rng(order_seed).permutation(len(updates))
        return agg.fold(updates, perm, allow_singular=allow)
    if order == "tree":
        if workers == 1:
            return agg.tree_fold(updates, allow_singular=allow)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return agg.tree_fold(updates, allow_singular=allow, pool=pool)
    raise ConfigError(f"unknown order {order!r}")


def prepare(cfg: ExperimentConfig):
    """Build the train/test split and the per-client training sets."""
    full = load_dataset(cfg)
    train, test = holdout_split(full, cfg.holdout_fraction, cfg.seed)
    part = partition(train, cfg.partition_spec())
    return train, test, part, [subset(train, idx) for idx in part.assignment]


def _order_seed(cfg: ExperimentConfig) -> int:
    return cfg.order_seed if cfg.order_seed is not None else stage_seed(cfg.seed, "order")


def afl_weights(cfg: ExperimentConfig, parts=None) -> np.ndarray:
    """Final AFL weight for ``cfg`` (restored when ``cfg.ri``), without scoring."""
    if parts is None:
        parts = prepare(cfg.validate())[3]
    updates = client_updates(parts, cfg.gamma, cfg.workers, cfg.rank_deficient)
    state = aggregate(updates, cfg.order, _order_seed(cfg), cfg.workers, cfg.rank_deficient)
    return agg.restore(state) if cfg.ri else state.W_agg_r


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Dataset -> holdout -> partition -> local stage -> aggregate -> restore -> score."""
    cfg.validate()
    timer = _Timer()
    with timer.stage("dataset"):
        full = load_dataset(cfg)
        train, test = holdout_split(full, cfg.holdout_fraction, cfg.seed)
    with timer.stage("partition"):
        part = partition(train, cfg.partition_spec())
        parts = [subset(train, idx) for idx in part.assignment]
    with timer.stage("local"):
        updates = client_updates(parts, cfg.gamma, cfg.workers, cfg.rank_deficient)
    with timer.stage("aggregate"):
        state = aggregate(updates, cfg.order, _order_seed(cfg), cfg.workers, cfg.rank_deficient)
    with timer.stage("restore"):
        W = agg.restore(state) if cfg.ri else state.W_agg_r
    with timer.stage("joint"):
        reference = agg.joint_oracle(train, 0.0 if cfg.ri else cfg.gamma)
    acc_afl = acc_joint = acc_fedavg = None
    if test.n:
        acc_afl = accuracy(W, test)
        acc_joint = accuracy(reference, test)
    if cfg.baseline is not None:
        with timer.stage("baseline"):
            base_cfg = dataclasses.replace(cfg.baseline, seed=stage_seed(cfg.seed, "baseline"))
            W_fa = fedavg_train(parts, base_cfg)
            if test.n:
                acc_fedavg = accuracy(W_fa, test)
    report = RunReport(
        config=cfg.to_dict(),
        client_sizes=part.sizes(),
        delta_w=delta_w(reference, W),
        accuracy_afl=acc_afl,
        accuracy_joint=acc_joint,
        accuracy_fedavg=acc_fedavg,
        weight_checksum=checksum(W),
        weight_l1=float(np.abs(W).sum()),
        timings=timer.timings,
    )
    if cfg.weights_path:
        update = agg.restored_update(state, W) if cfg.ri else agg.ClientUpdate(
            W, state.C_agg_r, state.gamma, state.n)
        agg.write_update(update, cfg.weights_path)
    if cfg.output_path:
        write_report(report, cfg.output_path)
    return report


def write_report(report, path) -> None:
    payload = report.to_dict() if hasattr(report, "to_dict") else report
    Path(path).write_text(json.dumps(payload, indent=2, allow_nan=True) + "\n")


# --- dummy-data deviation table ---------------------------------------------

TABLE_A1_K = (2, 10, 20, 50, 100, 200)


def run_table_a1(seeds: int = 5, K_values=TABLE_A1_K, N: int = 10000, d: int = 512,
                 C: int = 10, gamma: float = 1.0, base_seed: int = 0) -> dict:
    """Mean deviation from the centralized weight, with and without RI.

    The "with RI" row trains clients at ``gamma`` and restores. The "without
    RI" row is the plain aggregation law: gamma 0, pseudoinverses wherever a
    client's Gram matrix is singular, no restore. Data is split evenly at
    random (IID) among K clients; every seed draws a fresh dataset.
    """
    if seeds < 1:
        raise ContractError("seeds must be >= 1")
    rows = {"ri": {K: [] for K in K_values}, "no_ri": {K: [] for K in K_values}}
    joint_l1 = []
    rank_errors = {"ri": {K: 0 for K in K_values}, "no_ri": {K: 0 for K in K_values}}
    for s in range(seeds):
        master = base_seed + s
        ds = gen_dummy(N, d, C, stage_seed(master, "dataset"))
        W_joint = agg.joint_oracle(ds, 0.0)
        joint_l1.append(float(np.abs(W_joint).sum()))
        for K in K_values:
            spec = PartitionSpec("iid", K, stage_seed(master, "partition"))
            parts = [subset(ds, idx) for idx in partition(ds, spec).assignment]
            for row, g in (("ri", gamma), ("no_ri", 0.0)):
                try:
                    ups = client_updates(parts, g, rank_deficient="pinv")
                    state = agg.fold(ups, allow_singular=(g == 0))
                    W = agg.restore(state) if row == "ri" else state.W_agg_r
                    rows[row][K].append(delta_w(W_joint, W))
                except RankError:
                    rank_errors[row][K] += 1
                    rows[row][K].append(float("inf"))
            log.info("seed %d K=%d ri=%.3g no_ri=%.3g", s, K,
                     rows["ri"][K][-1], rows["no_ri"][K][-1])
    return {
        "schema_version": SCHEMA_VERSION,
        "setup": {"seeds": seeds, "N": N, "d": d, "C": C, "gamma": gamma,
                  "base_seed": base_seed},
        "K": list(K_values),
        "mean_delta_w": {row: [float(np.mean(rows[row][K])) for K in K_values]
                         for row in rows},
        "per_seed": {row: {str(K): rows[row][K] for K in K_values} for row in rows},
        "rank_errors": {row: [rank_errors[row][K] for K in K_values] for row in rows},
        "mean_joint_l1": float(np.mean(joint_l1)),
    }


def format_table_a1(table: dict) -> str:
    head = "ΔW        " + "".join(f"{'K=' + str(k):>12}" for k in table["K"])
    lines = [head]
    for row, label in (("no_ri", "w/o RI"), ("ri", "w/ RI")):
        lines.append(f"{label:<10}" + "".join(f"{v:>12.3e}" for v in table["mean_delta_w"][row]))
    return "\n".join(lines)
