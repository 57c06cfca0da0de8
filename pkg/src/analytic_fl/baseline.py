"""FedAvg on the same frozen-embedding linear head, for contrast with AFL."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EmbeddingDataset
from .errors import ContractError


@dataclass(frozen=True)
class FedAvgConfig:
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 64
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ContractError("rounds, local_epochs and batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be > 0")


def _round_rng(seed: int, rnd: int) -> np.random.Generator:
    # Shuffles depend on (seed, round) only, so clients holding identical
    # data follow identical trajectories.
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rnd,)))


def softmax_xent_grad(W: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Gradient of mean softmax cross-entropy of ``X W`` against one-hot ``Y``."""
    Z = X @ W
    Z -= Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return X.T @ (P - Y) / X.shape[0]


def local_sgd(ds: EmbeddingDataset, W: np.ndarray, cfg: FedAvgConfig,
              rng: np.random.Generator) -> np.ndarray:
    W = W.copy()
    Y = ds.Y
    for _ in range(cfg.local_epochs):
        perm = rng.permutation(ds.n)
        for start in range(0, ds.n, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            W -= cfg.learning_rate * softmax_xent_grad(W, ds.X[b], Y[b])
    return W


def weighted_average(weights, counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    out = np.zeros_like(weights[0])
    for W, c in zip(weights, counts):
        out += (c / total) * W
    return out


def fedavg_train(parts: list[EmbeddingDataset], cfg: FedAvgConfig) -> np.ndarray:
    """Run ``cfg.rounds`` of FedAvg from a zero weight; empty clients sit out."""
    if not parts:
        raise ContractError("no clients")
    d, C = parts[0].d, parts[0].C
    if any(p.d != d or p.C != C for p in parts):
        raise ContractError("clients disagree on embedding width or class count")
    active = [p for p in parts if p.n > 0]
    if not active:
        raise ContractError("every client is empty")
    W = np.zeros((d, C))
    for rnd in range(cfg.rounds):
        local = [local_sgd(p, W, cfg, _round_rng(cfg.seed, rnd)) for p in active]
        W = weighted_average(local, [p.n for p in active])
    return W


def centralized_sgd(ds: EmbeddingDataset, cfg: FedAvgConfig) -> np.ndarray:
    """Plain mini-batch SGD on one dataset with the same shuffling streams."""
    W = np.zeros((ds.d, ds.C))
    for rnd in range(cfg.rounds):
        W = local_sgd(ds, W, cfg, _round_rng(cfg.seed, rnd))
    return W
