"""Closed-form client training, pairwise absolute aggregation and RI restore.

A client solves a ridge problem in closed form and shares only
``(W_r, C_r)`` where ``C_r = X^T X + gamma I`` and ``W_r = C_r^-1 X^T Y``.
The server folds the pairs together with :func:`aggregate_pair`, then
:func:`restore` strips the accumulated ``k * gamma * I`` so the result is
the weight a single least-squares fit on the pooled data would give.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .data import EmbeddingDataset
from .errors import ContractError, FormatError, RankError
from .linalg import (as_matrix, cholesky, default_rcond, gram_rank_deficient,
                     gram, pinv, spd_solve, SymmetricSolver)


@dataclass(frozen=True)
class ClientUpdate:
    """The only payload a client sends: ridge weight, regularized Gram, gamma, n."""

    W_r: np.ndarray
    C_r: np.ndarray
    gamma: float
    n: int

    @property
    def d(self) -> int:
        return self.W_r.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W_r.shape[1]


@dataclass(frozen=True)
class AggregateState:
    W_agg_r: np.ndarray
    C_agg_r: np.ndarray
    k: int
    gamma: float
    n: int = 0
    # factorization of C_agg_r carried between fold steps; not part of the value
    _solver: SymmetricSolver | None = field(default=None, compare=False, repr=False)

    @classmethod
    def empty(cls, d: int, n_classes: int, gamma: float) -> "AggregateState":
        return cls(np.zeros((d, n_classes)), np.zeros((d, d)), 0, float(gamma), 0)


def local_train(X, Y, gamma: float, *, allow_rank_deficient: bool = False) -> ClientUpdate:
    """Ridge solution ``(X^T X + gamma I)^-1 X^T Y`` plus its Gram matrix.

    With ``gamma == 0`` the embeddings must have full column rank, unless
    ``allow_rank_deficient`` is set, in which case the minimum-norm
    solution is returned.
    """
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ContractError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    n, d = X.shape
    C_r = gram(X, gamma)
    if n == 0:
        W_r = np.zeros((d, Y.shape[1]))
    elif gamma == 0 and (n < d or gram_rank_deficient(C_r)):
        if not allow_rank_deficient:
            raise RankError(
                f"client embeddings ({n}x{d}) lack full column rank; use gamma > 0")
        W_r = local_train_exact(X, Y)
    else:
        W_r = spd_solve(C_r, X.T @ Y)
    return ClientUpdate(W_r, C_r, float(gamma), n)


def train_client(ds: EmbeddingDataset, gamma: float, **kw) -> ClientUpdate:
    return local_train(ds.X, ds.Y, gamma, **kw)


def local_train_exact(X, Y) -> np.ndarray:
    """Minimum-norm least-squares weight ``X^+ Y``."""
    X = as_matrix(X, "X")
    Y = as_matrix(Y, "Y")
    if X.shape[0] != Y.shape[0]:
        raise ContractError(f"X has {X.shape[0]} rows, Y has {Y.shape[0]}")
    return pinv(X) @ Y


def _solver(C: np.ndarray, allow_singular: bool, what: str) -> SymmetricSolver:
    solver = SymmetricSolver(C)
    if solver.fallback and not allow_singular:
        raise RankError(f"{what} is not positive definite; use gamma > 0")
    return solver


def _combine(Wa, Ca, Wb, Cb, allow_singular: bool, solve_a=None):
    # W = Wa_hat Wa + Wb_hat Wb where
    #   Wa_hat = I - Ca^-1 Cb (I - Cn^-1 Cb),  Wb_hat = I - Cb^-1 Ca (I - Cn^-1 Ca)
    # The inner brackets are evaluated as Cn^-1 Ca and Cn^-1 Cb (Cn = Ca + Cb),
    # which avoids cancellation when Cb is ill-conditioned. Everything is
    # applied right-to-left so no d x d weighting matrix is formed.
    Cn = Ca + Cb
    if solve_a is None or (solve_a.fallback and not allow_singular):
        solve_a = _solver(Ca, allow_singular, "accumulated Gram matrix")
    solve_b = _solver(Cb, allow_singular, "client Gram matrix")
    solve_n = _solver(Cn, allow_singular, "combined Gram matrix")
    term_a = Wa - solve_a(Cb @ solve_n(Ca @ Wa))
    term_b = Wb - solve_b(Ca @ solve_n(Cb @ Wb))
    return term_a + term_b, Cn, solve_n


def _check_compatible(state: AggregateState, W, C, gamma):
    if gamma != state.gamma:
        raise ContractError(f"gamma mismatch: state {state.gamma}, update {gamma}")
    if W.shape != state.W_agg_r.shape or C.shape != state.C_agg_r.shape:
        raise ContractError(
            f"shape mismatch: state W {state.W_agg_r.shape}, update W {W.shape}")


def aggregate_pair(state: AggregateState, update, *, allow_singular: bool = False) -> AggregateState:
    """Fold one client update (or another partial aggregate) into ``state``.

    ``allow_singular`` replaces inverses of singular Gram matrices by
    pseudoinverses instead of raising :class:`RankError`. The result is
    then no longer exact; it exists to reproduce the unregularized failure
    mode.
    """
    if isinstance(update, AggregateState):
        W, C, k, n = update.W_agg_r, update.C_agg_r, update.k, update.n
    else:
        W, C, k, n = update.W_r, update.C_r, 1, update.n
    _check_compatible(state, W, C, update.gamma)
    if k == 0:
        return state
    if state.k == 0:
        return AggregateState(W.copy(), C.copy(), k, state.gamma, n)
    W_new, C_new, solve_new = _combine(state.W_agg_r, state.C_agg_r, W, C,
                                       allow_singular, state._solver)
    return AggregateState(W_new, C_new, state.k + k, state.gamma, state.n + n, solve_new)


def fold(updates, order=None, *, allow_singular: bool = False) -> AggregateState:
    """Sequentially aggregate ``updates`` (optionally in a given index order)."""
    updates = list(updates)
    if not updates:
        raise ContractError("nothing to aggregate")
    first = updates[0]
    state = AggregateState.empty(first.d, first.n_classes, first.gamma)
    for i in (range(len(updates)) if order is None else order):
        state = aggregate_pair(state, updates[i], allow_singular=allow_singular)
    return state


def tree_fold(updates, *, allow_singular: bool = False, pool=None) -> AggregateState:
    """Pairwise reduction tree; level merges run on ``pool`` when given."""
    updates = list(updates)
    if not updates:
        raise ContractError("nothing to aggregate")
    g = updates[0].gamma
    level = [aggregate_pair(AggregateState.empty(u.d, u.n_classes, g), u) for u in updates]

    def merge(pair):
        return aggregate_pair(pair[0], pair[1], allow_singular=allow_singular)

    while len(level) > 1:
        pairs = [(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        merged = list(pool.map(merge, pairs)) if pool is not None else [merge(p) for p in pairs]
        if len(level) % 2:
            merged.append(level[-1])
        level = merged
    return level[0]


def aggregate_sum_form(updates) -> AggregateState:
    """Aggregate via ``W = (sum C_i)^-1 sum C_i W_i`` in one shot.

    Independent of :func:`aggregate_pair`; used to cross-check it.
    """
    updates = list(updates)
    if not updates:
        raise ContractError("nothing to aggregate")
    g = updates[0].gamma
    if any(u.gamma != g for u in updates):
        raise ContractError("all updates must share gamma")
    C_sum = np.zeros_like(updates[0].C_r)
    B_sum = np.zeros_like(updates[0].W_r)
    for u in updates:
        if u.C_r.shape != C_sum.shape or u.W_r.shape != B_sum.shape:
            raise ContractError("update shapes disagree")
        C_sum += u.C_r
        B_sum += u.C_r @ u.W_r
    if len(updates) == 1:
        u = updates[0]
        return AggregateState(u.W_r.copy(), u.C_r.copy(), 1, g, u.n)
    return AggregateState(spd_solve(C_sum, B_sum), C_sum, len(updates), g,
                          sum(u.n for u in updates))


def restore(state: AggregateState, rcond: float | None = None) -> np.ndarray:
    """Remove the accumulated regularization: ``(C_r - k gamma I)^-1 C_r W_r``."""
    if state.k < 1:
        raise ContractError("cannot restore an empty aggregate")
    if state.gamma == 0:
        return state.W_agg_r.copy()
    d = state.C_agg_r.shape[0]
    M = state.C_agg_r.copy()
    M[np.diag_indices(d)] -= state.k * state.gamma
    M = (M + M.T) / 2.0
    if rcond is None:
        rcond = default_rcond(M.shape)
    factor = cholesky(M)
    tol = rcond * max(float(np.max(np.diag(M))), 0.0)
    if factor is None or np.min(np.diag(factor[0])) ** 2 <= tol:
        raise RankError(
            "pooled Gram matrix is singular; gather more data or use the "
            "regularized weight W_agg_r directly")
    return scipy.linalg.cho_solve(factor, state.C_agg_r @ state.W_agg_r, check_finite=False)


def joint_oracle(ds: EmbeddingDataset, gamma: float = 0.0) -> np.ndarray:
    """Centralized fit on the full dataset: ``X^+ Y`` or the ridge solution."""
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    if gamma == 0:
        return local_train_exact(ds.X, ds.Y)
    return local_train(ds.X, ds.Y, gamma).W_r


def predict(W, X) -> np.ndarray:
    """Row-wise argmax of ``X W``; ties go to the lowest class index."""
    W = as_matrix(W, "W")
    X = as_matrix(X, "X")
    if X.shape[1] != W.shape[0]:
        raise ContractError(f"X has {X.shape[1]} columns, W has {W.shape[0]} rows")
    if X.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(X @ W, axis=1)


# --- AFLU client-update files ----------------------------------------------

AFLU_MAGIC = b"AFLU"
AFLU_VERSION = 1
_AFLU_HEADER = struct.Struct("<4sHQQdQ")


def write_update(update: ClientUpdate, path) -> None:
    d, c = update.W_r.shape
    with open(path, "wb") as f:
        f.write(_AFLU_HEADER.pack(AFLU_MAGIC, AFLU_VERSION, d, c, update.gamma, update.n))
        f.write(np.ascontiguousarray(update.W_r, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(update.C_r, dtype="<f8").tobytes())


def read_update(path) -> ClientUpdate:
    buf = Path(path).read_bytes()
    hsize = _AFLU_HEADER.size
    if len(buf) < 4 or buf[:4] != AFLU_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {AFLU_MAGIC!r}", 0)
    if len(buf) < hsize:
        raise FormatError("truncated header", len(buf))
    _, version, d, c, gamma, n = _AFLU_HEADER.unpack_from(buf)
    if version != AFLU_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = hsize + 8 * (d * c + d * d)
    if len(buf) != expected:
        raise FormatError(f"payload size {len(buf)} != expected {expected}",
                          min(len(buf), expected))
    W = np.frombuffer(buf, "<f8", d * c, hsize).reshape(d, c).astype(np.float64)
    C = np.frombuffer(buf, "<f8", d * d, hsize + 8 * d * c).reshape(d, d).astype(np.float64)
    return ClientUpdate(W, C, float(gamma), int(n))


def restored_update(state: AggregateState, W: np.ndarray | None = None) -> ClientUpdate:
    """Package a restored global weight as an unregularized update.

    The Gram matrix becomes the pooled ``sum X_i^T X_i``, so the result is
    interchangeable with a single client holding all the data at gamma 0.
    """
    if W is None:
        W = restore(state)
    C = state.C_agg_r.copy()
    C[np.diag_indices_from(C)] -= state.k * state.gamma
    return ClientUpdate(W, (C + C.T) / 2.0, 0.0, state.n)
