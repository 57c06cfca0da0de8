"""Dense float64 linear algebra used by the aggregation code.

Everything here is a pure function of its inputs. Matrices are plain
``numpy.ndarray`` values of dtype float64; inputs are never modified.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from .errors import ContractError, NumericalError, RankError

EPS = np.finfo(np.float64).eps


def as_matrix(A, name: str = "A") -> np.ndarray:
    """Coerce ``A`` to a finite 2-D float64 array."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractError(f"{name} contains NaN or Inf")
    return A


def default_rcond(shape: tuple[int, int]) -> float:
    return EPS * max(shape[0], shape[1], 1)


def pinv(A, rcond: float | None = None, hermitian: bool = False) -> np.ndarray:
    """Moore-Penrose pseudoinverse via the SVD.

    Singular values ``<= rcond * sigma_max`` are treated as zero. With
    ``hermitian=True`` the symmetric eigendecomposition is used instead,
    which is cheaper and gives the same result for symmetric input.
    """
    A = as_matrix(A)
    m, n = A.shape
    if rcond is None:
        rcond = default_rcond(A.shape)
    if rcond < 0:
        raise ContractError("rcond must be non-negative")
    if A.size == 0:
        return np.zeros((n, m))
    try:
        if hermitian:
            if m != n:
                raise ContractError("hermitian pinv needs a square matrix")
            w, V = np.linalg.eigh(A)
            s = np.abs(w)
            keep = s > rcond * s.max()
            inv = np.zeros_like(w)
            inv[keep] = 1.0 / w[keep]
            return (V * inv) @ V.T
        U, s, Vt = np.linalg.svd(A, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    keep = s > rcond * s[0]
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (Vt.T * inv) @ U.T


def cholesky(C):
    """Return a ``cho_factor`` of symmetric ``C`` or None if it is not PD."""
    try:
        return scipy.linalg.cho_factor(C, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        return None


class SymmetricSolver:
    """Factor a symmetric matrix once, then solve ``C Z = B`` repeatedly.

    Cholesky when ``C`` is positive definite, otherwise the symmetric
    eigendecomposition applied as ``pinv(C) @ B`` (``fallback`` is set).
    """

    def __init__(self, C, rcond: float | None = None):
        C = as_matrix(C, "C")
        if C.shape[0] != C.shape[1]:
            raise ContractError(f"C must be square, got {C.shape}")
        self.shape = C.shape
        self.factor = cholesky(C) if C.size else None
        self.fallback = self.factor is None and C.size > 0
        if self.fallback:
            try:
                w, V = scipy.linalg.eigh(C, driver="evr", check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"eigendecomposition failed: {exc}") from exc
            if rcond is None:
                rcond = default_rcond(C.shape)
            s = np.abs(w)
            keep = s > rcond * s.max()
            self._V = V[:, keep]
            self._winv = 1.0 / w[keep]

    def __call__(self, B) -> np.ndarray:
        B = np.asarray(B, dtype=np.float64)
        if B.shape[0] != self.shape[0]:
            raise ContractError(f"B has {B.shape[0]} rows, C has {self.shape[0]}")
        if self.factor is not None:
            return scipy.linalg.cho_solve(self.factor, B, check_finite=False)
        if not self.fallback:
            return np.zeros(B.shape)
        proj = self._V.T @ B
        scale = self._winv if B.ndim == 1 else self._winv[:, None]
        return self._V @ (scale * proj)


def spd_solve(C, B, *, rcond: float | None = None, return_fallback: bool = False):
    """Solve ``C Z = B`` for symmetric ``C``.

    Uses a Cholesky factorization; when ``C`` is not numerically positive
    definite it falls back to ``pinv(C) @ B``. Pass ``return_fallback=True``
    to receive ``(Z, used_fallback)``.
    """
    B = np.asarray(B, dtype=np.float64)
    if B.ndim not in (1, 2) or not np.all(np.isfinite(B)):
        raise ContractError("B must be a finite vector or matrix")
    solver = SymmetricSolver(C, rcond)
    Z = solver(B)
    return (Z, solver.fallback) if return_fallback else Z


def gram(X, gamma: float = 0.0) -> np.ndarray:
    """``X^T X + gamma I``, exactly symmetric."""
    X = as_matrix(X, "X")
    if gamma < 0:
        raise ContractError("gamma must be non-negative")
    M = X.T @ X
    M = (M + M.T) / 2.0
    M[np.diag_indices_from(M)] += gamma
    return M


def column_rank_deficient(X, rcond: float | None = None) -> bool:
    """True when ``X`` does not have full column rank at tolerance ``rcond``."""
    X = as_matrix(X, "X")
    n, d = X.shape
    if d == 0:
        return False
    if n < d:
        return True
    if rcond is None:
        rcond = default_rcond(X.shape)
    s = np.linalg.svd(X, compute_uv=False)
    return bool(s[0] == 0.0 or s[-1] <= rcond * s[0])


def gram_rank_deficient(G, rcond: float | None = None) -> bool:
    """Rank test on a Gram matrix ``X^T X`` via its eigenvalues.

    Roundoff puts the eigenvalues of a singular Gram matrix near
    ``eps * lambda_max`` rather than ``eps^2``, so the cutoff is applied to
    eigenvalues directly, not to their square roots.
    """
    G = as_matrix(G, "G")
    if G.size == 0:
        return False
    if rcond is None:
        rcond = default_rcond(G.shape)
    w = scipy.linalg.eigh(G, eigvals_only=True, driver="evr", check_finite=False)
    return bool(w[-1] <= 0.0 or w[0] <= rcond * w[-1])


def block_pinv(Xu, Xv, rcond: float | None = None) -> np.ndarray:
    """Pseudoinverse of the row-stacked ``[Xu; Xv]`` built from its blocks.

    Both blocks must have full column rank. With ``Cu = Xu^T Xu``,
    ``Cv = Xv^T Xv`` and ``Ru = Cu^-1``::

        U = [I - Ru Cv + Ru Cv (Cu + Cv)^-1 Cv] Xu^+
        V = [I - Rv Cu + Rv Cu (Cu + Cv)^-1 Cu] Xv^+

    and the result is ``[U V]``. Each bracket equals ``(Cu + Cv)^-1 Cu``
    (resp. ``(Cu + Cv)^-1 Cv``) exactly, which is how it is evaluated.
    """
    Xu = as_matrix(Xu, "Xu")
    Xv = as_matrix(Xv, "Xv")
    if Xu.shape[1] != Xv.shape[1]:
        raise ContractError("blocks must have the same number of columns")
    for name, X in (("Xu", Xu), ("Xv", Xv)):
        if column_rank_deficient(X, rcond):
            raise RankError(f"block {name} (shape {X.shape}) lacks full column rank")
    Cu, Cv = gram(Xu), gram(Xv)
    Cs = Cu + Cv
    # Evaluating a bracket literally loses about eps * cond(Cu), which ruins
    # the result for an ill-conditioned block even when the stack is benign.
    U = spd_solve(Cs, Cu) @ pinv(Xu, rcond)
    V = spd_solve(Cs, Cv) @ pinv(Xv, rcond)
    return np.hstack([U, V])

