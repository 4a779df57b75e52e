"""Dense real-matrix primitives: QR, SVD, polar, Cholesky, triangular solves.

Matrices are plain 2-D numpy arrays; the array dtype is the precision flag.
Factorizations are delegated to LAPACK through numpy/scipy and wrapped with
the rank, definiteness and sign conventions the rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficient,
    SingularTriangular,
)

__all__ = [
    "OrthonormalFactor",
    "SpdFactor",
    "as_matrix",
    "thin_qr",
    "thin_svd",
    "thin_polar",
    "cholesky",
    "tri_solve",
    "spd_inv_sqrt",
    "principal_angles",
    "procrustes_error",
    "orthonormality_defect",
]


def as_matrix(a, dtype=None) -> np.ndarray:
    """Validate ``a`` as a finite 2-D real array (float64 unless told otherwise)."""
    arr = np.asarray(a)
    if dtype is None:
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float64
    arr = np.asarray(arr, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("matrix contains NaN or Inf")
    return arr


def orthonormality_defect(q) -> float:
    """``||q^T q - I||_F`` evaluated in float64."""
    q = np.asarray(q, dtype=np.float64)
    return float(np.linalg.norm(q.T @ q - np.eye(q.shape[1])))


@dataclass(frozen=True)
class OrthonormalFactor:
    """An n x k matrix with orthonormal columns, plus the tolerance it was built to."""

    matrix: np.ndarray
    tolerance: float = 1e-6

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] < m.shape[1]:
            raise DimensionMismatch(f"orthonormal factor must be tall, got {m.shape}")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def defect(self) -> float:
        return orthonormality_defect(self.matrix)

    def check(self) -> bool:
        return self.defect <= self.tolerance


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor with a strictly positive diagonal."""

    lower: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=np.float64)
        object.__setattr__(self, "lower", lo)
        if lo.ndim != 2 or lo.shape[0] != lo.shape[1]:
            raise DimensionMismatch(f"Cholesky factor must be square, got {lo.shape}")
        if np.any(np.triu(lo, 1) != 0):
            raise ValueError("entries above the diagonal must be exactly zero")
        if np.any(np.diag(lo) <= 0):
            raise NotPositiveDefinite("Cholesky factor diagonal must be strictly positive")
        lo.setflags(write=False)

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


def thin_qr(a) -> tuple[OrthonormalFactor, np.ndarray]:
    """Reduced QR with ``diag(r) >= 0``.

    Raises RankDeficient when a diagonal entry of ``r`` falls below
    ``1e-10 * ||a||_F``.
    """
    a = as_matrix(a)
    n, k = a.shape
    if n < k:
        raise DimensionMismatch(f"thin_qr needs n >= k, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    signs = np.where(np.diag(r) < 0, -1.0, 1.0).astype(a.dtype)
    q = q * signs
    r = signs[:, None] * r
    fro = np.linalg.norm(a)
    if fro == 0 or np.min(np.abs(np.diag(r))) < 1e-10 * fro:
        raise RankDeficient("thin_qr: matrix is numerically rank deficient")
    return OrthonormalFactor(q), r


def thin_svd(a) -> tuple[OrthonormalFactor, np.ndarray, OrthonormalFactor]:
    """Thin SVD ``a = u diag(s) v^T`` with ``s`` descending.

    Returns ``(u, s, v)`` where ``v`` is k x k (not transposed).
    """
    a = as_matrix(a)
    if a.shape[0] < a.shape[1]:
        raise DimensionMismatch(f"thin_svd needs n >= k, got {a.shape}")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(str(exc)) from exc
    return OrthonormalFactor(u), s, OrthonormalFactor(np.ascontiguousarray(vt.T))


def thin_polar(a) -> tuple[OrthonormalFactor, np.ndarray]:
    """Thin polar decomposition ``a = u h``, assembled from the SVD.

    ``u = U V^T`` is the closest column-orthonormal matrix to ``a`` and
    ``h = V diag(s) V^T`` is symmetric positive definite.
    """
    a = as_matrix(a)
    u_bar, s, v_bar = thin_svd(a)
    if s.size == 0 or s[0] == 0 or s[-1] < 1e-10 * s[0]:
        raise RankDeficient("thin_polar: matrix is numerically rank deficient")
    v = v_bar.matrix
    u = u_bar.matrix @ v.T
    h = (v * s) @ v.T
    h = 0.5 * (h + h.T)
    return OrthonormalFactor(u), h


def cholesky(a) -> SpdFactor:
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    if np.linalg.norm(a - a.T) > 1e-10 * max(np.linalg.norm(a), 1.0):
        raise ValueError("cholesky: matrix is not symmetric")
    try:
        lower = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    if np.any(np.diag(lower) <= 0):
        raise NotPositiveDefinite("cholesky: non-positive pivot")
    return SpdFactor(lower)


def tri_solve(l, b, *, lower: bool = True, trans: bool = False, side: str = "left") -> np.ndarray:
    """Solve a triangular system without forming an inverse.

    side="left":  op(l) x = b
    side="right": x op(l) = b
    where op(l) is ``l`` or ``l^T`` depending on ``trans``.
    """
    if isinstance(l, SpdFactor):
        l, lower = l.lower, True
    l = as_matrix(l)
    b = np.asarray(b, dtype=np.result_type(l.dtype, np.asarray(b).dtype, np.float32))
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    if l.shape[0] != l.shape[1]:
        raise DimensionMismatch(f"triangular factor must be square, got {l.shape}")
    if np.any(np.diag(l) == 0):
        raise SingularTriangular("zero on the diagonal of a triangular factor")
    if side == "left":
        if b.shape[0] != l.shape[0]:
            raise DimensionMismatch(f"cannot solve {l.shape} against {b.shape}")
        x = sla.solve_triangular(l, b, lower=lower, trans=1 if trans else 0, check_finite=False)
    elif side == "right":
        # x op(l) = b  <=>  op(l)^T x^T = b^T
        if b.shape[1] != l.shape[0]:
            raise DimensionMismatch(f"cannot solve {b.shape} against {l.shape} from the right")
        x = sla.solve_triangular(l, b.T, lower=lower, trans=0 if trans else 1, check_finite=False).T
    else:
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    return x[:, 0] if vector else x


def spd_inv_sqrt(a) -> np.ndarray:
    """Symmetric inverse square root via an eigendecomposition."""
    a = as_matrix(a)
    k = a.shape[0]
    if a.shape != (k, k):
        raise DimensionMismatch(f"spd_inv_sqrt needs a square matrix, got {a.shape}")
    sym = 0.5 * (a + a.T)
    w, v = np.linalg.eigh(sym)
    floor = 1e-12 * np.trace(sym) / k
    if np.trace(sym) <= 0 or w[0] <= floor:
        raise NotPositiveDefinite(f"smallest eigenvalue {w[0]:.3e} below {floor:.3e}")
    m = (v / np.sqrt(w)) @ v.T
    return 0.5 * (m + m.T)


def _basis(b) -> np.ndarray:
    return b.matrix if isinstance(b, OrthonormalFactor) else as_matrix(b)


def principal_angles(b1, b2) -> np.ndarray:
    """Principal angles (radians, ascending) between two column spaces."""
    x, y = _basis(b1), _basis(b2)
    if x.shape != y.shape:
        raise DimensionMismatch(f"basis shapes differ: {x.shape} vs {y.shape}")
    for m in (x, y):
        if orthonormality_defect(m) > 1e-6:
            raise ValueError("principal_angles expects orthonormal inputs")
    sigma = np.linalg.svd(x.astype(np.float64).T @ y.astype(np.float64), compute_uv=False)
    return np.sort(np.arccos(np.clip(sigma, 0.0, 1.0)))


def procrustes_error(b1, b2, return_rotation: bool = False):
    """``min_R ||b1 R - b2||_F`` over orthogonal ``R``.

    With ``return_rotation=True`` the minimizer ``R`` is returned as well.
    """
    x = _basis(b1).astype(np.float64)
    y = _basis(b2).astype(np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"shapes differ: {x.shape} vs {y.shape}")
    u, s, vt = np.linalg.svd(x.T @ y)
    sq = np.sum(x * x) + np.sum(y * y) - 2.0 * np.sum(s)
    err = float(np.sqrt(max(sq, 0.0)))
    if return_rotation:
        return err, u @ vt
    return err
