"""Token-interface heads.

``PitHead`` derives the embedding and unembedding from one column-orthonormal
token memory ``Z`` (V x d) and an SPD metric ``T = L L^T``::

    E = Z T^{-1}        W_out = T Z^T        W_out E = T (Z^T Z) T^{-1} = I_d

Neither matrix is formed during training: embedding rows come from two
triangular solves against ``L``, logits from ``(h T) Z^T``.

``TtHead`` is classic transpose tying (``W_out = E^T``) behind the same calls.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from . import linalg
from .autodiff import Tensor, ops
from .errors import ShapeMismatch, TokenOutOfRange

CLAMP_LO = -5.0
CLAMP_HI = 5.0
RETRACT_RIDGE = 1e-10
MEMORY_DEFECT_TOL = 1e-5


def retract_matrix(z_tilde: np.ndarray, ridge: float = RETRACT_RIDGE) -> np.ndarray:
    """Polar retraction ``Z~ (Z~^T Z~ + ridge I)^{-1/2}`` in float64."""
    zt = linalg.as_matrix(z_tilde, np.float64)
    gram = zt.T @ zt
    k = gram.shape[0]
    # rank is judged before the ridge, which would otherwise mask a collapsed column
    w = np.linalg.eigvalsh(gram)
    if w[0] <= 1e-12 * np.trace(gram) / k:
        raise linalg.RankDeficient(f"retraction input is rank deficient (min eigenvalue {w[0]:.3e})")
    return zt @ linalg.spd_inv_sqrt(gram + ridge * np.eye(k))


class SharedTokenMemory:
    """Column-orthonormal token memory.

    ``z`` is a float64 master copy; ``param`` is the model-precision Tensor
    seen by the forward pass (a constant when frozen, a leaf when trainable).
    """

    def __init__(self, z, frozen: bool = True, dtype=np.float32):
        z = linalg.as_matrix(z, np.float64)
        v, d = z.shape
        if v <= d:
            raise ShapeMismatch(f"token memory needs V > d, got {z.shape}")
        self.frozen = frozen
        self.dtype = np.dtype(dtype)
        self._set(z)
        if self.orthonormality_defect > MEMORY_DEFECT_TOL:
            raise ValueError(f"memory is not orthonormal (defect {self.orthonormality_defect:.2e})")

    def _set(self, z: np.ndarray):
        self.z = np.ascontiguousarray(z)
        self.orthonormality_defect = linalg.orthonormality_defect(self.z)
        data = self.z.astype(self.dtype)
        if getattr(self, "param", None) is None:
            self.param = Tensor(data, requires_grad=not self.frozen, name="head.z")
        else:
            self.param.data[...] = data
        self._zt = None if not self.frozen else Tensor(np.ascontiguousarray(data.T))

    @property
    def shape(self):
        return self.z.shape

    def transposed(self) -> Tensor:
        return self._zt if self._zt is not None else ops.transpose(self.param)

    def retract(self) -> "SharedTokenMemory":
        """Pull the trainable copy back onto the Stiefel manifold (in place)."""
        if self.frozen:
            raise ValueError("cannot retract a frozen memory")
        self._set(retract_matrix(self.param.data))
        return self


class SpdTransform:
    """SPD metric stored as a log-diagonal and a strict-lower vector of its Cholesky factor."""

    def __init__(self, d: int, dtype=np.float32, lo: float = CLAMP_LO, hi: float = CLAMP_HI):
        self.d = d
        self.lo, self.hi = lo, hi
        self.log_diag = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name="head.log_diag")
        self.strict_lower = Tensor(np.zeros(d * (d - 1) // 2, dtype=dtype), requires_grad=True,
                                   name="head.strict_lower")

    @classmethod
    def from_lower(cls, lower: np.ndarray, dtype=np.float32, lo=CLAMP_LO, hi=CLAMP_HI):
        lower = np.asarray(lower, dtype=np.float64)
        d = lower.shape[0]
        t = cls(d, dtype, lo, hi)
        t.log_diag.data[:] = np.clip(np.log(np.diag(lower)), lo, hi)
        t.strict_lower.data[:] = lower[np.tril_indices(d, -1)]
        return t

    def parameters(self) -> list[Tensor]:
        return [self.log_diag, self.strict_lower]

    def lower(self) -> Tensor:
        return ops.cholesky_factor(self.log_diag, self.strict_lower, self.lo, self.hi)

    def matrix_tensor(self) -> Tensor:
        lo = self.lower()
        return ops.matmul(lo, ops.transpose(lo))

    def lower_matrix(self, dtype=np.float64) -> np.ndarray:
        d = self.d
        out = np.zeros((d, d), dtype=dtype)
        out[np.tril_indices(d, -1)] = self.strict_lower.data
        out[np.diag_indices(d)] = np.exp(np.clip(self.log_diag.data.astype(dtype), self.lo, self.hi))
        return out

    def matrix(self, dtype=np.float64) -> np.ndarray:
        lo = self.lower_matrix(dtype)
        return lo @ lo.T

    def condition_number(self) -> float:
        return float(np.linalg.cond(self.matrix()))

    def set_identity(self):
        self.log_diag.data[:] = 0
        self.strict_lower.data[:] = 0


def _check_ids(ids, vocab: int) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise TokenOutOfRange(f"token id outside [0, {vocab})")
    return ids


class PitHead:
    kind = "PIT"

    def __init__(self, memory: SharedTokenMemory, transform: SpdTransform, mode: str = "scratch"):
        if memory.shape[1] != transform.d:
            raise ShapeMismatch("memory width and transform size differ")
        if mode not in ("teacher", "scratch"):
            raise ValueError(f"unknown mode {mode!r}")
        self.memory = memory
        self.transform = transform
        self.mode = mode

    @property
    def vocab_size(self) -> int:
        return self.memory.shape[0]

    @property
    def dim(self) -> int:
        return self.memory.shape[1]

    def parameters(self) -> list[Tensor]:
        ps = self.transform.parameters()
        if not self.memory.frozen:
            ps = [self.memory.param] + ps
        return ps

    def named_tensors(self) -> dict[str, Tensor]:
        return {"head.z": self.memory.param, "head.log_diag": self.transform.log_diag,
                "head.strict_lower": self.transform.strict_lower}

    def embed(self, token_ids) -> Tensor:
        """``e_t = z_t T^{-1}`` via ``L y = z_t^T`` then ``L^T x = y``."""
        ids = _check_ids(token_ids, self.vocab_size)
        rows = ops.row_gather(self.memory.param, ids.reshape(-1))
        lo = self.transform.lower()
        y = ops.tri_solve(lo, ops.transpose(rows))
        x = ops.tri_solve(lo, y, trans=True)
        return ops.reshape(ops.transpose(x), ids.shape + (self.dim,))

    def project_logits(self, h) -> Tensor:
        """``(h T) Z^T`` as two products; ``W_out`` is never formed."""
        if h.shape[-1] != self.dim:
            raise ShapeMismatch(f"hidden width {h.shape[-1]} != {self.dim}")
        g = ops.matmul(h, self.transform.matrix_tensor())
        return ops.matmul(g, self.memory.transposed())

    def after_step(self):
        if not self.memory.frozen:
            self.memory.retract()

    def materialize_embedding(self, dtype=np.float64) -> np.ndarray:
        z = self.memory.z.astype(dtype)
        lo = self.transform.lower_matrix(dtype)
        y = sla.solve_triangular(lo, z.T, lower=True, check_finite=False)
        return np.ascontiguousarray(sla.solve_triangular(lo, y, lower=True, trans=1, check_finite=False).T)

    def materialize_unembedding(self, dtype=np.float64) -> np.ndarray:
        return self.transform.matrix(dtype) @ self.memory.z.astype(dtype).T

    def interface_residual(self, dtype=np.float64) -> float:
        """``||W_out E - I||_F`` computed entirely in ``dtype``."""
        prod = self.materialize_unembedding(dtype) @ self.materialize_embedding(dtype)
        return float(np.linalg.norm(prod - np.eye(self.dim, dtype=dtype)))

    def payload_size(self) -> int:
        v, d = self.memory.shape
        return v * d + d * (d + 1) // 2


class TtHead:
    kind = "TT"

    def __init__(self, e, dtype=np.float32):
        e = linalg.as_matrix(e)
        self.e = Tensor(np.ascontiguousarray(e, dtype=dtype), requires_grad=True, name="head.e")

    @property
    def vocab_size(self) -> int:
        return self.e.shape[0]

    @property
    def dim(self) -> int:
        return self.e.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.e]

    def named_tensors(self) -> dict[str, Tensor]:
        return {"head.e": self.e}

    def embed(self, token_ids) -> Tensor:
        ids = _check_ids(token_ids, self.vocab_size)
        return ops.row_gather(self.e, ids)

    def project_logits(self, h) -> Tensor:
        if h.shape[-1] != self.dim:
            raise ShapeMismatch(f"hidden width {h.shape[-1]} != {self.dim}")
        return ops.matmul(h, ops.transpose(self.e))

    def after_step(self):
        pass

    def materialize_embedding(self, dtype=np.float64) -> np.ndarray:
        return self.e.data.astype(dtype)

    def materialize_unembedding(self, dtype=np.float64) -> np.ndarray:
        return np.ascontiguousarray(self.e.data.astype(dtype).T)

    def interface_residual(self, dtype=np.float64) -> float:
        e = self.materialize_embedding(dtype)
        return float(np.linalg.norm(e.T @ e - np.eye(self.dim, dtype=dtype)))

    def payload_size(self) -> int:
        return self.e.data.size


def init_teacher(e0, *, trainable_z: bool = False, match_teacher_scale: bool = False,
                 dtype=np.float32) -> PitHead:
    """Teacher-mode head: ``Z`` is the orthonormal polar factor of ``e0``.

    ``T`` starts at the identity. With ``match_teacher_scale`` it starts at the
    discarded polar factor ``H`` instead, so ``W_out = H Z^T = e0^T``.
    """
    u, h = linalg.thin_polar(e0)
    memory = SharedTokenMemory(u.matrix, frozen=not trainable_z, dtype=dtype)
    if match_teacher_scale:
        transform = SpdTransform.from_lower(linalg.cholesky(h).lower, dtype=dtype)
    else:
        transform = SpdTransform(u.shape[1], dtype=dtype)
    return PitHead(memory, transform, mode="teacher")


def scratch_memory(v: int, d: int, seed: int) -> np.ndarray:
    if v <= d:
        raise ShapeMismatch(f"need V > d, got V={v}, d={d}")
    g = np.random.default_rng(seed).standard_normal((v, d))
    q, _ = linalg.thin_qr(g)
    return q.matrix


def init_scratch(v: int, d: int, seed: int = 0, *, trainable_z: bool = False,
                 dtype=np.float32) -> PitHead:
    """Scratch-mode head: ``Z`` from thin QR of a seeded Gaussian, ``T = I``."""
    memory = SharedTokenMemory(scratch_memory(v, d, seed), frozen=not trainable_z, dtype=dtype)
    return PitHead(memory, SpdTransform(d, dtype=dtype), mode="scratch")


def retract(memory: SharedTokenMemory) -> SharedTokenMemory:
    return memory.retract()
