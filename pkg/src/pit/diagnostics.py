"""Checkpoint-level token-interface diagnostics.

All quantities are computed in float64 from materialized matrices:

* ``delta_ti`` - ``||W_out E - I_d||_F``
* semantic bases - orthonormal polar factors of ``E`` and ``W_out^T``
* alignment - rowwise cosine distance, Procrustes error, max principal angle
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import linalg
from .errors import DimensionMismatch

CSV_COLUMNS = ("checkpoint_id", "delta_ti", "cosine_distance", "procrustes_error", "principal_angle_max")
BASIS_TOL = 1e-5


def delta_ti(e, w_out) -> float:
    e = np.asarray(e, dtype=np.float64)
    w_out = np.asarray(w_out, dtype=np.float64)
    if e.ndim != 2 or w_out.shape != (e.shape[1], e.shape[0]):
        raise DimensionMismatch(f"E {e.shape} and W_out {w_out.shape} do not pair")
    return float(np.linalg.norm(w_out @ e - np.eye(e.shape[1])))


@dataclass(frozen=True)
class SemanticBases:
    b_in: linalg.OrthonormalFactor
    b_out: linalg.OrthonormalFactor
    source: str = "external"

    def __post_init__(self):
        for b in (self.b_in, self.b_out):
            if b.defect > BASIS_TOL:
                raise ValueError(f"semantic basis not orthonormal (defect {b.defect:.2e})")


def extract_bases(e, w_out, source: str = "external") -> SemanticBases:
    e = linalg.as_matrix(e, np.float64)
    w_out = linalg.as_matrix(w_out, np.float64)
    if w_out.shape != (e.shape[1], e.shape[0]):
        raise DimensionMismatch(f"E {e.shape} and W_out {w_out.shape} do not pair")
    b_in, _ = linalg.thin_polar(e)
    b_out, _ = linalg.thin_polar(np.ascontiguousarray(w_out.T))
    return SemanticBases(b_in, b_out, source)


def cosine_distance(b_in, b_out) -> float:
    """Mean over rows of ``1 - cos(b_in[v], b_out[v])``, no alignment rotation."""
    x = np.asarray(b_in, dtype=np.float64)
    y = np.asarray(b_out, dtype=np.float64)
    num = np.sum(x * y, axis=1)
    den = np.linalg.norm(x, axis=1) * np.linalg.norm(y, axis=1)
    safe = np.where(den > 0, den, 1.0)
    cos = np.where(den > 0, num / safe, 0.0)
    return float(np.mean(1.0 - np.clip(cos, -1.0, 1.0)))


def alignment_metrics(bases: SemanticBases) -> dict:
    x, y = bases.b_in.matrix, bases.b_out.matrix
    angles = linalg.principal_angles(bases.b_in, bases.b_out)
    return {
        "cosine_distance": cosine_distance(x, y),
        "procrustes_error": linalg.procrustes_error(x, y),
        "principal_angle_max": float(angles[-1]),
        "principal_angles": angles,
    }


@dataclass
class DiagnosticsReport:
    delta_ti: float
    cosine_distance: float
    procrustes_error: float
    principal_angle_max: float
    principal_angles_full: list = field(default_factory=list)
    precision_used: str = "float64"
    checkpoint_id: str = ""

    def __post_init__(self):
        vals = (self.delta_ti, self.cosine_distance, self.procrustes_error, self.principal_angle_max)
        if any(not math.isfinite(v) or v < 0 for v in vals):
            raise ValueError(f"diagnostic metrics must be finite and non-negative: {vals}")
        if not 0.0 <= self.principal_angle_max <= math.pi / 2 + 1e-12:
            raise ValueError("principal angle outside [0, pi/2]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["principal_angles_full"] = [float(a) for a in self.principal_angles_full]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def csv_row(self) -> list:
        return [self.checkpoint_id, self.delta_ti, self.cosine_distance,
                self.procrustes_error, self.principal_angle_max]

    def append_csv(self, path):
        path = Path(path)
        new = not path.exists() or path.stat().st_size == 0
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(CSV_COLUMNS)
            w.writerow(self.csv_row())


def diagnose_matrices(e, w_out, checkpoint_id: str = "", source: str = "external") -> DiagnosticsReport:
    bases = extract_bases(e, w_out, source)
    m = alignment_metrics(bases)
    return DiagnosticsReport(
        delta_ti=delta_ti(e, w_out),
        cosine_distance=m["cosine_distance"],
        procrustes_error=m["procrustes_error"],
        principal_angle_max=m["principal_angle_max"],
        principal_angles_full=list(m["principal_angles"]),
        checkpoint_id=checkpoint_id,
    )


def diagnose_head(head, checkpoint_id: str = "") -> DiagnosticsReport:
    return diagnose_matrices(head.materialize_embedding(np.float64),
                             head.materialize_unembedding(np.float64),
                             checkpoint_id, source=head.kind)


def transition_trace(model, prompt_tokens, k: int = 5, inject: tuple | None = None) -> list[dict]:
    """Logit-lens readout of the last position after the embedding and every layer.

    Each hidden state goes through the model's own readout (final norm, then
    ``project_logits``). ``inject=(layer, vector)`` replaces that layer's
    state before decoding, for probing the readout directly.
    """
    tokens = np.asarray(prompt_tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    _, hidden = model.forward(tokens, capture=True)
    if inject is not None:
        layer, vec = inject
        hidden[layer] = np.broadcast_to(np.asarray(vec, dtype=hidden[layer].dtype), hidden[layer].shape).copy()
    trace = []
    for layer, h in enumerate(hidden):
        logits = model.decode_hidden(h[:1])[0].astype(np.float64)
        top = np.argsort(-logits, kind="stable")[:k]
        trace.append({"layer": layer, "top_ids": [int(i) for i in top],
                      "logits": [float(logits[i]) for i in top]})
    return trace
