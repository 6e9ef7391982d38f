"""Global posterior table q(z | side category) and its updates."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .numerics import log_softmax

SIMPLEX_TOL = 1e-9
PROJECT_FLOOR = 1e-6
MARGINAL_FLOOR = 1e-12


class ConfigError(ValueError):
    pass


@dataclass
class PosteriorTable:
    phi: np.ndarray  # (C_side, K)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2:
            raise ValueError("phi must be a matrix")

    @classmethod
    def uniform(cls, C_side: int, K: int) -> "PosteriorTable":
        return cls(np.full((C_side, K), 1.0 / K))

    @property
    def C_side(self) -> int:
        return self.phi.shape[0]

    @property
    def K(self) -> int:
        return self.phi.shape[1]

    def copy(self) -> "PosteriorTable":
        return PosteriorTable(self.phi.copy())

    def is_valid(self, tol: float = SIMPLEX_TOL) -> bool:
        return bool(np.all(self.phi >= -tol) and np.all(np.abs(self.phi.sum(axis=1) - 1.0) <= tol))

    def rows_for(self, side: np.ndarray) -> np.ndarray:
        return self.phi[np.asarray(side)]


def closed_form_phi(log_joints: np.ndarray, side_cats: np.ndarray, beta: float, columns=None) -> dict:
    """Per-category maximizer of ``sum_k phi_k * mean_logjoint_k / beta + H(phi)``.

    Row ``c`` is ``softmax(sum_{i in c} log_joints[i] / (beta * M_c))`` over
    ``columns`` (default all experts); other entries of the row are 0.
    Categories without examples in the batch are absent from the result.
    """
    if not beta > 0:
        raise ConfigError(f"beta must be > 0, got {beta}")
    lj = np.asarray(log_joints, dtype=np.float64)
    side_cats = np.asarray(side_cats)
    K = lj.shape[1]
    cols = np.arange(K) if columns is None else np.asarray(sorted(columns))
    out = {}
    for c in np.unique(side_cats):
        mask = side_cats == c
        m = int(mask.sum())
        logits = lj[mask][:, cols].sum(axis=0) / (beta * m)
        row = np.zeros(K)
        row[cols] = np.exp(log_softmax(logits))
        out[int(c)] = row
    return out


def dampen(table: PosteriorTable, new_rows: dict, gamma: float, columns=None) -> PosteriorTable:
    """phi_c <- gamma * phi_c + (1 - gamma) * new_c for the categories in ``new_rows``.

    With ``columns`` only those entries of each row are blended; the rest stay put.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    phi = table.phi.copy()
    cols = slice(None) if columns is None else np.asarray(sorted(columns))
    for c, row in new_rows.items():
        phi[c, cols] = gamma * phi[c, cols] + (1.0 - gamma) * np.asarray(row)[cols]
    return PosteriorTable(phi)


def side_counts(side: np.ndarray, C_side: int) -> np.ndarray:
    return np.bincount(np.asarray(side), minlength=C_side).astype(np.float64)


def marginal_q_z_given_s(table: PosteriorTable, counts: np.ndarray) -> np.ndarray:
    """q(z|s) = sum_c (N_c / N_s) phi_c."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("side-category counts must be nonnegative with a positive total")
    return (counts / counts.sum()) @ table.phi


def marginal_entropy(phi: np.ndarray, p_y: np.ndarray) -> float:
    m = np.maximum(np.asarray(p_y) @ phi, MARGINAL_FLOOR)
    return float(-np.sum(m * np.log(m)))


def marginal_entropy_grad(table: PosteriorTable, p_y: np.ndarray) -> np.ndarray:
    """d H(sum_c p_y(c) phi_c) / d phi, with the marginal floored at 1e-12."""
    p_y = np.asarray(p_y, dtype=np.float64)
    if p_y.shape != (table.C_side,) or np.any(p_y < -SIMPLEX_TOL) or abs(p_y.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("p_y must be a distribution over the side categories")
    m = np.maximum(p_y @ table.phi, MARGINAL_FLOOR)
    return -np.outer(p_y, np.log(m) + 1.0)


def project_rows(table: PosteriorTable) -> PosteriorTable:
    """Clamp entries at 1e-6 and renormalize rows; idempotent on valid rows."""
    phi = np.maximum(table.phi, PROJECT_FLOOR)
    return PosteriorTable(phi / phi.sum(axis=1, keepdims=True))


def mean_row_entropy(table: PosteriorTable) -> float:
    p = table.phi
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    return float(h.mean())


SNAPSHOT_HEADER = ["round", "category", "expert", "prob"]


def snapshot_rows(round_: int, table: PosteriorTable):
    for c in range(table.C_side):
        for k in range(table.K):
            yield [round_, c, k, repr(float(table.phi[c, k]))]


def to_csv(table: PosteriorTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "expert", "prob"])
    for row in snapshot_rows(0, table):
        w.writerow(row[1:])
    return buf.getvalue()


def from_csv(text: str) -> PosteriorTable:
    rows = list(csv.DictReader(io.StringIO(text)))
    C = max(int(r["category"]) for r in rows) + 1
    K = max(int(r["expert"]) for r in rows) + 1
    phi = np.zeros((C, K))
    for r in rows:
        phi[int(r["category"]), int(r["expert"])] = float(r["prob"])
    return PosteriorTable(phi)
