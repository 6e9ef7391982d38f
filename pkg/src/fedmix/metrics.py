"""Measurements: gradient divergence, communication, privacy audit, clustering, accuracy."""
from __future__ import annotations

import csv
import io
import itertools
import math
from collections import deque
from dataclasses import dataclass, fields

import numpy as np

BYTES_PER_VALUE = 8
GD_WINDOW = 10


def group_divergence(vectors: list[np.ndarray], weights: np.ndarray) -> tuple[float, bool]:
    """sum_ij w_i w_j 0.5 (1 - cos(v_i, v_j)) for one parameter group.

    A zero vector has cosine 0 with everything (itself included); the second
    return value flags that this happened.
    """
    V = np.stack([np.ravel(v) for v in vectors])
    norms = np.sqrt(np.einsum("ij,ij->i", V, V))
    nonzero = norms > 0
    U = np.zeros_like(V)
    U[nonzero] = V[nonzero] / norms[nonzero, None]
    cos = np.clip(U @ U.T, -1.0, 1.0)
    idx = np.flatnonzero(nonzero)
    cos[idx, idx] = 1.0
    w = np.asarray(weights, dtype=np.float64)
    gd = float(w @ (0.5 * (1.0 - cos)) @ w)
    return min(max(gd, 0.0), 1.0), bool(not nonzero.all())


def gradient_divergence(deltas, weights) -> float:
    """Weighted pairwise cosine disagreement of per-shard deltas, summed over parameter groups."""
    if len(deltas) < 2:
        raise ValueError("gradient divergence needs at least two deltas")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(deltas),):
        raise ValueError("one weight per delta required")
    total = 0.0
    for name in deltas[0].names:
        gd, _ = group_divergence([d[name] for d in deltas], w)
        total += gd
    return total


class Window:
    """Arithmetic mean of the last ``size`` values pushed."""

    def __init__(self, size: int = GD_WINDOW):
        self.values = deque(maxlen=size)

    def push(self, v: float) -> None:
        self.values.append(float(v))

    def mean(self) -> float | None:
        if not self.values:
            return None
        return math.fsum(self.values) / len(self.values)


def payload_bytes(n_values: int) -> int:
    return int(n_values) * BYTES_PER_VALUE


def comm_accounting(reports, direction: str = "up") -> int:
    """Total bytes in one direction over a set of client reports."""
    if direction not in ("up", "down"):
        raise ValueError("direction must be 'up' or 'down'")
    attr = "bytes_up" if direction == "up" else "bytes_down"
    return int(sum(getattr(r, attr) for r in reports))


def gigabytes(n_bytes: int) -> float:
    return n_bytes / 1e9


def privacy_reconstruct(bias_before, bias_after, lr: float, C: int, mode: str = "single_full_batch") -> np.ndarray:
    """Estimate a client's label marginal from its output-bias update.

    The client minimizes cross-entropy, so one full-batch step from uniform
    output probabilities moves the bias by ``lr * (p(y|s) - 1/C)``. The
    multi-step estimate normalizes the positive part of the bias increase.
    """
    if lr == 0:
        raise ValueError("lr must be nonzero")
    diff = np.asarray(bias_after, dtype=np.float64) - np.asarray(bias_before, dtype=np.float64)
    if diff.shape != (C,):
        raise ValueError(f"bias vectors must have length {C}")
    if mode == "single_full_batch":
        return diff / lr + 1.0 / C
    if mode == "multi_step":
        pos = np.maximum(diff, 0.0)
        if pos.sum() <= 0:
            return np.full(C, 1.0 / C)
        return pos / pos.sum()
    raise ValueError(f"unknown mode {mode!r}")


def clustering_score(q_z_given_s, ground_truth: dict, K: int) -> float:
    """Fraction of shards whose argmax expert matches their cluster under the best injective relabeling.

    ``q_z_given_s`` maps shard id to a length-K vector. When there are more
    clusters than experts, the best injective map from experts into clusters
    is used instead.
    """
    shards = sorted(ground_truth)
    if not shards:
        return 0.0
    assign = {s: int(np.argmax(np.asarray(q_z_given_s[s]))) for s in shards}
    clusters = sorted(set(ground_truth.values()))
    counts = np.zeros((len(clusters), K))
    for s in shards:
        counts[clusters.index(ground_truth[s]), assign[s]] += 1
    G = len(clusters)
    best = 0.0
    if G <= K:
        for experts in itertools.permutations(range(K), G):
            best = max(best, sum(counts[g, e] for g, e in enumerate(experts)))
    else:
        for groups in itertools.permutations(range(G), K):
            best = max(best, sum(counts[g, e] for e, g in enumerate(groups)))
    return float(best / len(shards))


def accuracy(probs: np.ndarray, y: np.ndarray) -> float:
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("empty evaluation set")
    return float(np.mean(np.argmax(probs, axis=1) == y))


def evaluate_accuracy(predictors, shards, mode: str = "local_last_communicated", split: str = "test"):
    """Top-1 accuracy.

    ``local_last_communicated``: ``predictors`` maps shard id to a callable
    X -> class probabilities; returns the unweighted mean over shards that
    have a predictor, plus the ids of excluded shards.
    ``global_gate_ensemble``: ``predictors`` is one callable applied to the
    pooled test examples of all shards.
    """
    if mode == "local_last_communicated":
        accs, excluded = [], []
        for sh in shards:
            if sh.shard_id not in predictors or sh.n(split) == 0:
                excluded.append(sh.shard_id)
                continue
            X, y, _ = sh.part(split)
            accs.append(accuracy(predictors[sh.shard_id](X), y))
        return (float(np.mean(accs)) if accs else float("nan")), excluded
    if mode == "global_gate_ensemble":
        parts = [sh.part(split) for sh in shards if sh.n(split) > 0]
        X = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        return accuracy(predictors(X), y), []
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class RoundMetrics:
    round: int
    algo: str
    K: int
    local_acc: float | None
    global_acc: float | None
    bytes_up: int
    bytes_down: int
    gd: float | None
    gd_window: float | None
    phi_entropy: float | None
    active_experts_mean: float | None
    clustering_score: float | None


METRICS_HEADER = [f.name for f in fields(RoundMetrics)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv_line(m: RoundMetrics) -> list[str]:
    return [_fmt(getattr(m, name)) for name in METRICS_HEADER]


def metrics_to_csv(rows: list[RoundMetrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in rows:
        w.writerow(metrics_csv_line(m))
    return buf.getvalue()
