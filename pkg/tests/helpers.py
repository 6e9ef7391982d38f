"""Shared test utilities: independent oracles and tiny fixtures."""
import numpy as np

from fedmix.data import ShardDataset
from fedmix.numerics import MlpSpec, ParamVector, init_mlp


def rng(seed=0):
    return np.random.default_rng(seed)


def tiny_mlp(widths=(3, 5, 4), seed=0):
    spec = MlpSpec(widths)
    return spec, init_mlp(spec, rng(seed))


def randomize(pv: ParamVector, seed=0, scale=0.5) -> ParamVector:
    """Same layout, every entry random (biases included)."""
    return ParamVector(pv.layout, rng(seed).normal(0.0, scale, size=len(pv)))


def fd_grad(f, x: np.ndarray, h=1e-6) -> np.ndarray:
    """Central finite differences of a scalar function of a flat vector."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def make_shard(x, y, side=None, shard_id=0, test=None):
    """A shard whose whole data is the train split (optional explicit test rows)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    side = np.zeros(len(y), dtype=np.int64) if side is None else np.asarray(side, dtype=np.int64)
    n = len(y)
    if test is None:
        splits = {"train": np.arange(n), "val": np.zeros(0, np.int64), "test": np.zeros(0, np.int64)}
    else:
        test = np.asarray(test)
        train = np.setdiff1d(np.arange(n), test)
        splits = {"train": train, "val": np.zeros(0, np.int64), "test": test}
    return ShardDataset(shard_id, x, y, side, splits)


def simplex_grid(K: int, n: int) -> np.ndarray:
    """All points of the K-simplex whose coordinates are multiples of 1/n."""
    if K == 2:
        a = np.arange(n + 1) / n
        return np.stack([a, 1 - a], axis=1)
    i, j = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    keep = i + j <= n
    i, j = i[keep], j[keep]
    return np.stack([i, j, n - i - j], axis=1) / n


def lagrangian(phi_rows: np.ndarray, logits: np.ndarray, beta: float) -> np.ndarray:
    """sum_k phi_k logit_k - beta sum_k phi_k log phi_k, with 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = np.where(phi_rows > 0, phi_rows * np.log(np.where(phi_rows > 0, phi_rows, 1.0)), 0.0).sum(axis=-1)
    return phi_rows @ logits - beta * ent
