"""Synthetic data and non-i.i.d. partitioners (label skew, input transforms, label permutations)."""
from __future__ import annotations

import csv
import io
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .posterior import ConfigError
from .rng import stream

SPLITS = ("train", "val", "test")
N_TRANSFORMS = 8


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    side: np.ndarray = None
    n_classes: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.side is None:
            self.side = np.zeros(len(self.y), dtype=np.int64)
        if not self.n_classes:
            self.n_classes = int(self.y.max()) + 1 if len(self.y) else 0

    def __len__(self):
        return len(self.y)


@dataclass
class ShardDataset:
    shard_id: int
    x: np.ndarray
    y: np.ndarray
    side: np.ndarray
    splits: dict
    index: np.ndarray = None  # positions in the source dataset
    small: bool = False  # fewer than 10 points: everything went to train

    def __post_init__(self):
        if self.index is None:
            self.index = np.arange(len(self.y))

    def __len__(self):
        return len(self.y)

    def part(self, split: str):
        idx = self.splits[split]
        return self.x[idx], self.y[idx], self.side[idx]

    def n(self, split: str = "train") -> int:
        return len(self.splits[split])


def make_blobs(C: int, d: int, n: int, spread: float, seed: int, radius: float = 1.0) -> Dataset:
    """Gaussian clusters around class means at the vertices of a scaled simplex.

    With ``d >= C`` the means are ``radius`` times orthonormal directions
    (all pairwise distances equal ``radius * sqrt(2)``); otherwise random unit
    directions. Class counts differ by at most one.
    """
    if d < 2:
        raise ConfigError("d must be at least 2")
    if n < C:
        raise ConfigError("need at least one point per class")
    rng = stream(seed, "data")
    G = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(G)
    Q = Q * np.sign(np.diag(R))
    if d >= C:
        means = radius * Q[:, :C].T
    else:
        v = rng.standard_normal((C, d))
        means = radius * v / np.linalg.norm(v, axis=1, keepdims=True)
    counts = [n // C + (1 if c < n % C else 0) for c in range(C)]
    y = np.repeat(np.arange(C), counts)
    order = rng.permutation(n)
    y = y[order]
    x = means[y] + spread * rng.standard_normal((n, d))
    return Dataset(x, y, np.zeros(n, dtype=np.int64), C)


def _splits(n: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    if n < 10:
        return {"train": np.sort(perm), "val": np.zeros(0, np.int64), "test": np.zeros(0, np.int64)}, True
    n_hold = max(1, int(round(0.1 * n)))
    return {
        "test": np.sort(perm[:n_hold]),
        "val": np.sort(perm[n_hold : 2 * n_hold]),
        "train": np.sort(perm[2 * n_hold :]),
    }, False


def _make_shards(ds: Dataset, groups, seed: int, y=None, side=None) -> list[ShardDataset]:
    y = ds.y if y is None else y
    side = ds.side if side is None else side
    shards = []
    for s, idx in enumerate(groups):
        idx = np.asarray(idx, dtype=np.int64)
        splits, small = _splits(len(idx), stream(seed, "partition", 7, s))
        if small:
            warnings.warn(f"shard {s} has {len(idx)} points; no val/test split", stacklevel=3)
        shards.append(ShardDataset(s, ds.x[idx].copy(), y[idx].copy(), side[idx].copy(), splits, idx, small))
    return shards


def _quotas(N: int, S: int):
    return [N // S + (1 if s < N % S else 0) for s in range(S)]


def dirichlet_label_groups(y: np.ndarray, C: int, S: int, alpha: float, seed: int) -> list[np.ndarray]:
    """Per shard, draw class proportions ~ Dir(alpha) and fill its quota from class pools.

    Draws are without replacement; when a class pool runs dry the shard's
    proportions are renormalized over classes that still have points.
    """
    if S < 1:
        raise ConfigError("S must be >= 1")
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    rng = stream(seed, "partition", 1)
    pools = [list(rng.permutation(np.flatnonzero(y == c))) for c in range(C)]
    groups = []
    for quota in _quotas(len(y), S):
        p = rng.dirichlet(np.full(C, float(alpha)))
        p = np.nan_to_num(p)
        take = []
        for _ in range(quota):
            live = np.array([len(pl) > 0 for pl in pools])
            w = np.where(live, p, 0.0)
            if w.sum() <= 0:
                w = live.astype(np.float64)
            c = int(rng.choice(C, p=w / w.sum()))
            take.append(pools[c].pop())
        groups.append(np.sort(np.array(take, dtype=np.int64)))
    return groups


def dirichlet_label_partition(ds: Dataset, S: int, alpha: float, seed: int) -> list[ShardDataset]:
    return _make_shards(ds, dirichlet_label_groups(ds.y, ds.n_classes, S, alpha, seed), seed)


def uniform_groups(N: int, S: int, seed: int) -> list[np.ndarray]:
    perm = stream(seed, "partition", 2).permutation(N)
    return [np.sort(g) for g in np.array_split(perm, S)]


def make_transforms(d: int, seed: int, count: int = N_TRANSFORMS) -> np.ndarray:
    """``count`` seeded orthogonal d x d matrices; index 0 is the identity."""
    rng = stream(seed, "partition", 3)
    out = [np.eye(d)]
    for _ in range(count - 1):
        Q, R = np.linalg.qr(rng.standard_normal((d, d)))
        out.append(Q * np.sign(np.diag(R)))
    return np.stack(out)


def transform_partition(
    ds: Dataset,
    S: int,
    alpha: float,
    seed: int,
    label_alpha: float | None = None,
    transform_count: int = N_TRANSFORMS,
) -> list[ShardDataset]:
    """Input skew: each shard transforms its points with indices drawn from its own Dir(alpha).

    With ``label_alpha`` the points are first assigned by Dirichlet label skew,
    otherwise uniformly at random. The transform index is stored as side info.
    """
    if not alpha > 0:
        raise ConfigError("alpha must be > 0")
    if label_alpha is not None:
        groups = dirichlet_label_groups(ds.y, ds.n_classes, S, label_alpha, seed)
    else:
        groups = uniform_groups(len(ds), S, seed)
    T = make_transforms(ds.x.shape[1], seed, transform_count)
    rng = stream(seed, "partition", 4)
    x = ds.x.copy()
    side = np.zeros(len(ds), dtype=np.int64)
    for idx in groups:
        q = np.nan_to_num(rng.dirichlet(np.full(transform_count, float(alpha))))
        if q.sum() <= 0:
            q = np.full(transform_count, 1.0 / transform_count)
        r = rng.choice(transform_count, size=len(idx), p=q / q.sum())
        side[idx] = r
        x[idx] = np.einsum("nij,nj->ni", T[r], ds.x[idx])
    moved = Dataset(x, ds.y, side, ds.n_classes)
    return _make_shards(moved, groups, seed)


def make_permutations(C: int, n_permutations: int, seed: int) -> np.ndarray:
    """Distinct label permutations; the first is the identity."""
    if n_permutations < 1 or n_permutations > math.factorial(C):
        raise ConfigError(f"n_permutations must lie in [1, {C}!]")
    rng = stream(seed, "partition", 5)
    perms = [tuple(range(C))]
    seen = set(perms)
    if math.factorial(C) <= 5040:
        pool = [p for p in itertools.permutations(range(C)) if p not in seen]
        pick = rng.choice(len(pool), size=n_permutations - 1, replace=False)
        perms += [pool[int(i)] for i in pick]
    else:
        while len(perms) < n_permutations:
            p = tuple(int(v) for v in rng.permutation(C))
            if p not in seen:
                seen.add(p)
                perms.append(p)
    return np.array(perms, dtype=np.int64)


def permutation_partition(ds: Dataset, S: int, n_permutations: int, seed: int):
    """Uniform split; shard labels mapped through one of ``n_permutations`` permutations.

    Assignment is balanced round-robin over a seeded shard order. Returns
    ``(shards, ground_truth, permutations)`` with ``ground_truth[s]`` the
    permutation id of shard ``s``.
    """
    perms = make_permutations(ds.n_classes, n_permutations, seed)
    groups = uniform_groups(len(ds), S, seed)
    order = stream(seed, "partition", 6).permutation(S)
    truth = {}
    for j, s in enumerate(order):
        truth[int(s)] = j % n_permutations
    y = ds.y.copy()
    for s, idx in enumerate(groups):
        y[idx] = perms[truth[s]][ds.y[idx]]
    return _make_shards(ds, groups, seed, y=y), truth, perms


def label_distribution(shard: ShardDataset, C: int, split: str | None = None) -> np.ndarray:
    y = shard.y if split is None else shard.y[shard.splits[split]]
    counts = np.bincount(y, minlength=C).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


# ---------------------------------------------------------------- CSV


def shards_to_csv(shards: list[ShardDataset]) -> str:
    d = shards[0].x.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shard", "split", "side", "y"] + [f"x{j}" for j in range(d)])
    for sh in shards:
        for split in SPLITS:
            for i in sh.splits[split]:
                w.writerow([sh.shard_id, split, int(sh.side[i]), int(sh.y[i])] + [repr(float(v)) for v in sh.x[i]])
    return buf.getvalue()


def shards_from_csv(text: str) -> list[ShardDataset]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    d = len(header) - 4
    rows: dict = {}
    for r in reader:
        rows.setdefault(int(r[0]), []).append(r)
    shards = []
    for s in sorted(rows):
        rs = rows[s]
        x = np.array([[float(v) for v in r[4 : 4 + d]] for r in rs])
        y = np.array([int(r[3]) for r in rs], dtype=np.int64)
        side = np.array([int(r[2]) for r in rs], dtype=np.int64)
        names = np.array([r[1] for r in rs])
        splits = {sp: np.flatnonzero(names == sp) for sp in SPLITS}
        shards.append(ShardDataset(s, x, y, side, splits, small=len(splits["val"]) == 0))
    return shards
