import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmix.data import (
    ConfigError,
    Dataset,
    dirichlet_label_partition,
    label_distribution,
    make_blobs,
    make_permutations,
    make_transforms,
    permutation_partition,
    shards_from_csv,
    shards_to_csv,
    transform_partition,
    uniform_groups,
)
from fedmix.numerics import entropy


def all_indices(shards):
    return np.sort(np.concatenate([sh.index for sh in shards]))


class TestBlobs:
    @given(st.integers(2, 6), st.integers(6, 200), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_balanced_counts(self, C, n, seed):
        ds = make_blobs(C, 4, max(n, C), 0.3, seed)
        counts = np.bincount(ds.y, minlength=C)
        assert counts.max() - counts.min() <= 1 and counts.sum() == max(n, C)

    def test_deterministic(self):
        a, b = make_blobs(4, 8, 100, 0.5, 3), make_blobs(4, 8, 100, 0.5, 3)
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
        assert make_blobs(4, 8, 100, 0.5, 4).x.tobytes() != a.x.tobytes()

    def test_zero_spread_is_linearly_separable(self):
        ds = make_blobs(5, 8, 200, 1e-9, 1)
        means = np.stack([ds.x[ds.y == c].mean(axis=0) for c in range(5)])
        # nearest mean with equal-norm means is the linear rule argmax_c <mu_c, x>
        assert np.array_equal(np.argmax(ds.x @ means.T, axis=1), ds.y)

    def test_equidistant_means(self):
        ds = make_blobs(4, 6, 400, 0.0, 2, radius=2.0)
        means = np.stack([ds.x[ds.y == c][0] for c in range(4)])
        d = np.linalg.norm(means[:, None] - means[None], axis=-1)
        assert np.allclose(d[~np.eye(4, dtype=bool)], 2 * math.sqrt(2))

    def test_errors(self):
        with pytest.raises(ConfigError):
            make_blobs(3, 1, 10, 0.1, 0)
        with pytest.raises(ConfigError):
            make_blobs(5, 3, 4, 0.1, 0)


class TestSplits:
    def test_split_ratios_and_disjointness(self):
        ds = make_blobs(3, 4, 400, 0.5, 0)
        for sh in dirichlet_label_partition(ds, 4, 1.0, 0):
            parts = [sh.splits[k] for k in ("train", "val", "test")]
            joined = np.sort(np.concatenate(parts))
            assert np.array_equal(joined, np.arange(len(sh)))
            assert sh.n("test") == sh.n("val") == round(0.1 * len(sh))

    def test_small_shards_go_to_train(self):
        ds = make_blobs(2, 4, 16, 0.5, 0)
        with pytest.warns(UserWarning):
            shards = dirichlet_label_partition(ds, 4, 1.0, 0)
        assert all(sh.small and sh.n("test") == 0 and sh.n("train") == len(sh) for sh in shards)


class TestDirichlet:
    def test_single_shard_is_everything(self):
        ds = make_blobs(4, 4, 120, 0.5, 0)
        (sh,) = dirichlet_label_partition(ds, 1, 0.5, 0)
        assert np.array_equal(np.sort(sh.index), np.arange(120))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 12), st.floats(0.05, 50), st.integers(0, 10_000))
    def test_exact_partition(self, S, alpha, seed):
        ds = make_blobs(4, 3, 150, 0.5, seed)
        shards = dirichlet_label_partition(ds, S, alpha, seed)
        assert np.array_equal(all_indices(shards), np.arange(150))
        for sh in shards:
            assert np.array_equal(sh.y, ds.y[sh.index])

    def test_low_alpha_is_more_skewed(self):
        lo, hi = [], []
        for seed in range(20):
            ds = make_blobs(5, 3, 500, 0.5, seed)
            for alpha, acc in ((0.1, lo), (100.0, hi)):
                shards = dirichlet_label_partition(ds, 10, alpha, seed)
                acc.append(np.mean([entropy(label_distribution(sh, 5)) for sh in shards]))
        assert np.mean(lo) < np.mean(hi)

    def test_bad_arguments(self):
        ds = make_blobs(3, 3, 30, 0.5, 0)
        with pytest.raises(ConfigError):
            dirichlet_label_partition(ds, 0, 1.0, 0)
        with pytest.raises(ConfigError):
            dirichlet_label_partition(ds, 2, 0.0, 0)


class TestTransforms:
    def test_orthogonal_with_identity_first(self):
        T = make_transforms(6, 0)
        assert T.shape == (8, 6, 6)
        assert np.array_equal(T[0], np.eye(6))
        for t in T:
            assert np.allclose(t @ t.T, np.eye(6), atol=1e-12)
        x = np.random.default_rng(0).normal(size=6)
        assert np.allclose(np.linalg.norm(T @ x, axis=1), np.linalg.norm(x), atol=1e-9)

    def test_side_records_transform(self):
        ds = make_blobs(3, 5, 300, 0.5, 1)
        shards = transform_partition(ds, 6, 0.5, 1)
        T = make_transforms(5, 1)
        assert np.array_equal(all_indices(shards), np.arange(300))
        for sh in shards:
            orig = ds.x[sh.index]
            rebuilt = np.einsum("nij,nj->ni", T[sh.side], orig)
            assert np.allclose(sh.x, rebuilt, atol=1e-12)
            assert np.array_equal(sh.y, ds.y[sh.index])
            untouched = sh.side == 0
            assert np.array_equal(sh.x[untouched], orig[untouched])

    def test_combined_mode_skews_both(self):
        lbl_skew, lbl_plain, tr_skew = [], [], []
        for seed in range(10):
            ds = make_blobs(4, 4, 400, 0.5, seed)
            combo = transform_partition(ds, 8, 0.1, seed, label_alpha=0.1)
            plain = transform_partition(ds, 8, 0.1, seed)
            lbl_skew.append(np.mean([entropy(label_distribution(sh, 4)) for sh in combo]))
            lbl_plain.append(np.mean([entropy(label_distribution(sh, 4)) for sh in plain]))
            tr_skew.append(np.mean([entropy(np.bincount(sh.side, minlength=8) / len(sh)) for sh in combo]))
        assert np.mean(lbl_skew) < np.mean(lbl_plain)
        assert np.mean(tr_skew) < 0.8 * math.log(8)


class TestPermutations:
    def test_balanced_assignment(self):
        ds = make_blobs(4, 4, 400, 0.5, 0)
        shards, truth, perms = permutation_partition(ds, 20, 4, 0)
        assert sorted(np.bincount(list(truth.values())).tolist()) == [5, 5, 5, 5]
        assert len({tuple(p) for p in perms}) == 4 and perms[0].tolist() == [0, 1, 2, 3]

    def test_inverse_recovers_labels(self):
        ds = make_blobs(4, 4, 200, 0.5, 3)
        shards, truth, perms = permutation_partition(ds, 8, 3, 3)
        for sh in shards:
            inv = np.argsort(perms[truth[sh.shard_id]])
            assert np.array_equal(inv[sh.y], ds.y[sh.index])

    def test_identity_only_is_plain_split(self):
        ds = make_blobs(3, 4, 90, 0.5, 2)
        shards, truth, _ = permutation_partition(ds, 3, 1, 2)
        groups = uniform_groups(90, 3, 2)
        for sh, g in zip(shards, groups):
            assert np.array_equal(sh.index, g) and np.array_equal(sh.y, ds.y[g])
        assert set(truth.values()) == {0}

    def test_too_many_permutations(self):
        with pytest.raises(ConfigError):
            make_permutations(3, 7, 0)


def test_csv_round_trip():
    ds = make_blobs(3, 4, 200, 0.5, 5)
    shards = transform_partition(ds, 4, 1.0, 5)
    text = shards_to_csv(shards)
    assert text.splitlines()[0] == "shard,split,side,y,x0,x1,x2,x3"
    back = shards_from_csv(text)
    for a, b in zip(shards, back):
        for split in ("train", "val", "test"):
            xa, ya, sa = a.part(split)
            xb, yb, sb = b.part(split)
            assert xa.tobytes() == xb.tobytes()
            assert np.array_equal(ya, yb) and np.array_equal(sa, sb)


def test_dataset_defaults():
    ds = Dataset(np.zeros((3, 2)), [0, 2, 1])
    assert ds.n_classes == 3 and ds.side.tolist() == [0, 0, 0] and len(ds) == 3
