from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spmagic.config import RunConfig
from spmagic.data import Dataset, ExpressionMatrix, SpatialCoords
from spmagic.evaluation import (
    STRATEGIES,
    LabeledClustering,
    SyntheticSpec,
    adjusted_rand_index,
    drop_empty_spots,
    generate_synthetic,
    kmeans_cluster,
    kmeans_plus_plus,
    lloyd,
    run_benchmark,
)
from spmagic.pipeline import run_diffusion
from spmagic.seeding import stage_rng


def pair_count_ari(a, b):
    """Pair-counting oracle over all unordered item pairs."""
    a, b = np.asarray(a), np.asarray(b)
    i, j = np.triu_indices(a.size, 1)
    same_a, same_b = a[i] == a[j], b[i] == b[j]
    n11 = int(np.sum(same_a & same_b))
    n10 = int(np.sum(same_a & ~same_b))
    n01 = int(np.sum(~same_a & same_b))
    n00 = int(np.sum(~same_a & ~same_b))
    den = (n11 + n10) * (n10 + n00) + (n11 + n01) * (n01 + n00)
    return 1.0 if den == 0 else 2 * (n11 * n00 - n10 * n01) / den


def clouds(rng, k=3, per=60, dim=4, spread=10.0):
    centers = rng.normal(size=(k, dim)) * spread
    X = np.vstack([c + rng.normal(size=(per, dim)) for c in centers])
    return X, np.repeat(np.arange(k), per)


class TestLabeledClustering:
    def test_relabel(self):
        c = LabeledClustering.from_labels([7, 3, 7, 9])
        np.testing.assert_array_equal(c.labels, [1, 0, 1, 2])
        assert c.k == 3 and len(c) == 4

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            LabeledClustering(np.array([0, 0, 2]), 3)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            LabeledClustering(np.array([0, 3]), 2)


class TestKMeans:
    def test_separated_clouds(self, rng):
        X, truth = clouds(rng)
        pred = kmeans_cluster(X, 3, seed=1)
        assert adjusted_rand_index(truth, pred) == 1.0

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(12, 3))
        labels, _, history = lloyd(X, kmeans_plus_plus(X, 12, rng))
        assert history[-1] == pytest.approx(0.0, abs=1e-9)
        assert np.unique(labels).size == 12

    def test_k_one(self, rng):
        assert np.all(kmeans_cluster(rng.normal(size=(20, 2)), 1).labels == 0)

    def test_wcss_monotone(self, rng):
        X = rng.normal(size=(300, 5))
        _, _, history = lloyd(X, kmeans_plus_plus(X, 6, rng))
        assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))

    def test_deterministic(self, rng):
        X = rng.normal(size=(100, 4))
        np.testing.assert_array_equal(kmeans_cluster(X, 4, seed=5).labels, kmeans_cluster(X, 4, seed=5).labels)

    def test_duplicate_points(self):
        X = np.repeat(np.array([[0.0, 0.0], [5.0, 5.0]]), 10, axis=0)
        # only two distinct points, so at most two nonempty clusters
        pred = kmeans_cluster(X, 3, seed=0)
        assert adjusted_rand_index(np.repeat([0, 1], 10), pred) == 1.0

    def test_empty_cluster_reseeded(self):
        X = np.array([[0.0], [0.1], [10.0], [10.1]])
        labels, _, _ = lloyd(X, np.array([[0.05], [10.05], [100.0]]))
        assert np.unique(labels).size == 3

    def test_high_dimensional_uses_pcs(self, rng):
        X, truth = clouds(rng, dim=120)
        assert adjusted_rand_index(truth, kmeans_cluster(X, 3, seed=2)) == 1.0

    @pytest.mark.parametrize("k", [0, 11])
    def test_invalid_k(self, k, rng):
        with pytest.raises(ValueError):
            kmeans_cluster(rng.normal(size=(10, 2)), k)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            kmeans_cluster(np.array([[0.0], [np.nan]]), 1)


class TestARI:
    def test_identical(self):
        assert adjusted_rand_index([0, 0, 1, 2], [0, 0, 1, 2]) == 1.0

    def test_renamed(self):
        assert adjusted_rand_index([0, 0, 1, 2], [5, 5, 9, 1]) == 1.0

    def test_hand_value(self):
        assert adjusted_rand_index([0, 0, 1, 1], [0, 1, 0, 1]) == -0.5

    def test_both_trivial(self):
        assert adjusted_rand_index([0, 0, 0], [1, 1, 1]) == 1.0
        assert adjusted_rand_index([0, 1, 2], [2, 1, 0]) == 1.0

    def test_string_labels(self):
        assert adjusted_rand_index(["a", "a", "b"], ["x", "x", "y"]) == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            adjusted_rand_index([0, 1], [0, 1, 1])

    def test_random_near_zero(self):
        rng = np.random.default_rng(0)
        scores = [adjusted_rand_index(rng.integers(0, 4, 1000), rng.integers(0, 4, 1000)) for _ in range(100)]
        assert abs(np.mean(scores)) < 0.02

    def test_all_pairs_small(self):
        labelings = [np.array(p) for p in np.ndindex(*(3,) * 5)]
        for a, b in combinations(labelings[::7], 2):
            assert adjusted_rand_index(a, b) == pytest.approx(pair_count_ari(a, b), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 6)), min_size=2, max_size=60), st.randoms())
    def test_properties(self, pairs, rnd):
        a = np.array([p[0] for p in pairs])
        b = np.array([p[1] for p in pairs])
        score = adjusted_rand_index(a, b)
        assert score == pytest.approx(pair_count_ari(a, b), abs=1e-12)
        assert score == adjusted_rand_index(b, a)
        perm = list(range(5))
        rnd.shuffle(perm)
        assert score == adjusted_rand_index(np.array(perm)[a], b)
        assert score <= 1.0


class TestSynthetic:
    def test_deterministic(self):
        a = generate_synthetic(SyntheticSpec(seed=3))
        b = generate_synthetic(SyntheticSpec(seed=3))
        np.testing.assert_array_equal(a.expression.values, b.expression.values)
        np.testing.assert_array_equal(a.coords.coords, b.coords.coords)

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticSpec(n_spots=50, seed=0))
        b = generate_synthetic(SyntheticSpec(n_spots=50, seed=1))
        assert not np.array_equal(a.expression.values, b.expression.values)

    def test_shapes_and_labels(self):
        ds = generate_synthetic(SyntheticSpec(n_spots=101, n_genes=7, n_clusters=4))
        assert ds.expression.shape == (101, 7)
        assert np.bincount(ds.labels).tolist() == [26, 25, 25, 25]

    def test_dropout_rate(self):
        # zero-separation, high-mean genes so Poisson zeros are negligible
        spec = SyntheticSpec(n_spots=400, n_genes=200, dropout_rate=0.8, seed=4)
        X = generate_synthetic(spec).expression.values
        ds0 = generate_synthetic(SyntheticSpec(n_spots=400, n_genes=200, dropout_rate=0.0, seed=4)).expression.values
        nonzero_before = ds0 > 0
        frac = (X[nonzero_before] == 0).mean()
        sd = np.sqrt(0.8 * 0.2 / nonzero_before.sum())
        assert abs(frac - 0.8) < 3 * sd + 0.01

    @pytest.mark.parametrize("layout", ["blocks", "stripes"])
    def test_regions_disjoint(self, layout):
        ds = generate_synthetic(SyntheticSpec(n_spots=300, n_clusters=5, spatial_layout=layout))
        boxes = []
        for c in range(5):
            pts = ds.coords.coords[ds.labels == c]
            boxes.append((pts[:, 0].min(), pts[:, 0].max(), pts[:, 1].min(), pts[:, 1].max()))
        for (ax0, ax1, ay0, ay1), (bx0, bx1, by0, by1) in combinations(boxes, 2):
            assert ax1 < bx0 or bx1 < ax0 or ay1 < by0 or by1 < ay0

    def test_counts_are_integers(self):
        X = generate_synthetic(SyntheticSpec(n_spots=40, n_genes=10)).expression.values
        np.testing.assert_array_equal(X, np.round(X))
        assert X.min() >= 0

    @pytest.mark.parametrize(
        "kwargs",
        [dict(n_spots=0), dict(n_clusters=10, n_spots=5), dict(dropout_rate=1.0), dict(cluster_separation=-1), dict(spatial_layout="rings")],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SyntheticSpec(**kwargs)


FAST = RunConfig(epochs=2, hvg_count=50, decoder_hidden=32, embed_dim=8, pca_dims=10)


@pytest.fixture(scope="module")
def dataset():
    return generate_synthetic(SyntheticSpec(n_spots=90, n_genes=40, cluster_separation=1.0, dropout_rate=0.3))


class TestBenchmark:

    def test_raw_only(self, dataset):
        report = run_benchmark(dataset, ["raw"], FAST, seeds=[0, 1])
        assert [(r.strategy, r.seed) for r in report.rows] == [("raw", 0), ("raw", 1)]
        assert all(-1 <= r.ari <= 1 and r.seconds >= 0 for r in report.rows)
        X_d = run_diffusion(dataset, FAST).X_d
        for r in report.rows:
            direct = kmeans_cluster(X_d, 3, stage_rng(r.seed, "kmeans").integers(2**63))
            assert r.ari == adjusted_rand_index(dataset.labels, direct)

    def test_clean_data_recovers_labels(self):
        ds = generate_synthetic(SyntheticSpec(n_spots=120, n_genes=60, cluster_separation=3.0, dropout_rate=0.0))
        assert run_benchmark(ds, ["raw"], FAST).rows[0].ari == 1.0

    def test_all_strategies(self, dataset, tmp_path):
        report = run_benchmark(dataset, STRATEGIES, FAST, seeds=[0])
        assert [r.strategy for r in report.rows] == list(STRATEGIES)
        csv_path, md_path = report.write(tmp_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "strategy,seed,ari,seconds" and len(lines) == 5
        md = md_path.read_text()
        for s in STRATEGIES:
            assert f"| {s} |" in md
        assert "UMAP" in md

    def test_deterministic(self, dataset):
        a = run_benchmark(dataset, ["raw", "full-hybrid"], FAST, seeds=[2])
        b = run_benchmark(dataset, ["raw", "full-hybrid"], FAST, seeds=[2])
        assert [r.ari for r in a.rows] == [r.ari for r in b.rows]

    def test_requires_labels(self, dataset):
        with pytest.raises(ValueError, match="labels"):
            run_benchmark(Dataset(dataset.expression, dataset.coords), ["raw"], FAST)

    def test_unknown_strategy(self, dataset):
        with pytest.raises(ValueError):
            run_benchmark(dataset, ["umap"], FAST)

    def test_drops_empty_spots(self, caplog):
        X = np.array([[1.0, 2.0], [0.0, 0.0], [3.0, 1.0]])
        ds = Dataset(ExpressionMatrix(X, ["a", "b", "c"], ["g1", "g2"]), SpatialCoords(np.eye(3, 2)), np.array([0, 1, 1]))
        kept = drop_empty_spots(ds)
        assert kept.expression.spot_ids == ("a", "c") or list(kept.expression.spot_ids) == ["a", "c"]
        assert "dropping 1 spots" in caplog.text
