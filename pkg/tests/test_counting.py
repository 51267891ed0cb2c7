import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fruitlift.counting import (
    ClusterParams, CountResult, combined_distance, count_fruits, palette, partition_kmeans,
    render_instance_image, save_count_json,
)
from fruitlift.export import FruitPointCloud, sample_point_cloud
from fruitlift.fields import FieldSet
from fruitlift.hdbscan import hdbscan, pairwise_distances
from fruitlift.scene import SceneSpec, make_dataset
from fruitlift.training import TrainConfig, train


def blob_cloud(centers, n=80, spread=0.03, seed=0, D=8):
    """Gaussian blobs, each carrying a near-constant embedding of its own."""
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    k = len(centers)
    basis = np.linalg.qr(rng.normal(size=(D, D)))[0][:k]
    X = np.concatenate([c + rng.normal(0, spread, (n, 3)) for c in centers])
    E = np.repeat(basis, n, axis=0) + rng.normal(0, 0.05, (k * n, D))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    truth = np.repeat(np.arange(k), n)
    cloud = FruitPointCloud(X, np.ones(len(X)), np.ones(len(X)), E, np.zeros((len(X), 3)))
    return cloud, truth


FIVE = [(-0.8, 0, 0), (-0.4, 0.3, 0), (0.0, 0, 0.2), (0.5, -0.2, 0), (0.9, 0.1, -0.1)]


class TestParams:
    def test_validation(self):
        for bad in ({"S": 0}, {"lambda_c": -1}, {"lambda_c": 0, "lambda_e": 0}, {"min_cluster_size": 1}):
            with pytest.raises(ValueError):
                ClusterParams(**bad)
        with pytest.raises(ValueError):
            ClusterParams.from_dict({"lambda": 1})


class TestKMeans:
    def test_single_partition(self):
        a, c = partition_kmeans(np.random.default_rng(0).normal(size=(50, 3)), 1)
        assert np.all(a == 0)

    def test_two_blobs(self):
        rng = np.random.default_rng(1)
        X = np.concatenate([rng.normal(0, 0.5, (100, 3)), rng.normal(10, 0.5, (120, 3))])
        for seed in range(5):
            a, _ = partition_kmeans(X, 2, seed)
            assert len(set(a[:100])) == 1 and len(set(a[100:])) == 1 and a[0] != a[-1]

    def test_deterministic(self):
        X = np.random.default_rng(2).normal(size=(300, 3))
        np.testing.assert_array_equal(partition_kmeans(X, 4, 9)[0], partition_kmeans(X, 4, 9)[0])

    def test_errors(self):
        with pytest.raises(ValueError):
            partition_kmeans(np.zeros((3, 3)), 4)
        with pytest.raises(ValueError):
            partition_kmeans(np.zeros((0, 3)), 1)

    def test_lloyd_fixed_point(self):
        X = np.random.default_rng(3).normal(size=(200, 3))
        a, c = partition_kmeans(X, 3, 0)
        for s in range(3):
            np.testing.assert_allclose(c[s], X[a == s].mean(axis=0), atol=1e-6)


class TestDistance:
    def test_identity(self):
        p = ([0.3, 0.1, 2.0], [0.6, 0.8])
        assert combined_distance(p, p, 1.0, 1.0) == 0.0

    def test_orthogonal(self):
        assert combined_distance(([0, 0, 0], [1, 0]), ([0, 0, 0], [0, 1]), 1.0, 1.0) == pytest.approx(1.0)

    def test_antipodal(self):
        d = combined_distance(([0, 0, 0], [1, 0]), ([2, 0, 0], [-1, 0]), 1.0, 5.0)
        assert d == pytest.approx(12.0)

    def test_zero_embedding(self):
        with pytest.raises(ValueError):
            combined_distance(([0, 0, 0], [0, 0]), ([0, 0, 0], [1, 0]), 1.0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**31), lc=st.floats(0, 5), le=st.floats(0, 5))
    def test_symmetric_non_negative(self, seed, lc, le):
        rng = np.random.default_rng(seed)
        p = (rng.normal(size=3), rng.normal(size=4))
        q = (rng.normal(size=3), rng.normal(size=4))
        d = combined_distance(p, q, lc, le)
        assert d >= 0 and d == combined_distance(q, p, lc, le)
        assert combined_distance(p, p, lc, le) == pytest.approx(0.0, abs=1e-12)

    def test_matrix_matches_pairwise_function(self):
        rng = np.random.default_rng(4)
        X, E = rng.normal(size=(12, 3)), rng.normal(size=(12, 5))
        M = pairwise_distances(X, E, 0.7, 1.3)
        for i in range(12):
            for j in range(12):
                assert M[i, j] == pytest.approx(combined_distance((X[i], E[i]), (X[j], E[j]), 0.7, 1.3), abs=1e-12)

    @pytest.mark.parametrize("s", [0.5, 2.0, 4.0])
    def test_lambda_e_scaling_covariance(self, s):
        cloud, _ = blob_cloud(FIVE, n=40, spread=0.08, seed=5)
        X, E = cloud.positions.astype(float), cloud.embeddings.astype(float)
        a = hdbscan(X, 10, 5, E, 1.0, 1.0)
        b = hdbscan(X * s, 10, 5, E, 1.0, 1.0 / s)
        np.testing.assert_array_equal(a, b)


class TestCount:
    def test_empty(self):
        r = count_fruits(FruitPointCloud.empty(4), ClusterParams())
        assert r.count == 0 and r.centers.shape == (0, 3)

    def test_five_blobs_single_partition(self):
        cloud, truth = blob_cloud(FIVE)
        r = count_fruits(cloud, ClusterParams())
        assert r.count == 5
        assert r.count == len(set(r.labels[r.labels >= 0].tolist()))
        for c in range(r.count):
            pts = cloud.positions[r.labels == c]
            assert np.all(r.centers[c] >= pts.min(axis=0)) and np.all(r.centers[c] <= pts.max(axis=0))
        np.testing.assert_allclose(np.linalg.norm(r.center_embeddings, axis=1), 1.0)

    def test_five_blobs_two_partitions(self):
        cloud, truth = blob_cloud(FIVE)
        r = count_fruits(cloud, ClusterParams(S=2))
        # no blob straddles the boundary: every blob lands in one partition
        for k in range(5):
            assert len(set(r.partition[truth == k].tolist())) == 1
        assert r.count == 5 and sum(r.per_partition_counts) == 5

    def test_no_cross_partition_labels(self):
        cloud, _ = blob_cloud(FIVE, seed=3)
        r = count_fruits(cloud, ClusterParams(S=3, min_cluster_size=10, min_samples=4))
        for c in range(r.count):
            assert len(set(r.partition[r.labels == c].tolist())) == 1

    def test_order_invariance(self):
        cloud, _ = blob_cloud(FIVE, seed=4)
        perm = np.random.default_rng(0).permutation(len(cloud))
        a = count_fruits(cloud, ClusterParams())
        b = count_fruits(cloud.subset(perm), ClusterParams())
        assert a.count == b.count
        key = lambda c: sorted(map(tuple, np.round(c, 6).tolist()))
        assert key(a.centers) == key(b.centers)

    def test_json(self, tmp_path):
        cloud, _ = blob_cloud(FIVE)
        r = count_fruits(cloud, ClusterParams())
        save_count_json(r, ClusterParams(), tmp_path / "c.json", {"dataset_hash": "x"})
        doc = json.loads((tmp_path / "c.json").read_text())
        assert doc["count"] == 5 and len(doc["centers"]) == 5 and doc["dataset_hash"] == "x"
        assert doc["params"]["lambda_e"] == 1.0 and "cluster_s" in doc["timings"]


class TestInstanceImage:
    def test_palette_distinct(self):
        p = palette(12)
        assert len({tuple(c) for c in p.tolist()}) == 12 and p.dtype == np.uint8

    def test_empty_result_is_background(self):
        ds = make_dataset(SceneSpec(seed=1, fruit_count=1, occluder_count=0), n_views=1, width=8, height=8)
        f = FieldSet.create(8, ds.scene.bbox, 3, background=ds.scene.background_color, density_init=5.0)
        r = CountResult(np.zeros(0), 0, np.zeros((0, 3)), np.zeros((0, 3)))
        img, lab = render_instance_image(f, r, ds.bundles[0].camera, K=16)
        assert np.all(lab == -1)
        assert len({tuple(v) for v in img.reshape(-1, 3).tolist()}) == 1

    def test_single_cluster_single_color(self):
        ds = make_dataset(SceneSpec(seed=1, fruit_count=1, occluder_count=0), n_views=1, width=8, height=8)
        f = FieldSet.create(8, ds.scene.bbox, 3, density_init=5.0, seed=2)
        r = CountResult(np.zeros(0), 1, np.zeros((1, 3)), np.array([[1.0, 0, 0]]))
        img, lab = render_instance_image(f, r, ds.bundles[0].camera, K=16)
        fg = lab >= 0
        assert fg.any()
        assert len({tuple(v) for v in img[fg].tolist()}) == 1

    def test_two_fruit_trained_scene(self):
        spec = SceneSpec(seed=11, fruit_count=2, occluder_count=0, fruit_radius_range=(0.25, 0.3), canopy_radius=0.7)
        ds = make_dataset(spec, n_views=10, width=32, height=32)
        cfg = TrainConfig(n1=300, n2=200, n3=300, grid_res=32, rays_per_batch=1024, samples_per_ray=64, D=8)
        f = train(ds, cfg)
        r = count_fruits(sample_point_cloud(f, 64), ClusterParams())
        assert r.count == 2
        for b in ds.bundles[:4]:
            _, lab = render_instance_image(f, r, b.camera, K=64)
            majority = {}
            for k in range(1, b.n_instances + 1):
                m = b.instance == k
                v = lab[m]
                v = v[v >= 0]
                assert len(v)
                top = np.bincount(v).argmax()
                assert np.mean(lab[m] == top) >= 0.9
                majority[int(b.gt_ids[k - 1])] = top
            assert len(set(majority.values())) == len(majority)
