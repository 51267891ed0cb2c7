import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fruitlift.fields import (
    FieldSet, GradBuffer, Ray, VoxelGrid, backward_rays, fit_rays, load_checkpoint, query, query_raw,
    ray_box, render_ray, render_ray_backward, render_rays, save_checkpoint,
)
from oracles import naive_render, trilinear

BBOX = np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


def random_fields(seed, res=6, D=4, scale=2.0):
    rng = np.random.default_rng(seed)
    f = FieldSet.create(res, BBOX, D, background=rng.random(3), seed=seed)
    f.density.values[:] = rng.normal(0.0, scale, f.density.values.shape)
    f.color.values[:] = rng.normal(0.0, 1.0, f.color.values.shape)
    f.semantic.values[:] = rng.normal(0.0, 1.0, f.semantic.values.shape)
    f.instance.values[:] = rng.normal(0.0, 1.0, f.instance.values.shape)
    return f


def random_ray(rng):
    o = rng.uniform(-2.5, 2.5, 3)
    target = rng.uniform(-0.6, 0.6, 3)
    d = (target - o) / np.linalg.norm(target - o)
    tn, tf, hit = ray_box(o[None], d[None], BBOX)
    return o, d, float(tn[0]), float(tf[0])


class TestGrid:
    def test_rejects_low_resolution(self):
        with pytest.raises(ValueError):
            VoxelGrid(np.zeros((1, 4, 4, 1)), BBOX)

    def test_rejects_degenerate_bbox(self):
        with pytest.raises(ValueError):
            VoxelGrid(np.zeros((4, 4, 4, 1)), np.array([[0, 0, 0], [1, 0, 1.0]]))

    def test_query_at_vertices_returns_vertex_values(self):
        g = VoxelGrid(np.random.default_rng(0).normal(size=(4, 5, 3, 2)), BBOX)
        pos = g.vertex_positions().reshape(-1, 3)
        np.testing.assert_allclose(query_raw(g, pos), g.values.reshape(-1, 2), atol=1e-12)

    def test_query_matches_scalar_trilinear(self):
        rng = np.random.default_rng(1)
        g = VoxelGrid(rng.normal(size=(5, 4, 6, 3)), BBOX)
        x = rng.uniform(-1, 1, (50, 3))
        ref = np.array([trilinear(g.values, BBOX, p) for p in x])
        np.testing.assert_allclose(query_raw(g, x), ref, atol=1e-12)

    def test_outside_bbox_is_zero(self):
        g = VoxelGrid(np.ones((3, 3, 3, 1)), BBOX, "softplus")
        assert query_raw(g, [[1.5, 0, 0]])[0, 0] == 0.0
        assert query(g, [[1.5, 0, 0]])[0, 0] == pytest.approx(np.log(2.0))

    def test_linear_field_is_reproduced_exactly(self):
        g = VoxelGrid.zeros((4, 4, 4), BBOX, 1)
        pos = g.vertex_positions()
        g.values[..., 0] = 2 * pos[..., 0] - pos[..., 1] + 0.5 * pos[..., 2]
        x = np.random.default_rng(2).uniform(-1, 1, (20, 3))
        np.testing.assert_allclose(query_raw(g, x)[:, 0], 2 * x[:, 0] - x[:, 1] + 0.5 * x[:, 2], atol=1e-12)


class TestRender:
    def test_matches_naive_compositing(self):
        rng = np.random.default_rng(3)
        for trial in range(30):
            f = random_fields(trial)
            o, d, tn, tf = random_ray(rng)
            K = int(rng.integers(1, 24))
            jit = rng.random(K) if trial % 2 else None
            out = render_ray(f, Ray(o, d, tn, tf), K, jitter=jit)
            color, sem, emb, w, T = naive_render(f, o, d, tn, tf, K, jit)
            np.testing.assert_allclose(out.color, color, atol=1e-10)
            assert out.semantic_logit == pytest.approx(sem, abs=1e-10)
            np.testing.assert_allclose(out.embedding, emb, atol=1e-10)
            np.testing.assert_allclose(out.weights, w, atol=1e-12)
            assert out.transmittance_out == pytest.approx(T, abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 10_000), K=st.integers(1, 64))
    def test_weights_and_residual_partition_unity(self, seed, K):
        rng = np.random.default_rng(seed)
        f = random_fields(seed % 7, scale=4.0)
        o, d, tn, tf = random_ray(rng)
        out = render_ray(f, Ray(o, d, tn, tf), K, jitter=rng.random(K))
        assert np.all(out.weights >= 0)
        assert out.weights.sum() + out.transmittance_out == pytest.approx(1.0, abs=1e-12)

    def test_two_sample_hand_evaluation(self):
        # samples land on vertices x = -0.5 and x = 0.5 with deltas 1 and 0.5
        f = FieldSet.create(5, BBOX, 2, density_init=-30.0)
        f.density.values[1, 2, 2, 0] = 0.0  # softplus(0) * 1 = ln 2
        f.density.values[3, 2, 2, 0] = 1e4
        out = render_ray(f, Ray([-1.0, 0, 0], [1.0, 0, 0], 0.0, 2.0), 2)
        np.testing.assert_allclose(out.weights, [0.5, 0.5], atol=1e-12)
        assert out.transmittance_out == 0.0

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_transmittance_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        f = random_fields(seed % 5, scale=3.0)
        o, d, tn, tf = random_ray(rng)
        out = render_ray(f, Ray(o, d, tn, tf), 24, jitter=rng.random(24))
        sigma = query(f.density, o + out.t[:, None] * d)[:, 0]
        alpha = 1.0 - np.exp(-sigma * out.delta)
        ok = alpha > 1e-9
        T = out.weights[ok] / alpha[ok]
        assert np.all(np.diff(T) <= 1e-12) and np.all(T <= 1.0 + 1e-12)

    def test_embedding_is_unit_norm(self):
        f = random_fields(6)
        x = np.random.default_rng(6).uniform(-0.9, 0.9, (100, 3))
        np.testing.assert_allclose(np.linalg.norm(query(f.instance, x), axis=1), 1.0, atol=1e-12)

    def test_zero_density_shows_background(self):
        f = FieldSet.create(4, BBOX, 3, background=(0.2, 0.4, 0.6), density_init=-200.0)
        out = render_ray(f, Ray([0, 0, -3.0], [0, 0, 1.0], 2.0, 4.0), 16)
        np.testing.assert_allclose(out.color, [0.2, 0.4, 0.6], atol=1e-12)
        assert out.weights.sum() < 1e-12

    def test_opaque_density_hides_background(self):
        f = FieldSet.create(4, BBOX, 3, background=(1.0, 1.0, 1.0), density_init=60.0)
        out = render_ray(f, Ray([0, 0, -3.0], [0, 0, 1.0], 2.0, 4.0), 32)
        assert out.transmittance_out < 1e-12
        np.testing.assert_allclose(out.color, [0.5, 0.5, 0.5], atol=1e-9)

    def test_ray_validation(self):
        with pytest.raises(ValueError):
            Ray([0, 0, 0], [0, 0, 2.0], 0.0, 1.0)
        with pytest.raises(ValueError):
            Ray([0, 0, 0], [0, 0, 1.0], 1.0, 1.0)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(5)
        f = random_fields(5)
        rays = [random_ray(rng) for _ in range(8)]
        o = np.array([r[0] for r in rays])
        d = np.array([r[1] for r in rays])
        tn = np.array([r[2] for r in rays])
        tf = np.array([r[3] for r in rays])
        out = render_rays(f, o, d, tn, tf, 12)
        for i, r in enumerate(rays):
            single = render_ray(f, Ray(*r), 12)
            np.testing.assert_array_equal(out["color"][i], single.color)

    def test_ray_box(self):
        tn, tf, hit = ray_box(np.array([[0, 0, -3.0], [0, 5.0, -3.0]]), np.array([[0, 0, 1.0], [0, 0, 1.0]]), BBOX)
        assert hit.tolist() == [True, False]
        assert tn[0] == pytest.approx(2.0) and tf[0] == pytest.approx(4.0)


def _loss_and_grads(f, o, d, tn, tf, K, jit, gc, gs, gi):
    out = render_ray(f, Ray(o, d, tn, tf), K, jitter=jit)
    return float(gc @ out.color + gs * out.semantic_logit + gi @ out.embedding)


class TestBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        f = random_fields(11, res=5, D=3, scale=1.0)
        o, d, tn, tf = random_ray(rng)
        K = 12
        jit = rng.random(K)
        gc, gs, gi = rng.normal(size=3), float(rng.normal()), rng.normal(size=3)
        grads = render_ray_backward(f, Ray(o, d, tn, tf), K, gc, gs, gi, jitter=jit, block=False)
        h = 1e-5
        for name in ("density", "color", "semantic", "instance"):
            vals = getattr(f, name).values
            touched = np.argwhere(np.abs(grads[name]) > 0)
            assert len(touched), name
            for idx in touched[rng.choice(len(touched), size=min(8, len(touched)), replace=False)]:
                idx = tuple(idx)
                old = vals[idx]
                vals[idx] = old + h
                lp = _loss_and_grads(f, o, d, tn, tf, K, jit, gc, gs, gi)
                vals[idx] = old - h
                lm = _loss_and_grads(f, o, d, tn, tf, K, jit, gc, gs, gi)
                vals[idx] = old
                fd = (lp - lm) / (2 * h)
                assert grads[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-9), name

    def test_blocking_leaves_density_gradient_to_color(self):
        rng = np.random.default_rng(12)
        f = random_fields(12, res=5, D=3)
        ray = Ray(*random_ray(rng))
        gc, gs, gi = rng.normal(size=3), 0.7, rng.normal(size=3)
        only_color = render_ray_backward(f, ray, 10, gc, None, None)
        everything = render_ray_backward(f, ray, 10, gc, gs, gi)
        np.testing.assert_array_equal(only_color["density"], everything["density"])
        full = render_ray_backward(f, ray, 10, gc, gs, gi, block=False)
        assert not np.array_equal(full["density"], everything["density"])

    def test_frozen_grids_get_nothing(self):
        rng = np.random.default_rng(13)
        f = random_fields(13, res=5, D=3)
        ray = Ray(*random_ray(rng))
        g = render_ray_backward(f, ray, 10, rng.normal(size=3), 0.3, rng.normal(size=3),
                                frozen=("density", "color", "semantic"))
        for name in ("density", "color", "semantic"):
            assert not g[name].any()
        assert g["instance"].any()

    def test_fused_fit_equals_explicit_backward(self):
        rng = np.random.default_rng(14)
        f = random_fields(14, res=6, D=3)
        rays = [random_ray(rng) for _ in range(20)]
        o = np.array([r[0] for r in rays])
        d = np.array([r[1] for r in rays])
        tn = np.array([r[2] for r in rays])
        tf = np.array([r[3] for r in rays])
        jit = rng.random((20, 9))
        tc, ts = rng.random((20, 3)), (rng.random(20) > 0.5).astype(float)
        b1 = GradBuffer(f)
        color, logit = fit_rays(f, b1, o, d, tn, tf, 9, jit, tc, ts, 0.3, 0.7, ("density", "color", "semantic"))
        out = render_rays(f, o, d, tn, tf, 9, jit, want=("color", "semantic"))
        np.testing.assert_allclose(color, out["color"], atol=1e-12)
        b2 = GradBuffer(f)
        sig = 1 / (1 + np.exp(-out["semantic"]))
        backward_rays(f, b2, o, d, tn, tf, 9, jit, grad_color=0.3 * (out["color"] - tc),
                      grad_semantic=0.7 * (sig - ts), train=("density", "color", "semantic"))
        for name in ("density", "color", "semantic"):
            np.testing.assert_allclose(b1.grads[name], b2.grads[name], atol=1e-12)

    def test_step_updates_only_trained_grids_and_clears(self):
        rng = np.random.default_rng(15)
        f = random_fields(15, res=5, D=3)
        before = f.copy()
        buf = GradBuffer(f)
        o, d, tn, tf = random_ray(rng)
        backward_rays(f, buf, o, d, [tn], [tf], 8, grad_color=np.ones((1, 3)), train=("color",))
        buf.step(f, {"color": 0.5})
        assert not np.array_equal(f.color.values, before.color.values)
        np.testing.assert_array_equal(f.density.values, before.density.values)
        assert all(not g.any() for g in buf.grads.values())
        assert buf.n_touched[0] == 0


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        f = random_fields(20, res=4, D=5)
        save_checkpoint(f, tmp_path / "a.ckpt", {"note": "x"})
        g, meta = load_checkpoint(tmp_path / "a.ckpt")
        assert meta == {"note": "x"}
        for name, grid in f.grids().items():
            np.testing.assert_array_equal(getattr(g, name).values, grid.values.astype(np.float32))
            assert getattr(g, name).activation == grid.activation
        np.testing.assert_array_equal(g.bbox, f.bbox)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOTACKPT" + b"\0" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        f = random_fields(21, res=4, D=2)
        p = tmp_path / "t.ckpt"
        save_checkpoint(f, p)
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(ValueError, match="truncated.*byte"):
            load_checkpoint(p)
