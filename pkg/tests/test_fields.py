import numpy as np
import pytest

from angio4d.fields import AxisEncoding, DynamicField, VMGrid, scene_eval, softplus

import oracles


def make_grid(d=8, r=2, seed=0, **kw):
    return VMGrid(d, r, rng=np.random.default_rng(seed), dtype=np.float64, **kw)


def make_field(seed=0, n_phases=3, bands=4, **kw):
    defaults = dict(latent_dim=4, width=8, n_layers=2, dtype=np.float64)
    defaults.update(kw)
    return DynamicField(
        n_phases, AxisEncoding(bands), rng=np.random.default_rng(seed), **defaults
    )


class TestVMGrid:
    def test_all_ones_rank1_raw_is_three(self):
        grid = make_grid(6, 1)
        for p in grid.params.values():
            p[...] = 1.0
        x = np.random.default_rng(0).uniform(-1, 1, (20, 3))
        np.testing.assert_allclose(grid.raw(x), 3.0, atol=1e-12)

    def test_matches_dense_tensor_oracle(self):
        rng = np.random.default_rng(1)
        for d, r in [(4, 1), (8, 2), (16, 3)]:
            grid = make_grid(d, r, seed=d + r)
            x = rng.uniform(-1, 1, (1000, 3))
            dense = oracles.dense_grid_tensor(grid)
            expected = oracles.trilinear_sample(dense, x)
            np.testing.assert_allclose(grid.raw(x), expected, rtol=1e-6, atol=1e-12)

    def test_node_points_exact(self):
        grid = make_grid(5, 2)
        nodes = np.linspace(-1, 1, 5)
        x = np.array([[nodes[i], nodes[j], nodes[k]] for i in range(5) for j in range(5) for k in range(5)])
        dense = oracles.dense_grid_tensor(grid)
        np.testing.assert_allclose(grid.raw(x), dense.ravel(), rtol=1e-12)

    def test_param_count(self):
        grid = make_grid(48, 3)
        assert grid.n_params == 3 * 3 * (48 + 48 * 48)
        assert sum(p.size for p in grid.params.values()) == grid.n_params

    def test_out_of_bounds_rejected(self):
        grid = make_grid()
        with pytest.raises(ValueError):
            grid.raw(np.array([[1.1, 0.0, 0.0]]))
        # within the clamp margin is fine
        grid.raw(np.array([[1.0 + 5e-7, 0.0, 0.0]]))

    def test_softplus_output_nonnegative(self):
        grid = make_grid(raw_offset=-1.0)
        x = np.random.default_rng(2).uniform(-1, 1, (100, 3))
        sigma, _ = grid.forward(x)
        assert np.all(sigma >= 0)

    def test_low_rank_cap_single_plane_term(self):
        # with R=1 and only the vx/m_yz pair nonzero, the mode-0 unfolding
        # of the dense tensor has rank exactly 1
        grid = make_grid(6, 1, seed=3)
        for name in ("vy", "vz", "m_xz", "m_xy"):
            grid.params[name][...] = 0.0
        dense = oracles.dense_grid_tensor(grid)
        unfolded = dense.reshape(6, 36)
        assert np.linalg.matrix_rank(unfolded, tol=1e-10) == 1

    def test_determinism(self):
        a = make_grid(seed=9)
        b = make_grid(seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestAxisEncoding:
    def test_zero_point_fully_open(self):
        enc = AxisEncoding(4)
        out = enc.encode(np.zeros((1, 3)), alpha=4.0)[0]
        np.testing.assert_allclose(out[:3], 0.0)
        sin_idx = [3 + 6 * j + a for j in range(4) for a in range(3)]
        cos_idx = [3 + 6 * j + 3 + a for j in range(4) for a in range(3)]
        np.testing.assert_allclose(out[sin_idx], 0.0, atol=1e-12)
        np.testing.assert_allclose(out[cos_idx], 1.0, atol=1e-12)

    def test_closed_window_passes_identity_only(self):
        enc = AxisEncoding(5)
        x = np.random.default_rng(0).uniform(-1, 1, (10, 3))
        out = enc.encode(x, alpha=0.0)
        np.testing.assert_allclose(out[:, :3], x)
        np.testing.assert_allclose(out[:, 3:], 0.0, atol=1e-12)

    def test_partial_window_weights(self):
        enc = AxisEncoding(5)
        w = enc.band_weights(2.5)
        np.testing.assert_allclose(w, [1.0, 1.0, 0.5, 0.0, 0.0], atol=1e-12)

    def test_weights_monotone_in_alpha(self):
        enc = AxisEncoding(6)
        alphas = np.linspace(0, 6, 200)
        weights = np.stack([enc.band_weights(a) for a in alphas])
        assert np.all(np.diff(weights, axis=0) >= -1e-12)

    def test_window_continuity_in_alpha(self):
        enc = AxisEncoding(8)
        rng = np.random.default_rng(4)
        x = rng.uniform(-1, 1, (64, 3))
        for alpha in rng.uniform(0, 8, 16):
            a = enc.encode(x, alpha)
            b = enc.encode(x, alpha + 1e-6)
            assert np.abs(a - b).max() < 1e-4

    def test_out_dim(self):
        assert AxisEncoding(10).out_dim == 63
        assert AxisEncoding(0).out_dim == 3


class TestDynamicField:
    def test_zero_network_outputs_ln2(self):
        field = make_field()
        for p in field.params.values():
            p[...] = 0.0
        sigma, _ = field.forward(np.random.default_rng(0).uniform(-1, 1, (16, 3)), 0)
        np.testing.assert_allclose(sigma, np.log(2.0), rtol=1e-12)

    def test_batching_transparency(self):
        field = make_field(seed=5)
        rng = np.random.default_rng(6)
        x = rng.uniform(-1, 1, (1000, 3))
        single, _ = field.forward(x[:1], 1)
        batched, _ = field.forward(x, 1)
        # BLAS may reassociate sums across batch shapes, so compare to
        # near machine precision rather than bitwise
        np.testing.assert_allclose(single[0], batched[0], rtol=1e-12)

    def test_matches_straight_line_oracle(self):
        field = make_field(seed=7)
        x = np.random.default_rng(8).uniform(-1, 1, (50, 3))
        for alpha in (0.0, 1.7, 4.0):
            got, _ = field.forward(x, 2, alpha)
            expected = oracles.mlp_eval(field, x, 2, alpha)
            np.testing.assert_allclose(got, expected, rtol=1e-6, atol=1e-12)

    def test_phase_out_of_range(self):
        field = make_field()
        with pytest.raises(IndexError):
            field.forward(np.zeros((1, 3)), 3)

    def test_phase_independence(self):
        field = make_field(seed=10)
        x = np.random.default_rng(11).uniform(-1, 1, (20, 3))
        before, _ = field.forward(x, 0)
        field.params["latents"][2] += 5.0
        after, _ = field.forward(x, 0)
        np.testing.assert_array_equal(before, after)

    def test_input_width(self):
        field = make_field(bands=10, latent_dim=16)
        assert field.in_dim == 3 + 6 * 10 + 16

    def test_determinism(self):
        a = make_field(seed=13)
        b = make_field(seed=13)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])


class TestGradients:
    def _weighted_loss(self, forward):
        rng = np.random.default_rng(20)
        weights = rng.normal(size=30)

        def loss():
            return float(forward() @ weights)

        return loss

    def test_grid_gradients_match_finite_differences(self):
        grid = make_grid(4, 2, seed=21)
        x = np.random.default_rng(22).uniform(-0.95, 0.95, (30, 3))
        up = np.random.default_rng(23).normal(size=30)
        _, cache = grid.forward(x)
        grads = grid.backward(cache, up)

        def loss():
            return float(grid.forward(x)[0] @ up)

        for name, p in grid.params.items():
            fd = oracles.fd_gradient(loss, p, h=1e-5)
            np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-9)

    def test_field_gradients_match_finite_differences(self):
        field = make_field(seed=24, bands=2)
        x = np.random.default_rng(25).uniform(-1, 1, (30, 3))
        up = np.random.default_rng(26).normal(size=30)
        _, cache = field.forward(x, 1, alpha=1.5)
        grads = field.backward(cache, up)

        def loss():
            return float(field.forward(x, 1, alpha=1.5)[0] @ up)

        for name, p in field.params.items():
            fd = oracles.fd_gradient(loss, p, h=1e-5)
            np.testing.assert_allclose(grads[name], fd, rtol=1e-4, atol=1e-8)

    def test_zero_upstream_gives_zero_grads(self):
        grid = make_grid()
        field = make_field()
        x = np.random.default_rng(0).uniform(-1, 1, (10, 3))
        _, gc = grid.forward(x)
        _, fc = field.forward(x, 0)
        for g in grid.backward(gc, np.zeros(10)).values():
            assert not g.any()
        for g in field.backward(fc, np.zeros(10)).values():
            assert not g.any()

    def test_gradient_accumulation_linearity(self):
        grid = make_grid(seed=30)
        rng = np.random.default_rng(31)
        x1, x2 = rng.uniform(-1, 1, (2, 12, 3))
        u1, u2 = rng.normal(size=(2, 12))
        _, c1 = grid.forward(x1)
        _, c2 = grid.forward(x2)
        _, c12 = grid.forward(np.concatenate([x1, x2]))
        joint = grid.backward(c12, np.concatenate([u1, u2]))
        for name in grid.params:
            separate = grid.backward(c1, u1)[name] + grid.backward(c2, u2)[name]
            np.testing.assert_allclose(joint[name], separate, rtol=1e-12, atol=1e-14)


class TestSceneEval:
    def test_composition_is_exact_sum(self):
        grid = make_grid(seed=40)
        field = make_field(seed=41)
        x = np.random.default_rng(42).uniform(-1, 1, (25, 3))
        sl, ss, sigma, _ = scene_eval(grid, field, x, 1, alpha=2.0)
        np.testing.assert_array_equal(sigma, sl + ss)

    def test_sigma_dominates_components(self):
        grid = make_grid(seed=43)
        field = make_field(seed=44)
        x = np.random.default_rng(45).uniform(-1, 1, (10000, 3))
        sl, ss, sigma, _ = scene_eval(grid, field, x, 0)
        assert np.all(sigma >= np.maximum(sl, ss))

    def test_suppressed_field_leaves_grid_value(self):
        grid = make_grid(seed=46)
        field = make_field(seed=47)
        field.params["b2"][...] = -40.0  # drive sigma_s into the softplus tail
        x = np.random.default_rng(48).uniform(-1, 1, (50, 3))
        sl, ss, sigma, _ = scene_eval(grid, field, x, 0)
        assert np.abs(sigma - sl).max() < 1e-8


def test_softplus_linear_tail_and_stability():
    assert softplus(np.array([1000.0]))[0] == 1000.0
    assert softplus(np.array([0.0]))[0] == pytest.approx(np.log(2))
    assert softplus(np.array([-800.0]))[0] == 0.0
