import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from anchorseg import diffeo as D
from anchorseg import tensor as T
from anchorseg.diffeo import DiffeoMap, VelocityField
from anchorseg.tensor import ShapeError, Tensor
from helpers import check_against_fd


def smooth_field(rng, size=64, max_abs=3.0, sigma=6.0):
    raw = rng.standard_normal((2, size, size))
    sm = np.stack([gaussian_filter(raw[i], sigma) for i in range(2)])
    sm *= max_abs / np.abs(sm).max()
    return VelocityField(Tensor(sm))


def translation_field(size, dr, dc):
    v = np.zeros((2, size, size))
    v[0] = dr
    v[1] = dc
    return VelocityField(Tensor(v))


def displacement(phi: DiffeoMap):
    return phi.coords.data - D.identity_grid(*phi.spatial)


class TestIntegrate:
    def test_zero_field_is_bitwise_identity(self):
        phi = D.integrate(VelocityField(Tensor(np.zeros((2, 16, 16)))), 6)
        assert np.array_equal(phi.coords.data, D.identity_grid(16, 16))

    def test_constant_field_translates_interior(self):
        phi = D.integrate(translation_field(64, 3.0, 0.0), 6)
        d = displacement(phi)[:, 8:-8, 8:-8]
        assert np.abs(d[0] - 3.0).max() <= 1e-3
        assert np.abs(d[1]).max() <= 1e-3

    def test_step_count_convergence(self):
        rng = np.random.default_rng(0)
        v = smooth_field(rng, max_abs=2.0)
        a = D.integrate(v, 6)
        b = D.integrate(v, 8)
        assert np.abs(a.coords.data - b.coords.data).max() <= 1e-3

    def test_nonfinite_rejected(self):
        bad = np.zeros((2, 8, 8))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValueError):
            VelocityField(Tensor(bad))

    def test_needs_positive_steps(self):
        with pytest.raises(ValueError):
            D.integrate(VelocityField(Tensor(np.zeros((2, 4, 4)))), 0)

    def test_differentiable_wrt_velocity(self):
        rng = np.random.default_rng(1)
        v = Tensor(0.5 * rng.standard_normal((2, 6, 6)), requires_grad=True)
        c = Tensor(rng.standard_normal((2, 6, 6)))

        def f():
            phi = D.integrate(VelocityField(v), 3)
            return T.reduce_sum(T.mul(phi.coords, c))

        # small step: larger ones straddle bilinear-interpolation kinks
        check_against_fd(f, v, rtol=1e-4, h=1e-6)


class TestCompose:
    def test_identity_neutral(self):
        rng = np.random.default_rng(2)
        phi = D.integrate(smooth_field(rng, size=32, max_abs=2.0, sigma=4.0), 6)
        ident = D.identity_map(32, 32)
        left = D.compose(ident, phi)
        right = D.compose(phi, ident)
        assert np.abs(left.coords.data - phi.coords.data).max() <= 1e-12
        assert np.abs(right.coords.data - phi.coords.data).max() <= 1e-12

    def test_two_translations_add(self):
        a = D.integrate(translation_field(64, 2.0, 0.0), 6)
        b = D.integrate(translation_field(64, 0.0, 3.0), 6)
        comp = D.compose(a, b)
        d = displacement(comp)[:, 16:-16, 16:-16]
        assert np.abs(d[0] - 2.0).max() <= 1e-3
        assert np.abs(d[1] - 3.0).max() <= 1e-3

    def test_associativity_interior(self):
        rng = np.random.default_rng(3)
        maps = [D.integrate(smooth_field(rng, max_abs=0.5, sigma=8.0), 6) for _ in range(3)]
        left = D.compose(D.compose(maps[0], maps[1]), maps[2])
        right = D.compose(maps[0], D.compose(maps[1], maps[2]))
        diff = np.abs(left.coords.data - right.coords.data)[:, 8:-8, 8:-8]
        assert diff.max() <= 1e-3

    def test_size_mismatch_needs_flag(self):
        small = D.identity_map(8, 8)
        big = D.identity_map(16, 16)
        with pytest.raises(ShapeError):
            D.compose(big, small)
        out = D.compose(big, small, resample=True)
        assert out.spatial == (8, 8)


class TestInverse:
    def test_zero_field(self):
        phi_inv = D.inverse([VelocityField(Tensor(np.zeros((2, 16, 16))))])
        assert np.array_equal(phi_inv.coords.data, D.identity_grid(16, 16))

    def test_constant_field_inverse_translates_back(self):
        phi_inv = D.inverse([translation_field(64, 3.0, 0.0)], 6)
        d = displacement(phi_inv)[:, 8:-8, 8:-8]
        assert np.abs(d[0] + 3.0).max() <= 1e-3

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            D.inverse([])

    def test_multilevel_round_trip(self):
        rng = np.random.default_rng(4)
        fields = [
            smooth_field(rng, size=16, max_abs=0.4, sigma=2.0),
            smooth_field(rng, size=32, max_abs=0.8, sigma=3.0),
            smooth_field(rng, size=64, max_abs=1.5, sigma=6.0),
        ]
        phi = D.compose_pyramid(fields, 6)
        phi_inv = D.inverse(fields, 6)
        rt = D.compose(phi, phi_inv)
        err = np.abs(rt.coords.data - D.identity_grid(64, 64))[:, 8:-8, 8:-8]
        assert err.max() <= 0.1

    @pytest.mark.parametrize("seed", range(10))
    def test_single_level_round_trip_and_jacobian(self, seed):
        rng = np.random.default_rng(100 + seed)
        v = smooth_field(rng, max_abs=3.0)
        phi = D.integrate(v, 6)
        phi_inv = D.inverse([v], 6)
        rt = D.compose(phi, phi_inv)
        err = np.abs(rt.coords.data - D.identity_grid(64, 64))[:, 8:-8, 8:-8]
        assert err.max() <= 0.1
        assert D.jacobian_determinant(phi).min() > 0


class TestWarp:
    def test_identity_is_exact(self):
        rng = np.random.default_rng(5)
        img = Tensor(rng.standard_normal((3, 12, 12)))
        out = D.warp_image(img, D.identity_map(12, 12))
        assert np.array_equal(out.data, img.data)

    def test_integer_translation_moves_delta(self):
        img = np.zeros((1, 9, 9))
        img[0, 4, 4] = 1.0
        grid = D.identity_grid(9, 9).copy()
        grid[1] += 1.0  # sample one column to the right
        out = D.warp_image(Tensor(img), DiffeoMap(Tensor(grid)))
        assert out.data[0, 4, 3] == pytest.approx(1.0)
        assert out.data[0, 4, 4] == pytest.approx(0.0)

    def test_linear_in_image(self):
        rng = np.random.default_rng(6)
        phi = D.integrate(smooth_field(rng, size=16, max_abs=1.5, sigma=2.0), 6)
        i1 = rng.standard_normal((2, 16, 16))
        i2 = rng.standard_normal((2, 16, 16))
        a, b = 1.7, -0.4
        combined = D.warp_image(Tensor(a * i1 + b * i2), phi)
        separate = a * D.warp_image(Tensor(i1), phi).data + b * D.warp_image(Tensor(i2), phi).data
        assert np.abs(combined.data - separate).max() <= 1e-10

    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            D.warp_image(Tensor(np.zeros((1, 4, 4))), D.identity_map(4, 4), mode="cubic")

    def test_gradient_wrt_map(self):
        rng = np.random.default_rng(7)
        img = Tensor(rng.standard_normal((1, 8, 8)))
        coords = Tensor(
            D.identity_grid(8, 8) + rng.uniform(-0.3, 0.3, (2, 8, 8)),
            requires_grad=True,
        )
        c = Tensor(rng.standard_normal((1, 8, 8)))

        def f():
            return T.reduce_sum(T.mul(D.warp_image(img, DiffeoMap(coords)), c))

        check_against_fd(f, coords, rtol=1e-4)

    def test_warp_label_identity_and_translation(self):
        lab = np.zeros((3, 8, 8))
        lab[0] = 1.0
        lab[0, 2:5, 2:5] = 0.0
        lab[1, 2:5, 2:5] = 1.0
        out = D.warp_label(Tensor(lab), D.identity_map(8, 8))
        assert np.array_equal(out.data, lab)
        grid = D.identity_grid(8, 8).copy()
        grid[1] += 1.0
        shifted = D.warp_label(Tensor(lab), DiffeoMap(Tensor(grid)))
        assert np.array_equal(shifted.data[1, 2:5, 1:4], np.ones((3, 3)))

    def test_warped_channels_sum_bounded(self):
        rng = np.random.default_rng(8)
        lab = np.zeros((3, 16, 16))
        lab[0] = 1.0
        lab[0, 5:11, 5:11] = 0.0
        lab[2, 5:11, 5:11] = 1.0
        phi = D.integrate(smooth_field(rng, size=16, max_abs=1.0, sigma=2.0), 6)
        out = D.warp_label(Tensor(lab), phi)
        assert out.data.sum(axis=0).max() <= 1.0 + 1e-6

    def test_argmax_preserves_class_set_under_small_warp(self):
        rng = np.random.default_rng(9)
        lab = np.zeros((3, 32, 32))
        lab[0] = 1.0
        lab[0, 8:24, 8:24] = 0.0
        lab[1, 8:24, 8:24] = 1.0
        lab[1, 12:20, 12:20] = 0.0
        lab[2, 12:20, 12:20] = 1.0
        phi = D.integrate(smooth_field(rng, size=32, max_abs=1.0, sigma=4.0), 6)
        warped = D.warp_label(Tensor(lab), phi)
        assert set(np.unique(np.argmax(warped.data, axis=0))) == {0, 1, 2}


class TestJacobian:
    def test_identity_all_ones(self):
        jd = D.jacobian_determinant(D.identity_map(10, 10))
        assert np.allclose(jd, 1.0, atol=1e-14)

    def test_uniform_scaling(self):
        grid = 1.1 * D.identity_grid(12, 12)
        jd = D.jacobian_determinant(DiffeoMap(Tensor(grid)))
        assert np.allclose(jd, 1.21, atol=1e-12)

    def test_positive_for_random_flow(self):
        rng = np.random.default_rng(10)
        phi = D.integrate(smooth_field(rng, max_abs=3.0), 6)
        assert D.jacobian_determinant(phi).min() > 0

    def test_too_small_grid(self):
        with pytest.raises(ShapeError):
            D.jacobian_determinant(D.identity_map(2, 2))


def test_map_grid_layout_matches_contract():
    phi = D.identity_map(5, 7)
    g = phi.grid
    assert g.shape == (5, 7, 2)
    assert g[3, 2, 0] == 3.0 and g[3, 2, 1] == 2.0
