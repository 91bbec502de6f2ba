import numpy as np
import pytest

from anchorseg import distributions as dist
from anchorseg import tensor as T
from anchorseg.distributions import DiagonalGaussian
from anchorseg.simplex import SimplexWeight
from anchorseg.tensor import ShapeError, Tensor
from helpers import check_against_fd


def gauss(mean, logvar, grad=False):
    return DiagonalGaussian(
        Tensor(np.asarray(mean, dtype=float), requires_grad=grad),
        Tensor(np.asarray(logvar, dtype=float), requires_grad=grad),
    )


def mc_kl(mean_q, var_q, mean_p, var_p, n=1_000_000, seed=0):
    """Monte-Carlo KL estimate between two 1-D Gaussians."""
    rng = np.random.default_rng(seed)
    x = mean_q + np.sqrt(var_q) * rng.standard_normal(n)
    logq = -0.5 * ((x - mean_q) ** 2 / var_q + np.log(2 * np.pi * var_q))
    logp = -0.5 * ((x - mean_p) ** 2 / var_p + np.log(2 * np.pi * var_p))
    return float(np.mean(logq - logp))


class TestKLToStandard:
    def test_standard_is_zero(self):
        assert dist.kl_to_standard(gauss([0.0], [0.0])).item() == 0.0

    def test_unit_mean(self):
        assert dist.kl_to_standard(gauss([1.0], [0.0])).item() == pytest.approx(0.5)

    def test_variance_four_closed_form_and_mc(self):
        val = dist.kl_to_standard(gauss([0.0], [np.log(4.0)])).item()
        assert val == pytest.approx(0.5 * (4 - 1 - np.log(4.0)))
        assert val == pytest.approx(0.8068528194400547, abs=1e-12)
        assert val == pytest.approx(mc_kl(0.0, 4.0, 0.0, 1.0), abs=1e-2)

    def test_nonnegative_and_zero_iff_standard(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = gauss(rng.normal(size=3), rng.normal(size=3))
            v = dist.kl_to_standard(q).item()
            assert v >= 0.0
            if v <= 1e-10:
                assert np.allclose(q.mean.data, 0.0, atol=1e-5)
                assert np.allclose(q.logvar.data, 0.0, atol=1e-5)
        assert dist.kl_to_standard(gauss(np.zeros(4), np.zeros(4))).item() <= 1e-10

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            gauss([np.inf], [0.0])


class TestKLBetween:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(1)
        m = rng.normal(size=4)
        lv = rng.normal(size=4)
        assert dist.kl_between(gauss(m, lv), gauss(m, lv)).item() <= 1e-12

    def test_reduces_to_standard(self):
        rng = np.random.default_rng(2)
        q = gauss(rng.normal(size=5), rng.normal(size=5))
        p = gauss(np.zeros(5), np.zeros(5))
        assert dist.kl_between(q, p).item() == pytest.approx(
            dist.kl_to_standard(q).item(), abs=1e-14
        )

    def test_matches_monte_carlo(self):
        q = gauss([0.7], [np.log(0.6)])
        p = gauss([-0.4], [np.log(1.8)])
        assert dist.kl_between(q, p).item() == pytest.approx(
            mc_kl(0.7, 0.6, -0.4, 1.8, seed=3), abs=1e-2
        )

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dist.kl_between(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))


def normal_pdf(x, mean, var):
    return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2 * np.pi * var)


def poe_grid_oracle(means, logvars, w, lo=-8.0, hi=10.0, step=1e-3):
    """Grid-normalized weighted-geometric-mean product density."""
    x = np.arange(lo, hi + step, step)
    log_g = np.zeros_like(x)
    for m, lv, wm in zip(means, logvars, w):
        log_g += wm * np.log(normal_pdf(x, m, np.exp(lv)) + 1e-300)
    g = np.exp(log_g - log_g.max())
    z = np.trapezoid(g, x)
    return x, g / z


class TestPoEFuse:
    def test_one_hot_returns_that_anchor(self):
        rng = np.random.default_rng(4)
        anchors = [gauss(rng.normal(size=3), rng.normal(size=3)) for _ in range(4)]
        w = np.zeros(4)
        w[2] = 1.0
        fused = dist.poe_fuse(anchors, SimplexWeight(w))
        assert np.allclose(fused.mean.data, anchors[2].mean.data, atol=1e-12)
        assert np.allclose(
            np.exp(fused.logvar.data), np.exp(anchors[2].logvar.data), atol=1e-12
        )

    def test_identical_anchors_fixed_point(self):
        rng = np.random.default_rng(5)
        m = rng.normal(size=3)
        lv = rng.normal(size=3)
        anchors = [gauss(m, lv) for _ in range(3)]
        for w in ([1, 0, 0], [0.2, 0.3, 0.5], [1 / 3] * 3):
            fused = dist.poe_fuse(anchors, SimplexWeight(np.array(w, dtype=float)))
            assert np.allclose(fused.mean.data, m, atol=1e-12)
            assert np.allclose(fused.logvar.data, lv, atol=1e-12)

    def test_two_anchor_midpoint_with_grid_oracle(self):
        anchors = [gauss([0.0], [0.0]), gauss([2.0], [0.0])]
        fused = dist.poe_fuse(anchors, SimplexWeight(np.array([0.5, 0.5])))
        assert fused.mean.data[0] == pytest.approx(1.0, abs=1e-12)
        assert np.exp(fused.logvar.data[0]) == pytest.approx(1.0, abs=1e-12)
        x, oracle = poe_grid_oracle([0.0, 2.0], [0.0, 0.0], [0.5, 0.5])
        ours = normal_pdf(x, fused.mean.data[0], np.exp(fused.logvar.data[0]))
        assert np.max(np.abs(ours - oracle)) <= 1e-6

    def test_precision_convex_combination(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            anchors = [gauss(rng.normal(size=4), rng.normal(size=4)) for _ in range(3)]
            w = rng.dirichlet(np.ones(3))
            fused = dist.poe_fuse(anchors, SimplexWeight(w))
            precs = np.stack([np.exp(-a.logvar.data) for a in anchors])
            fp = np.exp(-fused.logvar.data)
            assert np.all(fp >= precs.min(axis=0) - 1e-12)
            assert np.all(fp <= precs.max(axis=0) + 1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(7)
        anchors = [gauss(rng.normal(size=3), rng.normal(size=3)) for _ in range(4)]
        w = rng.dirichlet(np.ones(4))
        perm = rng.permutation(4)
        a = dist.poe_fuse(anchors, SimplexWeight(w))
        b = dist.poe_fuse([anchors[i] for i in perm], SimplexWeight(w[perm]))
        assert np.allclose(a.mean.data, b.mean.data, atol=1e-12)
        assert np.allclose(a.logvar.data, b.logvar.data, atol=1e-12)

    def test_m_mismatch(self):
        anchors = [gauss([0.0], [0.0])] * 3
        with pytest.raises(ShapeError):
            dist.poe_fuse(anchors, Tensor(np.array([0.5, 0.5])))

    def test_batched_weights(self):
        rng = np.random.default_rng(8)
        anchors = [gauss(rng.normal(size=(2, 3)), rng.normal(size=(2, 3))) for _ in range(3)]
        wb = rng.dirichlet(np.ones(3), size=5)
        fused = dist.poe_fuse(anchors, Tensor(wb))
        assert fused.shape == (5, 2, 3)
        single = dist.poe_fuse(anchors, SimplexWeight(wb[2]))
        assert np.allclose(fused.mean.data[2], single.mean.data, atol=1e-12)


class TestSample:
    def test_zero_noise_returns_mean(self):
        q = gauss([1.5, -2.0], [0.3, -0.1])
        out = dist.sample(q, Tensor(np.zeros(2)))
        assert np.array_equal(out.data, q.mean.data)

    def test_standard_gaussian_passes_noise(self):
        n = np.array([0.7, -1.2])
        out = dist.sample(gauss([0.0, 0.0], [0.0, 0.0]), Tensor(n))
        assert np.allclose(out.data, n, atol=1e-15)

    def test_law_of_large_numbers(self):
        rng = np.random.default_rng(9)
        q = gauss([2.0], [np.log(0.25)])
        draws = [
            dist.sample(q, Tensor(rng.standard_normal(1))).item() for _ in range(100_000)
        ]
        assert np.mean(draws) == pytest.approx(2.0, abs=0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dist.sample(gauss([0.0], [0.0]), Tensor(np.zeros(2)))


@pytest.mark.parametrize("seed", range(5))
def test_kl_and_poe_gradients_match_fd(seed):
    rng = np.random.default_rng(30 + seed)
    mean = Tensor(rng.normal(size=4), requires_grad=True)
    logvar = Tensor(rng.normal(size=4), requires_grad=True)

    def kl_std():
        return dist.kl_to_standard(DiagonalGaussian(mean, logvar))

    check_against_fd(kl_std, mean, rtol=1e-4)
    check_against_fd(kl_std, logvar, rtol=1e-4)

    pm = Tensor(rng.normal(size=4))
    plv = Tensor(rng.normal(size=4))

    def kl_pair():
        return dist.kl_between(DiagonalGaussian(mean, logvar), DiagonalGaussian(pm, plv))

    check_against_fd(kl_pair, mean, rtol=1e-4)
    check_against_fd(kl_pair, logvar, rtol=1e-4)

    w_raw = Tensor(rng.dirichlet(np.ones(3)), requires_grad=True)
    m2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    lv2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    c = Tensor(rng.normal(size=4))

    def poe_loss():
        fused = dist.poe_fuse(DiagonalGaussian(m2, lv2), w_raw)
        return T.reduce_sum(T.mul(fused.mean, c)) + dist.kl_to_standard(fused)

    check_against_fd(poe_loss, w_raw, rtol=1e-4)
    check_against_fd(poe_loss, m2, rtol=1e-4)
    check_against_fd(poe_loss, lv2, rtol=1e-4)
