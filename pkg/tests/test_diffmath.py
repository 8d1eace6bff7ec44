import numpy as np
import pytest
from scipy import integrate

from sensemem import diffmath as dm


def naive_matmul(a, b):
    """Triple-loop reference for gemm."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


class TestGemm:
    def test_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = dm.matmul(dm.constant(np.eye(3)), dm.constant(x))
        np.testing.assert_array_equal(out.value, x)

    def test_hand_arithmetic(self):
        a = dm.constant([[1.0, 2.0]])
        b = dm.constant([[3.0], [4.0]])
        assert dm.matmul(a, b).value[0, 0] == 11.0

    def test_against_naive_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(4, 5))
        b = rng.normal(size=(5, 3))
        out = dm.matmul(dm.constant(a), dm.constant(b)).value
        np.testing.assert_allclose(out, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(dm.DimensionError):
            dm.matmul(dm.constant(np.ones((2, 3))), dm.constant(np.ones((2, 3))))


class TestActivations:
    def test_sigmoid_at_zero(self):
        assert dm.sigmoid(dm.constant(0.0)).item() == 0.5

    def test_elu_limits(self):
        assert dm.elu(dm.constant(-50.0)).item() == pytest.approx(-1.0, abs=1e-12)
        x = np.array([0.0, 0.5, 3.0])
        np.testing.assert_array_equal(dm.elu(dm.constant(x)).value, x)

    def test_tanh_gradient_matches_finite_differences(self):
        x = dm.param(0.3)
        dm.backward(dm.tanh(x))
        analytic = float(x.grad)
        assert analytic == pytest.approx(0.9151369618, rel=1e-8)
        d = 1e-6
        numeric = (np.tanh(0.3 + d) - np.tanh(0.3 - d)) / (2 * d)
        assert abs(analytic - numeric) / abs(analytic) <= 1e-6

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            dm.activation("gelu", dm.constant(1.0))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(dm.softmax(dm.constant([0.0, 0.0, 0.0])).value, np.ones(3) / 3)

    def test_shift_invariance(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            v = rng.normal(size=5)
            c = rng.normal()
            np.testing.assert_allclose(
                dm.softmax(dm.constant(v + c)).value,
                dm.softmax(dm.constant(v)).value,
                atol=1e-12,
            )

    def test_high_precision_oracle(self):
        # mpmath at 50 digits as the independent evaluator
        import mpmath

        mpmath.mp.dps = 50
        exps = [mpmath.exp(x) for x in (1, 2, 3)]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
        np.testing.assert_allclose(dm.softmax(dm.constant([1.0, 2.0, 3.0])).value, expected, atol=1e-12)
        np.testing.assert_allclose(expected, [0.09003, 0.24473, 0.66524], atol=5e-6)

    def test_sums_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            v = rng.normal(scale=30.0, size=rng.integers(1, 9))
            assert abs(dm.softmax(dm.constant(v)).value.sum() - 1.0) <= 1e-12

    def test_empty_rejected(self):
        with pytest.raises(dm.DimensionError):
            dm.softmax(dm.constant(np.zeros(0)))


def quadrature_kl_1d(mu_q, var_q, mu_p, var_p):
    """Numerical KL(q||p) for 1-D Gaussians via adaptive quadrature.

    Works in log space so tail underflow of q gives 0 * finite, not nan.
    """

    def log_pdf(x, mu, var):
        return -0.5 * (x - mu) ** 2 / var - 0.5 * np.log(2 * np.pi * var)

    def integrand(x):
        lq = log_pdf(x, mu_q, var_q)
        return np.exp(lq) * (lq - log_pdf(x, mu_p, var_p))

    lo = mu_q - 12 * np.sqrt(var_q)
    hi = mu_q + 12 * np.sqrt(var_q)
    val, _ = integrate.quad(integrand, lo, hi, limit=200)
    return val


class TestKlDiagGauss:
    def test_identical_is_zero(self):
        d = dm.GaussianDiag(dm.constant([0.0, 0.0]), dm.constant([0.0, 0.0]))
        assert dm.kl_diag_gauss(d, d).item() == pytest.approx(0.0, abs=1e-15)

    def test_unit_variance_mean_shift(self):
        q = dm.GaussianDiag(dm.constant([1.0, 0.0]), dm.constant([0.0, 0.0]))
        p = dm.GaussianDiag(dm.constant([0.0, 0.0]), dm.constant([0.0, 0.0]))
        assert dm.kl_diag_gauss(q, p).item() == pytest.approx(0.5, abs=1e-12)

    def test_one_dimensional_against_quadrature(self):
        q = dm.GaussianDiag(dm.constant([1.0]), dm.constant([np.log(0.25)]))
        p = dm.GaussianDiag(dm.constant([0.0]), dm.constant([0.0]))
        got = dm.kl_diag_gauss(q, p).item()
        oracle = quadrature_kl_1d(1.0, 0.25, 0.0, 1.0)
        assert got == pytest.approx(oracle, abs=1e-9)
        assert got == pytest.approx(0.81815, abs=1e-4)

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            dim = rng.integers(1, 6)
            mq, lq = rng.normal(size=dim), rng.normal(size=dim)
            q = dm.GaussianDiag(dm.constant(mq), dm.constant(lq))
            assert dm.kl_diag_gauss(q, q).item() <= 1e-14
            mp_, lp = mq + rng.normal(scale=0.5, size=dim), lq + rng.normal(scale=0.5, size=dim)
            p = dm.GaussianDiag(dm.constant(mp_), dm.constant(lp))
            kl = dm.kl_diag_gauss(q, p).item()
            assert kl >= 0.0
            if np.any(mp_ != mq) or np.any(lp != lq):
                assert kl > 0.0

    def test_dim_mismatch(self):
        q = dm.GaussianDiag(dm.constant([0.0]), dm.constant([0.0]))
        p = dm.GaussianDiag(dm.constant([0.0, 0.0]), dm.constant([0.0, 0.0]))
        with pytest.raises(dm.DimensionError):
            dm.kl_diag_gauss(q, p)


class TestSampleGaussian:
    def test_zero_noise_returns_mean(self):
        d = dm.GaussianDiag(dm.constant([1.0, -2.0]), dm.constant([0.7, -0.3]))
        np.testing.assert_array_equal(dm.sample_gaussian(d, np.zeros(2)).value, [1.0, -2.0])

    def test_degenerate_sigma(self):
        d = dm.GaussianDiag(dm.constant([3.0]), dm.constant([-80.0]))
        assert dm.sample_gaussian(d, np.array([5.0])).item() == pytest.approx(3.0, abs=1e-12)

    def test_affine_formula(self):
        d = dm.GaussianDiag(dm.constant([1.0]), dm.constant([np.log(4.0)]))
        assert dm.sample_gaussian(d, np.array([0.5])).item() == pytest.approx(2.0, abs=1e-12)

    def test_moments_over_many_draws(self):
        rng = np.random.default_rng(17)
        mu, sigma = 0.8, 1.7
        d = dm.GaussianDiag(dm.constant([mu]), dm.constant([2 * np.log(sigma)]))
        n = 100_000
        eps = rng.standard_normal((n, 1))
        samples = dm.sample_gaussian(d, eps).value[:, 0]
        se_mean = sigma / np.sqrt(n)
        assert abs(samples.mean() - mu) <= 3 * se_mean
        se_var = sigma**2 * np.sqrt(2.0 / (n - 1))
        assert abs(samples.var(ddof=1) - sigma**2) <= 3 * se_var

    def test_gradient_reaches_mean_and_log_var_only(self):
        mu = dm.param([1.0, 2.0])
        lv = dm.param([0.0, 0.5])
        eps = np.array([0.3, -0.7])
        out = dm.sum_(dm.sample_gaussian(dm.GaussianDiag(mu, lv), eps))
        dm.backward(out)
        np.testing.assert_allclose(mu.grad, [1.0, 1.0])
        expected_lv = 0.5 * np.exp(0.5 * lv.value) * eps
        np.testing.assert_allclose(lv.grad, expected_lv)

    def test_dim_mismatch(self):
        d = dm.GaussianDiag(dm.constant([0.0, 0.0]), dm.constant([0.0, 0.0]))
        with pytest.raises(dm.DimensionError):
            dm.sample_gaussian(d, np.zeros(3))


class TestLogsumexp:
    def test_two_zeros(self):
        assert dm.logsumexp(dm.constant([0.0, 0.0])).item() == pytest.approx(np.log(2.0), abs=1e-12)

    def test_single_element(self):
        assert dm.logsumexp(dm.constant([4.2])).item() == pytest.approx(4.2, abs=1e-15)

    def test_large_magnitudes(self):
        got = dm.logsumexp(dm.constant([1000.0, 1000.0])).item()
        assert np.isfinite(got)
        assert got == pytest.approx(1000.0 + np.log(2.0), abs=1e-12)

    def test_axis_against_scipy(self):
        from scipy.special import logsumexp as sp_lse

        rng = np.random.default_rng(23)
        x = rng.normal(scale=10, size=(4, 5))
        np.testing.assert_allclose(dm.logsumexp(dm.constant(x), axis=1).value, sp_lse(x, axis=1))
        np.testing.assert_allclose(
            dm.logsumexp(dm.constant(x), axis=0, keepdims=True).value,
            sp_lse(x, axis=0, keepdims=True),
        )

    def test_empty_rejected(self):
        with pytest.raises(dm.DimensionError):
            dm.logsumexp(dm.constant(np.zeros(0)))


class TestBackward:
    def test_fanout_accumulates(self):
        x = dm.param([1.5])
        y = dm.add(x, x)
        dm.backward(dm.sum_(y))
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_diamond_graph(self):
        # f = (x*x) + (x*3); df/dx = 2x + 3
        x = dm.param([2.0])
        f = dm.sum_(dm.add(dm.square(x), dm.mul(x, 3.0)))
        dm.backward(f)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_scalar_root_required(self):
        x = dm.param([1.0, 2.0])
        with pytest.raises(dm.DimensionError):
            dm.backward(dm.mul(x, 2.0))

    def test_nonfinite_root_rejected(self):
        x = dm.param([0.0])
        with pytest.raises(dm.EvaluationError):
            dm.backward(dm.sum_(dm.log(x)))


class TestGradCheck:
    def test_quadratic(self):
        x = dm.param([1.0, 2.0])
        report = dm.grad_check(lambda: dm.mul(dm.sum_(dm.square(x)), 0.5), {"x": x}, tol=1e-6)
        assert report.passed
        dm.zero_grads([x])
        dm.backward(dm.mul(dm.sum_(dm.square(x)), 0.5))
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_corrupted_gradient_is_named(self):
        x = dm.param([1.0, 2.0])

        def bad_square():
            # deliberately wrong backward rule: returns 3x instead of 2x
            sq = dm.Node(x.value * x.value, (x,), lambda g: (3.0 * x.value * g,))
            return dm.sum_(sq)

        report = dm.grad_check(bad_square, {"x": x})
        assert not report.passed
        assert report.failures
        assert report.failures[0][0].startswith("x[")

    def test_randomized_primitive_suite(self):
        rng = np.random.default_rng(31)
        w = dm.param(rng.normal(size=(3, 4)))
        b = dm.param(rng.normal(size=3))
        v = dm.param(rng.normal(size=4))
        lv = dm.param(rng.normal(scale=0.3, size=3))
        eps = rng.standard_normal((5, 3))

        def objective():
            h = dm.add(dm.matmul(w, v), b)
            acts = dm.add(
                dm.sum_(dm.tanh(h)),
                dm.add(dm.sum_(dm.elu(h)), dm.add(dm.sum_(dm.sigmoid(h)), dm.sum_(dm.leaky_relu(h)))),
            )
            dist = dm.GaussianDiag(h, lv)
            draws = dm.sample_gaussian(dist, eps)
            mix = dm.logsumexp(dm.mul(draws, 0.3), axis=1)
            soft = dm.softmax(h)
            kl = dm.kl_diag_gauss(dist, dm.GaussianDiag(dm.constant(np.zeros(3)), dm.constant(np.zeros(3))))
            pieces = dm.pack([acts, dm.sum_(mix), dm.sum_(dm.log(soft)), kl])
            return dm.sum_(dm.mul(pieces, np.array([0.2, 0.5, 0.1, 0.7])))

        report = dm.grad_check(objective, {"w": w, "b": b, "v": v, "lv": lv}, delta=1e-5, tol=1e-4)
        assert report.passed, str(report)

    def test_structural_ops(self):
        rng = np.random.default_rng(41)
        a = dm.param(rng.normal(size=(2, 3)))
        c = dm.param(rng.normal(size=(2, 2)))

        def objective():
            joined = dm.concat([a, c], axis=1)
            picked = dm.getitem(joined, (slice(None), slice(1, 4)))
            clipped = dm.clamp(picked, -0.5, 0.5)
            flat = dm.reshape(clipped, (6,))
            return dm.mean_(dm.square(flat))

        report = dm.grad_check(objective, {"a": a, "c": c})
        assert report.passed, str(report)
