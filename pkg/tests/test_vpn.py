import numpy as np
import pytest

from sensemem import diffmath as dm
from sensemem.encoders import init_encoder
from sensemem.protonet import protonet_loss
from sensemem.seeding import rng_for
from sensemem.vpn import (
    GaussianHeadNet,
    InferenceNets,
    VpnHyper,
    draw_z_noise,
    infer_posterior_z,
    infer_prior_z,
    predict_vpn,
    vpn_loss,
)

from test_protonet import two_class_episode


class ZeroNoise:
    """Duck-typed generator that always returns zero noise."""

    def standard_normal(self, shape):
        return np.zeros(shape)


def make_identity_gauss_net(net: GaussianHeadNet, log_var_value: float, bias: float = 100.0):
    """Rewire a head net so mean == input exactly and log_var is constant.

    Shifting by a large positive bias keeps both ELU layers in their
    exact-identity region for bounded inputs; the output layer removes
    the shift. Requires in_dim == hidden_dim == out_dim.
    """
    d = net.out_dim
    assert net.in_dim == net.hidden_dim == d
    p = net.params
    p["w1"].value[:] = np.eye(d)
    p["b1"].value[:] = bias
    p["w2"].value[:] = np.eye(d)
    p["b2"].value[:] = 0.0
    p["w3"].value[:] = 0.0
    p["w3"].value[:d, :d] = np.eye(d)
    p["b3"].value[:d] = -bias
    p["b3"].value[d:] = log_var_value


class TestHeadNet:
    def test_zero_weights_emit_biases(self):
        net = GaussianHeadNet.init("g", 3, 3, 3, seed=0)
        for k in ("w1", "w2", "w3", "b1", "b2"):
            net.params[k].value[:] = 0.0
        net.params["b3"].value[:] = np.arange(6.0)
        out = net(dm.constant([9.0, 9.0, 9.0]))
        np.testing.assert_array_equal(out.mean.value, [0.0, 1.0, 2.0])
        np.testing.assert_array_equal(out.log_var.value, [3.0, 4.0, 5.0])

    def test_finite_for_random_inputs(self):
        net = GaussianHeadNet.init("g", 4, 4, 4, seed=1)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            out = net(dm.constant(rng.normal(scale=5.0, size=4)))
            assert np.all(np.isfinite(out.mean.value))
            assert np.all(np.isfinite(out.log_var.value))

    def test_log_var_clamped(self):
        net = GaussianHeadNet.init("g", 2, 2, 2, seed=2)
        net.params["b3"].value[2:] = 1e6
        out = net(dm.constant([0.0, 0.0]))
        assert np.all(out.log_var.value <= 10.0)

    def test_batched_matches_loop(self):
        net = GaussianHeadNet.init("g", 3, 3, 3, seed=3)
        rng = np.random.default_rng(1)
        xs = rng.normal(size=(5, 3))
        batch = net(dm.constant(xs))
        for i in range(5):
            single = net(dm.constant(xs[i]))
            np.testing.assert_allclose(batch.mean.value[i], single.mean.value, atol=1e-12)
            np.testing.assert_allclose(batch.log_var.value[i], single.log_var.value, atol=1e-12)

    def test_wrong_input_dim(self):
        net = GaussianHeadNet.init("g", 3, 3, 3, seed=4)
        with pytest.raises(dm.DimensionError):
            net(dm.constant([1.0, 2.0]))


class TestInference:
    def test_posterior_gradcheck(self):
        nets = InferenceNets.init(3, seed=5)
        rng = np.random.default_rng(2)
        pooled = rng.normal(size=3)
        probe = rng.normal(size=3)

        def objective():
            g = infer_posterior_z(nets, dm.constant(pooled))
            return dm.sum_(dm.mul(g.mean, probe)) + dm.sum_(dm.mul(g.log_var, 0.3))

        report = dm.grad_check(objective, dict(nets.posterior.named_params()))
        assert report.passed, str(report)

    def test_prior_gradcheck(self):
        nets = InferenceNets.init(3, seed=6)
        rng = np.random.default_rng(3)
        x = rng.normal(size=3)

        def objective():
            g = infer_prior_z(nets, dm.constant(x))
            return dm.sum_(dm.square(g.mean)) + dm.sum_(dm.square(g.log_var))

        report = dm.grad_check(objective, dict(nets.prior.named_params()))
        assert report.passed, str(report)

    def test_memory_conditioned_input(self):
        nets = InferenceNets.init(3, seed=7, with_memory=True)
        g = infer_posterior_z(nets, dm.constant([1.0, 2.0, 3.0]), m=dm.constant([0.0, 0.0, 0.0]))
        assert g.mean.shape == (3,)


class TestVpnLoss:
    def test_reduces_to_protonet(self):
        rng = np.random.default_rng(4)
        ep = two_class_episode(rng, d=4)
        enc = init_encoder("linear", 4, 4, seed=8)
        nets = InferenceNets.init(4, seed=9)
        make_identity_gauss_net(nets.posterior, log_var_value=-30.0)
        hyper = VpnHyper(lam=0.0, l_z=3)
        eps = np.zeros((2, 3, 4))
        got = vpn_loss(ep, enc, nets, hyper, eps).item()
        want = protonet_loss(ep, enc).item()
        assert abs(got - want) <= 1e-9

    def test_kl_contributes_zero_when_posterior_equals_prior(self):
        # identical nets + identical pooled/query inputs make the KL vanish
        rng = np.random.default_rng(5)
        d = 3
        from sensemem.corpus import SentenceRecord
        from sensemem.episodes import Episode

        emb = rng.normal(size=(1, d))
        recs = [
            SentenceRecord(f"r{i}", "w", f"w/s{i %2}", 0, ["w"], emb.copy()) for i in range(4)
        ]
        ep = Episode(
            support=[(recs[0], 0), (recs[1], 1)],
            query=[(recs[2], 0), (recs[3], 1)],
            classes=["w/s0", "w/s1"],
        )
        enc = init_encoder("linear", d, d, seed=10)
        nets = InferenceNets.init(d, seed=11)
        for k in nets.prior.params:
            nets.prior.params[k].value[:] = nets.posterior.params[k].value
        eps = draw_z_noise(2, 4, d, rng_for(0, "t"))
        with_kl = vpn_loss(ep, enc, nets, VpnHyper(lam=1.0, l_z=4), eps).item()
        without = vpn_loss(ep, enc, nets, VpnHyper(lam=0.0, l_z=4), eps).item()
        assert with_kl == pytest.approx(without, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        ep = two_class_episode(rng, d=4, shots=2, queries=1)
        enc = init_encoder("linear", 4, 4, seed=12)
        nets = InferenceNets.init(4, seed=13)
        hyper = VpnHyper(lam=0.7, l_z=2)
        eps = draw_z_noise(2, 2, 4, rng_for(1, "t"))
        params = dict(enc.named_params()) | dict(nets.named_params())
        report = dm.grad_check(lambda: vpn_loss(ep, enc, nets, hyper, eps), params)
        assert report.passed, str(report)

    def test_loss_nonnegative_parts(self):
        rng = np.random.default_rng(7)
        ep = two_class_episode(rng, d=4)
        enc = init_encoder("linear", 4, 4, seed=14)
        nets = InferenceNets.init(4, seed=15)
        eps = draw_z_noise(2, 5, 4, rng_for(2, "t"))
        loss0 = vpn_loss(ep, enc, nets, VpnHyper(lam=0.0, l_z=5), eps).item()
        loss1 = vpn_loss(ep, enc, nets, VpnHyper(lam=2.0, l_z=5), eps).item()
        assert loss0 >= 0.0
        assert loss1 >= loss0  # KL adds a nonnegative amount

    def test_monte_carlo_error_scales_as_inverse_sqrt(self):
        rng = np.random.default_rng(8)
        ep = two_class_episode(rng, d=4, shots=2, queries=2, spread=0.8, gap=1.0)
        enc = init_encoder("linear", 4, 4, seed=16)
        nets = InferenceNets.init(4, seed=17)
        ls = [4, 16, 64, 256]
        ses = []
        for l in ls:
            vals = [
                vpn_loss(ep, enc, nets, VpnHyper(lam=0.0, l_z=l),
                         draw_z_noise(2, l, 4, rng_for(100 + rep, "mc", l)),).item()
                for rep in range(60)
            ]
            ses.append(np.std(vals, ddof=1))
        slope = np.polyfit(np.log(ls), np.log(ses), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)


class TestPredict:
    def test_zero_noise_single_sample_equals_classify(self):
        rng = np.random.default_rng(9)
        ep = two_class_episode(rng, d=4)
        enc = init_encoder("linear", 4, 4, seed=18)
        nets = InferenceNets.init(4, seed=19)
        probs, preds = predict_vpn(ep, enc, nets, 1, ZeroNoise())

        from sensemem.protonet import PrototypeSet, classify
        from sensemem.vpn import infer_posterior_z, pooled_support_features

        pooled = pooled_support_features(ep, enc)
        protos = PrototypeSet([infer_posterior_z(nets, p).mean for p in pooled])
        from sensemem.encoders import encode

        for i, (rec, _) in enumerate(ep.query):
            want = classify(encode(enc, rec), protos).value
            np.testing.assert_allclose(probs[i], want, atol=1e-12)
        assert all(p in (0, 1) for p in preds)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(10)
        ep = two_class_episode(rng, d=4)
        enc = init_encoder("linear", 4, 4, seed=20)
        nets = InferenceNets.init(4, seed=21)
        p1, _ = predict_vpn(ep, enc, nets, 8, rng_for(5, "pred"))
        p2, _ = predict_vpn(ep, enc, nets, 8, rng_for(5, "pred"))
        np.testing.assert_array_equal(p1, p2)

    def test_sample_count_convergence(self):
        rng = np.random.default_rng(11)
        ep = two_class_episode(rng, d=4, spread=0.6, gap=1.0)
        enc = init_encoder("linear", 4, 4, seed=22)
        nets = InferenceNets.init(4, seed=23)
        p10, _ = predict_vpn(ep, enc, nets, 10, rng_for(6, "pred"))
        p200, _ = predict_vpn(ep, enc, nets, 200, rng_for(7, "pred"))
        # estimate the per-sample std from an independent wide run
        reps = np.array([
            predict_vpn(ep, enc, nets, 1, rng_for(1000 + r, "pred"))[0] for r in range(100)
        ])
        per_sample_std = reps.std(axis=0, ddof=1)
        combined_se = per_sample_std * np.sqrt(1 / 10 + 1 / 200)
        assert np.all(np.abs(p10 - p200) <= 3 * combined_se + 1e-9)
