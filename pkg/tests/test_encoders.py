import numpy as np
import pytest

from sensemem import diffmath as dm
from sensemem.corpus import SentenceRecord
from sensemem.encoders import encode, init_encoder, mean_support_representation


def record_with(emb, target=0):
    emb = np.asarray(emb, dtype=float)
    return SentenceRecord(
        sentence_id="r0",
        word_id="w",
        sense_id="w/s0",
        target_index=target,
        tokens=[f"t{i}" for i in range(emb.shape[0])],
        embeddings=emb,
    )


class TestLinear:
    def test_identity_weights_return_raw_embedding(self):
        enc = init_encoder("linear", 4, 4, seed=0)
        enc.params["w"].value[:] = np.eye(4)
        enc.params["b"].value[:] = 0.0
        rec = record_with(np.arange(12.0).reshape(3, 4), target=2)
        np.testing.assert_array_equal(encode(enc, rec).value, rec.embeddings[2])

    def test_dim_mismatch(self):
        enc = init_encoder("linear", 4, 4, seed=0)
        with pytest.raises(dm.DimensionError):
            encode(enc, record_with(np.zeros((2, 3))))


class TestBiGru:
    def test_position_sensitive(self):
        rng = np.random.default_rng(1)
        enc = init_encoder("bigru_linear", 5, 6, seed=3)
        emb = rng.normal(size=(6, 5))
        rec = record_with(emb, target=2)
        base = encode(enc, rec).value
        permuted = emb.copy()
        permuted[[0, 4]] = permuted[[4, 0]]  # swap two non-target tokens
        rec2 = record_with(permuted, target=2)
        assert not np.allclose(encode(enc, rec2).value, base)

    def test_odd_rep_dim_rejected(self):
        with pytest.raises(ValueError):
            init_encoder("bigru_linear", 4, 5, seed=0)

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        rec = record_with(rng.normal(size=(4, 3)), target=1)
        a = encode(init_encoder("bigru_linear", 3, 4, seed=9), rec).value
        b = encode(init_encoder("bigru_linear", 3, 4, seed=9), rec).value
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("arch,act", [("linear", None), ("mlp", "elu"), ("bigru_linear", None)])
def test_scalar_head_gradient_matches_finite_differences(arch, act):
    rng = np.random.default_rng(5)
    enc = init_encoder(arch, 3, 4, seed=7, activation=act)
    rec = record_with(rng.normal(size=(4, 3)), target=1)
    probe = rng.normal(size=4)

    def objective():
        return dm.sum_(dm.mul(encode(enc, rec), probe))

    report = dm.grad_check(objective, dict(enc.named_params()), delta=1e-5, tol=1e-4)
    assert report.passed, str(report)


class TestMeanSupport:
    def test_single_vector(self):
        v = dm.constant([1.0, 2.0])
        np.testing.assert_array_equal(mean_support_representation([v]).value, [1.0, 2.0])

    def test_midpoint(self):
        a, b = dm.constant([1.0, 0.0]), dm.constant([0.0, 1.0])
        np.testing.assert_array_equal(mean_support_representation([a, b]).value, [0.5, 0.5])

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        vecs = [dm.constant(rng.normal(size=6)) for _ in range(5)]
        base = mean_support_representation(vecs).value
        for _ in range(10):
            perm = rng.permutation(5)
            np.testing.assert_allclose(
                mean_support_representation([vecs[i] for i in perm]).value, base, atol=1e-12
            )

    def test_empty_rejected(self):
        with pytest.raises(dm.DimensionError):
            mean_support_representation([])


def test_paper_profile_dims_available():
    # shared-layer sizes for the three architectures
    for arch, d in (("bigru_linear", 64), ("mlp", 256), ("linear", 192)):
        enc = init_encoder(arch, 8, d, seed=0)
        assert enc.rep_dim == d
