"""Variational prototype network: probabilistic class prototypes.

Each class's prototype is a diagonal Gaussian inferred amortized from
its pooled support feature; a query-conditioned prior regularizes it.
The objective is the mean over queries of the Monte Carlo cross-entropy
under sampled prototypes plus a weighted KL(posterior || prior),
recomputed per query because the prior depends on the query.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .encoders import EncoderParams, mean_support_representation
from .episodes import Episode
from .protonet import group_reps_by_class
from .seeding import rng_for

LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class GaussianHeadNet:
    """Three-layer feed-forward net emitting a diagonal Gaussian.

    ELU hidden activations, linear output of width 2*out_dim split into
    mean and log-variance; the log-variance is clamped to a safe range.
    """

    name: str
    in_dim: int
    hidden_dim: int
    out_dim: int
    params: dict[str, dm.Node] = field(default_factory=dict)

    @classmethod
    def init(cls, name: str, in_dim: int, hidden_dim: int, out_dim: int, seed: int):
        from .encoders import glorot_uniform

        rng = rng_for(seed, "init", name)
        p = {
            "w1": dm.param(glorot_uniform(rng, hidden_dim, in_dim)),
            "b1": dm.param(np.zeros(hidden_dim)),
            "w2": dm.param(glorot_uniform(rng, hidden_dim, hidden_dim)),
            "b2": dm.param(np.zeros(hidden_dim)),
            "w3": dm.param(glorot_uniform(rng, 2 * out_dim, hidden_dim)),
            "b3": dm.param(np.zeros(2 * out_dim)),
        }
        return cls(name=name, in_dim=in_dim, hidden_dim=hidden_dim, out_dim=out_dim, params=p)

    def named_params(self) -> list[tuple[str, dm.Node]]:
        return [(f"{self.name}.{k}", v) for k, v in self.params.items()]

    def __call__(self, x: dm.Node) -> dm.GaussianDiag:
        """Map (in_dim,) or (B, in_dim) inputs to a (batched) Gaussian."""
        if x.shape[-1] != self.in_dim:
            raise dm.DimensionError(
                f"{self.name}: input dim {x.shape[-1]} != expected {self.in_dim}"
            )
        p = self.params
        h1 = dm.elu(_affine(x, p["w1"], p["b1"]))
        h2 = dm.elu(_affine(h1, p["w2"], p["b2"]))
        out = _affine(h2, p["w3"], p["b3"])
        if out.value.ndim == 1:
            mean, log_var = out[: self.out_dim], out[self.out_dim :]
        else:
            mean = out[(slice(None), slice(0, self.out_dim))]
            log_var = out[(slice(None), slice(self.out_dim, 2 * self.out_dim))]
        return dm.GaussianDiag(mean, dm.clamp(log_var, *LOG_VAR_RANGE))


def _affine(x: dm.Node, w: dm.Node, b: dm.Node) -> dm.Node:
    if x.value.ndim == 1:
        return dm.matmul(w, x) + b
    return dm.matmul(x, dm.transpose(w)) + b


@dataclass
class InferenceNets:
    """Amortized posterior and prior networks over the prototype."""

    posterior: GaussianHeadNet  # pooled support feature [+ memory sample] -> z
    prior: GaussianHeadNet  # query representation -> z

    @classmethod
    def init(cls, rep_dim: int, seed: int, with_memory: bool = False):
        in_post = 2 * rep_dim if with_memory else rep_dim
        return cls(
            posterior=GaussianHeadNet.init("g_phi_post", in_post, rep_dim, rep_dim, seed),
            prior=GaussianHeadNet.init("g_phi_prior", rep_dim, rep_dim, rep_dim, seed),
        )

    def named_params(self) -> list[tuple[str, dm.Node]]:
        return self.posterior.named_params() + self.prior.named_params()


@dataclass(frozen=True)
class VpnHyper:
    lam: float = 1e-3
    l_z: int = 10

    def __post_init__(self):
        if self.lam < 0 or self.l_z < 1:
            raise ValueError("lam must be >= 0 and l_z >= 1")


def infer_posterior_z(
    nets: InferenceNets, pooled: dm.Node, m: dm.Node | None = None
) -> dm.GaussianDiag:
    """Posterior over a class prototype from its pooled support feature,
    optionally conditioned on a memory sample."""
    x = pooled if m is None else dm.concat([pooled, m])
    return nets.posterior(x)


def infer_prior_z(nets: InferenceNets, query_rep: dm.Node) -> dm.GaussianDiag:
    """Query-conditioned prior over the prototype."""
    return nets.prior(query_rep)


def draw_z_noise(num_classes: int, l_z: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((num_classes, l_z, dim))


def pooled_support_features(episode: Episode, enc: EncoderParams) -> list[dm.Node]:
    """Per-class mean encoder output over the support set."""
    return [mean_support_representation(g) for g in group_reps_by_class(episode, enc, "support")]


def _query_cross_entropy(query_rep: dm.Node, samples: list[dm.Node], label: int) -> dm.Node:
    """-log p(label | query, sampled prototypes), averaged over samples.

    ``samples[c]`` holds class c's prototype draws as an (L, d) block;
    the average runs over the L sample index.
    """
    rows = []
    for z in samples:
        diff = dm.sub(query_rep, z)  # (L, d) via broadcast
        rows.append(dm.reshape(dm.neg(dm.sum_(dm.square(diff), axis=-1)), (1, -1)))
    nd = dm.concat(rows, axis=0)  # (K, L)
    lse = dm.logsumexp(nd, axis=0)  # (L,)
    return dm.mean_(dm.sub(lse, nd[label]))


def vpn_loss(
    episode: Episode,
    enc: EncoderParams,
    nets: InferenceNets,
    hyper: VpnHyper,
    eps_z: np.ndarray,
) -> dm.Node:
    """Mean over queries of MC cross-entropy + lam * sum-over-classes KL.

    ``eps_z`` has shape (num_classes, l_z, rep_dim) and is the frozen
    standard-normal noise for the prototype draws.
    """
    k, d = episode.num_classes, enc.rep_dim
    if eps_z.shape != (k, hyper.l_z, d):
        raise dm.DimensionError(
            f"noise shape {eps_z.shape} != ({k}, {hyper.l_z}, {d})"
        )
    pooled = pooled_support_features(episode, enc)
    posteriors = [infer_posterior_z(nets, pooled[c]) for c in range(k)]
    samples = [dm.sample_gaussian(posteriors[c], eps_z[c]) for c in range(k)]

    from .encoders import encode

    per_query = []
    for rec, label in episode.query:
        x = encode(enc, rec)
        ce = _query_cross_entropy(x, samples, label)
        prior = infer_prior_z(nets, x)
        kl = dm.pack([dm.kl_diag_gauss(posteriors[c], prior) for c in range(k)])
        per_query.append(ce + dm.mul(dm.sum_(kl), hyper.lam))
    return dm.mean_(dm.pack(per_query))


def predict_vpn(
    episode: Episode,
    enc: EncoderParams,
    nets: InferenceNets,
    l_z: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[int]]:
    """Query distributions as the mean of sampled-prototype softmaxes.

    Returns (probabilities of shape (|Q|, K), argmax predictions).
    """
    from .encoders import encode

    k, d = episode.num_classes, enc.rep_dim
    eps_z = draw_z_noise(k, l_z, d, rng)
    pooled = pooled_support_features(episode, enc)
    samples = [
        dm.sample_gaussian(infer_posterior_z(nets, pooled[c]), eps_z[c]) for c in range(k)
    ]
    probs = np.zeros((len(episode.query), k))
    for i, (rec, _) in enumerate(episode.query):
        x = encode(enc, rec)
        rows = []
        for z in samples:
            diff = dm.sub(x, z)
            rows.append(dm.reshape(dm.neg(dm.sum_(dm.square(diff), axis=-1)), (1, -1)))
        nd = dm.concat(rows, axis=0)  # (K, L)
        probs[i] = dm.softmax(nd, axis=0).value.mean(axis=1)
    preds = [int(np.argmax(p)) for p in probs]
    return probs, preds
