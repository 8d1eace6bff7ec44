"""Variational semantic memory: slot store, stochastic recall, and
rule-based consolidation.

Meta-training recalls a latent memory variable per class by attending
over slot contents, mixes slot-conditioned Gaussians into an empirical
posterior, and conditions the prototype posterior on sampled memory.
After each optimizer step the slots are updated by a convex combination
with a graph-attention aggregate of the episode's class features, gated
by beta (fixed, or emitted by a small hypernetwork), then norm-clipped.
Slots are storage, not parameters: no gradients flow into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .encoders import EncoderParams, encode, glorot_uniform
from .episodes import Episode
from .seeding import rng_for
from .vpn import GaussianHeadNet, InferenceNets, pooled_support_features

LEAKY_SLOPE = 0.2


class AddressingError(KeyError):
    """A sense_id has no slot in this memory."""


class RecallUnavailable(RuntimeError):
    """No occupied slots; callers fall back to the prior path."""


# ---------------------------------------------------------------------------
# slot store


class MemoryStore:
    """One slot per meta-train sense; rows are kept at L2 norm <= 1."""

    def __init__(self, sense_ids: list[str], dim: int):
        self.slot_index = {s: i for i, s in enumerate(sorted(set(sense_ids)))}
        self.slots = np.zeros((len(self.slot_index), dim))
        self.occupancy = np.zeros(len(self.slot_index), dtype=bool)

    @property
    def dim(self) -> int:
        return self.slots.shape[1]

    @property
    def num_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def occupied_rows(self) -> np.ndarray:
        return np.flatnonzero(self.occupancy)

    def row_of(self, sense_id: str) -> int:
        try:
            return self.slot_index[sense_id]
        except KeyError:
            raise AddressingError(f"sense {sense_id!r} has no memory slot") from None

    def update(self, sense_id: str, m_bar: np.ndarray, beta: float) -> None:
        """Convex-combine the slot with ``m_bar`` at weight beta, then
        clip to unit norm. The first write for a sense skips the convex
        step so an empty slot cannot drag the content toward zero.
        """
        row = self.row_of(sense_id)
        m_bar = np.asarray(m_bar, dtype=float)
        if m_bar.shape != (self.dim,):
            raise dm.DimensionError(f"update vector shape {m_bar.shape} != ({self.dim},)")
        if self.occupancy[row]:
            if not 0.0 < beta < 1.0:
                raise ValueError(f"beta must lie in (0,1), got {beta}")
            combined = beta * self.slots[row] + (1.0 - beta) * m_bar
        else:
            combined = m_bar
        self.slots[row] = combined / max(1.0, float(np.linalg.norm(combined)))
        self.occupancy[row] = True

    def state_dict(self) -> dict:
        return {
            "sense_ids": sorted(self.slot_index, key=self.slot_index.get),
            "slots": self.slots.tolist(),
            "occupancy": self.occupancy.tolist(),
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "MemoryStore":
        store = cls(state["sense_ids"], len(state["slots"][0]) if state["slots"] else 0)
        store.slots = np.asarray(state["slots"], dtype=float)
        store.occupancy = np.asarray(state["occupancy"], dtype=bool)
        return store

    def export_jsonl(self) -> str:
        """Standalone inspection dump, one slot per line."""
        import json

        lines = []
        for sense, row in sorted(self.slot_index.items(), key=lambda kv: kv[1]):
            lines.append(
                json.dumps(
                    {
                        "sense_id": sense,
                        "row": row,
                        "occupied": bool(self.occupancy[row]),
                        "value": self.slots[row].tolist(),
                    },
                    sort_keys=True,
                )
            )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# recall


def recall_attention(store: MemoryStore, pooled: dm.Node) -> tuple[dm.Node, np.ndarray]:
    """Attention over occupied slots by dot product with the pooled
    support feature. Returns (weights over occupied slots, their row
    indices); unoccupied slots are masked out before the softmax and so
    receive weight exactly zero.
    """
    occ = store.occupied_rows
    if occ.size == 0:
        raise RecallUnavailable("memory has no occupied slots")
    if store.dim != pooled.shape[-1]:
        raise dm.DimensionError(f"slot dim {store.dim} != feature dim {pooled.shape[-1]}")
    scores = dm.matmul(dm.constant(store.slots[occ]), pooled)
    return dm.softmax(scores), occ


def full_gamma(store: MemoryStore, gamma: dm.Node, occ: np.ndarray) -> np.ndarray:
    """Expand occupied-slot weights to all slots (zeros elsewhere)."""
    out = np.zeros(store.num_slots)
    out[occ] = gamma.value
    return out


@dataclass
class MemoryNets:
    """Amortized networks producing memory distributions."""

    post: GaussianHeadNet  # slot row -> p(m | M_a)
    prior: GaussianHeadNet  # pooled support feature -> p(m | S)

    @classmethod
    def init(cls, rep_dim: int, seed: int):
        return cls(
            post=GaussianHeadNet.init("g_psi_post", rep_dim, rep_dim, rep_dim, seed),
            prior=GaussianHeadNet.init("g_psi_prior", rep_dim, rep_dim, rep_dim, seed),
        )

    def named_params(self) -> list[tuple[str, dm.Node]]:
        return self.post.named_params() + self.prior.named_params()


@dataclass
class MemoryPosterior:
    """Mixture posterior over the latent memory for one class."""

    gamma: dm.Node  # (A,) weights over occupied slots
    components: dm.GaussianDiag  # batched (A, d)
    samples: dm.Node  # (L_m, d) reparameterized draws
    component_choices: list[int]

    def log_density(self, x: dm.Node) -> dm.Node:
        """Exact mixture log density of each row of ``x`` (L, d) -> (L,)."""
        l = x.shape[0]
        xs = dm.reshape(x, (l, 1, x.shape[-1]))
        comp_ll = dm.gaussian_log_density(xs, self.components)  # (L, A)
        return dm.logsumexp(dm.add(comp_ll, dm.log(self.gamma)), axis=-1)


def memory_posterior(
    store: MemoryStore,
    gamma: dm.Node,
    occ: np.ndarray,
    g_psi_post: GaussianHeadNet,
    eps_m: np.ndarray,
    comp_u: np.ndarray,
) -> MemoryPosterior:
    """Mixture of slot-conditioned Gaussians with L_m ancestral draws.

    Each draw picks a component from the attention weights using the
    uniform ``comp_u[l]``, then reparameterizes within it with
    ``eps_m[l]``. The component choice is a fixed decision given the
    noise; gamma stays in the graph through the mixture density.
    """
    components = g_psi_post(dm.constant(store.slots[occ]))
    cum = np.cumsum(gamma.value)
    rows = []
    choices = []
    for l in range(eps_m.shape[0]):
        k = int(np.searchsorted(cum, comp_u[l] * cum[-1]))
        k = min(k, occ.size - 1)
        choices.append(k)
        comp = components.map_batch(k)
        rows.append(dm.reshape(dm.sample_gaussian(comp, eps_m[l]), (1, -1)))
    return MemoryPosterior(
        gamma=gamma,
        components=components,
        samples=dm.concat(rows, axis=0),
        component_choices=choices,
    )


def memory_prior(g_psi_prior: GaussianHeadNet, pooled: dm.Node) -> dm.GaussianDiag:
    """Support-conditioned prior over the latent memory."""
    return g_psi_prior(pooled)


def meta_test_memory_path(
    g_psi_prior: GaussianHeadNet, pooled: dm.Node, eps_m: np.ndarray
) -> dm.Node:
    """Memory samples for a word with no slot: draw from the prior branch."""
    return dm.sample_gaussian(memory_prior(g_psi_prior, pooled), eps_m)


def posterior_z_given_memory(
    nets: InferenceNets, pooled: dm.Node, m_samples: dm.Node
) -> dm.GaussianDiag:
    """Prototype posterior conditioned on each memory sample.

    Returns a batched Gaussian with one component per row of
    ``m_samples``; downstream terms average over that axis.
    """
    l_m = m_samples.shape[0]
    d = pooled.shape[-1]
    tiled = dm.mul(dm.constant(np.ones((l_m, 1))), dm.reshape(pooled, (1, d)))
    return nets.posterior(dm.concat([tiled, m_samples], axis=1))


# ---------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class VsmHyper:
    lambda_z: float = 1e-3
    lambda_m: float = 1e-4
    l_z: int = 10
    l_m: int = 5

    def __post_init__(self):
        if self.lambda_z < 0 or self.lambda_m < 0:
            raise ValueError("KL weights must be >= 0")
        if self.l_z < 1 or self.l_m < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass
class VsmNoise:
    """Frozen noise for one episode's objective."""

    eps_m: np.ndarray  # (K, L_m, d)
    comp_u: np.ndarray  # (K, L_m) uniforms for component choice
    eps_z: np.ndarray  # (K, L_m, L_z, d)


def draw_vsm_noise(
    num_classes: int, l_m: int, l_z: int, dim: int, rng: np.random.Generator
) -> VsmNoise:
    return VsmNoise(
        eps_m=rng.standard_normal((num_classes, l_m, dim)),
        comp_u=rng.uniform(size=(num_classes, l_m)),
        eps_z=rng.standard_normal((num_classes, l_m, l_z, dim)),
    )


@dataclass
class VsmForward:
    loss: dm.Node
    class_features: dict[str, list[np.ndarray]] | None = None


def vsm_forward(
    episode: Episode,
    store: MemoryStore | None,
    enc: EncoderParams,
    nets: InferenceNets,
    memnets: MemoryNets,
    hyper: VsmHyper,
    noise: VsmNoise,
    collect_features: bool = False,
) -> VsmForward:
    """Loss summed over query items, plus optionally the detached
    per-sense features (support and query) used for memory updates."""
    k, d = episode.num_classes, enc.rep_dim
    if noise.eps_z.shape != (k, hyper.l_m, hyper.l_z, d):
        raise dm.DimensionError(
            f"eps_z shape {noise.eps_z.shape} != ({k}, {hyper.l_m}, {hyper.l_z}, {d})"
        )

    support_reps = [(encode(enc, rec), label) for rec, label in episode.support]
    from .encoders import mean_support_representation

    pooled = []
    for c in range(k):
        group = [r for r, label in support_reps if label == c]
        pooled.append(mean_support_representation(group))

    z_posts: list[dm.GaussianDiag] = []
    kl_m_terms: list[dm.Node] = []
    for c in range(k):
        prior_m = memory_prior(memnets.prior, pooled[c])
        recalled = None
        if store is not None:
            try:
                gamma, occ = recall_attention(store, pooled[c])
                recalled = memory_posterior(
                    store, gamma, occ, memnets.post, noise.eps_m[c], noise.comp_u[c]
                )
            except RecallUnavailable:
                recalled = None
        if recalled is None:
            m_samples = dm.sample_gaussian(prior_m, noise.eps_m[c])
            kl_m = dm.constant(0.0)
        else:
            m_samples = recalled.samples
            log_q = recalled.log_density(m_samples)
            log_p = dm.gaussian_log_density(m_samples, prior_m)
            kl_m = dm.mean_(dm.sub(log_q, log_p))
        kl_m_terms.append(kl_m)
        z_posts.append(posterior_z_given_memory(nets, pooled[c], m_samples))

    # prototype draws: (L_m, L_z, d) per class
    samples = []
    for c in range(k):
        mean = dm.reshape(z_posts[c].mean, (hyper.l_m, 1, d))
        log_var = dm.reshape(z_posts[c].log_var, (hyper.l_m, 1, d))
        samples.append(dm.sample_gaussian(dm.GaussianDiag(mean, log_var), noise.eps_z[c]))

    kl_m_total = dm.sum_(dm.pack(kl_m_terms))
    per_query = []
    query_reps = []
    for rec, label in episode.query:
        x = encode(enc, rec)
        query_reps.append((x, label))
        rows = []
        for c in range(k):
            diff = dm.sub(x, samples[c])  # (L_m, L_z, d)
            nd = dm.neg(dm.sum_(dm.square(diff), axis=-1))  # (L_m, L_z)
            rows.append(dm.reshape(nd, (1, hyper.l_m, hyper.l_z)))
        nd_all = dm.concat(rows, axis=0)  # (K, L_m, L_z)
        lse = dm.logsumexp(nd_all, axis=0)  # (L_m, L_z)
        ce = dm.mean_(dm.reshape(dm.sub(lse, nd_all[label]), (-1,)))

        prior_z = nets.prior(x)
        kl_z = dm.pack([dm.mean_(dm.kl_diag_gauss(z_posts[c], prior_z)) for c in range(k)])
        per_query.append(
            ce + dm.mul(dm.sum_(kl_z), hyper.lambda_z) + dm.mul(kl_m_total, hyper.lambda_m)
        )
    loss = dm.sum_(dm.pack(per_query))

    features = None
    if collect_features:
        features = {}
        for reps, items in ((support_reps, episode.support), (query_reps, episode.query)):
            for (rep, label), (rec, _) in zip(reps, items):
                features.setdefault(episode.classes[label], []).append(rep.value.copy())
    return VsmForward(loss=loss, class_features=features)


def vsm_loss(
    episode: Episode,
    store: MemoryStore | None,
    enc: EncoderParams,
    nets: InferenceNets,
    memnets: MemoryNets,
    hyper: VsmHyper,
    noise: VsmNoise,
) -> dm.Node:
    """Sum over queries of MC cross-entropy + lambda_z KL over prototypes
    + lambda_m KL of the recalled memory mixture against its prior."""
    return vsm_forward(episode, store, enc, nets, memnets, hyper, noise).loss


# ---------------------------------------------------------------------------
# update machinery (rule-based, gradient-free)


@dataclass
class UpdateCandidate:
    """Graph-attention aggregate of one class's features."""

    m_bar: np.ndarray
    alpha: np.ndarray
    num_nodes: int


@dataclass
class GraphAttention:
    """Single-head additive attention from the slot anchor to all nodes."""

    w: np.ndarray  # (d, d) score transform
    a: np.ndarray  # (2d,) score vector
    w_v: np.ndarray  # (d, d) value transform

    @classmethod
    def init(cls, rep_dim: int, seed: int):
        rng = rng_for(seed, "init", "graph_attention")
        return cls(
            w=glorot_uniform(rng, rep_dim, rep_dim),
            a=rng.uniform(-1, 1, size=2 * rep_dim) * np.sqrt(3.0 / rep_dim),
            w_v=glorot_uniform(rng, rep_dim, rep_dim),
        )

    def state_dict(self) -> dict:
        return {"w": self.w.tolist(), "a": self.a.tolist(), "w_v": self.w_v.tolist()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "GraphAttention":
        return cls(
            w=np.asarray(state["w"], dtype=float),
            a=np.asarray(state["a"], dtype=float),
            w_v=np.asarray(state["w_v"], dtype=float),
        )


def graph_attention_aggregate(
    ga: GraphAttention, slot_value: np.ndarray, class_features: list[np.ndarray]
) -> UpdateCandidate:
    """Aggregate {slot, class features} into an update candidate.

    Scores are leaky-rectified additive attention from the anchor node
    (the current slot content) to every node including itself; the
    candidate is the alpha-weighted sum of value-transformed nodes.
    """
    nodes = np.asarray([slot_value] + list(class_features), dtype=float)
    if nodes.ndim != 2:
        raise dm.DimensionError("all nodes must share the slot dimension")
    proj = nodes @ ga.w.T  # (n, d)
    anchor = proj[0]
    pre = np.concatenate(
        [np.broadcast_to(anchor, proj.shape), proj], axis=1
    ) @ ga.a  # (n,)
    scores = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    shifted = np.exp(scores - scores.max())
    alpha = shifted / shifted.sum()
    m_bar = alpha @ (nodes @ ga.w_v.T)
    return UpdateCandidate(m_bar=m_bar, alpha=alpha, num_nodes=len(nodes))


class ConstantBeta:
    """Fixed update gate; the ablation counterpart of the hypernetwork."""

    def __init__(self, value: float):
        if not 0.0 < value < 1.0:
            raise ValueError(f"beta must lie in (0,1), got {value}")
        self.value = float(value)

    def __call__(self, m_bar: np.ndarray) -> float:
        return self.value

    def state_dict(self) -> dict:
        return {"kind": "constant", "value": self.value}


class BetaNet:
    """Three-layer hypernetwork mapping an update candidate to a gate in
    (0,1): ReLU hidden layers, sigmoid scalar output."""

    def __init__(self, w1, b1, w2, b2, w3, b3):
        self.w1, self.b1 = np.asarray(w1, float), np.asarray(b1, float)
        self.w2, self.b2 = np.asarray(w2, float), np.asarray(b2, float)
        self.w3, self.b3 = np.asarray(w3, float), float(b3)

    @classmethod
    def init(cls, rep_dim: int, seed: int):
        rng = rng_for(seed, "init", "f_beta")
        return cls(
            w1=glorot_uniform(rng, rep_dim, rep_dim),
            b1=np.zeros(rep_dim),
            w2=glorot_uniform(rng, rep_dim, rep_dim),
            b2=np.zeros(rep_dim),
            w3=glorot_uniform(rng, 1, rep_dim)[0],
            b3=0.0,
        )

    def __call__(self, m_bar: np.ndarray) -> float:
        h1 = np.maximum(0.0, self.w1 @ m_bar + self.b1)
        h2 = np.maximum(0.0, self.w2 @ h1 + self.b2)
        return float(1.0 / (1.0 + np.exp(-(self.w3 @ h2 + self.b3))))

    def state_dict(self) -> dict:
        return {
            "kind": "net",
            "w1": self.w1.tolist(),
            "b1": self.b1.tolist(),
            "w2": self.w2.tolist(),
            "b2": self.b2.tolist(),
            "w3": self.w3.tolist(),
            "b3": self.b3,
        }


def beta_fn_from_state(state: dict):
    if state["kind"] == "constant":
        return ConstantBeta(state["value"])
    return BetaNet(state["w1"], state["b1"], state["w2"], state["b2"], state["w3"], state["b3"])


def adaptive_beta(f_beta, m_bar: np.ndarray) -> float:
    """Gate for one memory update; always strictly inside (0,1)."""
    beta = float(f_beta(np.asarray(m_bar, dtype=float)))
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta function produced {beta}, outside (0,1)")
    return beta


def commit_memory_updates(
    store: MemoryStore,
    ga: GraphAttention,
    f_beta,
    class_features: dict[str, list[np.ndarray]],
) -> None:
    """Apply the update rule for every sense seen in a batch."""
    for sense_id in sorted(class_features):
        row = store.row_of(sense_id)
        cand = graph_attention_aggregate(ga, store.slots[row], class_features[sense_id])
        store.update(sense_id, cand.m_bar, adaptive_beta(f_beta, cand.m_bar))


# ---------------------------------------------------------------------------
# meta-test prediction


def predict_vsm(
    episode: Episode,
    enc: EncoderParams,
    nets: InferenceNets,
    memnets: MemoryNets,
    l_z: int,
    l_m: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[int]]:
    """Predict unseen-word queries via the prior-branch memory path.

    Per class: sample memory from the support-conditioned prior, infer
    the prototype posterior per sample, then average softmaxes over all
    (l_m x l_z) prototype draws.
    """
    k, d = episode.num_classes, enc.rep_dim
    eps_m = rng.standard_normal((k, l_m, d))
    eps_z = rng.standard_normal((k, l_m, l_z, d))
    pooled = pooled_support_features(episode, enc)
    samples = []
    for c in range(k):
        m = meta_test_memory_path(memnets.prior, pooled[c], eps_m[c])
        zpost = posterior_z_given_memory(nets, pooled[c], m)
        mean = dm.reshape(zpost.mean, (l_m, 1, d))
        log_var = dm.reshape(zpost.log_var, (l_m, 1, d))
        samples.append(dm.sample_gaussian(dm.GaussianDiag(mean, log_var), eps_z[c]))
    probs = np.zeros((len(episode.query), k))
    for i, (rec, _) in enumerate(episode.query):
        x = encode(enc, rec)
        rows = []
        for c in range(k):
            nd = dm.neg(dm.sum_(dm.square(dm.sub(x, samples[c])), axis=-1))
            rows.append(dm.reshape(nd, (1, l_m, l_z)))
        nd_all = dm.concat(rows, axis=0)
        soft = dm.softmax(nd_all, axis=0).value  # (K, L_m, L_z)
        probs[i] = soft.reshape(k, -1).mean(axis=1)
    preds = [int(np.argmax(p)) for p in probs]
    return probs, preds
