"""Experiment harness: configs, training, evaluation, and persistence.

One ``RunConfig`` fully determines a run: corpus source, model variant,
hyperparameters, and seeds. Training streams sampled episode batches,
takes one Adam step per batch (summing task losses), commits memory
updates for the memory variants, and keeps the checkpoint that scores
best on meta-validation. Every stochastic choice is keyed by
(seed, purpose, counter) so runs replay exactly and resume mid-stream.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffmath as dm
from .corpus import Corpus, SynthSpec, load_corpus, split_corpus, synth_corpus
from .encoders import ARCHS, EncoderParams, init_encoder
from .episodes import (
    Episode,
    SamplerConfig,
    build_meta_test_episodes,
    dump_episode,
    sample_meta_train_episode,
)
from .protonet import (
    PrototypeSet,
    classify,
    compute_prototypes,
    group_reps_by_class,
    majority_sense,
    nearest_neighbor,
    protonet_loss,
)
from .seeding import rng_for
from .vpn import InferenceNets, VpnHyper, draw_z_noise, infer_posterior_z, pooled_support_features, predict_vpn, vpn_loss
from .vsm import (
    BetaNet,
    ConstantBeta,
    GraphAttention,
    MemoryNets,
    MemoryStore,
    VsmHyper,
    beta_fn_from_state,
    commit_memory_updates,
    draw_vsm_noise,
    memory_prior,
    meta_test_memory_path,
    posterior_z_given_memory,
    predict_vsm,
    vsm_forward,
)

MODELS = ("protonet", "ef_protonet", "vpn", "vsm", "beta_vsm", "nearest_neighbor", "majority")
TRAINED_MODELS = ("protonet", "vpn", "vsm", "beta_vsm")
VARIATIONAL_MODELS = ("vpn", "vsm", "beta_vsm")

CHECKPOINT_MAGIC = "SENSEMEM-CKPT"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """RunConfig is inconsistent or incomplete."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries an episode dump."""

    def __init__(self, message: str, episode_dump: str = ""):
        super().__init__(message)
        self.episode_dump = episode_dump


class CheckpointError(RuntimeError):
    """Checkpoint file is damaged or incompatible."""


class UnsupportedModelError(RuntimeError):
    """Operation not defined for this model variant."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one experiment."""

    model: str = "protonet"
    encoder_arch: str = "linear"
    activation: str | None = None
    embed_dim: int = 16
    rep_dim: int = 16
    distance: str = "sq_euclidean"
    support_size: int = 8
    senses_per_word: int = 2
    words_per_episode: int = 2
    lambda_z: float = 1e-3
    lambda_m: float = 1e-4
    l_z: int = 10
    l_m: int = 5
    eval_l_z: int | None = None
    eval_l_m: int | None = None
    fixed_beta: float = 0.5
    learning_rate: float = 1e-3
    batch_size: int = 16
    episode_count: int = 10_000
    eval_every: int = 500
    ef_finetune_steps: int = 0
    seeds: tuple[int, ...] = (0,)
    synth: dict | None = None
    corpus_meta: str | None = None
    corpus_blob: str | None = None
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0

    def __post_init__(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.encoder_arch not in ARCHS:
            raise ConfigError(f"unknown encoder {self.encoder_arch!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.model in ("vsm",) and not 0.0 < self.fixed_beta < 1.0:
            raise ConfigError("vsm requires fixed_beta in (0,1)")
        if self.synth is None and not (self.corpus_meta and self.corpus_blob):
            raise ConfigError("either synth or corpus_meta+corpus_blob must be set")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        if "split_fractions" in d:
            d["split_fractions"] = tuple(d["split_fractions"])
        return cls(**d)


# Per-architecture training settings for the benchmark regimes, keyed by
# (encoder_arch, support_size): learning rate, KL weights, sample counts,
# shared-layer width. Batch size is 16 tasks throughout.
PAPER_PROFILES: dict[tuple[str, int], dict] = {}
for _s, _lr, _lz, _lm, _nz, _nm in (
    (4, 1e-5, 1e-3, 1e-4, 200, 150),
    (8, 1e-5, 1e-3, 1e-4, 200, 150),
    (16, 1e-4, 1e-4, 1e-3, 150, 150),
    (32, 1e-4, 1e-3, 1e-3, 150, 150),
):
    PAPER_PROFILES[("bigru_linear", _s)] = dict(
        learning_rate=_lr, lambda_z=_lz, lambda_m=_lm, l_z=_nz, l_m=_nm, rep_dim=64, batch_size=16
    )
for _s, _lr, _lz, _lm, _nz, _nm in (
    (4, 1e-5, 1e-4, 1e-4, 200, 150),
    (8, 1e-5, 1e-4, 1e-4, 200, 150),
    (16, 1e-4, 1e-3, 1e-3, 150, 150),
    (32, 1e-4, 1e-3, 1e-3, 150, 150),
):
    PAPER_PROFILES[("mlp", _s)] = dict(
        learning_rate=_lr, lambda_z=_lz, lambda_m=_lm, l_z=_nz, l_m=_nm, rep_dim=256, batch_size=16
    )
for _s, _lr, _lz, _lm, _nz, _nm in (
    (4, 5e-6, 1e-3, 1e-4, 200, 200),
    (8, 5e-6, 1e-3, 1e-4, 200, 200),
    (16, 1e-6, 1e-4, 1e-4, 150, 150),
    (32, 1e-4, 1e-3, 1e-4, 150, 100),
):
    PAPER_PROFILES[("linear", _s)] = dict(
        learning_rate=_lr, lambda_z=_lz, lambda_m=_lm, l_z=_nz, l_m=_nm, rep_dim=192, batch_size=16
    )


def paper_profile(encoder_arch: str, support_size: int) -> dict:
    """Published hyperparameter set for one encoder/support-size regime."""
    try:
        return dict(PAPER_PROFILES[(encoder_arch, support_size)])
    except KeyError:
        raise ConfigError(f"no profile for ({encoder_arch}, |S|={support_size})") from None


def apply_paper_profile(cfg: RunConfig) -> RunConfig:
    return replace(cfg, **paper_profile(cfg.encoder_arch, cfg.support_size))


# ---------------------------------------------------------------------------
# corpus plumbing


@dataclass
class CorpusBundle:
    train: Corpus
    validation: Corpus
    test: Corpus


def prepare_corpus(cfg: RunConfig) -> CorpusBundle:
    if cfg.synth is not None:
        corpus = synth_corpus(SynthSpec(**cfg.synth))
    else:
        corpus = load_corpus(cfg.corpus_meta, cfg.corpus_blob)
    tr, va, te = split_corpus(corpus, cfg.split_fractions, seed=cfg.split_seed)
    return CorpusBundle(train=tr, validation=va, test=te)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class SenseModel:
    cfg: RunConfig
    encoder: EncoderParams | None = None
    nets: InferenceNets | None = None
    memnets: MemoryNets | None = None
    graph_attn: GraphAttention | None = None
    beta_fn: object | None = None
    memory: MemoryStore | None = None

    def trainable_params(self) -> list[tuple[str, dm.Node]]:
        out: list[tuple[str, dm.Node]] = []
        if self.encoder is not None:
            out.extend(self.encoder.named_params())
        if self.nets is not None:
            out.extend(self.nets.named_params())
        if self.memnets is not None:
            out.extend(self.memnets.named_params())
        return out

    def state_dict(self) -> dict:
        def params_to_lists(pairs):
            return {name: node.value.tolist() for name, node in pairs}

        state: dict = {"model": self.cfg.model}
        if self.encoder is not None:
            state["params"] = params_to_lists(self.trainable_params())
        if self.graph_attn is not None:
            state["graph_attn"] = self.graph_attn.state_dict()
        if self.beta_fn is not None:
            state["beta"] = self.beta_fn.state_dict()
        if self.memory is not None:
            state["memory"] = self.memory.state_dict()
        return state

    def load_state_dict(self, state: dict) -> None:
        if "params" in state:
            byname = dict(self.trainable_params())
            if set(byname) != set(state["params"]):
                raise CheckpointError("parameter names do not match this config")
            for name, values in state["params"].items():
                arr = np.asarray(values, dtype=float)
                if arr.shape != byname[name].value.shape:
                    raise CheckpointError(f"shape mismatch for {name}")
                byname[name].value[:] = arr
        if self.graph_attn is not None and "graph_attn" in state:
            self.graph_attn = GraphAttention.from_state_dict(state["graph_attn"])
        if "beta" in state and state["beta"] is not None:
            self.beta_fn = beta_fn_from_state(state["beta"])
        if self.memory is not None and "memory" in state:
            self.memory = MemoryStore.from_state_dict(state["memory"])


def build_model(cfg: RunConfig, seed: int, memory_senses: list[str] | None = None) -> SenseModel:
    """Instantiate a model variant with per-component seed streams, so the
    presence of one component never shifts another's initialization."""
    model = SenseModel(cfg=cfg)
    if cfg.model in ("majority", "nearest_neighbor"):
        return model
    model.encoder = init_encoder(
        cfg.encoder_arch, cfg.embed_dim, cfg.rep_dim, seed, activation=cfg.activation
    )
    if cfg.model in ("protonet", "ef_protonet"):
        return model
    with_memory = cfg.model in ("vsm", "beta_vsm")
    model.nets = InferenceNets.init(cfg.rep_dim, seed, with_memory=with_memory)
    if not with_memory:
        return model
    model.memnets = MemoryNets.init(cfg.rep_dim, seed)
    model.graph_attn = GraphAttention.init(cfg.rep_dim, seed)
    model.beta_fn = (
        BetaNet.init(cfg.rep_dim, seed) if cfg.model == "beta_vsm" else ConstantBeta(cfg.fixed_beta)
    )
    if memory_senses is None:
        raise ConfigError("memory variants need the meta-train sense inventory")
    model.memory = MemoryStore(memory_senses, cfg.rep_dim)
    return model


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with the conventional moment decays (0.9, 0.999) and eps 1e-8."""

    def __init__(self, named_params: list[tuple[str, dm.Node]], lr: float):
        self.named_params = named_params
        self.lr = lr
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in named_params}
        self.v = {name: np.zeros_like(p.value) for name, p in named_params}

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name, p in self.named_params:
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + eps)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=float)
            self.v[k] = np.asarray(state["v"][k], dtype=float)


# ---------------------------------------------------------------------------
# losses per episode


def episode_loss(
    model: SenseModel, episode: Episode, noise_rng: np.random.Generator
) -> tuple[dm.Node, dict | None]:
    """Training loss for one episode plus (for memory variants) the
    detached class features consumed by the memory update."""
    cfg = model.cfg
    if cfg.model == "protonet":
        return protonet_loss(episode, model.encoder, cfg.distance), None
    if cfg.model == "vpn":
        eps = draw_z_noise(episode.num_classes, cfg.l_z, cfg.rep_dim, noise_rng)
        hyper = VpnHyper(lam=cfg.lambda_z, l_z=cfg.l_z)
        return vpn_loss(episode, model.encoder, model.nets, hyper, eps), None
    if cfg.model in ("vsm", "beta_vsm"):
        noise = draw_vsm_noise(episode.num_classes, cfg.l_m, cfg.l_z, cfg.rep_dim, noise_rng)
        hyper = VsmHyper(lambda_z=cfg.lambda_z, lambda_m=cfg.lambda_m, l_z=cfg.l_z, l_m=cfg.l_m)
        out = vsm_forward(
            episode, model.memory, model.encoder, model.nets, model.memnets, hyper, noise,
            collect_features=True,
        )
        return out.loss, out.class_features
    raise UnsupportedModelError(f"{cfg.model} has no training loss")


# ---------------------------------------------------------------------------
# evaluation


def macro_f1(preds, golds, num_classes: int) -> float:
    """Unweighted mean over gold-present classes of the harmonic mean of
    precision and recall; a gold-present class never predicted scores 0."""
    preds = np.asarray(preds, dtype=int)
    golds = np.asarray(golds, dtype=int)
    if preds.size == 0 or preds.shape != golds.shape:
        raise ValueError("predictions and golds must be equal-length and nonempty")
    if preds.max(initial=0) >= num_classes or golds.max(initial=0) >= num_classes:
        raise ValueError("label outside [0, num_classes)")
    scores = []
    for k in range(num_classes):
        gold_k = golds == k
        if not gold_k.any():
            continue
        pred_k = preds == k
        tp = float(np.sum(pred_k & gold_k))
        precision = tp / pred_k.sum() if pred_k.any() else 0.0
        recall = tp / gold_k.sum()
        f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
        scores.append(f1)
    return float(np.mean(scores))


@dataclass
class EvalReport:
    """Per-episode macro F1 plus aggregates for one checkpoint."""

    model: str
    seed: int
    rows: list[dict]  # {"word_id", "num_senses", "num_query", "macro_f1"}
    mean_macro_f1: float

    def to_json_lines(self) -> str:
        head = json.dumps(
            {
                "kind": "eval-report",
                "model": self.model,
                "seed": self.seed,
                "mean_macro_f1": self.mean_macro_f1,
                "episodes": len(self.rows),
            },
            sort_keys=True,
        )
        return "\n".join([head] + [json.dumps(r, sort_keys=True) for r in self.rows]) + "\n"

    @classmethod
    def from_json_lines(cls, text: str) -> "EvalReport":
        lines = [json.loads(l) for l in text.strip().splitlines()]
        head, rows = lines[0], lines[1:]
        return cls(
            model=head["model"], seed=head["seed"], rows=rows,
            mean_macro_f1=head["mean_macro_f1"],
        )


def _predict_episode(model: SenseModel, episode: Episode, rng: np.random.Generator) -> list[int]:
    cfg = model.cfg
    if cfg.model == "majority":
        label = majority_sense([lab for _, lab in episode.support])
        return [label] * len(episode.query)
    if cfg.model == "nearest_neighbor":
        sup = np.array([rec.target_embedding for rec, _ in episode.support])
        labels = [lab for _, lab in episode.support]
        return [nearest_neighbor(rec.target_embedding, sup, labels) for rec, _ in episode.query]
    if cfg.model in ("protonet", "ef_protonet"):
        enc = model.encoder
        if cfg.model == "ef_protonet" and cfg.ef_finetune_steps > 0:
            enc = _finetune_on_support(episode, enc, cfg)
        protos = compute_prototypes(group_reps_by_class(episode, enc, "support"))
        from .encoders import encode

        return [
            int(np.argmax(classify(encode(enc, rec), protos, cfg.distance).value))
            for rec, _ in episode.query
        ]
    l_z = cfg.eval_l_z or cfg.l_z
    if cfg.model == "vpn":
        _, preds = predict_vpn(episode, model.encoder, model.nets, l_z, rng)
        return preds
    if cfg.model in ("vsm", "beta_vsm"):
        l_m = cfg.eval_l_m or cfg.l_m
        _, preds = predict_vsm(
            episode, model.encoder, model.nets, model.memnets, l_z, l_m, rng
        )
        return preds
    raise UnsupportedModelError(cfg.model)


def _finetune_on_support(episode: Episode, enc: EncoderParams, cfg: RunConfig) -> EncoderParams:
    """Optional support-set gradient steps for the episodic baseline; the
    prototypes and the cross-entropy targets both come from the support."""
    tuned = copy.deepcopy(enc)
    support_ep = Episode(
        support=episode.support, query=episode.support, classes=episode.classes, kind=episode.kind
    )
    opt = Adam(tuned.named_params(), cfg.learning_rate)
    for _ in range(cfg.ef_finetune_steps):
        opt.zero_grad()
        loss = protonet_loss(support_ep, tuned, cfg.distance)
        dm.backward(loss)
        opt.step()
    return tuned


def evaluate(model: SenseModel, episodes: list[Episode], eval_seed: int = 0) -> EvalReport:
    """Score every episode; never mutates the model or its memory."""
    rows = []
    for i, ep in enumerate(episodes):
        preds = _predict_episode(model, ep, rng_for(eval_seed, "eval", i))
        golds = [lab for _, lab in ep.query]
        score = macro_f1(preds, golds, ep.num_classes)
        rows.append(
            {
                "word_id": ep.word_ids[0] if len(ep.word_ids) == 1 else list(ep.word_ids),
                "num_senses": ep.num_classes,
                "num_query": len(ep.query),
                "macro_f1": score,
            }
        )
    mean = float(np.mean([r["macro_f1"] for r in rows])) if rows else 0.0
    return EvalReport(
        model=model.cfg.model,
        seed=eval_seed,
        rows=rows,
        mean_macro_f1=mean,
    )


def aggregate_reports(reports: list[EvalReport]) -> dict:
    """Mean +/- std of the episode-mean macro F1 across seeds/checkpoints."""
    means = [r.mean_macro_f1 for r in reports]
    return {
        "mean": float(np.mean(means)),
        "std": float(np.std(means, ddof=1)) if len(means) > 1 else 0.0,
        "per_seed": means,
    }


def breakdown_by_sense_count(reports: list[EvalReport]) -> list[dict]:
    """Mean macro F1 bucketed by each episode word's sense count."""
    buckets: dict[int, list[float]] = {}
    for rep in reports:
        for row in rep.rows:
            buckets.setdefault(row["num_senses"], []).append(row["macro_f1"])
    return [
        {"num_senses": k, "episodes": len(v), "mean_macro_f1": float(np.mean(v))}
        for k, v in sorted(buckets.items())
    ]


# ---------------------------------------------------------------------------
# checkpointing


@dataclass
class Checkpoint:
    config: RunConfig
    seed: int
    episodes_done: int
    loss_history: list[float]
    val_history: list[dict]
    model_state: dict
    adam_state: dict
    best_state: dict | None
    best_score: float | None
    memory_senses: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "episodes_done": self.episodes_done,
            "loss_history": self.loss_history,
            "val_history": self.val_history,
            "model_state": self.model_state,
            "adam_state": self.adam_state,
            "best_state": self.best_state,
            "best_score": self.best_score,
            "memory_senses": self.memory_senses,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Checkpoint":
        return cls(
            config=RunConfig.from_dict(d["config"]),
            seed=d["seed"],
            episodes_done=d["episodes_done"],
            loss_history=d["loss_history"],
            val_history=d["val_history"],
            model_state=d["model_state"],
            adam_state=d["adam_state"],
            best_state=d["best_state"],
            best_score=d["best_score"],
            memory_senses=d.get("memory_senses", []),
        )

    def build(self, use_best: bool = True) -> SenseModel:
        """Materialize the stored (best, by default) model."""
        model = build_model(self.config, self.seed, memory_senses=self.memory_senses or None)
        state = self.best_state if (use_best and self.best_state is not None) else self.model_state
        model.load_state_dict(state)
        return model


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    payload = json.dumps(ckpt.to_dict(), sort_keys=True)
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    header = json.dumps(
        {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "sha256": digest},
        sort_keys=True,
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n" + payload + "\n")


def load_checkpoint(path) -> Checkpoint:
    try:
        text = open(path, "r", encoding="utf-8").read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    lines = text.splitlines()
    if len(lines) < 2:
        raise CheckpointError("truncated checkpoint file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"bad checkpoint header: {e}") from e
    if header.get("magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = lines[1]
    digest = hashlib.sha256(payload.encode("utf-8")).hexdigest()
    if digest != header.get("sha256"):
        raise CheckpointError("checkpoint checksum mismatch")
    return Checkpoint.from_dict(json.loads(payload))


# ---------------------------------------------------------------------------
# training


def meta_train(
    cfg: RunConfig,
    seed: int | None = None,
    bundle: CorpusBundle | None = None,
    resume_from: Checkpoint | None = None,
    progress=None,
) -> Checkpoint:
    """Train one model to its episode budget and keep the best-validation
    snapshot. Baselines without a training loss return their initial
    state untouched."""
    seed = cfg.seeds[0] if seed is None else seed
    bundle = bundle or prepare_corpus(cfg)
    memory_senses = sorted(
        {s for senses in bundle.train.sense_inventory.values() for s in senses}
    )

    model = build_model(
        cfg, seed, memory_senses=memory_senses if cfg.model in ("vsm", "beta_vsm") else None
    )
    opt = Adam(model.trainable_params(), cfg.learning_rate)
    loss_history: list[float] = []
    val_history: list[dict] = []
    best_state: dict | None = None
    best_score: float | None = None
    start_step = 0

    if resume_from is not None:
        if resume_from.config != cfg:
            raise CheckpointError("resume config differs from checkpoint config")
        model.load_state_dict(resume_from.model_state)
        opt.load_state_dict(resume_from.adam_state)
        loss_history = list(resume_from.loss_history)
        val_history = list(resume_from.val_history)
        best_state = resume_from.best_state
        best_score = resume_from.best_score
        start_step = resume_from.episodes_done // cfg.batch_size

    if cfg.model not in TRAINED_MODELS:
        return Checkpoint(
            config=cfg, seed=seed, episodes_done=0, loss_history=[], val_history=[],
            model_state=model.state_dict(), adam_state=opt.state_dict(),
            best_state=None, best_score=None, memory_senses=memory_senses,
        )

    sampler_cfg = SamplerConfig(
        support_size=cfg.support_size,
        senses_per_word=cfg.senses_per_word,
        words_per_episode=cfg.words_per_episode,
        num_episodes=1,
        seed=seed,
    )
    val_episodes = build_meta_test_episodes(
        bundle.validation, cfg.support_size, rng_for(seed, "val-episodes")
    )
    num_steps = math.ceil(cfg.episode_count / cfg.batch_size)
    val_stride = max(1, round(cfg.eval_every / cfg.batch_size))

    for step in range(start_step, num_steps):
        task_losses = []
        batch_features: dict[str, list[np.ndarray]] = {}
        last_episode = None
        for b in range(cfg.batch_size):
            ep_index = step * cfg.batch_size + b
            episode = sample_meta_train_episode(
                bundle.train, sampler_cfg, rng_for(seed, "episode", ep_index)
            )
            last_episode = episode
            loss, feats = episode_loss(model, episode, rng_for(seed, "noise", ep_index))
            task_losses.append(loss)
            if feats:
                for sense, vectors in feats.items():
                    batch_features.setdefault(sense, []).extend(vectors)
        total = dm.sum_(dm.pack(task_losses))
        if not np.isfinite(total.value):
            raise DivergenceError(
                f"non-finite loss at step {step}",
                episode_dump=dump_episode(last_episode) if last_episode else "",
            )
        opt.zero_grad()
        dm.backward(total)
        opt.step()
        if model.memory is not None and batch_features:
            commit_memory_updates(model.memory, model.graph_attn, model.beta_fn, batch_features)
        loss_history.append(total.item())

        episodes_done = (step + 1) * cfg.batch_size
        if val_episodes and ((step + 1) % val_stride == 0 or step + 1 == num_steps):
            report = evaluate(model, val_episodes, eval_seed=seed)
            val_history.append({"episodes": episodes_done, "macro_f1": report.mean_macro_f1})
            if best_score is None or report.mean_macro_f1 > best_score:
                best_score = report.mean_macro_f1
                best_state = copy.deepcopy(model.state_dict())
            if progress is not None:
                progress(episodes_done, loss_history[-1], report.mean_macro_f1)

    return Checkpoint(
        config=cfg,
        seed=seed,
        episodes_done=num_steps * cfg.batch_size,
        loss_history=loss_history,
        val_history=val_history,
        model_state=model.state_dict(),
        adam_state=opt.state_dict(),
        best_state=best_state,
        best_score=best_score,
        memory_senses=memory_senses,
    )


# ---------------------------------------------------------------------------
# analysis runners


def ablate(
    cfg: RunConfig,
    variants: list[str],
    seeds: list[int],
    bundle: CorpusBundle | None = None,
) -> list[dict]:
    """Train/evaluate each variant over shared seeds and corpus; one row
    per variant, in the given ladder order."""
    bundle = bundle or prepare_corpus(cfg)
    rows = []
    for variant in variants:
        vcfg = replace(cfg, model=variant, seeds=tuple(seeds))
        reports = []
        for seed in seeds:
            ckpt = meta_train(vcfg, seed=seed, bundle=bundle)
            episodes = build_meta_test_episodes(
                bundle.test, cfg.support_size, rng_for(seed, "test-episodes")
            )
            reports.append(evaluate(ckpt.build(), episodes, eval_seed=seed))
        agg = aggregate_reports(reports)
        rows.append(
            {
                "model": variant,
                "mean_macro_f1": agg["mean"],
                "std_macro_f1": agg["std"],
                "per_seed": agg["per_seed"],
                "seeds": list(seeds),
            }
        )
    return rows


def export_prototypes(model: SenseModel, episode: Episode, path) -> None:
    """Write per-class posterior parameters, query representations, and
    (for memory variants) the prior memory parameters, as JSON lines."""
    cfg = model.cfg
    if cfg.model not in VARIATIONAL_MODELS:
        raise UnsupportedModelError(f"{cfg.model} has no prototype distribution to export")
    from .encoders import encode

    pooled = pooled_support_features(episode, model.encoder)
    lines = [
        json.dumps(
            {"kind": "prototype-export", "model": cfg.model, "classes": episode.classes},
            sort_keys=True,
        )
    ]
    for c, sense in enumerate(episode.classes):
        entry: dict = {"record": "class", "sense_id": sense}
        if cfg.model == "vpn":
            post = infer_posterior_z(model.nets, pooled[c])
        else:
            m_dist = memory_prior(model.memnets.prior, pooled[c])
            entry["m_mean"] = m_dist.mean.value.tolist()
            entry["m_log_var"] = m_dist.log_var.value.tolist()
            m_sample = dm.reshape(m_dist.mean, (1, cfg.rep_dim))  # zero-noise draw
            batched = posterior_z_given_memory(model.nets, pooled[c], m_sample)
            post = dm.GaussianDiag(batched.mean[0], batched.log_var[0])
        entry["z_mean"] = post.mean.value.tolist()
        entry["z_log_var"] = post.log_var.value.tolist()
        lines.append(json.dumps(entry, sort_keys=True))
    for rec, label in episode.query:
        lines.append(
            json.dumps(
                {
                    "record": "query",
                    "sentence_id": rec.sentence_id,
                    "gold_sense": episode.classes[label],
                    "representation": encode(model.encoder, rec).value.tolist(),
                },
                sort_keys=True,
            )
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
