"""Sentence encoders: token embeddings -> target-word representation.

Three architectures over precomputed embeddings:

* ``bigru_linear`` - single-layer bidirectional gated recurrent pass over
  the whole sentence, then a linear layer with tanh, read at the target
  position (context-sensitive even for static inputs);
* ``mlp`` - feed-forward stack applied to the target token's embedding;
* ``linear`` - one affine map of the target token's embedding, for
  frozen contextual inputs that already carry sense information.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .corpus import SentenceRecord
from .seeding import rng_for

ARCHS = ("bigru_linear", "mlp", "linear")

_DEFAULT_ACTIVATION = {"bigru_linear": "tanh", "mlp": "relu", "linear": "identity"}


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


@dataclass
class EncoderParams:
    """Weights and wiring of one encoder instance."""

    arch: str
    input_dim: int
    rep_dim: int
    activation: str
    params: dict[str, dm.Node] = field(default_factory=dict)

    def named_params(self) -> list[tuple[str, dm.Node]]:
        return [(f"encoder.{k}", v) for k, v in self.params.items()]


def init_encoder(
    arch: str,
    input_dim: int,
    rep_dim: int,
    seed: int,
    activation: str | None = None,
) -> EncoderParams:
    """Build an encoder with uniform +/- sqrt(6/(fan_in+fan_out)) weights."""
    if arch not in ARCHS:
        raise ValueError(f"unknown encoder arch {arch!r}; expected one of {ARCHS}")
    act = activation or _DEFAULT_ACTIVATION[arch]
    rng = rng_for(seed, "init", "encoder", arch)
    p: dict[str, dm.Node] = {}
    if arch == "linear":
        p["w"] = dm.param(glorot_uniform(rng, rep_dim, input_dim))
        p["b"] = dm.param(np.zeros(rep_dim))
    elif arch == "mlp":
        p["w1"] = dm.param(glorot_uniform(rng, rep_dim, input_dim))
        p["b1"] = dm.param(np.zeros(rep_dim))
        p["w2"] = dm.param(glorot_uniform(rng, rep_dim, rep_dim))
        p["b2"] = dm.param(np.zeros(rep_dim))
    else:
        if rep_dim % 2 != 0:
            raise ValueError("bigru_linear needs an even rep_dim (two directions)")
        h = rep_dim // 2
        for direction in ("fw", "bw"):
            for gate in ("r", "z", "n"):
                p[f"{direction}_w{gate}"] = dm.param(glorot_uniform(rng, h, input_dim))
                p[f"{direction}_u{gate}"] = dm.param(glorot_uniform(rng, h, h))
                p[f"{direction}_b{gate}"] = dm.param(np.zeros(h))
        p["out_w"] = dm.param(glorot_uniform(rng, rep_dim, rep_dim))
        p["out_b"] = dm.param(np.zeros(rep_dim))
    return EncoderParams(arch=arch, input_dim=input_dim, rep_dim=rep_dim, activation=act, params=p)


def _gru_direction(p: dict[str, dm.Node], prefix: str, xs: list[dm.Node]) -> list[dm.Node]:
    """Run one direction, returning the hidden state at every position."""
    h_dim = p[f"{prefix}_wr"].shape[0]
    h = dm.constant(np.zeros(h_dim))
    states: list[dm.Node] = []
    for x in xs:
        r = dm.sigmoid(p[f"{prefix}_wr"] @ x + p[f"{prefix}_ur"] @ h + p[f"{prefix}_br"])
        z = dm.sigmoid(p[f"{prefix}_wz"] @ x + p[f"{prefix}_uz"] @ h + p[f"{prefix}_bz"])
        n = dm.tanh(p[f"{prefix}_wn"] @ x + p[f"{prefix}_un"] @ (r * h) + p[f"{prefix}_bn"])
        h = (1.0 - z) * n + z * h
        states.append(h)
    return states


def encode(enc: EncoderParams, rec: SentenceRecord) -> dm.Node:
    """Representation of the record's target word, differentiable in the
    encoder weights."""
    if rec.dim != enc.input_dim:
        raise dm.DimensionError(
            f"{rec.sentence_id}: embedding dim {rec.dim} != encoder input {enc.input_dim}"
        )
    p = enc.params
    t = rec.target_index
    if enc.arch == "linear":
        out = p["w"] @ dm.constant(rec.embeddings[t]) + p["b"]
        return dm.activation(enc.activation, out)
    if enc.arch == "mlp":
        x = dm.constant(rec.embeddings[t])
        h = dm.activation(enc.activation, p["w1"] @ x + p["b1"])
        return dm.activation(enc.activation, p["w2"] @ h + p["b2"])
    xs = [dm.constant(row) for row in rec.embeddings]
    fw = _gru_direction(p, "fw", xs)
    bw = _gru_direction(p, "bw", list(reversed(xs)))
    both = dm.concat([fw[t], bw[len(xs) - 1 - t]])
    return dm.activation(enc.activation, p["out_w"] @ both + p["out_b"])


def mean_support_representation(reps: list[dm.Node]) -> dm.Node:
    """Arithmetic mean of one class's support representations."""
    if not reps:
        raise dm.DimensionError("mean of an empty class group")
    total = reps[0]
    for r in reps[1:]:
        total = total + r
    return total * (1.0 / len(reps))
