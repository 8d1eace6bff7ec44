"""Deterministic prototype classification and the non-learned baselines.

A class prototype is the mean of its support representations; queries
are classified by a softmax over negative distances to the prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .encoders import EncoderParams, encode, mean_support_representation
from .episodes import Episode

DISTANCES = ("sq_euclidean", "cosine_dist")


@dataclass
class PrototypeSet:
    """Per-class prototype vectors, ordered by episode class index."""

    protos: list[dm.Node]

    def __len__(self) -> int:
        return len(self.protos)


def group_reps_by_class(
    episode: Episode, enc: EncoderParams, part: str = "support"
) -> list[list[dm.Node]]:
    """Encode one side of the episode, grouped by class index."""
    items = episode.support if part == "support" else episode.query
    groups: list[list[dm.Node]] = [[] for _ in episode.classes]
    for rec, label in items:
        groups[label].append(encode(enc, rec))
    return groups


def compute_prototypes(reps_by_class: list[list[dm.Node]]) -> PrototypeSet:
    """Class-wise mean of support representations."""
    protos = []
    for i, reps in enumerate(reps_by_class):
        if not reps:
            raise dm.DimensionError(f"class {i} has no support representations")
        protos.append(mean_support_representation(reps))
    return PrototypeSet(protos)


def sq_euclidean(x: dm.Node, z: dm.Node) -> dm.Node:
    return dm.sum_(dm.square(x - z))


def cosine_dist(x: dm.Node, z: dm.Node) -> dm.Node:
    nx = dm.sqrt(dm.sum_(dm.square(x)))
    nz = dm.sqrt(dm.sum_(dm.square(z)))
    if nx.item() == 0.0 or nz.item() == 0.0:
        raise dm.DimensionError("cosine distance undefined for a zero vector")
    return 1.0 - dm.matmul(x, z) / (nx * nz)


def _distance_fn(name: str):
    if name == "sq_euclidean":
        return sq_euclidean
    if name == "cosine_dist":
        return cosine_dist
    raise ValueError(f"unknown distance {name!r}; expected one of {DISTANCES}")


def neg_distances(query_rep: dm.Node, protos: PrototypeSet, distance: str) -> dm.Node:
    d_fn = _distance_fn(distance)
    return dm.neg(dm.pack([d_fn(query_rep, z) for z in protos.protos]))


def classify(
    query_rep: dm.Node, protos: PrototypeSet, distance: str = "sq_euclidean"
) -> dm.Node:
    """Distribution over episode classes for one query representation."""
    return dm.softmax(neg_distances(query_rep, protos, distance))


def majority_sense(support_labels: list[int]) -> int:
    """Most frequent support class; ties break to the lowest index."""
    if not support_labels:
        raise ValueError("empty support")
    counts = np.bincount(np.asarray(support_labels))
    return int(np.argmax(counts))


def nearest_neighbor(query_rep: np.ndarray, support_reps: np.ndarray, labels: list[int]) -> int:
    """Label of the cosine-nearest support item; ties break to the
    earliest support index."""
    q = np.asarray(query_rep, dtype=float)
    s = np.asarray(support_reps, dtype=float)
    if s.ndim != 2 or len(labels) != s.shape[0] or s.shape[0] == 0:
        raise ValueError("support must be a nonempty (n, d) matrix with matching labels")
    qn = np.linalg.norm(q)
    sn = np.linalg.norm(s, axis=1)
    if qn == 0.0 or np.any(sn == 0.0):
        raise ValueError("cosine distance undefined for a zero vector")
    dist = 1.0 - (s @ q) / (sn * qn)
    return int(labels[int(np.argmin(dist))])


def protonet_loss(
    episode: Episode, enc: EncoderParams, distance: str = "sq_euclidean"
) -> dm.Node:
    """Mean query cross-entropy of the prototype softmax."""
    protos = compute_prototypes(group_reps_by_class(episode, enc, "support"))
    losses = []
    for rec, label in episode.query:
        nd = neg_distances(encode(enc, rec), protos, distance)
        losses.append(dm.logsumexp(nd) - nd[label])
    return dm.mean_(dm.pack(losses))
