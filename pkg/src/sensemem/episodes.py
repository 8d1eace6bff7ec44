"""Episode construction for the episodic train/evaluate protocol.

Meta-training episodes mix several words, each contributing a fixed
number of senses, with equal-sized disjoint support and query sets.
Meta-test (and meta-validation) episodes cover one word each: the
support is a small sample of its sentences and the query is everything
else, keeping the corpus' natural sense distribution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, SentenceRecord

logger = logging.getLogger(__name__)

SUPPORT_SIZES = (4, 8, 16, 32)


class SamplerError(Exception):
    """Episode construction is infeasible for the given corpus/config."""


@dataclass
class Episode:
    """One few-shot task: labelled support and query sets over local classes."""

    support: list[tuple[SentenceRecord, int]]
    query: list[tuple[SentenceRecord, int]]
    classes: list[str]  # sense_ids, index = episode-local class label
    kind: str = "meta-train"
    word_ids: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        k = len(self.classes)
        for rec, label in self.support + self.query:
            if not 0 <= label < k:
                raise SamplerError(f"label {label} outside classes of {rec.sentence_id}")
        if not self.word_ids:
            self.word_ids = tuple(sorted({r.word_id for r, _ in self.support + self.query}))

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def episode_label_map(episode: Episode) -> dict[str, int]:
    """Bijection sense_id -> episode-local class index."""
    return {sense: i for i, sense in enumerate(episode.classes)}


@dataclass(frozen=True)
class SamplerConfig:
    support_size: int = 8
    senses_per_word: int = 2
    words_per_episode: int = 2
    num_episodes: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.support_size not in SUPPORT_SIZES:
            raise SamplerError(f"support_size must be one of {SUPPORT_SIZES}")
        if self.num_episodes < 1:
            raise SamplerError("num_episodes must be >= 1")
        if self.senses_per_word < 1 or self.words_per_episode < 1:
            raise SamplerError("senses_per_word and words_per_episode must be >= 1")
        if self.num_classes > self.support_size:
            raise SamplerError(
                f"{self.num_classes} classes cannot all appear in a support of "
                f"{self.support_size}"
            )

    @property
    def num_classes(self) -> int:
        return self.senses_per_word * self.words_per_episode


def _shot_allocation(support_size: int, num_classes: int) -> list[int]:
    """Spread |S| slots over classes as evenly as possible, >= 1 each."""
    base, extra = divmod(support_size, num_classes)
    return [base + (1 if i < extra else 0) for i in range(num_classes)]


def sample_meta_train_episode(
    corpus: Corpus, cfg: SamplerConfig, rng: np.random.Generator
) -> Episode:
    """Draw one meta-training episode: words, then senses, then sentences.

    Support and query both hold ``support_size`` sentences with mirrored
    class composition and are disjoint as sentence sets.
    """
    shots = _shot_allocation(cfg.support_size, cfg.num_classes)
    need = 2 * max(shots)  # support + mirrored query, worst-case class

    by_word_sense: dict[str, dict[str, list[SentenceRecord]]] = {}
    for r in corpus.records:
        by_word_sense.setdefault(r.word_id, {}).setdefault(r.sense_id, []).append(r)
    eligible = [
        w
        for w, senses in sorted(by_word_sense.items())
        if sum(len(v) >= need for v in senses.values()) >= cfg.senses_per_word
    ]
    if len(eligible) < cfg.words_per_episode:
        raise SamplerError(
            f"need {cfg.words_per_episode} words with {cfg.senses_per_word} senses of "
            f">= {need} examples, found {len(eligible)}"
        )

    words = [eligible[i] for i in rng.choice(len(eligible), cfg.words_per_episode, replace=False)]
    classes: list[str] = []
    support: list[tuple[SentenceRecord, int]] = []
    query: list[tuple[SentenceRecord, int]] = []
    for w in words:
        pool = sorted(s for s, v in by_word_sense[w].items() if len(v) >= need)
        picked = [pool[i] for i in rng.choice(len(pool), cfg.senses_per_word, replace=False)]
        for sense in picked:
            label = len(classes)
            classes.append(sense)
            shot = shots[label]
            recs = by_word_sense[w][sense]
            idx = rng.choice(len(recs), 2 * shot, replace=False)
            for i in idx[:shot]:
                support.append((recs[i], label))
            for i in idx[shot:]:
                query.append((recs[i], label))
    return Episode(support=support, query=query, classes=classes, kind="meta-train")


def build_meta_test_episodes(
    corpus: Corpus, support_size: int, rng: np.random.Generator
) -> list[Episode]:
    """One episode per word: |S| support sentences, all the rest as query.

    The support keeps the natural sense distribution except that every
    sense present in the word's data gets one support slot when |S|
    allows; words with fewer than |S|+1 sentences are skipped.
    """
    episodes: list[Episode] = []
    by_word: dict[str, list[SentenceRecord]] = {}
    for r in corpus.records:
        by_word.setdefault(r.word_id, []).append(r)
    for word in sorted(by_word):
        recs = by_word[word]
        if len(recs) < support_size + 1:
            logger.warning(
                "skipping %s: %d sentences < support_size+1 = %d",
                word,
                len(recs),
                support_size + 1,
            )
            continue
        classes = sorted({r.sense_id for r in recs})
        label_of = {s: i for i, s in enumerate(classes)}

        by_sense: dict[str, list[SentenceRecord]] = {}
        for r in recs:
            by_sense.setdefault(r.sense_id, []).append(r)
        sense_order = [classes[i] for i in rng.permutation(len(classes))]

        chosen: list[SentenceRecord] = []
        chosen_ids: set[str] = set()
        for sense in sense_order[:support_size]:
            pool = by_sense[sense]
            pick = pool[int(rng.integers(0, len(pool)))]
            chosen.append(pick)
            chosen_ids.add(pick.sentence_id)
        rest = [r for r in recs if r.sentence_id not in chosen_ids]
        fill = support_size - len(chosen)
        if fill > 0:
            for i in rng.choice(len(rest), fill, replace=False):
                chosen.append(rest[i])
                chosen_ids.add(rest[i].sentence_id)
        support = [(r, label_of[r.sense_id]) for r in chosen]
        query = [(r, label_of[r.sense_id]) for r in recs if r.sentence_id not in chosen_ids]
        episodes.append(
            Episode(
                support=support,
                query=query,
                classes=classes,
                kind="meta-test",
                word_ids=(word,),
            )
        )
    return episodes


def dump_episode(episode: Episode) -> str:
    """Debug dump referencing sentence ids only, one line per item."""
    lines = [f"kind={episode.kind} classes={','.join(episode.classes)}"]
    for part, items in (("support", episode.support), ("query", episode.query)):
        for rec, label in items:
            lines.append(f"{part}\t{rec.sentence_id}\t{label}")
    return "\n".join(lines) + "\n"
