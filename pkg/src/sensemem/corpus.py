"""Sense-annotated, pre-embedded sentence corpora.

A corpus is stored as two files:

* metadata: UTF-8 JSON lines, one record per line with fields
  ``sentence_id, word_id, sense_id, target_index, tokens, blob_offset,
  length, dim``;
* blob: 20-byte header (magic ``VSMEMB1\\0``, uint32 LE embedding dim,
  uint32 LE record count, uint32 LE CRC-32 of the payload) followed by
  each record's L x E float64 little-endian rows at its ``blob_offset``.

The synthetic generator places one Gaussian cluster per sense in
embedding space so classifier behaviour is predictable from geometry.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for

BLOB_MAGIC = b"VSMEMB1\x00"
BLOB_HEADER = struct.Struct("<8sIII")  # magic, dim, record count, payload crc32

SPLIT_NAMES = ("meta-train", "meta-validation", "meta-test")


class CorpusError(Exception):
    """Base for corpus validation and I/O failures."""


class CorpusFormatError(CorpusError):
    """File contents violate the on-disk format."""


class CorpusIntegrityError(CorpusError):
    """Records violate a corpus invariant."""


@dataclass
class SentenceRecord:
    """One annotated sentence with per-token embeddings."""

    sentence_id: str
    word_id: str
    sense_id: str
    target_index: int
    tokens: list[str]
    embeddings: np.ndarray  # (L, E) float64

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise CorpusIntegrityError(f"{self.sentence_id}: embeddings must be L x E")
        if len(self.tokens) != self.embeddings.shape[0]:
            raise CorpusIntegrityError(
                f"{self.sentence_id}: {len(self.tokens)} tokens vs "
                f"{self.embeddings.shape[0]} embedding rows"
            )
        if not 0 <= self.target_index < len(self.tokens):
            raise CorpusIntegrityError(
                f"{self.sentence_id}: target_index {self.target_index} out of range"
            )
        if not np.all(np.isfinite(self.embeddings)):
            raise CorpusIntegrityError(f"{self.sentence_id}: non-finite embedding values")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def target_embedding(self) -> np.ndarray:
        return self.embeddings[self.target_index]


@dataclass
class Corpus:
    """Immutable-by-convention collection of records plus sense inventory."""

    records: list[SentenceRecord]
    split: str | None = None
    sense_inventory: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.split is not None and self.split not in SPLIT_NAMES:
            raise CorpusIntegrityError(f"unknown split label {self.split!r}")
        if not self.sense_inventory:
            self.sense_inventory = derive_inventory(self.records)
        validate_corpus(self)

    @property
    def dim(self) -> int:
        if not self.records:
            raise CorpusIntegrityError("empty corpus has no embedding dim")
        return self.records[0].dim

    @property
    def word_ids(self) -> list[str]:
        return sorted(self.sense_inventory)

    def records_for_word(self, word_id: str) -> list[SentenceRecord]:
        return [r for r in self.records if r.word_id == word_id]


def derive_inventory(records: list[SentenceRecord]) -> dict[str, list[str]]:
    inv: dict[str, set[str]] = {}
    for r in records:
        inv.setdefault(r.word_id, set()).add(r.sense_id)
    return {w: sorted(s) for w, s in sorted(inv.items())}


def validate_corpus(corpus: Corpus) -> None:
    """Check every corpus invariant; raise naming the offending record."""
    seen_ids: set[str] = set()
    sense_owner: dict[str, str] = {}
    dim = None
    for r in corpus.records:
        if r.sentence_id in seen_ids:
            raise CorpusIntegrityError(f"duplicate sentence_id {r.sentence_id!r}")
        seen_ids.add(r.sentence_id)
        if dim is None:
            dim = r.dim
        elif r.dim != dim:
            raise CorpusIntegrityError(
                f"{r.sentence_id}: embedding dim {r.dim} differs from corpus dim {dim}"
            )
        owner = sense_owner.setdefault(r.sense_id, r.word_id)
        if owner != r.word_id:
            raise CorpusIntegrityError(
                f"sense_id {r.sense_id!r} is claimed by both {owner!r} and {r.word_id!r}"
            )
        senses = corpus.sense_inventory.get(r.word_id)
        if senses is None or r.sense_id not in senses:
            raise CorpusIntegrityError(
                f"{r.sentence_id}: sense_id {r.sense_id!r} missing from inventory"
            )


# ---------------------------------------------------------------------------
# on-disk format


def write_corpus(corpus: Corpus, meta_path, blob_path) -> None:
    """Write the metadata/blob pair; the result reloads bit-exactly."""
    validate_corpus(corpus)
    payload = bytearray()
    lines = []
    offset = BLOB_HEADER.size
    dim = corpus.records[0].dim if corpus.records else 0
    for r in corpus.records:
        raw = np.ascontiguousarray(r.embeddings, dtype="<f8").tobytes()
        lines.append(
            json.dumps(
                {
                    "sentence_id": r.sentence_id,
                    "word_id": r.word_id,
                    "sense_id": r.sense_id,
                    "target_index": r.target_index,
                    "tokens": r.tokens,
                    "blob_offset": offset,
                    "length": len(r.tokens),
                    "dim": r.dim,
                },
                sort_keys=True,
            )
        )
        payload.extend(raw)
        offset += len(raw)
    header = BLOB_HEADER.pack(BLOB_MAGIC, dim, len(corpus.records), zlib.crc32(bytes(payload)))
    with open(blob_path, "wb") as f:
        f.write(header)
        f.write(bytes(payload))
    with open(meta_path, "w", encoding="utf-8") as f:
        for line in lines:
            f.write(line + "\n")


def load_corpus(meta_path, blob_path, split: str | None = None) -> Corpus:
    """Load and fully validate a metadata/blob pair."""
    try:
        blob = open(blob_path, "rb").read()
    except OSError as e:
        raise CorpusFormatError(f"cannot read blob {blob_path}: {e}") from e
    if len(blob) < BLOB_HEADER.size:
        raise CorpusFormatError(f"{blob_path}: truncated header")
    magic, dim, count, crc = BLOB_HEADER.unpack_from(blob)
    if magic != BLOB_MAGIC:
        raise CorpusFormatError(f"{blob_path}: bad magic {magic!r}")
    payload = blob[BLOB_HEADER.size :]
    if zlib.crc32(payload) != crc:
        raise CorpusFormatError(f"{blob_path}: payload checksum mismatch")

    records: list[SentenceRecord] = []
    try:
        meta_lines = open(meta_path, "r", encoding="utf-8").read().splitlines()
    except OSError as e:
        raise CorpusFormatError(f"cannot read metadata {meta_path}: {e}") from e
    for lineno, line in enumerate(meta_lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise CorpusFormatError(f"{meta_path}:{lineno}: invalid JSON: {e}") from e
        try:
            sid = rec["sentence_id"]
            length, rdim, off = rec["length"], rec["dim"], rec["blob_offset"]
        except KeyError as e:
            raise CorpusFormatError(f"{meta_path}:{lineno}: missing field {e}") from e
        if rdim != dim:
            raise CorpusFormatError(
                f"record {sid!r}: embedding dim {rdim} disagrees with blob header {dim}"
            )
        end = off + length * rdim * 8
        if off < BLOB_HEADER.size or end > len(blob):
            raise CorpusFormatError(f"record {sid!r}: blob range [{off}, {end}) out of bounds")
        emb = np.frombuffer(blob[off:end], dtype="<f8").reshape(length, rdim).astype(np.float64)
        try:
            records.append(
                SentenceRecord(
                    sentence_id=sid,
                    word_id=rec["word_id"],
                    sense_id=rec["sense_id"],
                    target_index=rec["target_index"],
                    tokens=list(rec["tokens"]),
                    embeddings=emb,
                )
            )
        except (KeyError, CorpusIntegrityError) as e:
            raise CorpusFormatError(f"record {sid!r} failed validation: {e}") from e
    if len(records) != count:
        raise CorpusFormatError(
            f"{meta_path}: {len(records)} records but blob header promises {count}"
        )
    return Corpus(records=records, split=split)


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic sense-clustered corpus.

    ``separation`` is the minimum pairwise distance between sense
    centers; 0 collapses every sense of a word onto one shared center,
    which makes the senses statistically indistinguishable.
    """

    num_words: int = 40
    senses_per_word: tuple[int, int] = (2, 6)
    examples_per_sense: tuple[int, int] = (20, 40)
    dim: int = 16
    separation: float = 4.0
    within_sigma: float = 0.5
    background_sigma: float = 1.0
    sentence_length: tuple[int, int] = (4, 10)
    seed: int = 0

    def __post_init__(self):
        if self.num_words < 1 or self.dim < 1:
            raise ValueError("num_words and dim must be >= 1")
        if self.senses_per_word[0] < 1 or self.examples_per_sense[0] < 1:
            raise ValueError("sense and example counts must be >= 1")
        if self.separation < 0:
            raise ValueError("separation must be >= 0")
        if self.within_sigma <= 0 or self.background_sigma <= 0:
            raise ValueError("noise scales must be > 0")


class GenerationError(CorpusError):
    """Sense-center placement failed within the retry budget."""


def _place_centers(n: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Sample ``n`` centers with pairwise distance >= separation."""
    if separation == 0:
        return rng.normal(scale=1.0, size=(n, dim))
    scale = max(separation, 1.0)
    for _ in range(8):
        centers: list[np.ndarray] = []
        ok = True
        for _ in range(n):
            placed = False
            for _ in range(200):
                c = rng.normal(scale=scale, size=dim)
                if all(np.linalg.norm(c - prev) >= separation for prev in centers):
                    centers.append(c)
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if ok:
            return np.array(centers)
        scale *= 2.0
    raise GenerationError(f"could not place {n} centers at separation {separation}")


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Generate a corpus of Gaussian sense clusters, deterministic in the seed.

    Each sense gets a center (pairwise >= separation apart across the
    whole corpus when separation > 0); target-token embeddings are drawn
    N(center, within_sigma^2 I) and non-target tokens from a shared
    N(0, background_sigma^2 I) background.
    """
    rng = rng_for(spec.seed, "synth")
    words = [f"word{w:03d}" for w in range(spec.num_words)]
    sense_counts = {
        w: int(rng.integers(spec.senses_per_word[0], spec.senses_per_word[1] + 1)) for w in words
    }
    total_senses = sum(sense_counts.values())

    if spec.separation == 0:
        # One center per word, shared by all its senses.
        word_centers = _place_centers(spec.num_words, spec.dim, 0.0, rng)
        centers = {}
        for wi, w in enumerate(words):
            for j in range(sense_counts[w]):
                centers[f"{w}/sense{j}"] = word_centers[wi]
    else:
        flat = _place_centers(total_senses, spec.dim, spec.separation, rng)
        centers = {}
        k = 0
        for w in words:
            for j in range(sense_counts[w]):
                centers[f"{w}/sense{j}"] = flat[k]
                k += 1

    records: list[SentenceRecord] = []
    for w in words:
        for j in range(sense_counts[w]):
            sense = f"{w}/sense{j}"
            n_examples = int(rng.integers(spec.examples_per_sense[0], spec.examples_per_sense[1] + 1))
            for i in range(n_examples):
                length = int(rng.integers(spec.sentence_length[0], spec.sentence_length[1] + 1))
                target = int(rng.integers(0, length))
                emb = rng.normal(scale=spec.background_sigma, size=(length, spec.dim))
                emb[target] = centers[sense] + rng.normal(scale=spec.within_sigma, size=spec.dim)
                tokens = [f"ctx{int(rng.integers(0, 5000)):04d}" for _ in range(length)]
                tokens[target] = w
                records.append(
                    SentenceRecord(
                        sentence_id=f"{sense}/ex{i:03d}",
                        word_id=w,
                        sense_id=sense,
                        target_index=target,
                        tokens=tokens,
                        embeddings=emb,
                    )
                )
    return Corpus(records=records)


# ---------------------------------------------------------------------------
# splitting


class SplitError(CorpusError):
    """A requested split would receive zero words."""


def split_corpus(
    corpus: Corpus, fractions: tuple[float, float, float] = (0.6, 0.2, 0.2), seed: int = 0
) -> tuple[Corpus, Corpus, Corpus]:
    """Partition by word (never by sentence) into train/validation/test.

    Deterministic in the seed and independent of record order: the
    assignment permutes the sorted word list.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions {fractions} do not sum to 1")
    words = sorted(corpus.sense_inventory)
    order = rng_for(seed, "split").permutation(len(words))
    shuffled = [words[i] for i in order]
    n = len(words)
    c1 = round(fractions[0] * n)
    c2 = round((fractions[0] + fractions[1]) * n)
    groups = (shuffled[:c1], shuffled[c1:c2], shuffled[c2:])
    for name, g in zip(SPLIT_NAMES, groups):
        if not g:
            raise SplitError(f"split {name!r} would receive zero words")
    out = []
    for name, g in zip(SPLIT_NAMES, groups):
        chosen = set(g)
        recs = [r for r in corpus.records if r.word_id in chosen]
        out.append(Corpus(records=recs, split=name))
    return tuple(out)
