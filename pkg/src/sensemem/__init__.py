"""Episodic few-shot word sense disambiguation with variational
prototypes and semantic memory, over precomputed token embeddings."""

from .corpus import Corpus, SentenceRecord, SynthSpec, load_corpus, split_corpus, synth_corpus
from .episodes import Episode, SamplerConfig, build_meta_test_episodes, sample_meta_train_episode
from .harness import (
    Checkpoint,
    EvalReport,
    RunConfig,
    ablate,
    evaluate,
    load_checkpoint,
    macro_f1,
    meta_train,
    paper_profile,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Corpus",
    "SentenceRecord",
    "SynthSpec",
    "load_corpus",
    "split_corpus",
    "synth_corpus",
    "Episode",
    "SamplerConfig",
    "build_meta_test_episodes",
    "sample_meta_train_episode",
    "Checkpoint",
    "EvalReport",
    "RunConfig",
    "ablate",
    "evaluate",
    "load_checkpoint",
    "macro_f1",
    "meta_train",
    "paper_profile",
    "save_checkpoint",
    "__version__",
]
