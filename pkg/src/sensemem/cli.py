"""Command-line surface.

Commands: synth, train, eval, ablate, breakdown, export-prototypes,
gradcheck. Configs are JSON files mirroring RunConfig / SynthSpec; any
config field can be overridden with ``--set key=value``. Seeds are
always explicit. Exit code 0 only when the requested run fully
succeeded.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import diffmath as dm
from .corpus import SynthSpec, synth_corpus, write_corpus
from .episodes import build_meta_test_episodes
from .harness import (
    EvalReport,
    RunConfig,
    ablate,
    apply_paper_profile,
    breakdown_by_sense_count,
    evaluate,
    export_prototypes,
    load_checkpoint,
    meta_train,
    prepare_corpus,
    save_checkpoint,
)
from .seeding import rng_for


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _apply_overrides(data: dict, overrides: list[str]) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        data[key] = _parse_value(raw)
    return data


def _load_config(path: str | None, overrides: list[str], seed: int) -> RunConfig:
    data = json.load(open(path)) if path else {}
    data = _apply_overrides(data, overrides)
    data["seeds"] = [seed] + [s for s in data.get("seeds", []) if s != seed]
    return RunConfig.from_dict(data)


def cmd_synth(args) -> int:
    data = json.load(open(args.config)) if args.config else {}
    data = _apply_overrides(data, args.set)
    data["seed"] = args.seed
    spec = SynthSpec(**data)
    corpus = synth_corpus(spec)
    write_corpus(corpus, args.meta, args.blob)
    print(f"wrote {len(corpus.records)} records over {len(corpus.word_ids)} words")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set, args.seed)
    if args.paper_profile:
        cfg = apply_paper_profile(cfg)
    resume = load_checkpoint(args.resume) if args.resume else None

    def progress(episodes, loss, val_f1):
        print(f"episodes {episodes}: batch loss {loss:.4f}, val macro F1 {val_f1:.4f}")

    ckpt = meta_train(cfg, seed=args.seed, resume_from=resume, progress=progress)
    save_checkpoint(ckpt, args.out)
    best = f"{ckpt.best_score:.4f}" if ckpt.best_score is not None else "n/a"
    print(f"saved checkpoint to {args.out} (best val macro F1 {best})")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = prepare_corpus(ckpt.config)
    corpus = {"meta-validation": bundle.validation, "meta-test": bundle.test}[args.split]
    episodes = build_meta_test_episodes(
        corpus, ckpt.config.support_size, rng_for(args.seed, f"{args.split}-episodes")
    )
    report = evaluate(ckpt.build(use_best=not args.final), episodes, eval_seed=args.seed)
    text = report.to_json_lines()
    if args.out:
        open(args.out, "w").write(text)
    else:
        sys.stdout.write(text)
    print(f"mean macro F1 over {len(report.rows)} episodes: {report.mean_macro_f1:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config, args.set, args.seeds[0])
    rows = ablate(cfg, args.models, args.seeds)
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        open(args.out, "w").write(text)
    for r in rows:
        print(f"{r['model']:>12}: {r['mean_macro_f1']:.4f} +/- {r['std_macro_f1']:.4f}")
    return 0


def cmd_breakdown(args) -> int:
    reports = [EvalReport.from_json_lines(open(p).read()) for p in args.reports]
    rows = breakdown_by_sense_count(reports)
    text = "\n".join(json.dumps(r, sort_keys=True) for r in rows) + "\n"
    if args.out:
        open(args.out, "w").write(text)
    for r in rows:
        print(f"{r['num_senses']} senses: {r['mean_macro_f1']:.4f} over {r['episodes']} episodes")
    return 0


def cmd_export_prototypes(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    bundle = prepare_corpus(ckpt.config)
    corpus = {"meta-validation": bundle.validation, "meta-test": bundle.test}[args.split]
    episodes = build_meta_test_episodes(
        corpus, ckpt.config.support_size, rng_for(args.seed, f"{args.split}-episodes")
    )
    if not 0 <= args.episode_index < len(episodes):
        raise SystemExit(f"episode index {args.episode_index} out of range 0..{len(episodes)-1}")
    export_prototypes(ckpt.build(), episodes[args.episode_index], args.out)
    print(f"exported prototypes for episode {args.episode_index} to {args.out}")
    return 0


def _gradcheck_episode(d: int, seed: int):
    from .corpus import SentenceRecord
    from .episodes import Episode

    rng = np.random.default_rng(seed)
    senses = ["w/s0", "w/s1"]
    support, query = [], []
    n = 0
    for label in range(2):
        center = np.zeros(d) if label == 0 else np.full(d, 2.0)
        for part, count in (("s", 2), ("q", 1)):
            for _ in range(count):
                rec = SentenceRecord(
                    f"{part}{n}", "w", senses[label], 1,
                    ["a", "w", "b"], center + rng.normal(scale=0.3, size=(3, d)),
                )
                n += 1
                (support if part == "s" else query).append((rec, label))
    return Episode(support=support, query=query, classes=senses)


def run_gradcheck(delta: float = 1e-5, tol: float = 1e-4, verbose: bool = True) -> bool:
    """Gradient suite for the three objectives on a d=4 two-class episode
    with frozen noise; prints one line per objective."""
    from .encoders import init_encoder
    from .protonet import protonet_loss
    from .vpn import InferenceNets, VpnHyper, vpn_loss
    from .vsm import MemoryNets, MemoryStore, VsmHyper, draw_vsm_noise, vsm_loss

    d = 4
    ep = _gradcheck_episode(d, seed=0)
    ok = True

    enc = init_encoder("bigru_linear", d, d, seed=1)
    report = dm.grad_check(lambda: protonet_loss(ep, enc), dict(enc.named_params()), delta, tol)
    ok &= report.passed
    if verbose:
        print(f"protonet_loss: {report}")

    enc2 = init_encoder("mlp", d, d, seed=2, activation="elu")
    nets = InferenceNets.init(d, seed=3)
    eps = rng_for(4, "gradcheck-z").standard_normal((2, 2, d))
    params = dict(enc2.named_params()) | dict(nets.named_params())
    report = dm.grad_check(
        lambda: vpn_loss(ep, enc2, nets, VpnHyper(lam=0.5, l_z=2), eps), params, delta, tol
    )
    ok &= report.passed
    if verbose:
        print(f"vpn_loss: {report}")

    enc3 = init_encoder("linear", d, d, seed=5)
    nets3 = InferenceNets.init(d, seed=6, with_memory=True)
    memnets = MemoryNets.init(d, seed=7)
    store = MemoryStore(["w/s0", "w/s1"], d)
    slot_rng = rng_for(8, "gradcheck-slots")
    for sense in ("w/s0", "w/s1"):
        store.update(sense, slot_rng.normal(scale=0.5, size=d), beta=0.5)
    noise = draw_vsm_noise(2, 2, 2, d, rng_for(9, "gradcheck-m"))
    params = (
        dict(enc3.named_params()) | dict(nets3.named_params()) | dict(memnets.named_params())
    )
    report = dm.grad_check(
        lambda: vsm_loss(
            ep, store, enc3, nets3, memnets,
            VsmHyper(lambda_z=0.5, lambda_m=0.3, l_z=2, l_m=2), noise,
        ),
        params, delta, tol,
    )
    ok &= report.passed
    if verbose:
        print(f"vsm_loss: {report}")
    return ok


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="sensemem", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus file pair")
    p.add_argument("--config", help="JSON file of generator settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--meta", required=True, help="metadata output path")
    p.add_argument("--blob", required=True, help="embedding blob output path")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="meta-train one model")
    p.add_argument("--config", help="JSON RunConfig")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--paper-profile", action="store_true",
                   help="load the published hyperparameters for this encoder/|S|")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("meta-validation", "meta-test"), default="meta-test")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--final", action="store_true", help="use final instead of best weights")
    p.add_argument("--out", help="write the report as JSON lines")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate a ladder of variants")
    p.add_argument("--config", help="JSON RunConfig shared by all variants")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--models", type=lambda s: s.split(","),
                   default=["protonet", "vpn", "vsm", "beta_vsm"])
    p.add_argument("--seeds", type=lambda s: [int(x) for x in s.split(",")], required=True)
    p.add_argument("--out", help="write the table as JSON lines")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("breakdown", help="bucket report scores by sense count")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_breakdown)

    p = sub.add_parser("export-prototypes", help="dump posterior parameters for one episode")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("meta-validation", "meta-test"), default="meta-test")
    p.add_argument("--episode-index", type=int, default=0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export_prototypes)

    p = sub.add_parser("gradcheck", help="finite-difference check of every objective")
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=lambda a: 0 if run_gradcheck(a.delta, a.tol) else 1)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # CLI boundary: report and signal failure
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
