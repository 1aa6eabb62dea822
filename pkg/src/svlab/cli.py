"""Command-line surface: gen-corpus, train, poison, eval, run, ablate."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .attack import (
    build_trigger_bank,
    badnets_poison,
    cluster_speakers,
    load_plan,
    poison_corpus,
    save_plan,
    speaker_representations,
)
from .corpus import generate_corpus, load_corpus, save_corpus, split_corpus
from .embedding import load_checkpoint, save_checkpoint, train
from .harness import (
    ExperimentConfig,
    SWEEP_PARAMETERS,
    ablation_sweep,
    derive_seed,
    eval_asr,
    eval_eer,
    run_experiment,
    write_scores_csv,
)

OUT_ENV = "SVLAB_OUT"


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "svlab_out")


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        config = ExperimentConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        config = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        config = config.with_master_seed(args.seed)
    overrides = {
        "mode": ("attack", "mode"),
        "clusters": ("attack", "n_clusters"),
        "poison_rate": ("attack", "poison_rate_pct"),
        "trigger_db": ("attack", "trigger_db"),
        "speakers": ("corpus", "n_speakers"),
        "utterances": ("corpus", "utterances_per_speaker"),
        "steps": ("train", "steps"),
        "lr": ("train", "learning_rate"),
        "batch_speakers": ("train", "speakers_per_batch"),
        "batch_utterances": ("train", "utterances_per_speaker"),
        "enroll_n": ("eval", "enroll_n"),
        "repeats": ("eval", "repeats"),
    }
    for flag, (section, field_name) in overrides.items():
        value = getattr(args, flag, None)
        if value is not None:
            config = replace(config, **{section: replace(getattr(config, section),
                                                         **{field_name: value})})
    if getattr(args, "train_fraction", None) is not None:
        config = replace(config, train_fraction=args.train_fraction)
    return config


def _add_common(parser):
    parser.add_argument("--config", help="JSON config file (see README for the schema)")
    parser.add_argument("--seed", type=int, help="master seed applied to all stages")
    parser.add_argument("--out", default=None,
                        help=f"output directory (default: ${OUT_ENV} or ./svlab_out)")


def _add_attack_flags(parser):
    parser.add_argument("--mode", choices=["none", "clustered", "badnets"])
    parser.add_argument("--clusters", type=int, help="number of speaker clusters K")
    parser.add_argument("--poison-rate", dest="poison_rate", type=float,
                        help="poisoned fraction of train utterances, percent")
    parser.add_argument("--trigger-db", dest="trigger_db", type=float,
                        help="trigger volume relative to host peak, dB")


def _add_train_flags(parser):
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-speakers", dest="batch_speakers", type=int)
    parser.add_argument("--batch-utterances", dest="batch_utterances", type=int)
    parser.add_argument("--train-fraction", dest="train_fraction", type=float)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="svlab",
                                     description="Speaker-verification poisoning lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesize a corpus to WAV + manifest")
    p.add_argument("--speakers", type=int, default=50)
    p.add_argument("--utterances", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", dest="train_fraction", type=float, default=0.5)
    p.add_argument("--out", default=None)

    p = sub.add_parser("train", help="train an embedding model on a corpus")
    p.add_argument("--corpus", required=True, help="corpus directory or manifest.json")
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("poison", help="cluster speakers and write a poisoned corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True, help="benign extractor checkpoint")
    _add_attack_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="EER (and ASR, given a plan) for a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", help="attack plan JSON providing the trigger bank")
    p.add_argument("--enroll-n", dest="enroll_n", type=int)
    p.add_argument("--repeats", type=int)
    _add_common(p)

    p = sub.add_parser("run", help="full experiment pipeline, emits a report")
    p.add_argument("--speakers", type=int)
    p.add_argument("--utterances", type=int)
    _add_attack_flags(p)
    _add_train_flags(p)
    p.add_argument("--enroll-n", dest="enroll_n", type=int)
    p.add_argument("--repeats", type=int)
    _add_common(p)

    p = sub.add_parser("ablate", help="sweep one attack knob and tabulate ASR/EER")
    p.add_argument("--param", required=True, choices=list(SWEEP_PARAMETERS))
    p.add_argument("--values", required=True,
                   help="comma-separated values, e.g. 1,3,5,10")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--speakers", type=int)
    p.add_argument("--utterances", type=int)
    _add_attack_flags(p)
    _add_train_flags(p)
    _add_common(p)

    args = parser.parse_args(argv)
    out = Path(getattr(args, "out", None) or _default_out())

    if args.command == "gen-corpus":
        corpus = generate_corpus(args.speakers, args.utterances, args.seed)
        corpus = split_corpus(corpus, args.train_fraction, derive_seed(args.seed, 11))
        manifest = save_corpus(corpus, out)
        print(f"wrote {corpus.n_utterances()} utterances to {manifest}")
        return 0

    if args.command == "train":
        config = _load_config(args)
        corpus = load_corpus(args.corpus)
        if any(utt.split is None for _, utt in corpus.all_utterances()):
            corpus = split_corpus(corpus, config.train_fraction,
                                  derive_seed(config.corpus.seed, 11))
        params = train(corpus, config.train)
        out.mkdir(parents=True, exist_ok=True)
        ckpt = out / "model.ckpt"
        save_checkpoint(params, ckpt)
        print(f"wrote {ckpt}")
        return 0

    if args.command == "poison":
        config = _load_config(args)
        atk = config.attack
        corpus = load_corpus(args.corpus)
        extractor = load_checkpoint(args.checkpoint)
        if atk.mode == "badnets":
            bank = build_trigger_bank(1, atk.trigger_db, atk.freq_lo, atk.freq_hi)
            poisoned, plan = badnets_poison(corpus, bank[0], atk.poison_rate_pct,
                                            derive_seed(atk.seed, 37))
        else:
            reps = speaker_representations(extractor, corpus)
            assignment = cluster_speakers(reps, atk.n_clusters, derive_seed(atk.seed, 31))
            bank = build_trigger_bank(atk.n_clusters, atk.trigger_db, atk.freq_lo, atk.freq_hi)
            poisoned, plan = poison_corpus(corpus, assignment, bank, atk.poison_rate_pct,
                                           derive_seed(atk.seed, 37))
        save_corpus(poisoned, out)
        save_plan(plan, out / "plan.json")
        print(f"poisoned {len(plan.manifest)} utterances; plan at {out / 'plan.json'}")
        return 0

    if args.command == "eval":
        config = _load_config(args)
        corpus = load_corpus(args.corpus)
        model = load_checkpoint(args.checkpoint)
        eer_res = eval_eer(model, corpus, config.eval.enroll_n,
                           config.eval.repeats, config.eval.seed)
        result = {"eer_pct": 100.0 * eer_res.eer, "threshold": eer_res.threshold,
                  "far_pct": 100.0 * eer_res.far, "frr_pct": 100.0 * eer_res.frr}
        rows = list(eer_res.rows)
        if args.plan:
            plan = load_plan(args.plan)
            asr_res = eval_asr(model, corpus, plan.triggers, eer_res.threshold,
                               config.eval.enroll_n, config.eval.repeats, config.eval.seed)
            result["asr_pct"] = 100.0 * asr_res.asr
            result["trigger_passes"] = asr_res.trigger_passes
            rows += asr_res.rows
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(result, indent=2))
        write_scores_csv(rows, out / "scores.csv")
        print(json.dumps(result, indent=2))
        return 0

    if args.command == "run":
        config = _load_config(args)
        report = run_experiment(config, out_dir=out)
        print(report.to_json())
        return 0

    if args.command == "ablate":
        config = _load_config(args)
        values = [float(v) for v in args.values.split(",")]
        rows = ablation_sweep(config, args.param, values,
                              repeats=args.repeats, out_dir=out)
        for row in rows:
            print(f"{args.param}={row.value:g}: ASR {row.mean_asr_pct:.1f}% "
                  f"(+/- {row.std_asr_pct:.1f}), EER {row.mean_eer_pct:.1f}% "
                  f"(+/- {row.std_eer_pct:.1f})")
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
