"""Command-line entry points.

Exit codes: 0 success, 1 usage error, 2 runtime error. Training configs are
JSON files mirroring :class:`TrainConfig`; any field can be overridden with a
flag of the same dotted name, e.g. ``--schedule.total_steps 200`` or
``--model.d_model=64``. The resolved config is echoed to ``config.json`` in the
run directory, whose default root is ``$CACOPHONY_RUN_DIR`` (else ``./runs``).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio import load_wav
from .checkpoint import CheckpointError, load_checkpoint
from .data import EVENT_KINDS, KIND_LABELS, generate_corpus, item_kind, load_corpus, split_corpus
from .evaluation import (AQA_PRESET, HEAR_PRESET, ClapModel, embed_clips, embed_corpus, embed_texts,
                         generate_caption, modality_gap, retrieval_eval, train_probe, write_json,
                         write_rank_csv, zero_shot_classify)
from .gradcheck import END_TO_END_TOL, PRIMITIVE_TOL, run_suite
from .plot import PlotError, plot_curves
from .text import detokenize
from .training import TrainConfig, TrainingError, stage1_train, stage2_train

log = logging.getLogger("audiotext")

RUN_DIR_ENV = "CACOPHONY_RUN_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_help()}")


# ----------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(extra) -> dict:
    """``['--a.b', '3', '--c=x']`` -> ``{'a.b': 3, 'c': 'x'}``."""
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise UsageError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra) or extra[i + 1].startswith("--"):
                raise UsageError(f"flag --{key} needs a value")
            value = extra[i + 1]
            i += 2
        out[key] = _parse_value(value)
    return out


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for k, v in update.items():
        if k not in base:
            raise UsageError(f"unknown config key {prefix + k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {prefix + k!r} must be an object")
            _merge(base[k], v, prefix + k + ".")
        else:
            base[k] = v


def _set_dotted(base: dict, dotted: str, value) -> None:
    node = base
    parts = dotted.split(".")
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise UsageError(f"unknown config key {dotted!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise UsageError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def resolve_train_config(stage: str, config_path, overrides: dict, seed) -> TrainConfig:
    base = TrainConfig(stage=stage).to_dict()
    base["model"]["decoder_depth"] = None  # re-derived from text_depth unless set
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}") from exc
        _merge(base, loaded)
    for k, v in overrides.items():
        _set_dotted(base, k, v)
    if seed is not None:
        base["seed"] = seed
    if base["stage"] != stage:
        raise UsageError(f"config stage {base['stage']!r} does not match the subcommand")
    try:
        return TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def run_dir_for(args, name: str) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    return root / name


def _no_overrides(overrides: dict) -> None:
    if overrides:
        raise UsageError(f"unrecognized arguments: {' '.join('--' + k for k in overrides)}")


def _load_data(args):
    corpus = load_corpus(args.data)
    if getattr(args, "val_data", None):
        return corpus, load_corpus(args.val_data)
    return split_corpus(corpus)


def _load_model(path) -> ClapModel:
    return ClapModel.from_checkpoint(load_checkpoint(path))


def _echo(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


# ----------------------------------------------------------------------------
# commands


def cmd_synth_data(args, overrides):
    _no_overrides(overrides)
    kinds = tuple(args.kinds.split(",")) if args.kinds else EVENT_KINDS
    bad = set(kinds) - set(EVENT_KINDS)
    if bad:
        raise UsageError(f"unknown event kinds {sorted(bad)}")
    corpus = generate_corpus(args.seed, args.n, (args.min_dur, args.max_dur), args.out,
                             max_events=args.max_events, kinds=kinds,
                             unique_captions=not args.allow_duplicates)
    print(f"wrote {len(corpus)} clips to {args.out}")
    return 0


def _train(args, overrides, stage):
    cfg = resolve_train_config(stage, args.config, overrides, args.seed)
    train, val = _load_data(args)
    run_dir = run_dir_for(args, f"train-{stage}-seed{cfg.seed}")
    fn = stage1_train if stage == "mae" else stage2_train
    result = fn(cfg, train, val if len(val) else None, run_dir=run_dir, resume=args.resume)
    last = result.metrics.rows[-1]
    print(f"{stage}: {result.step} steps, last {last.split} loss {last.loss_total:.6f}; run dir {run_dir}")
    return 0


def cmd_train_mae(args, overrides):
    return _train(args, overrides, "mae")


def cmd_train_clap(args, overrides):
    return _train(args, overrides, "clap")


def cmd_eval_retrieval(args, overrides):
    _no_overrides(overrides)
    model = _load_model(args.checkpoint)
    eb = embed_corpus(load_corpus(args.data), model, args.budget, args.fixed_len, args.seed)
    ks = tuple(int(k) for k in args.ks.split(","))
    reports = retrieval_eval(eb.audio, eb.text, ks)
    out = run_dir_for(args, f"eval-seed{args.seed}") / "reports"
    summary = {d: r.to_dict() for d, r in reports.items()}
    summary["seed"] = args.seed
    write_json(out / "retrieval.json", summary)
    write_rank_csv(out / "retrieval_ranks.csv", reports)
    _echo(summary)
    return 0


def cmd_eval_zeroshot(args, overrides):
    _no_overrides(overrides)
    model = _load_model(args.checkpoint)
    corpus = load_corpus(args.data)
    kinds = sorted({item_kind(it) for it in corpus.items}, key=EVENT_KINDS.index)
    labels = args.labels.split(",") if args.labels else [KIND_LABELS[k] for k in kinds]
    if args.labels and len(labels) != len(kinds):
        raise UsageError("--labels needs one name per event kind present, in kind order")
    truth = [kinds.index(item_kind(it)) for it in corpus.items]
    audio = embed_clips(model, [it.audio() for it in corpus.items], args.budget, None, args.seed)
    preds, acc = zero_shot_classify(audio, labels, args.template, model, truth)
    summary = {"labels": labels, "template": args.template, "accuracy": acc,
               "chance": 100.0 / len(labels), "predictions": preds.tolist(), "seed": args.seed}
    write_json(run_dir_for(args, f"eval-seed{args.seed}") / "reports" / "zeroshot.json", summary)
    _echo({k: summary[k] for k in ("labels", "accuracy", "chance")})
    return 0


def cmd_eval_gap(args, overrides):
    _no_overrides(overrides)
    model = _load_model(args.checkpoint)
    eb = embed_corpus(load_corpus(args.data), model, args.budget, None, args.seed)
    gap = modality_gap(eb.audio, eb.text)
    summary = dict(gap.to_dict(), seed=args.seed)
    write_json(run_dir_for(args, f"eval-seed{args.seed}") / "reports" / "gap.json", summary)
    print(f"modality gap magnitude {gap.magnitude:.6f}")
    return 0


def cmd_caption(args, overrides):
    _no_overrides(overrides)
    if bool(args.wav) == bool(args.data):
        raise UsageError("give exactly one of --wav or --data")
    model = _load_model(args.checkpoint)
    if args.wav:
        clips, truth = [load_wav(args.wav)], [None]
    else:
        corpus = load_corpus(args.data)
        clips, truth = [it.audio() for it in corpus.items], corpus.captions()
    rows = []
    for i, clip in enumerate(clips):
        seq = generate_caption(clip, model, args.temperature, args.max_len, args.seed + i, args.budget)
        text = detokenize(seq.ids, model.vocab)
        rows.append({"caption": text, "truth": truth[i], "exact": truth[i] is not None and text == truth[i]})
        print(text)
    summary = {"temperature": args.temperature, "seed": args.seed, "captions": rows}
    if args.data:
        summary["exact_match"] = 100.0 * float(np.mean([r["exact"] for r in rows]))
    write_json(run_dir_for(args, f"eval-seed{args.seed}") / "reports" / "captions.json", summary)
    return 0


def cmd_probe(args, overrides):
    _no_overrides(overrides)
    ck = load_checkpoint(args.checkpoint)
    model = ClapModel.from_checkpoint(ck)
    corpus = load_corpus(args.data)
    kinds = sorted({item_kind(it) for it in corpus.items}, key=EVENT_KINDS.index)
    labels = np.array([kinds.index(item_kind(it)) for it in corpus.items])
    if args.shuffle_labels:
        labels = np.random.default_rng(args.seed).permutation(labels)
    feats = embed_clips(model, [it.audio() for it in corpus.items], args.budget, None, args.seed)
    preset = AQA_PRESET if args.preset == "aqa" else HEAR_PRESET
    if args.preset == "aqa":
        # question-answering style: the audio embedding concatenated with a question embedding
        q = embed_texts(model, [args.question])
        feats = np.concatenate([feats, np.repeat(q, len(feats), axis=0)], axis=1)
    cfg = dataclasses.replace(preset, seed=args.seed, epochs=args.epochs or preset.epochs)
    res = train_probe(feats, labels, cfg, backbone=model.params)
    summary = {"preset": args.preset, "accuracy": res.accuracy, "train_accuracy": res.train_accuracy,
               "n_train": res.n_train, "n_test": res.n_test, "classes": kinds,
               "shuffled": bool(args.shuffle_labels), "seed": args.seed}
    write_json(run_dir_for(args, f"eval-seed{args.seed}") / "reports" / f"probe_{args.preset}.json", summary)
    _echo(summary)
    return 0


def cmd_gradcheck(args, overrides):
    _no_overrides(overrides)
    if args.mode != "float64":
        raise UsageError("finite-difference checks run in float64 only (--mode float64)")
    res = run_suite(range(args.seeds), args.points)
    ok = True
    print(f"{'check':32s} {'max rel err':>12s}  status")
    for name, err in sorted(res["primitives"].items()):
        good = err < PRIMITIVE_TOL
        ok &= good
        print(f"{name:32s} {err:12.3e}  {'ok' if good else 'FAIL'}")
    for seed, err in res["end_to_end"].items():
        good = err < END_TO_END_TOL
        ok &= good
        print(f"{'stage2_combined_loss seed ' + str(seed):32s} {err:12.3e}  {'ok' if good else 'FAIL'}")
    print(f"elapsed {res['seconds']:.1f} s")
    if args.out:
        write_json(args.out, {"primitives": res["primitives"],
                              "end_to_end": {str(k): v for k, v in res["end_to_end"].items()}})
    return 0 if ok else 2


def cmd_plot(args, overrides):
    _no_overrides(overrides)
    labels = args.labels.split(",") if args.labels else None
    path = plot_curves(args.metrics, args.column, args.out, args.split, labels)
    print(f"wrote {path}")
    return 0


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="audiotext", description="Two-stage audio-text training and evaluation.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="render a deterministic synthetic corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-dur", type=float, default=1.0)
    s.add_argument("--max-dur", type=float, default=2.0)
    s.add_argument("--max-events", type=int, default=3)
    s.add_argument("--kinds", default=None, help="comma-separated subset of " + ",".join(EVENT_KINDS))
    s.add_argument("--allow-duplicates", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    for name, func, help_ in (("train-mae", cmd_train_mae, "stage-1 masked-autoencoder pretraining"),
                              ("train-clap", cmd_train_clap, "stage-2 contrastive + captioning training")):
        s = sub.add_parser(name, help=help_ + "; extra --dotted.key VALUE flags override the config")
        s.add_argument("--config", default=None)
        s.add_argument("--data", required=True)
        s.add_argument("--val-data", default=None)
        s.add_argument("--run-dir", default=None)
        s.add_argument("--resume", default=None)
        s.add_argument("--seed", type=int, default=None)
        s.set_defaults(func=func)

    def eval_parser(name, func, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--run-dir", default=None)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--budget", type=int, default=None, help="max patches per clip (default: full)")
        s.set_defaults(func=func)
        return s

    s = eval_parser("eval-retrieval", cmd_eval_retrieval, "recall@k in both directions")
    s.add_argument("--data", required=True)
    s.add_argument("--ks", default="1,5,10")
    s.add_argument("--fixed-len", type=int, default=None)
    s = eval_parser("eval-zeroshot", cmd_eval_zeroshot, "prompt-based zero-shot classification")
    s.add_argument("--data", required=True)
    s.add_argument("--labels", default=None)
    s.add_argument("--template", default="This is a sound of [label]")
    s = eval_parser("eval-gap", cmd_eval_gap, "modality gap between audio and text centroids")
    s.add_argument("--data", required=True)
    s = eval_parser("caption", cmd_caption, "sample captions")
    s.add_argument("--wav", default=None)
    s.add_argument("--data", default=None)
    s.add_argument("--temperature", type=float, default=0.1)
    s.add_argument("--max-len", type=int, default=30)
    s = eval_parser("probe", cmd_probe, "MLP probe on frozen audio embeddings")
    s.add_argument("--data", required=True)
    s.add_argument("--preset", choices=("aqa", "hear"), default="hear")
    s.add_argument("--question", default="which sound comes first")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--shuffle-labels", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--mode", default="float64")
    s.add_argument("--seeds", type=int, default=10)
    s.add_argument("--points", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("plot", help="overlay metrics CSV curves as SVG")
    s.add_argument("--metrics", nargs="+", required=True)
    s.add_argument("--column", default="loss_total")
    s.add_argument("--split", choices=("train", "val"), default=None)
    s.add_argument("--labels", default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0, help="unused; accepted for uniformity")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
        overrides = parse_overrides(extra)
        return int(args.func(args, overrides))
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    except (ValueError, OSError, RuntimeError, KeyError, CheckpointError, TrainingError, PlotError,
            ad.NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
