"""Command-line interface: ``gruntlab <command> [flags]``.

Commands: synth, validate, slice, extract, crossval, report, train, predict, gradcheck.
Flags may also come from a flat ``key=value`` file given with ``--config``;
explicit flags win over the file, the file wins over defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import eval as ev
from .features import FEATURES, SEQUENCE_FEATURES, extract_all
from .ingest import (DatasetManifest, SyntheticSpec, generate_synthetic_corpus, load_clip_store,
                     read_manifest, shuffle_scores_within_players, slice_recordings,
                     validate_manifest, write_clip_store)
from .learn.checkpoint import load_checkpoint, save_checkpoint
from .learn.nets import grad_check, net_predict, tiny_config
from .learn.svm import svm_predict

log = logging.getLogger("gruntlab")

EXIT_CONFIG = 2
EXIT_LEAKAGE = 3


class ConfigError(ValueError):
    pass


def read_config_file(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _float_pair(text: str):
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def _c_grid(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _hp_list(text: str) -> List[str]:
    if text == "all":
        return list(ev.HP_ORDER)
    ids = [v.strip() for v in text.split(",") if v.strip()]
    for i in ids:
        ev.HpSet.get(i)
    return ids


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SyntheticSpec(n_players=args.players, clips_per_player=args.clips_per_player,
                         f0_range_a=args.f0_a, f0_range_b=args.f0_b,
                         amplitude_effect=args.amplitude_effect,
                         duration_effect=args.duration_effect, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    manifest, clips = generate_synthetic_corpus(spec)
    write_clip_store(args.out, manifest, clips)
    print(validate_manifest(manifest).render())
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def cmd_validate(args) -> int:
    manifest = read_manifest(args.manifest)
    if args.recordings:
        manifest = manifest.resolve_audio(args.recordings)
    report = validate_manifest(manifest)
    print(report.render())
    return 0 if report.ok else 1


def cmd_slice(args) -> int:
    manifest = read_manifest(args.manifest).resolve_audio(args.recordings)
    clips = slice_recordings(manifest, normalize=not args.no_normalize)
    write_clip_store(args.out, manifest, clips)
    print(f"wrote {len(clips)} clips to {args.out}")
    return 0


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    if args.clips:
        return Path(args.clips) / "manifest.csv"
    raise ConfigError("--manifest or --clips is required")


def _load_corpus(args):
    manifest = read_manifest(_manifest_path(args))
    if not args.clips:
        raise ConfigError("--clips (clip store directory) is required")
    return manifest, load_clip_store(args.clips, manifest)


def cmd_extract(args) -> int:
    if args.feature not in FEATURES:
        raise ConfigError(f"unknown feature {args.feature}")
    manifest, clips = _load_corpus(args)
    feats, computed = extract_all(clips, args.feature, args.cache, args.jobs)
    shape = next(iter(feats.values())).shape if feats else None
    print(f"{args.feature}: {len(feats)} entries of shape {shape}, {computed} computed, "
          f"{len(feats) - computed} reused")
    return 0


def _feature_spec(args) -> ev.FeatureSpec:
    agg = args.aggregation
    if args.model == "svm" and agg is None and args.feature in SEQUENCE_FEATURES:
        agg = "flat"
    return ev.FeatureSpec(args.feature, agg)


def _models(args) -> list:
    if args.model == "svm":
        grid = args.c_grid or [1e-3]
        return [ev.SvmSpec(c, args.iterations) for c in grid]
    if args.model in ("crnn", "lstm_rnn"):
        hps = args.hp or ["I"]
        return [ev.NetSpec(args.model, hp, args.epochs, args.lstm_hidden, args.feature)
                for hp in hps]
    if args.model == "constant":
        return [ev.ConstantSpec(0)]
    raise ConfigError(f"unknown model {args.model}")


def _experiment_setup(args):
    if args.feature not in FEATURES:
        raise ConfigError(f"unknown feature {args.feature}")
    feature = _feature_spec(args)
    models = _models(args)
    try:
        for m in models:
            ev.check_combination(feature, m)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.task == "sex" and args.subset != "combined":
        raise ConfigError("the sex task needs --subset combined")
    return feature, models


def cmd_crossval(args) -> int:
    feature, models = _experiment_setup(args)
    manifest, clips = _load_corpus(args)
    if args.shuffle_scores is not None:
        manifest = shuffle_scores_within_players(manifest, args.shuffle_scores)
    feats, computed = extract_all(clips, feature.name, args.cache, args.jobs)
    log.info("features %s: %d computed, %d cached", feature.name, computed, len(feats) - computed)
    reports, best = ev.grid_search(manifest, feats, args.task, args.subset, feature, models,
                                   seed=args.seed, k=args.folds, jobs=args.jobs)
    if args.shuffle_scores is not None:
        for r in reports:
            r.notes.append(f"score labels shuffled within players (seed {args.shuffle_scores})")
            r.fingerprint["shuffle_seed"] = args.shuffle_scores
    doc = ev.report_document(reports, best)
    table = ev.render_table(doc["reports"], best)
    out = Path(args.out)
    _atomic_write_text(out / "report.json", ev.dumps_report(doc))
    _atomic_write_text(out / "report.txt", table)
    print(table)
    return 0


def cmd_report(args) -> int:
    merged = []
    for path in args.reports:
        try:
            doc = ev.load_report_document(Path(path).read_text(encoding="utf-8"))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        merged.extend(doc["reports"])
    if not merged:
        raise ConfigError("no reports to merge")
    merged.sort(key=lambda r: (-r["uar_mean"], r["uar_std"]))
    table = ev.render_table(merged, sort=True)
    print(table)
    if args.out:
        out = Path(args.out)
        doc = {"schema_version": ev.REPORT_SCHEMA_VERSION, "timestamp": None,
               "best": 0, "reports": merged}
        _atomic_write_text(out / "merged.json", ev.dumps_report(doc))
        _atomic_write_text(out / "merged.txt", table)
    return 0


def cmd_train(args) -> int:
    feature, models = _experiment_setup(args)
    if len(models) != 1:
        raise ConfigError("train takes a single C value or HP set")
    manifest, clips = _load_corpus(args)
    data = manifest.subset(ev.SUBSET_SEX[args.subset])
    feats, _ = extract_all({r.key: clips[r.key] for r in data.records}, feature.name, args.cache,
                           args.jobs)
    keys = [r.key for r in data.records]
    X = ev.design_matrix(feats, keys, feature, models[0])
    y = ev.labels_for(data, args.task)
    predictor = models[0].fit(X, y, args.seed)
    meta = {"task": args.task, "subset": args.subset, "feature": feature.describe(),
            "model": models[0].describe()}
    if args.model == "svm":
        save_checkpoint(args.checkpoint, predictor.model, meta=meta)
    elif args.model == "constant":
        raise ConfigError("the constant baseline has no checkpoint")
    else:
        save_checkpoint(args.checkpoint, predictor.params, predictor.std, meta=meta)
    print(f"wrote {args.checkpoint}")
    return 0


def cmd_predict(args) -> int:
    model, std, meta = load_checkpoint(args.checkpoint)
    feature = ev.FeatureSpec(meta["feature"]["name"], meta["feature"]["aggregation"])
    manifest, clips = _load_corpus(args)
    feats, _ = extract_all(clips, feature.name, args.cache, args.jobs)
    keys = [r.key for r in manifest.records]
    classes = ev.CLASS_NAMES[meta["task"]]
    if meta["model"]["kind"] == "svm":
        X = ev.design_matrix(feats, keys, feature, ev.SvmSpec(1.0))
        labels, _ = svm_predict(model, X)
    else:
        X = np.stack([feats[k] for k in keys])
        labels = np.argmax(net_predict(model, std.apply(X)), axis=1)
    print("clip,prediction")
    for k, lab in zip(keys, labels):
        print(f"{k},{classes[int(lab)]}")
    return 0


def cmd_gradcheck(args) -> int:
    ok = True
    for arch in args.arch:
        rep = grad_check(tiny_config(arch), args.trials, args.seed)
        passed = rep.max_rel_error < args.tol
        ok &= passed
        print(f"{arch}: {rep.n_params} params, {rep.trials} trials, max rel err "
              f"{rep.max_rel_error:.3e}, mean {rep.mean_rel_error:.3e} -> "
              f"{'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


# --------------------------------------------------------------------------
# parser


def _add_corpus(p):
    p.add_argument("--manifest", help="manifest CSV (default: <clips>/manifest.csv)")
    p.add_argument("--clips", help="clip store directory")
    p.add_argument("--cache", help="feature cache directory")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")


def _add_experiment(p):
    p.add_argument("--task", choices=ev.TASKS, default="sex")
    p.add_argument("--subset", choices=ev.SUBSETS, default="combined")
    p.add_argument("--feature", choices=FEATURES, default="mfcc")
    p.add_argument("--aggregation", choices=("mean", "middle", "flat"), default=None)
    p.add_argument("--model", choices=("svm", "lstm_rnn", "crnn", "constant"), default="svm")
    p.add_argument("--hp", type=_hp_list, default=None, help="HP set ids, comma separated, or 'all'")
    p.add_argument("--c-grid", type=_c_grid, default=None, help="comma separated C values")
    p.add_argument("--iterations", type=int, default=1000, help="SVM epochs")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lstm-hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gruntlab", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.set_defaults(_commands=sub.choices)

    p = sub.add_parser("synth", help="write a synthetic grunt corpus")
    p.add_argument("--players", type=int, default=20)
    p.add_argument("--clips", dest="clips_per_player", type=int, default=30,
                   help="clips per player (even)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f0-a", type=_float_pair, default=(150.0, 300.0), help="male F0 range lo,hi")
    p.add_argument("--f0-b", type=_float_pair, default=(400.0, 600.0), help="female F0 range lo,hi")
    p.add_argument("--amplitude-effect", type=float, default=0.20)
    p.add_argument("--duration-effect", type=float, default=0.10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check manifest balance and structure")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recordings", help="directory of <recording_id>.wav files")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("slice", help="cut annotated clips out of recordings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recordings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-normalize", action="store_true")
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("extract", help="fill the feature cache")
    _add_corpus(p)
    p.add_argument("--feature", choices=FEATURES, required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("crossval", help="player-independent k-fold cross-validation")
    _add_corpus(p)
    _add_experiment(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--shuffle-scores", type=int, default=None, metavar="SEED",
                   help="permute score labels within each player (control run)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_crossval)

    p = sub.add_parser("report", help="merge report.json files into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("train", help="train one model on all clips and write a checkpoint")
    _add_corpus(p)
    _add_experiment(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label clips with a checkpoint")
    _add_corpus(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference check of the network gradients")
    p.add_argument("--arch", nargs="+", choices=("crnn", "lstm_rnn"), default=["crnn", "lstm_rnn"])
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        file_values = read_config_file(args.config)
        sub = args._commands[args.command]
        known = {a.dest: a for a in sub._actions}
        unknown = sorted(set(file_values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        defaults = {}
        for key, raw in file_values.items():
            action = known[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            elif action.nargs in ("+", "*"):
                value = [action.type(v) if action.type else v for v in raw.split()]
            else:
                try:
                    value = action.type(raw) if action.type else raw
                except (TypeError, ValueError, KeyError) as exc:
                    raise ConfigError(f"config {key}={raw}: {exc}") from None
            if action.choices is not None and not isinstance(value, list) and value not in action.choices:
                raise ConfigError(f"config {key}={raw}: not one of {list(action.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ev.LeakageError as exc:
        print(f"leakage assertion failed: {exc}", file=sys.stderr)
        return EXIT_LEAKAGE
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
