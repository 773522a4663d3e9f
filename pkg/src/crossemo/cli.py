"""Operator surface: subcommands chaining the toolkit into experiments.

Every run directory is self-describing: the resolved configuration, seeds
and package version land next to the outputs, and canonical files are
written atomically. Exit codes: 0 ok, 2 validation failure, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import CrossEmoError, ValidationFailure
from .ioutil import atomic_write_text, write_json

FOLD_STRATEGIES = ("speaker-rotation", "session-holdout", "proportional", "split-80-20")


def _out_root() -> Path:
    return Path(os.environ.get("CROSSEMO_OUT_ROOT", "runs"))


def cmd_synth(args) -> int:
    from .synth import generate_corpus, load_spec

    spec = load_spec(args.spec)
    out_dir = Path(args.out) if args.out else _out_root() / f"synth-{spec.name}"
    manifest = generate_corpus(spec, out_dir)
    counts = dict(sorted(manifest.class_counts.items()))
    print(f"[crossemo] wrote {len(manifest)} utterances to {out_dir} {counts}")
    print(out_dir / "manifest.jsonl")
    return 0


def cmd_prepare(args) -> int:
    from . import corpus

    manifest = corpus.load_manifest(args.manifest)
    discards = None
    if args.label_map == "iemocap":
        result = corpus.map_labels_iemocap(manifest)
        manifest, discards = result.manifest, result.discarded
    elif args.label_map == "mosei":
        result = corpus.map_labels_mosei(manifest)
        manifest, discards = result.manifest, result.discarded

    if args.strategy == "speaker-rotation":
        plan = corpus.make_folds_speaker_rotation(
            manifest, n_folds=args.n_folds, test_speakers=args.test_speakers
        )
    elif args.strategy == "session-holdout":
        plan = corpus.make_folds_session_holdout(manifest, reverse_order=args.reverse_sessions)
    elif args.strategy == "proportional":
        plan = corpus.make_folds_proportional(
            manifest, n_folds=args.n_folds, test_fraction=args.test_fraction, seed=args.seed
        )
    elif args.strategy == "split-80-20":
        plan = corpus.make_split_80_20(manifest, seed=args.seed)
    else:
        raise ValidationFailure(
            f"unknown fold strategy {args.strategy!r}; valid: {', '.join(FOLD_STRATEGIES)}"
        )
    corpus.validate_fold_plan(plan, manifest)

    out_dir = Path(args.out) if args.out else _out_root() / "prepare"
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus.save_manifest(manifest, out_dir / "manifest.jsonl")
    corpus.save_fold_plan(plan, out_dir / "folds.json")
    if discards is not None:
        lines = ["label,count"] + [f"{k},{v}" for k, v in sorted(discards.items())]
        atomic_write_text(out_dir / "discards.csv", "\n".join(lines) + "\n")
    print(
        f"[crossemo] {len(plan.folds)} folds ({plan.strategy}) over "
        f"{len(manifest)} records -> {out_dir}"
    )
    print(out_dir / "folds.json")
    return 0


def cmd_augment(args) -> int:
    from . import augment, corpus

    manifest = corpus.load_manifest(args.manifest)
    out_dir = Path(args.out) if args.out else _out_root() / f"augment-{args.recipe}"
    wav_dir = out_dir / "wav"
    plan = augment.plan_augmentation(manifest, args.recipe, args.seed, wav_dir)
    augment.save_plan(plan, out_dir / "plan.json")
    expanded, outcomes = augment.apply_plan(plan, manifest)
    corpus.save_manifest(expanded, out_dir / "manifest.jsonl")
    atomic_write_text(out_dir / "summary.csv", augment.outcomes_to_csv(outcomes))
    failures = sum(1 for o in outcomes if o.status != "ok")
    print(
        f"[crossemo] rendered {len(outcomes) - failures}/{len(outcomes)} variants; "
        f"expanded manifest has {len(expanded)} records"
    )
    print(out_dir / "manifest.jsonl")
    return 0 if failures == 0 else 3


def _run_training(cfg, resume: bool = False):
    from .corpus import load_fold_plan, load_manifest, validate_fold_plan
    from .features import FeatureStore
    from .nn.models import build_model
    from .train import train_model

    manifest = load_manifest(cfg.manifest)
    plan = load_fold_plan(cfg.fold_plan)
    validate_fold_plan(plan, manifest)
    if not 0 <= cfg.fold_index < len(plan.folds):
        raise ValidationFailure(
            f"fold_index {cfg.fold_index} out of range for {len(plan.folds)} folds"
        )
    fold = plan.folds[cfg.fold_index]
    store = FeatureStore(manifest, cfg.features, cfg.feature_cache)
    graph = build_model(cfg.arch, cfg.model, seed=cfg.seed)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.resolved_json()
    resolved["package_version"] = __version__
    resolved["deterministic_mode"] = True
    write_json(out_dir / "config.resolved.json", resolved)
    result = train_model(
        graph, manifest, fold, store, cfg.train, out_dir, verbose=True, resume=resume
    )
    return manifest, plan, fold, store, graph, result


def cmd_train(args) -> int:
    from .config import load_json_config, resolve_experiment_config

    raw = load_json_config(args.config)
    cfg = resolve_experiment_config(raw, base_dir=Path(args.config).parent)
    _, _, _, _, _, result = _run_training(cfg, resume=args.resume)
    print(
        f"[crossemo] trained {len(result.history)} epoch records; "
        f"best val_ua {result.best_val_ua:.2f} at epoch {result.best_epoch}"
    )
    print(cfg.out_dir)
    return 0


def cmd_eval(args) -> int:
    from .corpus import load_manifest
    from .evaluation import evaluate_model, predictions_to_csv
    from .features import FeatureStore
    from .nn.checkpoint import graph_from_checkpoint, load_checkpoint
    from .features import FbankConfig
    from .config import load_json_config

    if not Path(args.checkpoint).exists():
        raise ValidationFailure(f"checkpoint not found: {args.checkpoint}")
    data = load_checkpoint(args.checkpoint)
    graph = graph_from_checkpoint(data)
    classes = tuple(data.extra.get("classes", []))
    if not classes:
        raise ValidationFailure("checkpoint carries no class list")

    if args.features_config:
        feat_cfg = FbankConfig.from_json(load_json_config(args.features_config))
    else:
        run_cfg_path = Path(args.checkpoint).parent / "config.resolved.json"
        if not run_cfg_path.exists():
            raise ValidationFailure(
                "no --features-config given and no config.resolved.json next to "
                "the checkpoint"
            )
        feat_cfg = FbankConfig.from_json(json.loads(run_cfg_path.read_text())["features"])

    out_dir = Path(args.out) if args.out else _out_root() / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    for manifest_path in args.manifests:
        manifest = load_manifest(manifest_path)
        store = FeatureStore(manifest, feat_cfg)
        result = evaluate_model(
            graph, classes, manifest, store, restrict_classes=args.restrict_classes
        )
        tag = manifest.name
        payload = {
            "test_set": tag,
            "checkpoint": str(args.checkpoint),
            "checkpoint_epoch": data.epoch,
            "restrict_classes": result.restricted,
            "classes": list(result.confusion.classes),
            "confusion": result.confusion.counts.tolist(),
            "metrics": result.metrics.to_json(),
        }
        write_json(out_dir / f"metrics_{tag}.json", payload)
        atomic_write_text(out_dir / f"predictions_{tag}.csv", predictions_to_csv(result))
        print(
            f"[crossemo] {tag}: ua_eq1 {result.metrics.ua_eq1:.2f} "
            f"wa_eq2 {result.metrics.wa_eq2:.2f} "
            f"mean_class_recall {result.metrics.mean_class_recall:.2f} "
            f"overall {result.metrics.overall_accuracy:.2f}"
        )
    print(out_dir)
    return 0


def cmd_report(args) -> int:
    import glob as globmod

    from .evaluation import MetricSet
    from .report import RunRecord, build_cross_matrix, save_report

    runs = []
    for pattern in args.runs:
        for path in sorted(globmod.glob(pattern)):
            obj = json.loads(Path(path).read_text())
            runs.append(
                RunRecord(
                    train_tag=obj["train_tag"],
                    test_tag=obj["test_tag"],
                    fold=int(obj["fold"]),
                    metrics=MetricSet(**obj["metrics"]),
                    train_components=tuple(obj.get("train_components", [])),
                )
            )
    if not runs:
        raise ValidationFailure(f"no run files matched {args.runs}")
    report = build_cross_matrix(runs)
    out_dir = Path(args.out) if args.out else _out_root() / "report"
    paths = save_report(report, out_dir, metric=args.metric)
    missing = sum(1 for c in report.cells.values() if c["missing"])
    print(
        f"[crossemo] report over {len(report.models)} models x "
        f"{len(report.test_sets)} test sets ({missing} missing cells)"
    )
    print(paths["table"])
    return 0


def cmd_pipeline(args) -> int:
    """Thin driver: synth -> folds -> (augment) -> train -> eval -> report
    from one config file."""
    from . import corpus
    from .config import load_json_config, resolve_experiment_config
    from .evaluation import evaluate_model
    from .features import FeatureStore
    from .report import RunRecord, build_cross_matrix, save_report
    from .synth import SynthCorpusSpec, generate_corpus

    raw = load_json_config(args.config)
    base_dir = Path(args.config).parent
    out_dir = Path(raw.get("out_dir", _out_root() / "pipeline"))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest_path = raw.get("manifest")
    if "synth" in raw:
        spec = SynthCorpusSpec.from_json(raw["synth"])
        corpus_dir = out_dir / f"corpus-{spec.name}"
        generate_corpus(spec, corpus_dir)
        manifest_path = str(corpus_dir / "manifest.jsonl")
    if manifest_path is None:
        raise ValidationFailure("pipeline config needs either 'synth' or 'manifest'")

    manifest = corpus.load_manifest(
        manifest_path if Path(manifest_path).is_absolute() else base_dir / manifest_path
    )
    folds_cfg = raw.get("folds", {"strategy": "split-80-20", "seed": 0})
    strategy = folds_cfg.get("strategy", "split-80-20")
    if strategy == "speaker-rotation":
        plan = corpus.make_folds_speaker_rotation(
            manifest,
            n_folds=folds_cfg.get("n_folds", 5),
            test_speakers=folds_cfg.get("test_speakers", 5),
        )
    elif strategy == "session-holdout":
        plan = corpus.make_folds_session_holdout(manifest)
    elif strategy == "proportional":
        plan = corpus.make_folds_proportional(
            manifest,
            n_folds=folds_cfg.get("n_folds", 5),
            test_fraction=folds_cfg.get("test_fraction", 0.2),
            seed=folds_cfg.get("seed", 0),
        )
    elif strategy == "split-80-20":
        plan = corpus.make_split_80_20(manifest, seed=folds_cfg.get("seed", 0))
    else:
        raise ValidationFailure(
            f"unknown fold strategy {strategy!r}; valid: {', '.join(FOLD_STRATEGIES)}"
        )
    corpus.save_manifest(manifest, out_dir / "manifest.jsonl")
    corpus.save_fold_plan(plan, out_dir / "folds.json")

    train_manifest = manifest
    manifest_file = out_dir / "manifest.jsonl"
    if "augment" in raw:
        from . import augment as augment_mod

        recipe = raw["augment"].get("recipe", "2sp-2vol")
        seed = raw["augment"].get("seed", 0)
        aug_dir = out_dir / "augment"
        # expand the train side of every fold; test ids stay original
        aug_plan = augment_mod.plan_augmentation(manifest, recipe, seed, aug_dir / "wav")
        augment_mod.save_plan(aug_plan, aug_dir / "plan.json")
        expanded, outcomes = augment_mod.apply_plan(aug_plan, manifest)
        atomic_write_text(aug_dir / "summary.csv", augment_mod.outcomes_to_csv(outcomes))
        corpus.save_manifest(expanded, out_dir / "manifest.augmented.jsonl")
        train_manifest = expanded
        manifest_file = out_dir / "manifest.augmented.jsonl"
        aug_by_source: dict = {}
        for r in expanded.records:
            if r.augmented:
                aug_by_source.setdefault(r.source_id, []).append(r.id)
        new_folds = []
        for fold in plan.folds:
            extra = [a for u in fold.train_ids for a in aug_by_source.get(u, [])]
            new_folds.append(corpus.Fold(tuple(fold.train_ids) + tuple(extra), fold.test_ids))
        plan = corpus.FoldPlan(strategy=plan.strategy, folds=tuple(new_folds), seed=plan.seed)
        corpus.save_fold_plan(plan, out_dir / "folds.json")

    runs = []
    fold_indices = raw.get("fold_indices", list(range(len(plan.folds))))
    for fold_index in fold_indices:
        run_raw = dict(raw)
        run_raw.pop("synth", None)
        run_raw.pop("folds", None)
        run_raw.pop("augment", None)
        run_raw.pop("fold_indices", None)
        run_raw["manifest"] = str(manifest_file)
        run_raw["fold_plan"] = str(out_dir / "folds.json")
        run_raw["fold_index"] = fold_index
        run_raw["out_dir"] = str(out_dir / f"fold{fold_index}")
        cfg = resolve_experiment_config(run_raw, base_dir=base_dir)
        _, _, fold, store, graph, result = _run_training(cfg)

        graph.set_mode("eval")
        test_records = tuple(train_manifest.get(u) for u in fold.test_ids)
        test_manifest = corpus.CorpusManifest(
            name=f"{manifest.name}-test", records=test_records
        )
        eval_result = evaluate_model(graph, result.classes, test_manifest, store)
        runs.append(
            RunRecord(
                train_tag=manifest.name,
                test_tag=manifest.name,
                fold=fold_index,
                metrics=eval_result.metrics,
            )
        )
        for eval_path in cfg.eval_manifests:
            em = corpus.load_manifest(eval_path)
            estore = FeatureStore(em, cfg.features)
            eres = evaluate_model(
                graph, result.classes, em, estore, restrict_classes=cfg.restrict_classes
            )
            runs.append(
                RunRecord(
                    train_tag=manifest.name,
                    test_tag=em.name,
                    fold=fold_index,
                    metrics=eres.metrics,
                )
            )

    report = build_cross_matrix(runs)
    paths = save_report(report, out_dir / "report")
    print(f"[crossemo] pipeline complete -> {out_dir}")
    print(paths["table"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossemo",
        description="Cross-corpus speech emotion recognition experiment toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"crossemo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="map labels and build a fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--label-map", choices=("none", "iemocap", "mosei"), default="none")
    p.add_argument("--strategy", required=True)
    p.add_argument("--n-folds", type=int, default=5)
    p.add_argument("--test-speakers", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--reverse-sessions", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="plan and render an augmentation recipe")
    p.add_argument("--manifest", required=True)
    p.add_argument("--recipe", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", help="train a model from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on test manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifests", nargs="+", required=True)
    p.add_argument("--features-config")
    p.add_argument("--restrict-classes", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="assemble a cross-corpus report from run files")
    p.add_argument("--runs", nargs="+", required=True, help="glob patterns of run JSON files")
    p.add_argument("--metric", default="ua_eq1")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="chain synth/prepare/augment/train/eval/report")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrossEmoError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())
