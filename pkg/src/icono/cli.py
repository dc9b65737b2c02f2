"""Command-line entry point: ``icono <command> [options]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data_model import (
    ANNOTATED_HEADER,
    CHARACTERS,
    CONTENT_HEADER,
    GENDERS,
    SplitAssignment,
    load_manifest,
    resolve_data_root,
    select,
    split_dataset,
)
from .errors import ConfigError, DataError, IconoError

log = logging.getLogger("icono")


def _data_root(args, manifest=None) -> Path:
    root = resolve_data_root(args.data_root)
    if root is not None:
        return root
    if getattr(args, "config", None):
        from .pipeline import validate_config

        return validate_config(args.config).data_root
    if manifest is not None:
        return Path(manifest).resolve().parent
    raise ConfigError("no data root: pass --data-root, set ICONO_DATA_ROOT or give --config")


def _config(args):
    from .pipeline import validate_config

    return validate_config(args.config, args.data_root)


def _manifest_kind(path) -> str:
    with open(path, newline="") as fh:
        header = tuple(h.strip() for h in fh.readline().strip().split(","))
    if "style_id" in header:
        return "styled"
    if set(ANNOTATED_HEADER[:3]) <= set(header) and "character" in header:
        return "annotated"
    if set(CONTENT_HEADER) <= set(header):
        return "content"
    raise DataError(f"{path}: unrecognised manifest header {header}")


def _split_for(args, records):
    if getattr(args, "split", None):
        return SplitAssignment.load(args.split)
    return split_dataset(records, args.test_per_class, args.seed)


# -- commands --------------------------------------------------------------

def cmd_validate(args) -> int:
    cfg = _config(args)
    print(json.dumps({"data_root": str(cfg.data_root), "output_root": str(cfg.output_root), "seed": cfg.seed}))
    return 0


def cmd_run_all(args) -> int:
    from .pipeline import STAGES, run_all

    cfg = _config(args)
    stages = STAGES if not args.stages else tuple(args.stages.split(","))
    summary = run_all(cfg, stages)
    print(summary)
    return 0


def cmd_prepare(args) -> int:
    from .pipeline import run_all

    cfg = _config(args)
    print(run_all(cfg, ("prepare",)))
    return 0


def cmd_stylize(args) -> int:
    from .style_augment import StyleTransfer, build_styled_dataset, plan_pairings

    cfg = _config(args) if args.config else None
    data_root = _data_root(args, args.contents)
    styles = load_manifest(args.styles or cfg.annotated, "annotated")
    contents = load_manifest(args.contents or cfg.content, "content")
    per_gender = args.per_gender if args.per_gender is not None else (cfg.per_gender if cfg else 8)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    encoder = args.encoder_weights or (cfg.encoder_weights if cfg else None)
    decoder = args.decoder_weights or (cfg.decoder_weights if cfg else None)
    image_size = args.image_size or (cfg.style_image_size if cfg else 512)
    alpha = args.alpha if args.alpha is not None else (cfg.alpha if cfg else 1.0)

    plan = plan_pairings(styles, contents, per_gender, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    if args.plan_only:
        print(out / "plan.json")
        return 0
    transfer = StyleTransfer.load(encoder, decoder, image_size)
    build = build_styled_dataset(plan, out, transfer, data_root, alpha, args.workers)
    print(json.dumps({"manifest": str(build.manifest_path), "written": build.written,
                      "skipped": build.skipped, "failures": len(build.failures)}))
    return 0


def cmd_extract(args) -> int:
    from .feature_extractor import extract_batch, load_backbone

    cfg = _config(args) if args.config else None
    manifest = args.manifest or (cfg.annotated if cfg else None)
    if manifest is None:
        raise ConfigError("extract needs --manifest or --config")
    data_root = _data_root(args, manifest)
    weights = args.weights or (cfg.object_weights if cfg else None)
    image_size = args.image_size or (cfg.feature_image_size if cfg else 224)
    handle = load_backbone(weights, args.pretrain_source, image_size)
    records = load_manifest(manifest, "annotated", data_root)
    table = extract_batch(handle, records, args.region, data_root)
    table.save(args.features_out)
    print(json.dumps({"features": args.features_out, "rows": len(table), "skipped": len(table.skipped),
                      "failures": len(table.failures)}))
    return 0


def cmd_bench(args) -> int:
    from . import classical_bench as cb
    from .feature_extractor import FeatureTable
    from .pipeline import write_bench

    cfg = _config(args) if args.config else None
    records = load_manifest(args.labels, "annotated")
    split = _split_for(args, records)
    grid = cfg.grid if cfg else cb.GridSpec(cv_folds=args.cv_folds)
    result = cb.run_bench(FeatureTable.load(args.features_face), FeatureTable.load(args.features_body),
                          {r.image_id: r.character for r in records}, split, grid, args.seed,
                          standardize=args.standardize or (cfg.standardize if cfg else False))
    out = Path(args.out)
    artifacts = write_bench(result, out)
    split.save(out / "split.json")
    print(json.dumps({"out": str(out), "artifacts": artifacts + ["split.json"]}))
    return 0


def cmd_train(args) -> int:
    from .feature_extractor import load_backbone
    from .finetune import FineTunedModel, pipeline_A, pipeline_B, pipeline_C, write_epoch_logs
    from .eval_report import render_curves

    cfg = _config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    train_cfg = cfg.train
    if args.seed is not None:
        from dataclasses import replace

        train_cfg = replace(train_cfg, seed=args.seed)
    if args.pipeline == "C":
        if not args.init:
            raise ConfigError("--pipeline C needs --init <pipeline-B bundle>")
        records = load_manifest(cfg.annotated, "annotated", cfg.data_root)
        split = SplitAssignment.load(args.split) if args.split else split_dataset(records, cfg.test_per_class, cfg.seed)
        model = pipeline_C(FineTunedModel.load(args.init), select(records, split.train_ids), train_cfg, cfg.data_root)
    else:
        handle = load_backbone(args.weights or cfg.face_weights, "face_identification", cfg.feature_image_size)
        if args.pipeline == "A":
            records = load_manifest(cfg.annotated, "annotated", cfg.data_root)
            split = SplitAssignment.load(args.split) if args.split else split_dataset(records, cfg.test_per_class, cfg.seed)
            model = pipeline_A(select(records, split.train_ids), train_cfg, handle, cfg.data_root)
        else:
            from .style_augment import load_styled_manifest

            if not args.manifest:
                raise ConfigError("--pipeline B needs --manifest <styled manifest.csv>")
            samples = load_styled_manifest(args.manifest)
            if args.styled_ids:
                keep = set(json.loads(Path(args.styled_ids).read_text())["train_ids"])
                samples = [s for s in samples if s.sample_id in keep]
            model = pipeline_B(samples, train_cfg, handle, Path(args.manifest).parent)
    model.save(out)
    write_epoch_logs(model.epoch_logs, f"{out}.epochs.csv")
    render_curves(model.epoch_logs, out.with_suffix("").as_posix() + "_curves")
    print(json.dumps({"bundle": str(out), "epochs": len(model.epoch_logs)}))
    return 0


def cmd_evaluate(args) -> int:
    from .pipeline import write_report

    out = Path(args.out)
    if args.model == "classical":
        from . import classical_bench as cb
        from .eval_report import confusion, metrics
        from .feature_extractor import FeatureTable

        if not args.features or not args.family:
            raise ConfigError("--model classical needs --features and --family")
        records = load_manifest(args.test, "annotated")
        split = _split_for(args, records)
        labels = {r.image_id: r.character for r in records}
        table = FeatureTable.load(args.features)
        train_ids = [i for i in table.image_ids if i in split.train_ids]
        test_ids = [i for i in table.image_ids if i in split.test_ids]
        y_train = [labels[i] for i in train_ids]
        spec, _ = cb.grid_search(table.rows(train_ids), y_train, args.family, cb.GridSpec(cv_folds=args.cv_folds),
                                 args.seed)
        clf = cb.train_classifier(spec, table.rows(train_ids), y_train, args.seed)
        cm = confusion(list(clf.predict(table.rows(test_ids))), [labels[i] for i in test_ids], CHARACTERS)
        report = metrics(cm, model_id=args.family, dataset_id=f"test-{table.region or 'features'}", label=spec.label)
        layout = table.region if table.region in ("face", "body") else "body"
    else:
        from .finetune import FineTunedModel, annotated_items, styled_items
        from .pipeline import evaluate_bundle

        model = FineTunedModel.load(args.model)
        kind = _manifest_kind(args.test)
        if kind == "styled":
            from .style_augment import load_styled_manifest

            samples = load_styled_manifest(args.test)
            if args.split:
                keep = set(json.loads(Path(args.split).read_text())["test_ids"])
                samples = [s for s in samples if s.sample_id in keep]
            items, class_names = styled_items(samples, Path(args.test).parent), GENDERS
        elif kind == "annotated":
            data_root = _data_root(args, args.test)
            records = load_manifest(args.test, "annotated", data_root)
            if args.split:
                records = select(records, SplitAssignment.load(args.split).test_ids)
            items, class_names = annotated_items(records, data_root), CHARACTERS
        else:
            raise DataError(f"{args.test}: evaluate needs an annotated or styled manifest")
        report = evaluate_bundle(model, items, class_names, model.pipeline or "model", f"test-{kind}")
        layout = "body"
    artifacts = write_report(report, out, layout)
    print(json.dumps({"out": str(out), "accuracy": report.accuracy, "artifacts": artifacts}))
    return 0


def cmd_cam(args) -> int:
    from .cam_explain import batch_cams
    from .finetune import FineTunedModel, annotated_items

    model = FineTunedModel.load(args.model)
    data_root = _data_root(args, args.data)
    records = load_manifest(args.data, "annotated", data_root)
    if args.split:
        records = select(records, SplitAssignment.load(args.split).test_ids)
    rows = batch_cams(model, annotated_items(records, data_root), args.out, args.only_correct)
    print(json.dumps({"index": str(Path(args.out) / "index.csv"), "maps": len(rows)}))
    return 0


def cmd_make_fixture(args) -> int:
    from .fixtures import make_fixture

    print(make_fixture(args.out, args.scenes, args.content_per_gender, args.seed))
    return 0


# -- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data-root", help="image root; overrides $ICONO_DATA_ROOT and the config")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="icono", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, config_required=False):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--config", required=config_required, help="run config (key = value)")
        p.set_defaults(func=func)
        return p

    add("validate", cmd_validate, "check a run config and report every problem", True)
    p = add("run-all", cmd_run_all, "run or resume every stage", True)
    p.add_argument("--stages", help="comma-separated subset of stages to run")
    add("prepare", cmd_prepare, "validate manifests and write the train/test split", True)

    p = add("stylize", cmd_stylize, "plan pairings and render the styled dataset")
    p.add_argument("--styles", help="annotated manifest whose images supply styles")
    p.add_argument("--contents", help="content manifest")
    p.add_argument("--per-gender", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--encoder-weights")
    p.add_argument("--decoder-weights")
    p.add_argument("--image-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--plan-only", action="store_true", help="write plan.json without rendering")
    p.add_argument("--out", required=True)

    p = add("extract", cmd_extract, "extract 2048-d features for face or body crops")
    p.add_argument("--manifest")
    p.add_argument("--region", choices=("face", "body"), required=True)
    p.add_argument("--weights")
    p.add_argument("--pretrain-source", default="object_recognition",
                   choices=("object_recognition", "face_identification"))
    p.add_argument("--image-size", type=int)
    p.add_argument("--features-out", required=True)

    p = add("bench", cmd_bench, "grid-search and score the classical classifiers")
    p.add_argument("--features-face", required=True)
    p.add_argument("--features-body", required=True)
    p.add_argument("--labels", required=True, help="annotated manifest")
    p.add_argument("--split", help="split.json; otherwise drawn from --test-per-class/--seed")
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)

    p = add("train", cmd_train, "fine-tune pipeline A, B or C", True)
    p.add_argument("--pipeline", choices=("A", "B", "C"), required=True)
    p.add_argument("--init", help="pipeline-B bundle to continue from (C)")
    p.add_argument("--manifest", help="styled manifest (B)")
    p.add_argument("--styled-ids", help="styled_split.json restricting B to its train ids")
    p.add_argument("--split", help="split.json (A, C)")
    p.add_argument("--weights", help="face-identification backbone weights")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="bundle path")

    p = add("evaluate", cmd_evaluate, "score a model on a held-out set")
    p.add_argument("--model", required=True, help="bundle path, or 'classical'")
    p.add_argument("--test", required=True, help="annotated or styled manifest")
    p.add_argument("--split", help="split file selecting the test ids")
    p.add_argument("--features", help="feature CSV (classical)")
    p.add_argument("--family", help="classifier family (classical)")
    p.add_argument("--test-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cv-folds", type=int, default=5)
    p.add_argument("--out", required=True)

    p = add("cam", cmd_cam, "class activation maps for a fine-tuned model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="annotated manifest")
    p.add_argument("--split", help="split file selecting the test ids")
    p.add_argument("--only-correct", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("make-fixture", parents=[common], help="write the synthetic fixture corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=20)
    p.add_argument("--content-per-gender", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return exc.exit_code
    except IconoError as exc:
        print(f"error: {type(getattr(exc, 'cause', exc)).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
