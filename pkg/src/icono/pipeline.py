"""Experiment ladder: prepare -> stylize -> extract -> bench -> train -> evaluate -> cam.

Every stage writes into its own numbered directory under ``output_root``
together with a ``.stage.json`` stamp holding a hash of the stage inputs
(config subset, seed, input file contents and upstream stamps). A stage
whose stamp matches is skipped, so reruns resume where they stopped.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import classical_bench as cb
from .config import coerce, dataclass_from_kv, read_kv
from .data_model import (
    CHARACTERS,
    GENDERS,
    SplitAssignment,
    class_histogram,
    load_manifest,
    resolve_data_root,
    select,
    split_dataset,
)
from .errors import ConfigError, IconoError
from .eval_report import confusion, metrics, render_curves, render_table
from .feature_extractor import FeatureTable, extract_batch, load_backbone
from .finetune import (
    FineTunedModel,
    TrainConfig,
    annotated_items,
    pipeline_A,
    pipeline_B,
    pipeline_C,
    predict_items,
    styled_items,
    write_epoch_logs,
)

log = logging.getLogger(__name__)

STAGES = ("prepare", "stylize", "extract", "bench", "train", "evaluate", "cam")
PIPELINE_LABELS = {"A": "VGGFace-A", "B": "VGGFace-B", "C": "VGGFace-C"}

_KNOWN_KEYS = {
    "data_root", "output_root", "seed",
    "data.annotated", "data.content", "data.test_per_class",
    "style.encoder_weights", "style.decoder_weights", "style.per_gender", "style.image_size",
    "style.alpha", "style.test_fraction", "style.workers",
    "features.object_weights", "features.face_weights", "features.image_size",
    "bench.cv_folds", "bench.C", "bench.gamma", "bench.n_estimators", "bench.standardize",
    "cam.only_correct",
} | {f"train.{k}" for k in TrainConfig.__dataclass_fields__}


@dataclass
class RunConfig:
    data_root: Path
    output_root: Path
    seed: int
    annotated: Path
    content: Path
    test_per_class: int = 100
    encoder_weights: Optional[Path] = None
    decoder_weights: Optional[Path] = None
    per_gender: int = 8
    style_image_size: int = 512
    alpha: float = 1.0
    styled_test_fraction: float = 0.25
    style_workers: int = 1
    object_weights: Optional[Path] = None
    face_weights: Optional[Path] = None
    feature_image_size: int = 224
    grid: cb.GridSpec = field(default_factory=cb.GridSpec)
    standardize: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    only_correct: bool = True
    raw: dict = field(default_factory=dict)

    def stage_dir(self, stage: str) -> Path:
        return self.output_root / f"{STAGES.index(stage) + 1:02d}_{stage}"


def _inside(path: Path, root: Path) -> bool:
    try:
        path.resolve().relative_to(root.resolve())
        return True
    except ValueError:
        return False


def validate_config(path, data_root_flag=None) -> RunConfig:
    """Parse and check a run config, reporting every problem at once.

    Raises ConfigError whose ``errors`` list names each offending key.
    ``data_root_flag`` (the CLI flag) beats ``ICONO_DATA_ROOT``, which
    beats the file's ``data_root``.
    """
    path = Path(path)
    values = read_kv(path)
    base = path.parent
    errors = [f"{k}: unknown key" for k in values if k not in _KNOWN_KEYS]

    def get(key, kind, default=None, required=False):
        if key not in values:
            if required:
                errors.append(f"{key}: missing")
            return default
        try:
            return coerce(values[key], kind)
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            return default

    override = resolve_data_root(data_root_flag)
    data_root_value = str(override) if override is not None else get("data_root", str, required=True)
    data_root = (base / data_root_value) if data_root_value else None
    if data_root is not None and not data_root.is_dir():
        errors.append(f"data_root: not a directory: {data_root}")
        data_root = None
    output_value = get("output_root", str, required=True)
    output_root = base / output_value if output_value else None

    def data_path(key, required=False):
        rel = get(key, str, required=required)
        if rel is None or data_root is None:
            return None
        p = data_root / rel
        if not _inside(p, data_root):
            errors.append(f"{key}: {rel} lies outside data_root")
        elif not p.is_file():
            errors.append(f"{key}: file not found: {p}")
        return p

    seed = get("seed", int, 0)
    cfg = dict(
        annotated=data_path("data.annotated", True),
        content=data_path("data.content", True),
        test_per_class=get("data.test_per_class", int, 100),
        encoder_weights=data_path("style.encoder_weights"),
        decoder_weights=data_path("style.decoder_weights"),
        per_gender=get("style.per_gender", int, 8),
        style_image_size=get("style.image_size", int, 512),
        alpha=get("style.alpha", float, 1.0),
        styled_test_fraction=get("style.test_fraction", float, 0.25),
        style_workers=get("style.workers", int, 1),
        object_weights=data_path("features.object_weights", True),
        face_weights=data_path("features.face_weights", True),
        feature_image_size=get("features.image_size", int, 224),
        standardize=get("bench.standardize", bool, False),
        only_correct=get("cam.only_correct", bool, True),
    )
    if cfg["test_per_class"] is not None and cfg["test_per_class"] < 1:
        errors.append("data.test_per_class: must be >= 1")
    if cfg["per_gender"] is not None and cfg["per_gender"] < 1:
        errors.append("style.per_gender: must be >= 1")
    for key, name in (("style.image_size", "style_image_size"), ("features.image_size", "feature_image_size")):
        if cfg[name] is not None and cfg[name] < 32:
            errors.append(f"{key}: must be >= 32")
    if cfg["alpha"] is not None and not 0.0 <= cfg["alpha"] <= 1.0:
        errors.append("style.alpha: must lie in [0, 1]")
    if cfg["styled_test_fraction"] is not None and not 0.0 < cfg["styled_test_fraction"] < 1.0:
        errors.append("style.test_fraction: must lie in (0, 1)")
    if cfg["style_workers"] is not None and cfg["style_workers"] < 1:
        errors.append("style.workers: must be >= 1")

    grid_kwargs = {}
    for key, kind in (("C", tuple[float, ...]), ("gamma", tuple[float, ...]), ("n_estimators", tuple[int, ...]),
                      ("cv_folds", int)):
        v = get(f"bench.{key}", kind)
        if v is None:
            continue
        if key != "cv_folds" and (not v or any(x <= 0 for x in v)):
            errors.append(f"bench.{key}: needs positive values")
            continue
        if key == "cv_folds" and v < 2:
            errors.append("bench.cv_folds: must be >= 2")
            continue
        grid_kwargs[key] = v
    grid = cb.GridSpec(**grid_kwargs)

    train_values = {k: v for k, v in values.items() if k.startswith("train.")}
    train_values.setdefault("train.seed", str(seed))
    train_cfg, train_errors = dataclass_from_kv(TrainConfig, train_values, "train.")
    errors.extend(train_errors)

    if errors:
        raise ConfigError(errors)
    return RunConfig(data_root=data_root, output_root=output_root, seed=seed, grid=grid, train=train_cfg,
                     raw=values, **cfg)


# -- stage bookkeeping -----------------------------------------------------

class FileHasher:
    """sha256 of files, memoized on (path, size, mtime)."""

    def __init__(self):
        self._memo: dict = {}

    def __call__(self, path) -> str:
        p = Path(path)
        st = p.stat()
        key = (str(p.resolve()), st.st_size, st.st_mtime_ns)
        if key not in self._memo:
            h = hashlib.sha256()
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            self._memo[key] = h.hexdigest()
        return self._memo[key]


@dataclass
class StageRecord:
    stage: str
    status: str
    artifacts: list
    input_hash: str
    seconds: float = 0.0
    error: str = ""


class StageFailure(IconoError):
    def __init__(self, stage: str, cause: BaseException, records: list):
        self.stage = stage
        self.cause = cause
        self.records = records
        self.exit_code = getattr(cause, "exit_code", 4)
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _read_stamp(stage_dir: Path) -> Optional[dict]:
    stamp = stage_dir / ".stage.json"
    if not stamp.is_file():
        return None
    try:
        return json.loads(stamp.read_text())
    except json.JSONDecodeError:
        return None


def _write_stamp(stage_dir: Path, record: StageRecord) -> None:
    (stage_dir / ".stage.json").write_text(json.dumps(asdict(record), indent=1) + "\n")


class Runner:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.hash_file = FileHasher()
        self.hashes: dict = {}
        self.records: list = []

    # -- input hashing

    def _params(self, prefix: str) -> dict:
        return {k: v for k, v in sorted(self.cfg.raw.items()) if k.startswith(prefix)}

    def _files(self, paths) -> dict:
        root = self.cfg.data_root
        return {os.path.relpath(p, root): self.hash_file(p) for p in paths if p is not None}

    def _corpus_files(self) -> list:
        records = load_manifest(self.cfg.annotated, "annotated")
        contents = load_manifest(self.cfg.content, "content")
        paths = {self.cfg.data_root / r.image_path for r in records}
        paths |= {self.cfg.data_root / c.image_path for c in contents}
        return sorted(paths)

    def input_hash(self, stage: str) -> str:
        c = self.cfg
        spec = {"stage": stage, "seed": c.seed}
        if stage == "prepare":
            spec.update(params=self._params("data."), files=self._files([c.annotated, c.content, *self._corpus_files()]))
        elif stage == "stylize":
            spec.update(params=self._params("style."), files=self._files([c.encoder_weights, c.decoder_weights]),
                        upstream=[self.hashes["prepare"]])
        elif stage == "extract":
            spec.update(params=self._params("features."), files=self._files([c.object_weights]),
                        upstream=[self.hashes["prepare"]])
        elif stage == "bench":
            spec.update(params=self._params("bench."), upstream=[self.hashes["prepare"], self.hashes["extract"]])
        elif stage == "train":
            spec.update(params={**self._params("train."), **self._params("features.")},
                        files=self._files([c.face_weights]),
                        upstream=[self.hashes["prepare"], self.hashes["stylize"]])
        elif stage == "evaluate":
            spec.update(upstream=[self.hashes[s] for s in ("prepare", "stylize", "bench", "train")])
        elif stage == "cam":
            spec.update(params=self._params("cam."), upstream=[self.hashes["prepare"], self.hashes["train"]])
        return _digest(spec)

    # -- execution

    def run_stage(self, stage: str, func: Callable[[Path], list]) -> StageRecord:
        stage_dir = self.cfg.stage_dir(stage)
        try:
            digest = self.input_hash(stage)
        except Exception as exc:
            self.records.append(StageRecord(stage, "failed", [], "", 0.0, f"{type(exc).__name__}: {exc}"))
            self.write_summary()
            raise StageFailure(stage, exc, self.records) from exc
        self.hashes[stage] = digest
        stamp = _read_stamp(stage_dir)
        if stamp and stamp.get("input_hash") == digest and stamp.get("status") == "ok" and all(
            (stage_dir / a).exists() for a in stamp.get("artifacts", [])
        ):
            log.info("stage %s: up to date, skipped", stage)
            record = StageRecord(stage, "skipped", stamp["artifacts"], digest)
            self.records.append(record)
            return record
        if stamp and stamp.get("input_hash") != digest and stage_dir.exists():
            shutil.rmtree(stage_dir)
        stage_dir.mkdir(parents=True, exist_ok=True)
        _write_stamp(stage_dir, StageRecord(stage, "running", [], digest))
        log.info("stage %s: running", stage)
        start = time.time()
        try:
            artifacts = func(stage_dir)
        except Exception as exc:
            record = StageRecord(stage, "failed", [], digest, time.time() - start, f"{type(exc).__name__}: {exc}")
            _write_stamp(stage_dir, record)
            self.records.append(record)
            self.write_summary()
            raise StageFailure(stage, exc, self.records) from exc
        record = StageRecord(stage, "ok", sorted(artifacts), digest, time.time() - start)
        _write_stamp(stage_dir, record)
        self.records.append(record)
        return record

    def write_summary(self) -> Path:
        path = self.cfg.output_root / "run_summary.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for r in self.records:
                entry = asdict(r)
                entry["artifacts"] = [str(self.cfg.stage_dir(r.stage).relative_to(self.cfg.output_root) / a)
                                      for a in r.artifacts]
                fh.write(json.dumps(entry) + "\n")
        return path


# -- stage bodies ----------------------------------------------------------

def _records(cfg: RunConfig) -> list:
    return load_manifest(cfg.annotated, "annotated", cfg.data_root)


def _split(cfg: RunConfig) -> SplitAssignment:
    return SplitAssignment.load(cfg.stage_dir("prepare") / "split.json")


def stage_prepare(cfg: RunConfig, out: Path) -> list:
    records = _records(cfg)
    contents = load_manifest(cfg.content, "content")
    split = split_dataset(records, cfg.test_per_class, cfg.seed)
    split.save(out / "split.json")
    summary = {
        "records": len(records),
        "classes": class_histogram(records),
        "content": class_histogram(contents),
        "train": len(split.train_ids),
        "test": len(split.test_ids),
        "seed": cfg.seed,
    }
    (out / "prepare.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return ["split.json", "prepare.json"]


def stage_stylize(cfg: RunConfig, out: Path) -> list:
    from .style_augment import (
        DegenerateChannelWarning,
        StyleTransfer,
        build_styled_dataset,
        plan_pairings,
        split_styled,
    )

    transfer = StyleTransfer.load(cfg.encoder_weights, cfg.decoder_weights, cfg.style_image_size)
    records = _records(cfg)
    contents = load_manifest(cfg.content, "content")
    plan = plan_pairings(records, contents, cfg.per_gender, cfg.seed)
    (out / "plan.json").write_text(plan.to_json() + "\n")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateChannelWarning)
        build = build_styled_dataset(plan, out / "styled", transfer, cfg.data_root, cfg.alpha, cfg.style_workers)
    degenerate = sum(isinstance(w.message, DegenerateChannelWarning) for w in caught)
    if degenerate:
        log.warning("%d styled images had degenerate content channels (shifted only)", degenerate)
    train, test = split_styled(build.samples, cfg.styled_test_fraction, cfg.seed)
    (out / "styled_split.json").write_text(json.dumps(
        {"seed": cfg.seed, "train_ids": sorted(s.sample_id for s in train),
         "test_ids": sorted(s.sample_id for s in test)}, indent=1) + "\n")
    return ["plan.json", "styled/manifest.csv", "styled/errors.jsonl", "styled_split.json"]


def stage_extract(cfg: RunConfig, out: Path) -> list:
    handle = load_backbone(cfg.object_weights, "object_recognition", cfg.feature_image_size)
    records = _records(cfg)
    artifacts = []
    for region in ("face", "body"):
        table = extract_batch(handle, records, region, cfg.data_root)
        table.save(out / f"features_{region}.csv")
        artifacts += [f"features_{region}.csv", f"features_{region}.csv.meta.json"]
    return artifacts


def write_bench(result: cb.BenchResult, out: Path) -> list:
    import csv

    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["region", "family", "model_type", "precision", "recall", "f1", "accuracy"])
        for (family, region), r in sorted(result.reports.items(), key=lambda kv: (kv[0][1], cb.FAMILIES.index(kv[0][0]))):
            writer.writerow([region, family, r.label, repr(r.precision), repr(r.recall), repr(r.f1), repr(r.accuracy)])
    reports = {f"{fam}/{reg}": r.to_dict() for (fam, reg), r in result.reports.items()}
    (out / "bench_reports.json").write_text(json.dumps(reports, indent=1, sort_keys=True) + "\n")
    with open(out / "score_table.jsonl", "w") as fh:
        for row in cb.score_table_rows(result):
            fh.write(json.dumps(row) + "\n")
    (out / "train_checksums.json").write_text(json.dumps(result.train_checksums, indent=1) + "\n")
    artifacts = ["bench.csv", "bench_reports.json", "score_table.jsonl", "train_checksums.json"]
    for region in ("face", "body"):
        text, table_csv = render_table(cb.reports_for(result, region), region)
        (out / f"table_{region}.txt").write_text(text)
        (out / f"table_{region}.csv").write_text(table_csv)
        artifacts += [f"table_{region}.txt", f"table_{region}.csv"]
    return artifacts


def stage_bench(cfg: RunConfig, out: Path) -> list:
    extract_dir = cfg.stage_dir("extract")
    face = FeatureTable.load(extract_dir / "features_face.csv")
    body = FeatureTable.load(extract_dir / "features_body.csv")
    labels = {r.image_id: r.character for r in _records(cfg)}
    result = cb.run_bench(face, body, labels, _split(cfg), cfg.grid, cfg.seed, standardize=cfg.standardize)
    return write_bench(result, out)


def _styled_split(cfg: RunConfig) -> tuple:
    from .style_augment import load_styled_manifest

    stylize_dir = cfg.stage_dir("stylize")
    samples = load_styled_manifest(stylize_dir / "styled" / "manifest.csv")
    split = json.loads((stylize_dir / "styled_split.json").read_text())
    train_ids, test_ids = set(split["train_ids"]), set(split["test_ids"])
    return ([s for s in samples if s.sample_id in train_ids],
            [s for s in samples if s.sample_id in test_ids],
            stylize_dir / "styled")


def stage_train(cfg: RunConfig, out: Path) -> list:
    handle = load_backbone(cfg.face_weights, "face_identification", cfg.feature_image_size)
    split = _split(cfg)
    bodies_train = select(_records(cfg), split.train_ids)
    styled_train, _, styled_root = _styled_split(cfg)
    models = {
        "A": lambda: pipeline_A(bodies_train, cfg.train, handle, cfg.data_root),
        "B": lambda: pipeline_B(styled_train, cfg.train, handle, styled_root),
    }
    artifacts = []
    for name in ("A", "B", "C"):
        model = models[name]() if name != "C" else pipeline_C(
            FineTunedModel.load(out / "model_B.pt"), bodies_train, cfg.train, cfg.data_root)
        model.save(out / f"model_{name}.pt")
        write_epoch_logs(model.epoch_logs, out / f"model_{name}.pt.epochs.csv")
        paths = render_curves(model.epoch_logs, out / f"curves_{name}")
        artifacts += [f"model_{name}.pt", f"model_{name}.pt.epochs.csv", *(p.name for p in paths)]
    return artifacts


def evaluate_bundle(model: FineTunedModel, items, class_names, model_id: str, dataset_id: str):
    predicted, _ = predict_items(model, items)
    cm = confusion([int(p) for p in predicted], [it.label for it in items], class_names)
    return metrics(cm, model_id=model_id, dataset_id=dataset_id, label=PIPELINE_LABELS.get(model_id, model_id))


def write_report(report, out: Path, layout: str = "body") -> list:
    out.mkdir(parents=True, exist_ok=True)
    report.save_json(out / "metrics.json")
    (out / "confusion.csv").write_text(report.confusion.to_csv())
    text, table_csv = render_table([report], layout)
    (out / "table.txt").write_text(text)
    (out / "table.csv").write_text(table_csv)
    return ["metrics.json", "confusion.csv", "table.txt", "table.csv"]


def stage_evaluate(cfg: RunConfig, out: Path) -> list:
    from .eval_report import MetricsReport

    train_dir = cfg.stage_dir("train")
    test_records = select(_records(cfg), _split(cfg).test_ids)
    body_items = annotated_items(test_records, cfg.data_root)
    _, styled_test, styled_root = _styled_split(cfg)
    artifacts, body_reports = [], []
    for name in ("A", "B", "C"):
        model = FineTunedModel.load(train_dir / f"model_{name}.pt")
        report = evaluate_bundle(model, body_items, CHARACTERS, name, "test-body")
        body_reports.append(report)
        artifacts += [f"{name}/{a}" for a in write_report(report, out / name)]
        if name == "B":
            styled_report = evaluate_bundle(model, styled_items(styled_test, styled_root), GENDERS, "B",
                                            "test-styled")
            artifacts += [f"B_styled/{a}" for a in write_report(styled_report, out / "B_styled")]

    bench = json.loads((cfg.stage_dir("bench") / "bench_reports.json").read_text())
    classical = {key: MetricsReport.from_dict(raw) for key, raw in bench.items()}
    for layout, extra in (("face", []), ("body", body_reports)):
        reports = [r for key, r in classical.items() if key.endswith("/" + layout)] + extra
        text, table_csv = render_table(reports, layout)
        (out / f"table_{layout}.txt").write_text(text)
        (out / f"table_{layout}.csv").write_text(table_csv)
        artifacts += [f"table_{layout}.txt", f"table_{layout}.csv"]
    return artifacts


def stage_cam(cfg: RunConfig, out: Path) -> list:
    from .cam_explain import batch_cams

    test_records = select(_records(cfg), _split(cfg).test_ids)
    items = annotated_items(test_records, cfg.data_root)
    artifacts = []
    for name in ("A", "C"):
        model = FineTunedModel.load(cfg.stage_dir("train") / f"model_{name}.pt")
        rows = batch_cams(model, items, out / name, cfg.only_correct)
        artifacts += [f"{name}/index.csv", f"{name}/cam_meta.json"]
        artifacts += [f"{name}/{r['cam_path']}" for r in rows] + [f"{name}/{r['grid_path']}" for r in rows]
    return artifacts


STAGE_FUNCS = {
    "prepare": stage_prepare,
    "stylize": stage_stylize,
    "extract": stage_extract,
    "bench": stage_bench,
    "train": stage_train,
    "evaluate": stage_evaluate,
    "cam": stage_cam,
}


def run_all(cfg: RunConfig, stages=STAGES) -> Path:
    """Run (or resume) the stages in order; returns the run summary path.

    The first failing stage aborts the run with StageFailure after the
    summary of completed stages has been written.
    """
    cfg.output_root.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg)
    for stage in STAGES:
        if stage not in stages:
            stamp = _read_stamp(cfg.stage_dir(stage)) or {}
            runner.hashes[stage] = stamp.get("input_hash", "")
            continue
        runner.run_stage(stage, lambda out, s=stage: STAGE_FUNCS[s](cfg, out))
    return runner.write_summary()


def read_summary(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
