"""End-to-end stages behind the command line: ingest, split, train, evaluate, report."""
from __future__ import annotations

import json
import logging
import platform
import shutil
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path

from .config import ExperimentConfig
from .dataset import (
    ClassLabel,
    DatasetManifest,
    FoldPlan,
    Source,
    build_manifest,
    generate_synthetic,
    ingest_cohen,
    ingest_kaggle_pneumonia,
    stratified_kfold,
)
from .exceptions import CxrBenchError, ReportError, ValidationError
from .models import ArchitectureId
from .report import (
    ArchitectureSummary,
    _write_csv,
    comparison_rows,
    plot_fold_rocs,
    plot_metric_bars,
    render_markdown,
    summarize,
    metric_rows,
    METRICS_HEADER,
    write_confusion_csv,
    write_fold_metrics_csv,
    write_metrics_csv,
    write_metrics_detail_csv,
)
from .training import (
    FoldResult,
    append_training_log,
    load_fold_results,
    load_manifest_images,
    run_cross_validation,
    save_fold_results,
)

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FOLDPLAN = "foldplan.json"
RUN_RECORD = "run_record.json"
PREDICTIONS = "predictions.json"
TRAINING_LOG = "training_log.csv"


def code_version() -> str:
    try:
        version = metadata.version("cxrbench")
    except metadata.PackageNotFoundError:
        version = "unknown"
    import torch
    import torchvision

    return f"cxrbench {version}; torch {torch.__version__}; torchvision {torchvision.__version__}; python {platform.python_version()}"


def _git_commit(path: Path) -> str | None:
    if shutil.which("git") is None:
        return None
    try:
        out = subprocess.run(["git", "-C", str(path), "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    return out.stdout.strip() if out.returncode == 0 else None


def ingest(config: ExperimentConfig) -> DatasetManifest:
    """Build and write ``manifest.json`` from the configured sources."""
    out = Path(config.output_dir)
    ds = config.dataset
    if ds.synthetic is not None:
        syn = ds.synthetic
        manifest = generate_synthetic(syn.n_pos, syn.n_neg, syn.image_size, syn.seed, out / "synthetic")
    else:
        for name, value in (("dataset.cohen_root", ds.cohen_root), ("dataset.kaggle_root", ds.kaggle_root)):
            if not value:
                raise ValidationError(f"{name} is not set")
            if not Path(value).is_dir():
                raise ValidationError(f"missing source path: {value} ({name})")
        issues: list[str] = []
        positives = ingest_cohen(ds.cohen_root, ds.cohen_metadata, issues)
        negatives = ingest_kaggle_pneumonia(ds.kaggle_root, ds.kaggle_fraction, ds.kaggle_seed, issues)
        commit = _git_commit(Path(ds.cohen_root))
        provenance = "; ".join(filter(None, [
            f"cohen: {ds.cohen_snapshot or ds.cohen_root}",
            f"cohen commit {commit}" if commit else None,
            f"kaggle: {ds.kaggle_root}, viral fraction {ds.kaggle_fraction}, seed {ds.kaggle_seed}",
            f"{len(issues)} ingestion warnings" if issues else None,
        ]))
        manifest = build_manifest(
            positives + negatives, provenance, ds.build_seed,
            {Source.COHEN: Path(ds.cohen_root).resolve(), Source.KAGGLE: Path(ds.kaggle_root).resolve()},
            warnings=issues,
        )
    manifest.save(out / MANIFEST)
    return manifest


def describe_counts(manifest: DatasetManifest) -> str:
    return (f"{len(manifest)} records ({manifest.counts_per_label[ClassLabel.POSITIVE]} positive, "
            f"{manifest.counts_per_label[ClassLabel.NEGATIVE]} negative)")


def load_or_ingest(config: ExperimentConfig) -> DatasetManifest:
    path = Path(config.output_dir) / MANIFEST
    return DatasetManifest.load(path) if path.is_file() else ingest(config)


def split(config: ExperimentConfig, manifest: DatasetManifest | None = None) -> FoldPlan:
    manifest = manifest or load_or_ingest(config)
    plan = stratified_kfold(manifest, config.split.k, config.split.seed)
    plan.save(Path(config.output_dir) / FOLDPLAN)
    return plan


def load_or_split(config: ExperimentConfig, manifest: DatasetManifest) -> FoldPlan:
    path = Path(config.output_dir) / FOLDPLAN
    if path.is_file():
        plan = FoldPlan.load(path)
        if set(plan.assignment) == set(manifest.ids):
            return plan
        logger.warning("existing fold plan does not match the manifest; re-splitting")
    return split(config, manifest)


def train(config: ExperimentConfig, manifest: DatasetManifest, foldplan: FoldPlan,
          jobs: int = 1) -> dict[str, list[FoldResult] | Exception]:
    """Cross-validate every configured architecture; failures are returned, not raised."""
    out = Path(config.output_dir)
    log_path = out / TRAINING_LOG
    if log_path.exists():
        log_path.unlink()
    images = load_manifest_images(manifest, config.preprocess)
    outcome: dict[str, list[FoldResult] | Exception] = {}
    for arch in config.architectures:
        arch_dir = out / arch.value
        ckpt_dir = None if config.model.checkpoints == "none" else arch_dir / "checkpoints"
        weights = config.model.weights_paths.get(arch.value)
        try:
            results = run_cross_validation(
                manifest, foldplan, arch, config.preprocess, config.augment, config.training,
                pretrained=config.model.pretrained, weights_path=weights, checkpoint_dir=ckpt_dir,
                checkpoint_head_only=config.model.checkpoints == "head", jobs=jobs, images=images,
                config_hash=config.config_hash(),
            )
        except CxrBenchError as exc:
            logger.error("%s failed: %s", arch.value, exc)
            outcome[arch.value] = exc
            continue
        save_fold_results(results, arch_dir / PREDICTIONS, architecture=arch.value, config_hash=config.config_hash())
        for r in results:
            append_training_log(log_path, arch.value, r.fold_index, r.epoch_logs)
        outcome[arch.value] = results
    return outcome


def evaluate(config_or_dir, architectures=None) -> list[ArchitectureSummary]:
    """Metric tables, confusion matrices and charts from saved predictions."""
    out = Path(config_or_dir.output_dir if isinstance(config_or_dir, ExperimentConfig) else config_or_dir)
    if architectures is None:
        architectures = [a.value for a in ArchitectureId]
    summaries = []
    for arch in architectures:
        arch = ArchitectureId.coerce(arch).value
        path = out / arch / PREDICTIONS
        if not path.is_file():
            continue
        results = load_fold_results(path)
        summary = summarize(arch, results)
        write_fold_metrics_csv(out / arch / "fold_metrics.csv", summary)
        plot_fold_rocs(out / arch / "roc_folds.png", arch, results)
        summaries.append(summary)
    if not summaries:
        raise ReportError(f"no predictions found under {out}")
    write_metrics_csv(out / "metrics.csv", summaries)
    write_metrics_detail_csv(out / "metrics_detail.csv", summaries)
    write_confusion_csv(out / "confusion.csv", summaries)
    (out / "metrics.json").write_text(json.dumps([s.to_dict() for s in summaries], indent=2) + "\n")
    plot_metric_bars(out / "metrics_chart.png", summaries)
    return summaries


@dataclass
class RunRecord:
    config: dict
    code_version: str
    started: str
    finished: str = ""
    status: str = "running"
    architectures: dict[str, dict] = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "code_version": self.code_version,
            "started": self.started,
            "finished": self.finished,
            "status": self.status,
            "architectures": self.architectures,
            "artifacts": self.artifacts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)

    def save(self, run_dir: str | Path) -> Path:
        path = Path(run_dir) / RUN_RECORD
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunRecord":
        path = Path(run_dir) / RUN_RECORD
        if not path.is_file():
            raise ReportError(f"missing {RUN_RECORD} in {run_dir}")
        return cls.from_dict(json.loads(path.read_text()))

    @property
    def exit_code(self) -> int:
        return 0 if self.status == "complete" else 1


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def list_artifacts(run_dir: Path) -> list[str]:
    return sorted(p.relative_to(run_dir).as_posix() for p in run_dir.rglob("*") if p.is_file())


def run(config: ExperimentConfig, jobs: int = 1) -> RunRecord:
    """Ingest, split, cross-validate each architecture, evaluate and record."""
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config.to_dict(), code_version(), _now())
    config.save(out / "config.yaml")
    manifest = ingest(config)
    foldplan = split(config, manifest)
    outcome = train(config, manifest, foldplan, jobs)
    done = [a for a, r in outcome.items() if not isinstance(r, Exception)]
    summaries = {s.architecture: s for s in evaluate(out, done)} if done else {}
    for arch, result in outcome.items():
        if isinstance(result, Exception):
            record.architectures[arch] = {"status": "failed", "error": str(result)}
        else:
            s = summaries[arch]
            record.architectures[arch] = {
                "status": "complete",
                "aggregate": s.aggregate.to_dict(),
                "consolidated_confusion": s.consolidated.to_dict(),
                "consolidated_metrics": s.consolidated_metrics.to_dict(),
                "training_runs": len(result),
            }
    record.status = "complete" if len(done) == len(outcome) else "partial"
    record.finished = _now()
    record.artifacts = sorted(set(list_artifacts(out)) | {RUN_RECORD})
    record.save(out)
    return record


def report(run_dir: str | Path) -> list[Path]:
    """Render the markdown/CSV comparison sheet for a finished run directory."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir() or not any(run_dir.iterdir()):
        raise ReportError(f"run directory {run_dir} is missing or empty")
    record = RunRecord.load(run_dir)
    status = {a: info.get("status", "unknown") for a, info in record.architectures.items()}
    missing = [f"{a}/{PREDICTIONS}" for a, st in status.items()
               if st == "complete" and not (run_dir / a / PREDICTIONS).is_file()]
    if missing:
        raise ReportError("missing artifacts: " + ", ".join(missing))
    done = [a for a, st in status.items() if st == "complete"]
    if not done:
        raise ReportError(f"run in {run_dir} has no completed architectures")
    summaries = [summarize(a, load_fold_results(run_dir / a / PREDICTIONS)) for a in done]

    rep = run_dir / "report"
    rep.mkdir(exist_ok=True)
    chart = plot_metric_bars(rep / "metrics_chart.png", summaries)
    paths = [
        _write_csv(rep / "table_metrics.csv", METRICS_HEADER, metric_rows(summaries)),
        write_confusion_csv(rep / "table_confusion.csv", summaries),
        _write_csv(rep / "comparison.csv", ["method", "metric", "value_percent", "source"], comparison_rows(summaries)),
        chart,
    ]
    md = rep / "report.md"
    md.write_text(render_markdown(summaries, status, chart.name), encoding="utf-8")
    paths.append(md)
    record.artifacts = sorted(set(record.artifacts) | set(list_artifacts(run_dir)) | {RUN_RECORD})
    record.save(run_dir)
    return paths
