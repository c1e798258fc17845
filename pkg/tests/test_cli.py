import csv
import json

import pytest

from cxrbench import pipeline
from cxrbench.cli import build_parser, main
from cxrbench.config import ExperimentConfig
from cxrbench.dataset import DatasetManifest, FoldPlan
from cxrbench.exceptions import ReportError
from cxrbench.report import literature_rows

FAST = ["--synthetic", "4", "4", "--arch", "SqueezeNet", "--k", "2", "--epochs", "1", "--no-pretrained"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--output", str(out), *FAST]) == 0
    return out


def test_parser_has_subcommands():
    parser = build_parser()
    for cmd in ("ingest", "split", "train", "evaluate", "report", "run"):
        args = parser.parse_args([cmd, "--seed", "3"])
        assert args.command == cmd and args.seed == 3
    # global flags also work before the subcommand
    args = parser.parse_args(["--jobs", "2", "--output", "x", "split"])
    assert args.jobs == 2 and str(args.output) == "x"


def test_ingest_synthetic(tmp_path, capsys):
    assert main(["ingest", "--synthetic", "20", "20", "--output", str(tmp_path)]) == 0
    assert "40 records (20 positive, 20 negative)" in capsys.readouterr().out
    assert len(DatasetManifest.load(tmp_path / pipeline.MANIFEST)) == 40
    assert ExperimentConfig.load(tmp_path / "config.yaml").dataset.synthetic.n_pos == 20


def test_missing_source_path(tmp_path, capsys):
    cfg = ExperimentConfig.from_dict({"dataset": {"cohen_root": str(tmp_path / "nowhere"),
                                                  "kaggle_root": str(tmp_path)}})
    path = cfg.save(tmp_path / "c.yaml")
    assert main(["ingest", "--config", str(path), "--output", str(tmp_path / "o")]) == 2
    assert "nowhere" in capsys.readouterr().err


def test_staged_commands(tmp_path):
    args = ["--output", str(tmp_path), *FAST]
    assert main(["ingest", *args]) == 0
    assert main(["split", *args]) == 0
    plan = FoldPlan.load(tmp_path / pipeline.FOLDPLAN)
    assert plan.k == 2 and sum(plan.fold_sizes()) == 8
    assert main(["train", *args]) == 0
    assert (tmp_path / "SqueezeNet" / pipeline.PREDICTIONS).is_file()
    assert main(["evaluate", *args]) == 0
    assert (tmp_path / "metrics.csv").is_file()


def test_run_outputs(run_dir):
    record = json.loads((run_dir / pipeline.RUN_RECORD).read_text())
    assert record["status"] == "complete"
    assert record["architectures"]["SqueezeNet"]["training_runs"] == 2
    for name in ("manifest.json", "foldplan.json", "metrics.csv", "confusion.csv", "metrics_chart.png",
                 "SqueezeNet/roc_folds.png", "SqueezeNet/predictions.json", "SqueezeNet/fold_metrics.csv",
                 "training_log.csv", "config.yaml"):
        assert name in record["artifacts"], name
        assert (run_dir / name).is_file()
    rows = list(csv.reader((run_dir / "metrics.csv").open()))
    assert rows[0] == ["CNN", "AUC (%)", "Accuracy (%)", "Precision (%)", "Recall (%)", "F1-Score (%)"]
    assert rows[1][0] == "SqueezeNet" and " ± " in rows[1][2]
    conf = list(csv.reader((run_dir / "confusion.csv").open()))
    assert conf[0] == ["CNN", "Actual", "Predicted Positive", "Predicted Negative"]
    assert sum(int(v) for r in conf[1:] for v in r[2:]) == 8
    # config snapshot is sufficient to re-run
    snap = ExperimentConfig.from_dict(record["config"])
    assert snap.dataset.synthetic.n_pos == 4 and snap.training.epochs == 1


def test_two_architectures(tmp_path):
    out = tmp_path / "two"
    code = main(["run", "--output", str(out), "--synthetic", "3", "3", "--arch", "SqueezeNet",
                 "--arch", "AlexNet", "--k", "3", "--epochs", "2", "--no-pretrained"])
    assert code == 0
    record = pipeline.RunRecord.load(out)
    assert sorted(record.architectures) == ["AlexNet", "SqueezeNet"]
    assert all("aggregate" in v for v in record.architectures.values())


def test_report(run_dir, capsys):
    assert main(["report", str(run_dir)]) == 0
    rep = run_dir / "report"
    for name in ("table_metrics.csv", "table_confusion.csv", "comparison.csv", "metrics_chart.png", "report.md"):
        assert (rep / name).is_file()
    text = (rep / "report.md").read_text()
    assert "SqueezeNet" in text and "Partial run" not in text
    comparison = list(csv.DictReader((rep / "comparison.csv").open()))
    accs = [r["value_percent"] for r in comparison if r["metric"] == "accuracy" and not r["method"].startswith("This run")]
    assert accs == ["98.00", "90.00", "95.38", "93.30", "96.78", "89.60", "98.08"]


def test_literature_table_has_sources():
    rows = literature_rows()
    assert len(rows) == 8
    assert all(r["citation"] for r in rows)
    assert [r["value_percent"] for r in rows if r["metric"] == "f1"] == ["89.00"]


def test_report_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == 2
    with pytest.raises(ReportError):
        pipeline.report(tmp_path / "absent")


def test_report_missing_predictions(run_dir, tmp_path):
    import shutil
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    (copy / "SqueezeNet" / pipeline.PREDICTIONS).unlink()
    with pytest.raises(ReportError, match="predictions.json"):
        pipeline.report(copy)


def test_partial_run(tmp_path):
    import torch
    from cxrbench.models import build_model

    # AlexNet gets a local 1000-class state dict; SqueezeNet points at a missing file
    alex = tmp_path / "alex.pth"
    state = build_model("AlexNet", pretrained=False).module.state_dict()
    state["classifier.6.weight"] = torch.zeros(1000, 4096)
    state["classifier.6.bias"] = torch.zeros(1000)
    torch.save(state, alex)
    cfg = ExperimentConfig.from_dict({
        "dataset": {"synthetic": {"n_pos": 3, "n_neg": 3, "image_size": 32}},
        "split": {"k": 2},
        "architectures": ["SqueezeNet", "AlexNet"],
        "training": {"epochs": 1},
        "model": {"pretrained": True,
                  "weights_paths": {"SqueezeNet": str(tmp_path / "none.pth"), "AlexNet": str(alex)}},
        "output_dir": str(tmp_path / "partial"),
    })
    path = cfg.save(tmp_path / "p.yaml")
    assert main(["run", "--config", str(path)]) == 1
    record = pipeline.RunRecord.load(tmp_path / "partial")
    assert record.status == "partial"
    assert record.architectures["SqueezeNet"]["status"] == "failed"
    assert record.architectures["AlexNet"]["status"] == "complete"
    assert main(["report", str(tmp_path / "partial")]) == 1
    text = (tmp_path / "partial" / "report" / "report.md").read_text()
    assert "Partial run" in text and "SqueezeNet" in text
