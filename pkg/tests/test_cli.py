import json

import pytest
from click.testing import CliRunner

from gemtune.cli import DatasetError, ingest_dataset, main
from gemtune.records import RecordKind


@pytest.fixture
def runner():
    return CliRunner()


def invoke(runner, *args):
    return runner.invoke(main, [str(a) for a in args], catch_exceptions=False)


class TestIngestDataset:
    def write(self, tmp_path, lines):
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_kind_inference(self, tmp_path):
        path = self.write(
            tmp_path,
            [
                '{"left": {"a": "1"}, "right": "text", "label": 1}',
                '{"left": {"a": {"b": "1"}}, "right": {"c": "2"}, "label": 0}',
            ],
        )
        pairs = ingest_dataset(path)
        assert pairs[0][0].kind is RecordKind.STRUCTURED
        assert pairs[0][1].kind is RecordKind.TEXT
        assert pairs[0][2] == 1
        assert pairs[1][0].kind is RecordKind.SEMI_STRUCTURED
        assert pairs[1][1].kind is RecordKind.STRUCTURED
        assert pairs[1][2] == 0

    def test_malformed_line_names_line_number(self, tmp_path):
        path = self.write(tmp_path, ["not json"])
        with pytest.raises(DatasetError, match="line 1: malformed"):
            ingest_dataset(path)

    def test_missing_key_names_line_number(self, tmp_path):
        path = self.write(tmp_path, ['{"left": "a", "label": 0}'])
        with pytest.raises(DatasetError, match="line 1: missing key 'right'"):
            ingest_dataset(path)

    def test_label_optional(self, tmp_path):
        path = self.write(tmp_path, ['{"left": "a", "right": "b"}'])
        assert ingest_dataset(path)[0][2] is None

    def test_bad_label_rejected(self, tmp_path):
        path = self.write(tmp_path, ['{"left": "a", "right": "b", "label": 3}'])
        with pytest.raises(DatasetError, match="label"):
            ingest_dataset(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset plus vocabulary shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    result = runner.invoke(
        main,
        ["gen-data", "--out-dir", str(root / "data"), "--num-train", "48", "--num-valid", "16", "--num-test", "16"],
        catch_exceptions=False,
    )
    assert result.exit_code == 0
    result = runner.invoke(
        main,
        ["build-vocab", "--data", str(root / "data" / "train.jsonl"), "--out-dir", str(root / "data")],
        catch_exceptions=False,
    )
    assert result.exit_code == 0
    return root


def run_finetune(runner, workspace, out_name, *extra):
    return invoke(
        runner,
        "finetune",
        "--train", workspace / "data" / "train.jsonl",
        "--valid", workspace / "data" / "valid.jsonl",
        "--test", workspace / "data" / "test.jsonl",
        "--vocab", workspace / "data" / "vocab.txt",
        "--out-dir", workspace / out_name,
        "--epochs", 1,
        "--learning-rates", "3e-4",
        *extra,
    )


class TestGenDataAndVocab:
    def test_artifacts_exist(self, workspace):
        for name in ("train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt"):
            assert (workspace / "data" / name).exists()
        lines = (workspace / "data" / "train.jsonl").read_text().splitlines()
        assert len(lines) == 48
        labels = [json.loads(line)["label"] for line in lines]
        assert set(labels) == {0, 1}

    def test_vocab_reserved_header(self, workspace):
        lines = (workspace / "data" / "vocab.txt").read_text().splitlines()
        assert lines[0] == "[PAD]" and lines[2] == "[CLS]" and lines[6] == "[VAL]"


class TestFinetuneCommand:
    def test_writes_all_artifacts(self, runner, workspace):
        result = run_finetune(runner, workspace, "run_artifacts")
        assert result.exit_code == 0, result.output
        out = workspace / "run_artifacts"
        for name in (
            "report.json",
            "metrics.csv",
            "training_curves.png",
            "adapters.aem",
            "adapters.aem.manifest",
            "backbone.aem",
        ):
            assert (out / name).exists(), name
        report = json.loads((out / "report.json").read_text())
        assert report["run_spec"]["subcommand"] == "finetune"
        assert report["run_spec"]["seed"] == 7
        assert "test" in report and "f1" in report["test"]
        assert len(report["grid"]) == 1
        header = (out / "metrics.csv").read_text().splitlines()[0]
        assert header.startswith("learning_rate,epoch,train_loss")

    def test_same_seed_reports_identical_apart_from_wall_clock(self, runner, workspace):
        first = run_finetune(runner, workspace, "run_det_a")
        second = run_finetune(runner, workspace, "run_det_b")
        assert first.exit_code == 0 and second.exit_code == 0
        reports = []
        for name in ("run_det_a", "run_det_b"):
            report = json.loads((workspace / name / "report.json").read_text())
            report.pop("wall_clock_seconds")
            report["run_spec"].pop("out_dir")
            reports.append(report)
        assert reports[0] == reports[1]

    def test_rate_shrinks_training_split(self, runner, workspace):
        result = run_finetune(runner, workspace, "run_rate", "--rate", "0.25")
        assert result.exit_code == 0
        report = json.loads((workspace / "run_rate" / "report.json").read_text())
        assert report["run_spec"]["rate"] == 0.25

    def test_summarize_flag_runs(self, runner, workspace):
        result = run_finetune(runner, workspace, "run_summarize", "--summarize", "--summarize-budget", "24")
        assert result.exit_code == 0

    def test_missing_input_path_fails_with_diagnostic(self, runner, workspace):
        result = invoke(
            runner,
            "finetune",
            "--train", workspace / "missing.jsonl",
            "--valid", workspace / "data" / "valid.jsonl",
            "--vocab", workspace / "data" / "vocab.txt",
            "--out-dir", workspace / "run_missing",
        )
        assert result.exit_code == 1
        assert "error:" in result.output


class TestEvaluateCommand:
    def test_round_trip_matches_report_test_metrics(self, runner, workspace):
        train_result = run_finetune(runner, workspace, "run_eval_src")
        assert train_result.exit_code == 0
        report = json.loads((workspace / "run_eval_src" / "report.json").read_text())

        result = invoke(
            runner,
            "evaluate",
            "--data", workspace / "data" / "test.jsonl",
            "--vocab", workspace / "data" / "vocab.txt",
            "--adapters", workspace / "run_eval_src" / "adapters.aem",
            "--out-dir", workspace / "eval_out",
        )
        assert result.exit_code == 0, result.output
        metrics = json.loads((workspace / "eval_out" / "metrics.json").read_text())["metrics"]
        assert metrics == report["test"]

    def test_empty_dataset_fails_with_message(self, runner, workspace, tmp_path):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        result = invoke(
            runner,
            "evaluate",
            "--data", empty,
            "--vocab", workspace / "data" / "vocab.txt",
            "--adapters", workspace / "data" / "vocab.txt",  # never reached
            "--out-dir", tmp_path / "out",
        )
        assert result.exit_code == 1
        assert "empty dataset" in result.output


class TestTrainMlmCommand:
    def test_writes_artifacts_and_loss_decreases(self, runner, workspace):
        result = invoke(
            runner,
            "train-mlm",
            "--data", workspace / "data" / "train.jsonl",
            "--vocab", workspace / "data" / "vocab.txt",
            "--out-dir", workspace / "mlm_run",
            "--epochs", 3,
        )
        assert result.exit_code == 0, result.output
        out = workspace / "mlm_run"
        for name in ("mlm_report.json", "mlm_metrics.csv", "mlm_curve.png", "inv_adapters.aem"):
            assert (out / name).exists(), name
        report = json.loads((out / "mlm_report.json").read_text())
        assert report["final_heldout_loss"] < report["initial_heldout_loss"]

    def test_invertible_checkpoint_feeds_finetune(self, runner, workspace):
        result = run_finetune(
            runner,
            workspace,
            "run_inv",
            "--config-kind", "invertible_plus_task",
            "--inv-adapters", workspace / "mlm_run" / "inv_adapters.aem",
        )
        assert result.exit_code == 0, result.output


class TestReportStorageCommand:
    def test_artifacts_and_ratio(self, runner, workspace):
        run_finetune(runner, workspace, "run_storage")
        result = invoke(
            runner,
            "report-storage",
            "--backbone", workspace / "run_storage" / "backbone.aem",
            "--out-dir", workspace / "storage_out",
            workspace / "run_storage" / "adapters.aem",
        )
        assert result.exit_code == 0, result.output
        report = json.loads((workspace / "storage_out" / "storage.json").read_text())
        assert report["ratio"] < 0.13
        assert (workspace / "storage_out" / "storage.csv").exists()
        assert (workspace / "storage_out" / "storage_contrast.png").exists()
