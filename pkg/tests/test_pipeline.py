import json

import numpy as np
import pytest

from diffprosody import cli, pipeline
from diffprosody.config import config_from_dict
from diffprosody.errors import DataError
from diffprosody.tensorio import load_tensors

TINY_RUN = {
    "corpus": {"n_conversations": 12, "frames_min": 8, "frames_max": 12},
    "extractor": {"m": 2, "d": 4, "steps": 20, "batch_size": 16},
    "denoiser": {"n_blocks": 1, "model_dim": 16, "n_heads": 2, "ff_dim": 32, "m": 2, "d": 4, "d_s": 8},
    "data": {"d_s": 8, "test_fraction": 0.25},
    "schedule": {"T": 20},
    "training": {"steps": 20, "batch_size": 8},
    "baseline_training": {"steps": 20, "batch_size": 8},
    "eval": {"bins": 4, "n_probes": 2, "count": 40, "kmeans_restarts": 1},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def run_cli(*argv):
    return cli.run([str(a) for a in argv])


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-data", "train-extractor", "extract-prosody", "train-diffusion", "train-baseline"):
        assert run_cli(cmd, "--config", config_file, "--out", out) == 0
    for model in ("diffusion", "baseline"):
        assert run_cli("sample", "--model", model, "--config", config_file, "--out", out) == 0
        assert run_cli("eval", "--model", model, "--no-plots", "--config", config_file, "--out", out) == 0
    return out


def test_artifacts(run_dir):
    for name in ("corpus.jsonl", "corpus.model.jsonl", "extractor.bin", "prosody.json",
                 "models/diffusion-none.json", "models/baseline-none_loss.csv",
                 "samples/ground_truth.bin", "eval/diffusion-none/report.json",
                 "eval/baseline-none/bins.csv"):
        assert (run_dir / name).exists(), name
    assert "oracle" not in (run_dir / "corpus.model.jsonl").read_text()


def test_samples_have_prosody_shape(run_dir):
    blocks, manifest = load_tensors(run_dir / "samples" / "diffusion-none")
    assert len(blocks) == 2 and manifest["meta"]["count"] == 40
    assert all(b.shape == (40, 2, 4) for b in blocks.values())
    base, _ = load_tensors(run_dir / "samples" / "baseline-none")
    # the regressor gives one point per context
    assert all(np.ptp(b, axis=0).max() == 0 for b in base.values())


def test_gen_data_repeatable(tmp_path, config_file):
    for sub in ("a", "b"):
        assert run_cli("gen-data", "--config", config_file, "--out", tmp_path / sub) == 0
    for name in ("corpus.jsonl", "corpus.model.jsonl", "corpus.meta.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_truth_against_itself(run_dir, config_file, capsys):
    truth = run_dir / "samples" / "ground_truth"
    code = run_cli("eval", "--generated", truth, "--ground-truth", truth, "--no-plots",
                   "--config", config_file, "--out", run_dir)
    assert code == 0
    res = json.loads(capsys.readouterr().out)
    assert res["mean_jsd"] < 1e-12 and res["max_ndb"] == 0


def test_eval_writes_plots(run_dir, config_file):
    assert run_cli("eval", "--config", config_file, "--out", run_dir,
                   "--ground-truth", run_dir / "samples" / "ground_truth") == 0
    assert list((run_dir / "eval" / "diffusion-none").glob("scatter_*.png"))
    assert list((run_dir / "eval" / "diffusion-none").glob("bins_*.png"))


def test_report(run_dir, tmp_path, config_file):
    assert run_cli("report", "--runs", run_dir, "--out", tmp_path / "rep") == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert {e["run"] for e in summary["runs"]} >= {"diffusion-none", "baseline-none"}
    assert (tmp_path / "rep" / "summary.csv").exists() and (tmp_path / "rep" / "summary.png").exists()


def test_report_refuses_mixed_configs(run_dir, tmp_path):
    other = tmp_path / "other" / "eval" / "x"
    other.mkdir(parents=True)
    rep = json.loads((run_dir / "eval" / "diffusion-none" / "report.json").read_text())
    rep["config_hash"] = "0" * 64
    (other / "report.json").write_text(json.dumps(rep))
    assert run_cli("report", "--runs", run_dir, tmp_path / "other", "--out", tmp_path / "rep") == 3


def test_report_accepts_other_seed(run_dir, tmp_path):
    other = tmp_path / "other" / "eval" / "x"
    other.mkdir(parents=True)
    rep = json.loads((run_dir / "eval" / "diffusion-none" / "report.json").read_text())
    rep["seed"] = 99
    (other / "report.json").write_text(json.dumps(rep))
    assert run_cli("report", "--runs", run_dir, tmp_path / "other", "--out", tmp_path / "rep") == 0


class TestExitCodes:
    def test_bad_flag(self):
        assert run_cli("train-diffusion", "--ablation", "drop_speaker") == 2

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"training": {"epochs": 3}}')
        assert run_cli("gen-data", "--config", path, "--out", tmp_path) == 2

    def test_missing_corpus(self, tmp_path, config_file):
        assert run_cli("train-extractor", "--config", config_file, "--out", tmp_path) == 3

    def test_seed_mismatch(self, run_dir, config_file):
        assert run_cli("extract-prosody", "--seed", 5, "--config", config_file, "--out", run_dir) == 3

    def test_changed_config(self, run_dir, tmp_path):
        body = json.loads(json.dumps(TINY_RUN))
        body["training"]["steps"] = 21
        path = tmp_path / "c.json"
        path.write_text(json.dumps(body))
        assert run_cli("sample", "--config", path, "--out", run_dir) == 3


def test_stage_rerun_is_stable(run_dir, config_file):
    cfg = config_from_dict(TINY_RUN)
    before = (run_dir / "models" / "diffusion-none.bin").read_bytes()
    pipeline.train_predictor(cfg, run_dir, "diffusion")
    assert (run_dir / "models" / "diffusion-none.bin").read_bytes() == before


def test_too_small_for_split():
    cfg = config_from_dict(TINY_RUN)
    with pytest.raises(DataError):
        pipeline.split(cfg, [object()])
