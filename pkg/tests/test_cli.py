import json
import subprocess
import sys

import pytest

from probcaps.cli import run_command
from probcaps.data import SyntheticSpec, load_dataset
from probcaps.renderer import read_pgm
from probcaps.model import dump_document
from probcaps.training import TrainConfig


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(dump_document(SyntheticSpec(samples_per_class=2, seed=4).to_document()))
    cfg = TrainConfig(epochs=1, batch_size=4, inner_inference_steps=2, eval_steps=2, eval_samples=1, init_angles_deg=(0.0,))
    (d / "cfg.json").write_text(dump_document(cfg.to_document()))
    assert run_command(["generate", "--spec", str(d / "spec.json"), "--out", str(d / "d.caps")]) == 0
    assert run_command(["train", "--data", str(d / "d.caps"), "--config", str(d / "cfg.json"),
                        "--out", str(d / "ck.json"), "--report", str(d / "rep.json"), "--threads", "2"]) == 0
    return d


def test_generate_writes_dataset(workdir):
    ds = load_dataset(workdir / "d.caps")
    assert ds.images.shape == (8, 24, 24)
    assert (workdir / "d.caps.latents.json").exists()


def test_train_writes_checkpoint_and_report(workdir):
    doc = json.loads((workdir / "ck.json").read_text())
    assert doc["kind"] == "checkpoint"
    assert doc["train_config"]["kind"] == "train_config"
    assert json.loads((workdir / "rep.json").read_text())["kind"] == "train_report"


def test_infer_outputs(workdir):
    out = workdir / "inf"
    assert run_command(["infer", "--ckpt", str(workdir / "ck.json"), "--data", str(workdir / "d.caps"),
                        "--steps", "2", "--out-dir", str(out)]) == 0
    assert (out / "phi.json").exists()
    assert read_pgm(out / "recon_0007.pgm").shape == (24, 24)
    assert (out / "trace_0000.csv").read_text().splitlines()[0].startswith("step")


@pytest.mark.parametrize("index,rows", [(None, 8 * 24), (3, 24)])
def test_reconstruct_from_latents(workdir, index, rows):
    out = workdir / f"r{index}.pgm"
    argv = ["reconstruct", "--ckpt", str(workdir / "ck.json"), "--latents", str(workdir / "d.caps.latents.json"), "--out", str(out)]
    if index is not None:
        argv += ["--index", str(index)]
    assert run_command(argv) == 0
    assert read_pgm(out).shape == (rows, 24)


def test_reconstruct_bad_index_is_usage_error(workdir):
    argv = ["reconstruct", "--ckpt", str(workdir / "ck.json"), "--latents", str(workdir / "d.caps.latents.json"),
            "--out", str(workdir / "x.pgm"), "--index", "99"]
    assert run_command(argv) == 2


def test_eval_writes_csv(workdir, capsys):
    out = workdir / "m.csv"
    assert run_command(["eval", "--ckpt", str(workdir / "ck.json"), "--data", str(workdir / "d.caps"),
                        "--steps", "2", "--out", str(out)]) == 0
    assert "accuracy" in out.read_text()
    assert "mode t" in capsys.readouterr().out


def test_oracle_and_gradcheck_pass():
    assert run_command(["oracle"]) == 0
    assert run_command(["gradcheck"]) == 0


@pytest.mark.parametrize(
    "argv",
    [
        ["frobnicate"],
        ["infer", "--bogus"],
        ["eval", "--ckpt", "a", "--data", "b", "--train-fraction", "1.5"],
        ["infer", "--ckpt", "a", "--data", "b", "--out-dir", "c", "--steps", "0"],
    ],
)
def test_usage_errors_exit_2(argv):
    assert run_command(argv) == 2


def test_missing_file_exits_1(tmp_path):
    assert run_command(["generate", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "d.caps")]) == 1


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "probcaps.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "reconstruct" in proc.stdout
