import csv
import subprocess
import sys

import pytest

from hsrtrain.cli import EXIT_DIVERGED, EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, main
from hsrtrain.network import load_checkpoint
from hsrtrain.trainer import METRICS_HEADER, read_manifest

GOLDEN = {
    "sparsity.csv": ["m", "b0", "mean_fired", "max_fired", "mean_fraction", "stderr_fraction",
                     "predicted_fraction", "ratio_phi", "ratio_m45", "within_4se", "max_ok"],
    "scaling.csv": ["m", "b0", "median_us_hsr", "query_us_hsr", "median_us_dense", "query_us_dense",
                    "fired_equal", "slope_hsr", "slope_dense"],
    "kernel_check.csv": ["m", "eps", "b0", "trials", "violations", "violation_rate", "stderr",
                         "delta_bound", "max_deviation"],
    "rfs.csv": ["m", "T", "eta", "loss", "mean_loss", "stderr", "bound", "ok"],
    "ntk_equiv.csv": ["seed", "B", "ntk_loss", "ntk_stderr", "nn_loss", "nn_stderr", "gap", "diverged",
                      "note"],
}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def header(path):
    with open(path) as fh:
        return next(csv.reader(fh))


def train_args(out, **kw):
    opts = {"d": 4, "m": 256, "eta": 0.1, "batch": 8, "steps": 10, "seed": 1, "eval-samples": 500}
    opts.update(kw)
    args = ["train", "--out", str(out)]
    for k, v in opts.items():
        args += [f"--{k}", str(v)]
    return args


class TestTrain:
    def test_outputs(self, tmp_path, capsys):
        assert main(train_args(tmp_path)) == EXIT_OK
        out = capsys.readouterr().out
        assert "final_loss=" in out
        assert header(tmp_path / "metrics.csv") == METRICS_HEADER
        assert len(read_csv(tmp_path / "metrics.csv")) == 10
        man = read_manifest(tmp_path / "manifest.txt")
        assert man["status"] == "ok" and man["config.m"] == "256"
        for name in ("returned", "final"):
            assert load_checkpoint(tmp_path / f"checkpoint_{name}.bin").m == 256

    def test_zero_rate_keeps_loss(self, tmp_path, capsys):
        args = train_args(tmp_path, eta=0, batch=16, steps=10, m=512, d=8, backend="dense")
        assert main(args) == EXIT_OK
        lines = dict(l.split("=", 1) for l in capsys.readouterr().out.split())
        assert lines["final_loss"] == lines["initial_loss"]

    def test_backends_same_fired_column(self, tmp_path):
        for be in ("hsr", "dense"):
            assert main(train_args(tmp_path / be, backend=be, steps=25)) == EXIT_OK
        fired = [[r["fired_total"] for r in read_csv(tmp_path / be / "metrics.csv")] for be in ("hsr", "dense")]
        assert fired[0] == fired[1]

    def test_missing_required_flag(self, tmp_path, capsys):
        args = [a for a in train_args(tmp_path) if a not in ("--m", "256")]
        assert main(args) == EXIT_USAGE
        assert "usage" in capsys.readouterr().err

    def test_bad_backend(self, tmp_path):
        assert main(train_args(tmp_path, backend="gpu")) == EXIT_USAGE

    def test_divergence(self, tmp_path, capsys):
        assert main(train_args(tmp_path, eta="1e300", b0=0.0, steps=50)) == EXIT_DIVERGED
        assert "non-finite" in capsys.readouterr().err
        assert read_manifest(tmp_path / "manifest.txt")["status"] == "diverged"


class TestConfig:
    def test_flags_override_config_override_defaults(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# shared settings\nd=4\nm=128\neta=0.05\nbatch=4\nsteps=6\nseed=3\n")
        out = tmp_path / "out"
        assert main(["train", "--config", str(conf), "--steps", "3", "--out", str(out),
                     "--eval-samples", "100"]) == EXIT_OK
        man = read_manifest(out / "manifest.txt")
        assert man["steps"] == "3"  # flag wins
        assert man["m"] == "128"  # config fills the gap
        assert man["B"] == "1.0"  # default otherwise

    def test_unknown_config_key(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("d=4\nwidth=9\n")
        assert main(["train", "--config", str(conf)]) == EXIT_USAGE

    def test_bad_config_value(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("d=four\n")
        assert main(["train", "--config", str(conf)]) == EXIT_USAGE


class TestExperiments:
    def test_sparsity(self, tmp_path, capsys):
        assert main(["sparsity", "--m-grid", "4096,16384,65536", "--d", "8", "--seed", "7",
                     "--out", str(tmp_path)]) == EXIT_OK
        rows = read_csv(tmp_path / "sparsity.csv")
        assert header(tmp_path / "sparsity.csv") == GOLDEN["sparsity.csv"]
        assert len(rows) == 3
        assert all(0.8 <= float(r["ratio_phi"]) <= 1.2 for r in rows)

    def test_property_failure(self, tmp_path):
        assert main(["sparsity", "--m-grid", "1024", "--ratio-min", "5", "--out", str(tmp_path)]) == EXIT_PROPERTY
        assert read_manifest(tmp_path / "manifest.txt")["status"] == "property-failed"

    @pytest.mark.parametrize("grid", ["4096,abc", ",", "1.5,2"])
    def test_malformed_grid(self, tmp_path, grid):
        assert main(["sparsity", "--m-grid", grid, "--out", str(tmp_path)]) == EXIT_USAGE

    def test_scaling(self, tmp_path):
        code = main(["scaling", "--m-grid", "512,1024", "--d", "4", "--steps", "3", "--out", str(tmp_path),
                     "--max-slope", "100"])
        assert code in (EXIT_OK, EXIT_PROPERTY)
        assert header(tmp_path / "scaling.csv") == GOLDEN["scaling.csv"]
        assert main(["scaling", "--m-grid", "512", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_kernel_check(self, tmp_path):
        assert main(["kernel-check", "--m", "4240", "--trials", "20", "--ref-samples", "100000",
                     "--out", str(tmp_path)]) == EXIT_OK
        assert header(tmp_path / "kernel_check.csv") == GOLDEN["kernel_check.csv"]

    def test_rfs(self, tmp_path):
        assert main(["rfs", "--m", "256", "--steps", "200", "--seeds", "2", "--eval-samples", "500",
                     "--out", str(tmp_path)]) in (EXIT_OK, EXIT_PROPERTY)
        assert header(tmp_path / "rfs.csv") == GOLDEN["rfs.csv"]
        assert main(["rfs", "--m", "16", "--loss", "squared", "--out", str(tmp_path)]) == EXIT_USAGE

    def test_ntk_equiv(self, tmp_path):
        code = main(["ntk-equiv", "--B-grid", "1,100", "--m", "64", "--steps", "20", "--seeds", "2",
                     "--eval-samples", "500", "--out", str(tmp_path)])
        assert code in (EXIT_OK, EXIT_PROPERTY)
        assert header(tmp_path / "ntk_equiv.csv") == GOLDEN["ntk_equiv.csv"]
        assert len(read_csv(tmp_path / "ntk_equiv.csv")) == 4


def test_manifest_written_before_work(tmp_path):
    # a run that diverges still leaves its full configuration behind
    main(train_args(tmp_path, eta="1e300", b0=0.0, steps=50))
    man = read_manifest(tmp_path / "manifest.txt")
    assert man["command"] == "train" and man["eta"] == "1e+300"


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hsrtrain", "sparsity", "--m-grid", "256,512",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode in (EXIT_OK, EXIT_PROPERTY)
    assert (tmp_path / "sparsity.csv").exists()
    proc = subprocess.run([sys.executable, "-m", "hsrtrain", "bogus"], capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
