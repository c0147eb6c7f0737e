import csv
import json
import subprocess
import sys

import pytest

from hyperseg.cli import main
from hyperseg.config import ConfigError, fast_config, from_dict, load_config
from hyperseg.segnet import param_count


def write_config(path, **patch):
    d = fast_config().to_dict()
    for key, value in patch.items():
        section, field = key.split("__")
        d[section][field] = value
    path.write_text(json.dumps(d))
    return path


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "invalid choice" in capsys.readouterr().err

    def test_no_subcommand(self):
        assert main([]) == 1

    def test_missing_required_argument(self):
        assert main(["train", "--out", "x"]) == 1

    def test_mismatched_param_count(self, tmp_path, capsys):
        cfg = fast_config()
        p = param_count(cfg.unet)
        path = write_config(tmp_path / "c.json", hypernet__output_dim=p + 1)
        assert main(["synth", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert str(p) in err and str(p + 1) in err

    def test_unknown_config_key(self, tmp_path):
        d = fast_config().to_dict()
        d["unet"]["depth"] = 3
        (tmp_path / "c.json").write_text(json.dumps(d))
        assert main(["synth", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2

    def test_bad_device(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HYPERSEG_DEVICE", "tpu")
        assert main(["synth", "--preset", "fast", "--out", str(tmp_path)]) == 2

    def test_runtime_failure(self, tmp_path, capsys):
        # no training data has been generated
        assert main(["train", "--preset", "fast", "--regime", "hs", "--out", str(tmp_path)]) == 3
        assert capsys.readouterr().err.strip()

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "hyperseg", "nope"], capture_output=True, text=True)
        assert proc.returncode == 1


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = fast_config()
        (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
        assert load_config(tmp_path / "c.json").to_dict() == cfg.to_dict()

    def test_r_fixed_outside_range(self):
        d = fast_config().to_dict()
        d["r_fixed"] = [0.1, 0.1, 0.1]
        with pytest.raises(ConfigError):
            from_dict(d)


@pytest.fixture(scope="module")
def fast_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("fast")
    code = main(["reproduce", "--fast", "--out", str(out)])
    return code, out


class TestReproduceFast:
    def test_exit_code(self, fast_run):
        assert fast_run[0] == 0

    def test_summary_has_four_regimes(self, fast_run):
        out = fast_run[1]
        with open(out / "table" / "summary.csv") as f:
            rows = list(csv.DictReader(f))
        first = rows[0]["interval"]
        regimes = [r["regime"] for r in rows if r["interval"] == first]
        assert sorted(regimes) == ["as", "fs", "fsnr", "hs"]
        assert all(0 <= float(r["mean_dice"]) <= 1 for r in rows)

    def test_outputs(self, fast_run):
        out = fast_run[1]
        for rel in ("config.json", "table/results.csv", "bench/bench.csv", "cka/bundle.json",
                    "runs/hs/model.ckpt", "runs/hs/loss.csv"):
            assert (out / rel).exists(), rel
        assert list((out / "sweep").glob("*.csv"))
        for rel in ("bench/bench.png", "cka/overview.png", "runs/loss.png"):
            assert (out / rel).exists(), rel
        assert list((out / "sweep").glob("*.png"))

    def test_rerun_skips_stages(self, fast_run, capsys):
        out = fast_run[1]
        before = (out / "runs" / "hs" / "model.ckpt").stat().st_mtime_ns
        assert main(["reproduce", "--fast", "--out", str(out)]) == 0
        assert (out / "runs" / "hs" / "model.ckpt").stat().st_mtime_ns == before

    def test_eval_with_explicit_checkpoint(self, fast_run):
        out = fast_run[1]
        code = main(["eval", "--preset", "fast", "--out", str(out / "extra"),
                     "--data", str(out / "data" / "test" / "manifest.json"),
                     "--checkpoint", f"hs={out / 'runs' / 'hs' / 'model.ckpt'}",
                     "--interval", "[1.5, 3.0]^3", "--draws", "1"])
        assert code == 0
        with open(out / "extra" / "table" / "summary.csv") as f:
            assert [r["regime"] for r in csv.DictReader(f)] == ["hs"]
