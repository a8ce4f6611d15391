import csv
import json
import math
import os

import pytest

from degtrap import __version__
from degtrap.cli import EXPERIMENTS, OUTPUT_ENV, ConfigError, dispatch, main, parse_config


def run_dirs(root):
    return sorted(os.path.join(root, d) for d in os.listdir(root)) if os.path.isdir(root) else []


def manifest(directory):
    with open(os.path.join(directory, "MANIFEST"), encoding="utf-8") as f:
        return json.load(f)


class TestParseConfig:
    def test_minimal(self):
        cfg = parse_config(base={"experiment": "saturation", "m": 2, "n": 3})
        assert cfg.sweep == [50, 100, 200, 400, 800, 1600]
        assert cfg.numerics == EXPERIMENTS["saturation"][3]
        assert "epsilon" in cfg.provenance["defaults_applied"]
        assert "sweep" in cfg.provenance["defaults_applied"]

    @pytest.mark.parametrize("key,value,match", [("m", 0, "m must be an integer >= 1"),
                                                 ("n", 1, "n must be an integer >= 2"),
                                                 ("sweep", [50, 0, 100], "k must be integers >= 1")])
    def test_out_of_range(self, key, value, match):
        base = {"experiment": "saturation", "m": 2, "n": 3, key: value}
        with pytest.raises(ConfigError, match=match):
            parse_config(base=base)

    def test_unknown_key_lists_valid(self):
        with pytest.raises(ConfigError, match=r"unknown key\(s\) \['eps'\].*valid keys: .*'epsilon'"):
            parse_config(base={"experiment": "saturation", "numerics": {"eps": 0.3}})
        with pytest.raises(ConfigError, match="valid keys"):
            parse_config(base={"experiment": "sogge", "colour": "red"})

    def test_flag_wins_and_is_recorded(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"experiment": "saturation", "m": 2, "n": 3, "numerics": {"epsilon": 0.5}}))
        cfg = parse_config(str(path), [("numerics.epsilon", 0.45)])
        assert cfg.numerics["epsilon"] == 0.45
        assert cfg.provenance["overrides"] == [{"key": "numerics.epsilon", "value": 0.45, "replaced": 0.5}]
        assert cfg.provenance["source"] == str(path)

    def test_hash_ignores_output_and_workers(self):
        a = parse_config(base={"experiment": "sogge", "output": "x", "workers": 1})
        b = parse_config(base={"experiment": "sogge", "output": "y", "workers": 3})
        c = parse_config(base={"experiment": "sogge", "sweep": [10, 20, 30]})
        assert a.hash() == b.hash() != c.hash()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            parse_config(str(tmp_path / "nope.json"))


class TestMain:
    def test_invalid_config_writes_nothing(self, tmp_path, capsys):
        out = tmp_path / "runs"
        assert main(["saturation", "-m", "0", "--output", str(out)]) == 1
        assert "m must be an integer >= 1" in capsys.readouterr().err
        assert not out.exists()

    def test_saturation_exit_zero(self, tmp_path, capsys):
        code = main(["saturation", "-m", "2", "-n", "4", "--sweep", "50,100,200", "--set", "numerics.nt=32",
                     "--output", str(tmp_path), "--workers", "1"])
        assert code == 0
        (d,) = run_dirs(tmp_path)
        rep = json.load(open(os.path.join(d, "report.json"), encoding="utf-8"))
        assert rep["primary"]["target"] == 0
        assert "PASS saturation ->" in capsys.readouterr().out

    def test_free_dispersion(self, tmp_path):
        code = main(["dispersion", "--sweep", "0.001,0.01,0.1", "--set", "numerics.free=true",
                     "--output", str(tmp_path), "--workers", "1"])
        assert code == 0
        (d,) = run_dirs(tmp_path)
        rep = json.load(open(os.path.join(d, "report.json"), encoding="utf-8"))
        for s in rep["samples"]:
            assert s["values"]["max_constant"] == pytest.approx((4 * math.pi) ** -0.5, rel=0.02)

    def test_coarse_dt_is_error(self, tmp_path, capsys):
        code = main(["saturation", "--sweep", "50,100,200", "--set", "numerics.dt=0.5", "--output", str(tmp_path),
                     "--workers", "1"])
        assert code == 1
        out = capsys.readouterr().out
        assert "StepConstraintError" in out and "need dt <=" in out
        man = manifest(run_dirs(tmp_path)[0])
        assert man["status"] == "incomplete" and not man["complete"]
        assert all(s["status"] == "error" for s in man["samples"])

    def test_manifest_and_env_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
        assert main(["sogge", "--sweep", "10,20,40", "--workers", "1"]) == 0
        (d,) = run_dirs(tmp_path / "env")
        man = manifest(d)
        cfg = parse_config(base={"experiment": "sogge", "sweep": [10, 20, 40], "workers": 1})
        assert man["config_hash"] == cfg.hash()
        assert man["versions"]["degtrap"] == __version__ and "numpy" in man["versions"]
        assert [s["status"] for s in man["samples"]] == ["ok"] * 6
        text = open(os.path.join(d, "data.csv"), encoding="utf-8").read()
        assert text.endswith("\n") and next(csv.reader([text.splitlines()[0]]))[0] == "param"
        for name in ("report.json", "data.csv", "plot.svg", "MANIFEST"):
            assert os.path.isfile(os.path.join(d, name))

    def test_quantitative_failure_exit_two(self, tmp_path):
        # an h-window where the local-smoothing slope has not reached its asymptotic value
        code = main(["local-smoothing", "--sweep", "0.1,0.07,0.05", "--set", "numerics.nt=40",
                     "--output", str(tmp_path), "--workers", "1"])
        assert code == 2
        assert manifest(run_dirs(tmp_path)[0])["status"] == "fail"

    def test_dry_run(self, capsys):
        assert main(["flow-bounds", "-m", "3", "--dry-run"]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["config"]["sweep"] == [3] and len(out["config_hash"]) == 64

    def test_help_lists_experiments(self, capsys):
        with pytest.raises(SystemExit) as ei:
            main(["--help"])
        assert ei.value.code == 0
        text = capsys.readouterr().out
        for name, (desc, *_rest) in EXPERIMENTS.items():
            assert name in text
        assert "local smoothing estimate" in text and "eigenfunction bound on spheres" in text

    def test_driver_exception_leaves_manifest(self, tmp_path, monkeypatch):
        import degtrap.cli as cli

        def boom(cfg):
            raise RuntimeError("worker died")

        monkeypatch.setattr(cli, "_run", boom)
        cfg = parse_config(base={"experiment": "sogge", "output": str(tmp_path), "workers": 1})
        code, d = dispatch(cfg, stream=open(os.devnull, "w"))
        assert code == 1 and manifest(d)["error"] == "RuntimeError: worker died"
