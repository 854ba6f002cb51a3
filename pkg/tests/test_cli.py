import csv
import json
import subprocess
import sys

import pytest

from genfsl import cli
from genfsl.models import load_checkpoint

SMALL = {
    "model": {"image_size": 16},
    "pretrain": {"epochs": 2, "batch_size": 8},
    "finetune": {"epochs": 5},
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(SMALL))
    assert run("synth", "--out", root / "data", "--n", 12, "--n-test", 6, "--size", 16, "--seed", 3) == 0
    assert run("pretrain", "--config", cfg, "--data", root / "data", "--out", root / "ae.gfsl") == 0
    return root, cfg


class TestConfig:
    def test_defaults_resolved(self):
        cfg = cli.resolve_config()
        assert cfg["pretrain"]["epochs"] == 20 and cfg["evaluate"]["threshold"] == 0.5
        assert cfg["model"]["channels"] == [16, 32, 64]

    def test_partial_override(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"pretrain": {"augmentation": {"enabled": False}}}))
        cfg = cli.resolve_config(p)
        assert cfg["pretrain"]["augmentation"]["enabled"] is False
        assert cfg["pretrain"]["augmentation"]["rotation_max_degrees"] == 15

    @pytest.mark.parametrize("doc", [{"bogus": 1}, {"pretrain": {"lr": 1e-3, "momentum": 0.9}}, {"model": 3}])
    def test_unknown_keys_rejected(self, tmp_path, doc, capsys):
        p = tmp_path / "c.json"
        p.write_text(json.dumps(doc))
        assert run("pretrain", "--config", p, "--data", tmp_path, "--out", tmp_path / "m.gfsl") == cli.EXIT_USAGE
        assert "config" in capsys.readouterr().err

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        assert run("pretrain", "--config", p, "--data", tmp_path, "--out", tmp_path / "m.gfsl") == cli.EXIT_USAGE


class TestCommands:
    def test_synth_layout(self, workspace):
        root, _ = workspace
        for split, n in (("train", 12), ("test", 6)):
            for name in ("clear", "opacity"):
                assert len(list((root / "data" / split / name).glob("*.pgm"))) == n

    def test_pretrain_outputs(self, workspace):
        root, _ = workspace
        params = load_checkpoint(root / "ae.gfsl")
        assert params["encoder.conv1.weight"].shape == (16, 1, 3, 3)
        with open(root / "ae.log.csv") as fh:
            assert len(list(csv.reader(fh))) == 3
        echoed = json.loads((root / "ae.config.json").read_text())
        assert echoed["pretrain"]["epochs"] == 2 and echoed["finetune"]["lr"] == 1e-4

    def test_finetune_and_evaluate(self, workspace, capsys):
        root, cfg = workspace
        code = run("finetune", "--config", cfg, "--encoder", root / "ae.gfsl", "--data", root / "data",
                   "--shots", 5, "--seed", 1, "--out", root / "clf.gfsl")
        assert code == 0
        assert json.loads((root / "clf.config.json").read_text())["finetune"]["shots"] == "5"
        code = run("evaluate", "--model", root / "clf.gfsl", "--data", root / "data", "--sweep",
                   "--out", root / "report.json")
        assert code == 0
        report = json.loads((root / "report.json").read_text())
        assert report["n_test"] == 12 and report["metrics"]["threshold"] == 0.5
        assert len(report["sweep"]) == 21
        with open(root / "report.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 22 and list(rows[0])[:2] == ["seed", "threshold"]
        assert "sensitivity" in capsys.readouterr().out

    def test_evaluate_balanced(self, workspace, tmp_path):
        root, cfg = workspace
        run("finetune", "--config", cfg, "--encoder", root / "ae.gfsl", "--data", root / "data",
            "--shots", "all", "--out", tmp_path / "clf.gfsl")
        assert run("evaluate", "--model", tmp_path / "clf.gfsl", "--data", root / "data", "--balanced-test",
                   "--threshold", 0.3, "--out", tmp_path / "r.json") == 0
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["metrics"]["threshold"] == 0.3 and report["config"]["evaluate"]["balanced_test"] is True

    def test_too_many_shots_names_class(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        code = run("finetune", "--config", cfg, "--encoder", root / "ae.gfsl", "--data", root / "data",
                   "--shots", 100, "--out", tmp_path / "clf.gfsl")
        assert code == cli.EXIT_DATA
        assert "'clear'" in capsys.readouterr().err
        assert not (tmp_path / "clf.gfsl").exists()

    def test_experiment(self, workspace, tmp_path, capsys):
        root, cfg = workspace
        out = tmp_path / "exp"
        code = run("experiment", "--config", cfg, "--encoder", root / "ae.gfsl", "--data", root / "data",
                   "--shots", 4, "--repeats", 3, "--out", out)
        assert code == 0
        with open(out / "runs.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert sorted(p.name for p in out.glob("run_*")) == ["run_00", "run_01", "run_02"]
        assert (out / "run_01" / "classifier.gfsl").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["aggregate"]["accuracy"]["summary"] in capsys.readouterr().out
        assert report["config"]["evaluate"]["repeats"] == 3

    def test_inputs_untouched(self, workspace):
        root, _ = workspace
        before = {p: p.read_bytes() for p in (root / "data").rglob("*.pgm")}
        run("synth", "--out", root / "data2", "--n", 1, "--n-test", 0, "--size", 16)
        assert {p: p.read_bytes() for p in (root / "data").rglob("*.pgm")} == before
        assert not (root / "data2" / "test").exists()


class TestExitCodes:
    def test_usage(self, capsys):
        with pytest.raises(SystemExit) as err:
            run("finetune", "--encoder", "x")
        assert err.value.code == cli.EXIT_USAGE

    def test_unknown_command(self):
        with pytest.raises(SystemExit) as err:
            run("frobnicate")
        assert err.value.code == cli.EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert run("pretrain", "--data", tmp_path / "nowhere", "--out", tmp_path / "m.gfsl") == cli.EXIT_DATA

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        root, _ = workspace
        blob = bytearray((root / "ae.gfsl").read_bytes())
        blob[100] ^= 0xFF
        (tmp_path / "bad.gfsl").write_bytes(bytes(blob))
        code = run("finetune", "--encoder", tmp_path / "bad.gfsl", "--data", root / "data", "--shots", 4,
                   "--config", workspace[1], "--out", tmp_path / "c.gfsl")
        assert code == cli.EXIT_IO

    def test_missing_checkpoint(self, workspace, tmp_path):
        root, _ = workspace
        assert run("evaluate", "--model", tmp_path / "none.gfsl", "--data", root / "data",
                   "--out", tmp_path / "r.json") == cli.EXIT_IO

    def test_divergence(self, workspace, tmp_path):
        root, _ = workspace
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"model": {"image_size": 16}, "finetune": {"lr": 1e300, "epochs": 3}}))
        code = run("finetune", "--config", cfg, "--encoder", root / "ae.gfsl", "--data", root / "data",
                   "--shots", 4, "--out", tmp_path / "c.gfsl")
        assert code == cli.EXIT_DIVERGED

    def test_gradcheck(self, capsys):
        assert run("gradcheck", "--instances", 2) == 0
        out = capsys.readouterr().out
        assert out.count("ok") == 8 and "conv_transpose2d" in out

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "genfsl", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0 and "experiment" in proc.stdout
