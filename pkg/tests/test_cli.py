import json
import os
import subprocess
import sys

import pytest

from csidn import cli, datagen, harness, nn


def test_parse_train_with_seed():
    cmd = cli.parse_cli(["train", "--config", "c.toml", "--seed", "7"])
    assert cmd.subcommand == "train" and cmd.config == "c.toml" and cmd.seed == 7


def test_parse_overrides():
    cmd = cli.parse_cli(["sweep", "noise.rho=0.45", "--out", "o"])
    assert cmd.overrides == ["noise.rho=0.45"] and cmd.output == "o"


@pytest.mark.parametrize("argv", [["bogus"], ["train", "--bogus"], [], ["train", "rho"]])
def test_usage_errors_exit_2(argv, capsys):
    with pytest.raises(SystemExit) as info:
        cli.parse_cli(argv)
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_help_lists_config_reference(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "noise.rho" not in out or "[noise]" in out
    assert "[train]" in out and "anchors = 20" in out


def test_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["train", "noise.rho=1.5", "--out", str(tmp_path)]) == 2
    assert "noise.rho" in capsys.readouterr().err
    assert cli.main(["train", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[train\n")
    assert cli.main(["train", "--config", str(bad), "--out", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    clean = datagen.gen_circles(datagen.CirclesSpec(n_per_class=10))
    path = tmp_path / "clean.csv"
    datagen.write_csv(clean, path)
    # a 2-D checkpoint is fine, a 3-D one is a runtime error for grids
    model = tmp_path / "m.json"
    nn.save_model(nn.init_mlp([3, 3], 0), model)
    assert cli.main(["grid", "--model", str(model), "--out", str(tmp_path / "g")]) == 1
    assert "UnsupportedDimensionError" in capsys.readouterr().err


def test_schema_error_exits_2(tmp_path):
    path = tmp_path / "noisy.csv"
    path.write_text("x0,x1,y_noisy\n0.1,0.2,0\n")
    assert cli.main(["train", "--input", str(path), "train.method=ilfc", "--out", str(tmp_path)]) == 2


def test_generate_train_grid(tmp_path):
    small = ["circles.n_per_class=40", "train.epochs=2", "train.anchors=5"]
    assert cli.main(["generate", "--out", str(tmp_path / "g"), *small]) == 0
    assert cli.main(["corrupt", "--input", str(tmp_path / "g" / "train.csv"), "--out", str(tmp_path / "c"),
                     "noise.rho=0.4", *small]) == 0
    noisy = datagen.read_csv(tmp_path / "c" / "noisy.csv", require_confidence=True)
    assert len(noisy) == 120 and datagen.noise_rate(noisy) > 0
    assert cli.main(["train", "--input", str(tmp_path / "c" / "noisy.csv"),
                     "--test", str(tmp_path / "g" / "test.csv"), "--out", str(tmp_path / "t"),
                     "train.method=ilfc", *small]) == 0
    run = harness.load_run(tmp_path / "t" / "run.json")
    assert run.verify() and len(run.test_acc) == 2
    assert (tmp_path / "t" / "diagnostics.json").exists()
    assert cli.main(["grid", "--model", str(tmp_path / "t" / "model.json"), "--out", str(tmp_path / "gr"),
                     "experiment.grid_resolution=10"]) == 0
    assert sum(1 for _ in open(tmp_path / "gr" / "grid.csv")) == 101


def test_seed_flag_applies(tmp_path):
    small = ["circles.n_per_class=20", "train.epochs=1"]
    cli.main(["train", "--seed", "3", "--out", str(tmp_path), *small])
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["config"]["train"]["seed"] == 3


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["generate", "circles.n_per_class=5"]) == 0
    assert (tmp_path / "generate" / "train.csv").exists()


def test_sweep_twice_is_byte_identical(tmp_path):
    recipe = tmp_path / "r.toml"
    recipe.write_text(
        "[circles]\nn_per_class = 40\n[train]\nepochs = 2\nanchors = 5\n"
        '[experiment]\nrhos = [0.3]\nmethods = ["ilfc", "coteaching"]\nseeds = [0, 1]\n'
    )
    for name in ("a", "b"):
        assert cli.main(["sweep", "--config", str(recipe), "--out", str(tmp_path / name)]) == 0
    assert (tmp_path / "a" / "curves.csv").read_bytes() == (tmp_path / "b" / "curves.csv").read_bytes()


def test_module_entry_point(tmp_path):
    env = dict(os.environ, CSIDN_OUTPUT_ROOT=str(tmp_path))
    proc = subprocess.run([sys.executable, "-m", "csidn", "nope"], capture_output=True, text=True, env=env)
    assert proc.returncode == 2 and "usage" in proc.stderr
