import json

import pytest

from scalebio.harness import cli
from scalebio.harness.config import ConfigError, ExperimentConfig, load_config, read_ini


def test_defaults_and_presets():
    cfg = load_config(environ={})
    assert cfg.preset == "denoise" and cfg.schedule.alpha == 100.0
    mix = load_config(environ={}, overrides={"experiment": {"preset": "mixture"}})
    assert mix.model.kind == "linear_regression" and mix.data.val_sizes == (6000, 4000)
    hc = load_config(environ={}, overrides={"experiment": {"preset": "hyperclean"}})
    assert hc.model.hyperclean_c == 1e-3 and hc.data.corruption == (0.3,)


def test_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[experiment]\npreset = quality\nseed = 4\n[schedule]\nsteps = 10\nalpha = 5\n")
    cfg = load_config(ini, environ={"SCALEBIO_SCHEDULE__STEPS": "20"}, overrides={"experiment": {"seed": 9}})
    assert cfg.preset == "quality" and cfg.data.corruption == (0.0, 0.5)
    assert (cfg.schedule.steps, cfg.schedule.alpha, cfg.seed) == (20, 5.0, 9)


def test_ini_roundtrip(tmp_path):
    cfg = load_config(environ={}, overrides={"experiment": {"preset": "mixture"}})
    path = tmp_path / "r.ini"
    path.write_text(cfg.to_ini())
    assert load_config(path, environ={}) == cfg
    assert isinstance(read_ini(path), dict)


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[schedule]\nsteepness = 1\n",
    "[schedule]\nsteps = many\n",
    "[schedule]\nsteps = 0\n",
    "[data]\nsizes = 10, 20\ncorruption = 0.1\n",
    "[data]\ncorruption = 0, 1.5\n",
    "[experiment]\npreset = galaxy\n",
    "[model]\nkind = tree\n",
    "not an ini file",
])
def test_bad_configs(tmp_path, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path, environ={})


def test_missing_file_and_bad_env(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "none.ini", environ={})
    with pytest.raises(ConfigError):
        load_config(environ={"SCALEBIO_STEPS": "3"})
    with pytest.raises(ConfigError):
        load_config(environ={"SCALEBIO_SCHEDULE__WARP": "3"})


def test_to_dict():
    assert ExperimentConfig().to_dict()["schedule"]["rule"] == "adam"


def test_cli_config_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[model]\nkind = tree\n")
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "model.kind" in capsys.readouterr().err


def test_cli_argparse_errors_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--preset", "nope"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        cli.main(["run", "--seed", "-1"])
    assert info.value.code == 2


def _small_denoise(tmp_path, extra=""):
    ini = tmp_path / "small.ini"
    ini.write_text("[schedule]\nsteps = 300\n[data]\nsizes = 100, 900\nval_sizes = 100, 0\ntest_size = 10\n" + extra)
    return ini


def test_cli_run_pass(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--preset", "denoise", "--out", str(out), "--log-every", "500"])
    assert code == 0
    assert "PASS p_corrupted" in capsys.readouterr().out
    report = json.loads((out / "report.json").read_text())
    assert report["passed"] is True and report["preset"] == "denoise"
    assert {"trajectory", "weights_svg"} <= set(report["artifacts"])


def test_cli_run_failure_names_metric(tmp_path, capsys):
    # Five steps is far too few to move the weights away from uniform.
    ini = _small_denoise(tmp_path, "")
    ini.write_text(ini.read_text().replace("steps = 300", "steps = 5"))
    code = cli.main(["run", "--config", str(ini), "--out", str(tmp_path / "o"), "--quiet"])
    captured = capsys.readouterr()
    assert code == 1
    assert "FAIL p_corrupted" in captured.out and "p_corrupted" in captured.err
