import json
import socket

import pytest

from dblp.cli import main
from dblp.config import ConfigError, ExperimentConfig, from_ini, preset


def small(tmp_path, *extra):
    return ["--preset", "toy-convergence", "--steps", "20", "--out", str(tmp_path), *extra]


def test_simulate_writes_artifacts(tmp_path, capsys):
    assert main(small(tmp_path)) == 0
    for f in ("dblp.csv", "baseline.csv", "summary.txt", "summary.json", "manifest.json"):
        assert (tmp_path / f).exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 0 and "[tolerance]" in man["config"]
    # the manifest echo alone reproduces the run
    assert from_ini(man["config"]).steps == 20
    assert "speedup" in capsys.readouterr().out


def test_deterministic_csv(tmp_path):
    main(small(tmp_path / "a", "--seed", "3"))
    main(small(tmp_path / "b", "--seed", "3"))
    assert (tmp_path / "a" / "dblp.csv").read_bytes() == (tmp_path / "b" / "dblp.csv").read_bytes()


def test_zero_steps_is_config_error(tmp_path, capsys):
    assert main(small(tmp_path, "--steps", "0")) == 2
    assert "steps" in capsys.readouterr().err


def test_config_file_overrides(tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("[experiment]\npreset = background-loss\nsteps = 3\n[workload]\nlayout = g:1000\n")
    assert main(["--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["steps"] == 3 and s["dblp"]["count"] == 9


@pytest.mark.parametrize("body", [
    "[tolerance]\npolicy = adaptive\np_low = 0.5\np_high = 0.4\n",
    "[workload]\nlayout = \n",
    "[network]\nmax_payload = 1390\n",
    "[experiment]\nmode = cluster\n",
    "[nonsense]\nx = 1\n",
    "[network]\nbogus = 1\n",
    "[experiment]\nsteps = ten\n",
])
def test_bad_configs(tmp_path, body):
    cfg = tmp_path / "bad.ini"
    cfg.write_text(body)
    assert main(["--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_missing_config_file(tmp_path):
    assert main(["--config", str(tmp_path / "none.ini")]) == 2


def test_unreachable_server_is_runtime_failure(tmp_path):
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    assert main(small(tmp_path, "--mode", "worker", "--connect", f"127.0.0.1:{port}")) == 1


def test_presets_validate():
    for name in ("microburst-effnet", "microburst-resnet", "background-loss", "toy-convergence"):
        preset(name).validate()
    with pytest.raises(ConfigError):
        preset("nope")
    assert ExperimentConfig().validate()


def test_list_presets(capsys):
    assert main(["--list-presets"]) == 0
    assert "microburst-effnet" in capsys.readouterr().out
