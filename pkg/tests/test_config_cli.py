import numpy as np
import pytest

from sfs import cli, config
from sfs.config import ConfigParseError, RunConfig, parse_config, write_config


def test_defaults_populated():
    cfg = RunConfig()
    assert cfg["run.seed"] == 0
    assert cfg["data.chip_hw"] == 64
    assert cfg["lfn.use_epe_term"] is True


def test_parse_overrides_and_comments():
    cfg = parse_config("# header\nrun.seed = 7   # trailing\n\n"
                       "lfn.eps = 0.5\nlfn.use_epe_term = false\n")
    assert cfg["run.seed"] == 7
    assert cfg["lfn.eps"] == 0.5
    assert cfg["lfn.use_epe_term"] is False
    assert cfg["data.height"] == 128   # untouched default


def test_round_trip():
    cfg = parse_config("run.seed = 3\ndata.max_step_px = 2.5\n")
    back = parse_config(write_config(cfg))
    assert back == cfg


def test_unknown_key_reports_line():
    with pytest.raises(ConfigParseError) as e:
        parse_config("run.seed = 1\nbogus.key = 2\n")
    assert e.value.line == 2
    assert "bogus.key" in str(e.value)


def test_duplicate_key_reports_line():
    with pytest.raises(ConfigParseError) as e:
        parse_config("run.seed = 1\n\nrun.seed = 2\n")
    assert e.value.line == 3
    assert "duplicate" in str(e.value)


def test_type_error_reports_line():
    with pytest.raises(ConfigParseError) as e:
        parse_config("data.height = tall\n")
    assert e.value.line == 1
    assert "int" in str(e.value)


def test_malformed_line_rejected():
    with pytest.raises(ConfigParseError) as e:
        parse_config("just some words\n")
    assert e.value.line == 1


def test_bad_bool_rejected():
    with pytest.raises(ConfigParseError):
        parse_config("lfn.use_epe_term = maybe\n")


def test_unknown_key_in_constructor():
    with pytest.raises(KeyError):
        RunConfig({"no.such": 1})


TINY = """
run.seed = 0
data.num_scenes = 2
data.frames_per_scene = 3
data.height = 64
data.width = 64
data.chips_per_class = 12
data.num_classes = 3
dnss.max_epochs = 1
dnss.batch_size = 2
nrmn.episodes = 2
nrmn.n_way = 2
nrmn.k_shot = 3
nrmn.queries = 2
nrmn.zero_shot_steps = 5
nrmn.tail_size = 4
lfn.steps = 2
eval.episodes = 3
bench.frames = 2
"""


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def test_cli_missing_config_exits_1(tmp_path, capsys):
    rc = cli.main(["gen-data", "--config", str(tmp_path / "absent.cfg")])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_cli_bad_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nope = 1\n")
    rc = cli.main(["bench", "--config", str(bad)])
    assert rc == 1


def test_cli_runtime_failure_exits_2(tmp_path, capsys, monkeypatch):
    monkeypatch.setitem(cli.COMMANDS, "bench",
                        lambda cfg, seed, out: (_ for _ in ()).throw(RuntimeError("boom")))
    rc = cli.main(["bench", "--out", str(tmp_path)])
    assert rc == 2
    assert "runtime error" in capsys.readouterr().err


def test_cli_gen_data(tiny_cfg, tmp_path, capsys):
    out = str(tmp_path / "run")
    rc = cli.main(["gen-data", "--config", tiny_cfg, "--out", out])
    assert rc == 0
    assert (tmp_path / "run" / "scenes" / "manifest.txt").exists()
    assert (tmp_path / "run" / "chips" / "class_1.tns").exists()


def test_cli_eval_episodes_byte_identical(tiny_cfg, tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    assert cli.main(["eval-episodes", "--config", tiny_cfg, "--out", out_a]) == 0
    assert cli.main(["eval-episodes", "--config", tiny_cfg, "--out", out_b]) == 0
    ra = (tmp_path / "a" / "eval-episodes.txt").read_bytes()
    rb = (tmp_path / "b" / "eval-episodes.txt").read_bytes()
    assert ra == rb
    assert ra.endswith(b"\n")
