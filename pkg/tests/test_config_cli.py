import json

import numpy as np
import pytest

from conftest import TINY_GEN
from handsplat.cli import EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, main
from handsplat.config import PRESETS, ConfigError, RunConfig, preset
from handsplat.train import bench

TINY_DATA = TINY_GEN
TINY_RUN = ["--set", "template_count=120", "--set", "num_dynamic=4", "--set", "hidden_width=16",
            "--set", "densify_from=2", "--set", "densify_every=2", "--set", "train_scale=1.0", "--set", "log_every=1"]


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["-q", "gen-data", "--out", str(root / "data"), "--seed", "2", *TINY_DATA]) == EXIT_OK
    assert main(["-q", "train", "--data", str(root / "data"), "--out", str(root / "run"),
                 "--iterations", "4", *TINY_RUN]) == EXIT_OK
    return root


# -- config ------------------------------------------------------------------------


def test_unknown_keys_rejected(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["bogus=3"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["no_equals_sign"])
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["no_t=maybe"])


def test_overrides_are_typed():
    cfg = RunConfig().with_overrides(["tau=0.05", "iterations=7", "no_t=true", "background=[1, 0, 0]"])
    assert cfg.tau == 0.05 and cfg.iterations == 7 and cfg.no_t is True and cfg.background == [1, 0, 0]


def test_config_file_round_trip(tmp_path):
    cfg = preset("no_delta", RunConfig(seed=4))
    cfg.save(tmp_path / "c.json")
    assert RunConfig.load(tmp_path / "c.json") == cfg


def test_presets_set_documented_flags():
    assert preset("no_scs").no_intra_pose and preset("no_scs").no_inter_pose
    assert preset("no_static_bones").no_static_bones and not preset("no_static_bones").no_dynamic_bones
    assert preset("full") == RunConfig()
    flags = {"no_embeddings", "no_intra_pose", "no_inter_pose", "no_static_bones", "no_dynamic_bones", "no_t",
             "no_delta"}
    for name, over in PRESETS.items():
        assert set(over) <= flags, name
    with pytest.raises(ConfigError):
        preset("nonsense")


def test_empty_basis_rejected():
    with pytest.raises(ConfigError):
        RunConfig(no_static_bones=True, no_dynamic_bones=True).with_overrides({})


# -- CLI -----------------------------------------------------------------------------


def test_run_writes_resolved_config_and_checkpoint(tiny):
    run = tiny / "run"
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["iterations"] == 4 and cfg["template_count"] == 120
    assert (run / "checkpoint.hspk").exists() and (run / "metrics.csv").exists()


def test_eval_oracle_and_checkpoint(tiny, capsys, tmp_path):
    data = str(tiny / "data")
    assert main(["-q", "eval", "--data", data, "--oracle", "--split", "novel-pose"]) == EXIT_OK
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert float(line.split("PSNR")[1].split("dB")[0]) >= 50.0
    csv = tmp_path / "r.csv"
    assert main(["-q", "eval", "--data", data, "--checkpoint", str(tiny / "run"), "--csv", str(csv)]) == EXIT_OK
    out = capsys.readouterr().out
    for split in ("train", "novel-pose", "novel-view"):
        assert split in out
    assert len(csv.read_text().splitlines()) > 3


def test_render_export_and_dumps(tiny, tmp_path, capsys):
    data, run = str(tiny / "data"), str(tiny / "run")
    png = tmp_path / "f.png"
    assert main(["-q", "render", "--data", data, "--checkpoint", run, "--frame", "1", "--out", str(png)]) == EXIT_OK
    from PIL import Image

    assert Image.open(png).size == (32, 32)
    ply = tmp_path / "c.ply"
    assert main(["-q", "export", "--checkpoint", run, "--ply", str(ply)]) == EXIT_OK
    assert ply.read_text().startswith("ply")
    npy = tmp_path / "p.npy"
    assert main(["-q", "scs", "dump", "--checkpoint", run, "--out", str(npy)]) == EXIT_OK
    P = np.load(npy)
    assert P.shape[1] == 20 + 4 and np.all(np.abs(P) <= 1)
    sk = tmp_path / "s.json"
    assert main(["-q", "skeleton", "dump", "--out", str(sk)]) == EXIT_OK
    assert main(["-q", "skeleton", "validate", str(sk)]) == EXIT_OK
    d = json.loads(sk.read_text())
    d["parents"][3] = 3
    sk.write_text(json.dumps(d))
    assert main(["-q", "skeleton", "validate", str(sk)]) == EXIT_VALIDATION


def test_validation_errors_exit_2(tiny, tmp_path):
    data = str(tiny / "data")
    assert main(["-q", "train", "--data", data, "--out", str(tmp_path / "r"), "--set", "bogus=1"]) == EXIT_VALIDATION
    assert main(["-q", "eval", "--data", str(tmp_path / "nowhere"), "--oracle"]) == EXIT_VALIDATION
    garbage = tmp_path / "g.hspk"
    garbage.write_bytes(b"junk")
    assert main(["-q", "export", "--checkpoint", str(garbage), "--ply", str(tmp_path / "x.ply")]) == EXIT_VALIDATION
    assert main(["-q", "gen-data", "--out", str(tmp_path / "d"), "--set", "resolution=2"]) == EXIT_VALIDATION


def test_numeric_failure_exit_3(tiny, tmp_path):
    code = main(["-q", "train", "--data", str(tiny / "data"), "--out", str(tmp_path / "r"), "--iterations", "3",
                 *TINY_RUN, "--set", "lr_position=1e300"])
    assert code == EXIT_NUMERIC


def test_resume_continues(tiny, tmp_path):
    data = str(tiny / "data")
    out = str(tmp_path / "r")
    assert main(["-q", "train", "--data", data, "--out", out, "--iterations", "2", *TINY_RUN]) == EXIT_OK
    assert main(["-q", "train", "--data", data, "--out", out, "--iterations", "4", "--resume", *TINY_RUN]) == EXIT_OK
    rows = (tmp_path / "r" / "metrics.csv").read_text().splitlines()
    assert rows[-1].startswith("4,")


# -- bench ---------------------------------------------------------------------------


def test_bench_reports_overhead_and_scaling():
    small = bench(None, 64, 3, 2000, 0)
    big = bench(None, 64, 3, 4000, 0)
    assert small.overhead_ms < small.ms_single
    assert small.overhead_ms > 0
    # doubling the cloud must cost well under 4x
    assert big.ms_single < 4.0 * small.ms_single
    assert "empty overhead" in small.table()
