import json

import jsonschema
import numpy as np
import pytest
from PIL import Image

from coordgan.cli import run
from coordgan.eval import IOU_REPORT_SCHEMA
from coordgan.formats import read_cgcm

TINY = """
iterations = 3
warmup = 1
batch_size = 2
r1_interval = 2
encoder_iterations = 2
encoder_batch_size = 2
checkpoint_every = 0

[model]
resolution = 16
latent_dim = 8
mapping_depth = 2
warp_hidden = 16
embed_dim = 16
channels = 8
layers = 4
d_channels = 8
patch_channels = 8
enc_channels = 8

[data]
train_size = 6

[eval]
queries = 4
runs = 2
baseline_permutations = 3
swap_pairs = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.toml"
    cfg.write_text(TINY)
    cache = root / "cache"
    mp = pytest.MonkeyPatch()
    mp.setenv("COORDGAN_CACHE", str(cache))
    assert run(["train-gan", "--config", str(cfg), "--seed", "7", "--out", str(root / "gan")]) == 0
    assert run(["train-encoder", "--generator", str(root / "gan" / "final"), "--out", str(root / "enc")]) == 0
    yield root
    mp.undo()


def _hash(capsys, argv):
    capsys.readouterr()
    assert run(argv) == 0
    return json.loads(capsys.readouterr().out)["generator_hash"]


def test_train_gan_seed_is_reproducible(workspace, tmp_path, capsys):
    cfg = str(workspace / "tiny.toml")
    a = _hash(capsys, ["train-gan", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "a")])
    b = _hash(capsys, ["train-gan", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")])
    c = _hash(capsys, ["train-gan", "--config", cfg, "--seed", "8", "--out", str(tmp_path / "c")])
    assert a == b != c


def test_config_echo_written(workspace):
    echo = json.loads((workspace / "gan" / "config_echo.json").read_text())
    assert echo["command"] == "train-gan" and echo["seed"] == 7
    assert echo["config"]["model"]["resolution"] == 16 and echo["config"]["seed"] == 7


def test_set_overrides_are_echoed_last_wins(workspace, tmp_path):
    out = tmp_path / "syn"
    rc = run(["synth-data", "--config", str(workspace / "tiny.toml"), "--set", "model.resolution=64",
              "--set", "model.resolution=32", "--count", "2", "--out", str(out)])
    assert rc == 0
    echo = json.loads((out / "config_echo.json").read_text())
    assert echo["overrides"] == ["model.resolution=64", "model.resolution=32"]
    assert echo["config"]["model"]["resolution"] == 32
    assert Image.open(out / "img_00000.png").size == (32, 32)


def test_unknown_flag_is_usage_error(capsys):
    assert run(["train-gan", "--out", "x", "--bogus"]) == 1
    assert run(["no-such-command"]) == 1
    assert run([]) == 1


def test_missing_config_reports_schema_hint(tmp_path, capsys):
    assert run(["train-gan", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "o")]) == 1
    assert "docs/config.md" in capsys.readouterr().err


def test_bad_config_key_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nno_such_key = 1\n")
    assert run(["synth-data", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "docs/config.md" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, capsys):
    (tmp_path / "ck").mkdir()
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps({"version": 999}))
    assert run(["inspect-ckpt", "--ckpt", str(tmp_path / "ck")]) == 2
    assert run(["swap-grid", "--ckpt", str(tmp_path / "missing"), "--structure-seeds", "1",
                "--texture-seeds", "1", "--out", str(tmp_path / "g.png")]) == 2
    assert "error" in capsys.readouterr().err


def test_propagate_identity(workspace, tmp_path):
    data = tmp_path / "d"
    assert run(["synth-data", "--config", str(workspace / "tiny.toml"), "--count", "1", "--out", str(data)]) == 0
    img, mask = data / "img_00000.png", data / "img_00000_mask.png"
    out = tmp_path / "p"
    assert run(["propagate", "--ckpt", str(workspace / "enc" / "final"), "--ref", str(img), "--mask", str(mask),
                "--query", str(img), "--out", str(out)]) == 0
    got = np.asarray(Image.open(out / "img_00000_mask.png"))
    assert np.array_equal(got, np.asarray(Image.open(mask)))


def test_eval_iou_report_matches_schema(workspace, tmp_path):
    out = tmp_path / "iou.json"
    assert run(["eval-iou", "--ckpt", str(workspace / "enc" / "final"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    jsonschema.validate(report, IOU_REPORT_SCHEMA)
    assert report["runs"] == 2 and report["num_queries"] == 4
    assert (tmp_path / "iou.config.json").exists()


def test_eval_iou_from_manifest(workspace, tmp_path):
    data = tmp_path / "d"
    assert run(["synth-data", "--config", str(workspace / "tiny.toml"), "--count", "7", "--out", str(data)]) == 0
    out = tmp_path / "iou.json"
    assert run(["eval-iou", "--ckpt", str(workspace / "enc" / "final"), "--manifest",
                str(data / "manifest.json"), "--out", str(out)]) == 0
    jsonschema.validate(json.loads(out.read_text()), IOU_REPORT_SCHEMA)


def test_eval_swap_and_grid_and_export(workspace, tmp_path, capsys):
    ck = str(workspace / "gan" / "final")
    assert run(["eval-swap", "--ckpt", ck, "--out", str(tmp_path / "swap.json")]) == 0
    swap = json.loads((tmp_path / "swap.json").read_text())
    assert swap["pairs"] == 4 and "texture_control" in swap
    assert run(["swap-grid", "--ckpt", ck, "--structure-seeds", "1,2", "--texture-seeds", "3",
                "--out", str(tmp_path / "grid.png")]) == 0
    assert Image.open(tmp_path / "grid.png").size == (32, 32)
    assert run(["export-corr", "--ckpt", ck, "--structure-seeds", "4", "--out", str(tmp_path / "maps")]) == 0
    assert read_cgcm(tmp_path / "maps" / "s4.cgcm").shape == (16, 16, 2)
    assert run(["export-corr", "--ckpt", ck, "--out", str(tmp_path / "m2")]) == 1


def test_inspect_ckpt(workspace, capsys):
    capsys.readouterr()
    assert run(["inspect-ckpt", "--ckpt", str(workspace / "enc" / "final")]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["stage"] == "encoder" and info["parameters"] > 0


def test_resume_via_cli(workspace, tmp_path, capsys):
    cfg = str(workspace / "tiny.toml")
    full = _hash(capsys, ["train-gan", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "full")])
    short = ["train-gan", "--config", cfg, "--seed", "7", "--set", "iterations=1", "--set", "warmup=1",
             "--out", str(tmp_path / "short")]
    assert run(short) == 0
    resumed = _hash(capsys, ["train-gan", "--resume", str(tmp_path / "short" / "final"), "--set",
                             "iterations=3", "--out", str(tmp_path / "res")])
    assert resumed == full
