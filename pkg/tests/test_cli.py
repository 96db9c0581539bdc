import json

import numpy as np
import pytest

from triad_stego import cli, codec
from triad_stego.imaging import DatasetSplit, read_pgm

TINY = """
[train]
arch = 1
it1 = 2
max_iter = 2
batch_size = 2
val_images = 2
discretization_start = never
[agents]
alice_widths = 4,4
bob_stack1_widths = 4
bob_stack2_widths = 4
unet_depth = 2
unet_base = 2
eve_channels = 30,4,4,4,4
eve_fc = 4
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.dispatch(["gen-data", "--out-dir", str(root / "data"), "--count", "30", "--size", "16", "--seed", "2"]) == 0
    (root / "tiny.txt").write_text(TINY)
    ids = [f"img_{i:05d}" for i in range(30)]
    DatasetSplit(ids[:12], ids[12:15], ids[15:]).write(root / "split.txt")
    assert cli.dispatch(["train", "--config", str(root / "tiny.txt"), "--cover-dir", str(root / "data"),
                         "--split", str(root / "split.txt"), "--out-dir", str(root / "run"), "--seed", "1"]) == 0
    return root


def test_gen_data_outputs(workspace):
    data = workspace / "data"
    assert len(list(data.glob("*.pgm"))) == 30
    assert (data / "split.txt").is_file() and (data / "key.bin").is_file()
    manifest = json.loads((data / "run_manifest.json").read_text())
    assert manifest["command"] == "gen-data" and manifest["seeds"]["seed"] == 2 and manifest["timestamp"]


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("checkpoint.tstg", "train_log.csv", "config.txt", "run_manifest.json"):
        assert (run / name).is_file()
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["config_path"].endswith("tiny.txt") and manifest["extra"]["loops"] == 2
    assert manifest["seeds"]["seed_init"] == 4


def test_embed_extract_roundtrip_files(workspace):
    d, r = workspace / "data", workspace / "run"
    stego = workspace / "s.pgm"
    argv = ["embed", "--checkpoint", str(r / "checkpoint.tstg"), "--cover", str(d / "img_00000.pgm"),
            "--message", str(d / "message.bin"), "--key", str(d / "key.bin"), "--out", str(stego), "--ecc", "h7"]
    assert cli.dispatch(argv) == 0
    y = read_pgm(stego)
    assert y.shape == (16, 16) and y.dtype == np.uint8
    assert np.abs(y.astype(int) - read_pgm(d / "img_00000.pgm")).max() < 256
    n_bits = codec.read_message(d / "message.bin").size
    assert cli.dispatch(["extract", "--checkpoint", str(r / "checkpoint.tstg"), "--stego", str(stego), "--key",
                         str(d / "key.bin"), "--length", str(n_bits), "--out", str(workspace / "m.bin"),
                         "--ecc", "h7"]) == 0
    assert codec.read_message(workspace / "m.bin").size == n_bits
    assert (workspace / "run_manifest.json").is_file()


def test_exit_codes(workspace, capsys):
    assert cli.dispatch(["train", "--config", str(workspace / "missing.toml"), "--cover-dir", str(workspace / "data"),
                         "--out-dir", str(workspace / "x")]) == 1
    assert "not found" in capsys.readouterr().err
    assert cli.dispatch(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.dispatch(["frobnicate"]) == 1
    assert cli.dispatch([]) == 1
    assert cli.dispatch(["embed", "--checkpoint", str(workspace / "nope.tstg"), "--cover", "a.pgm", "--message",
                         "m.bin", "--key", "k.bin", "--out", str(workspace / "o.pgm")]) == 2
    assert cli.dispatch(["--help"]) == 0


def test_eval_keytest_maps_and_dump(workspace, capsys):
    d, r = workspace / "data", str(workspace / "run" / "checkpoint.tstg")
    assert cli.dispatch(["eval", "--checkpoint", r, "--cover-dir", str(d), "--out-dir", str(workspace / "ev")]) == 0
    assert (workspace / "ev" / "extraction.csv").is_file()
    assert cli.dispatch(["key-test", "--checkpoint", r, "--cover", str(d / "img_00001.pgm"), "--message",
                         str(d / "message.bin"), "--key", str(d / "key.bin"), "--key2", str(d / "key.bin"),
                         "--out-dir", str(workspace / "kt")]) == 0
    assert read_pgm(workspace / "kt" / "key_diff.pgm").shape == (16, 16)
    assert cli.dispatch(["export-maps", "--checkpoint", r, "--cover-dir", str(d), "--limit", "2",
                         "--out-dir", str(workspace / "maps")]) == 0
    assert len(list((workspace / "maps").glob("*_map.pgm"))) == 2
    capsys.readouterr()
    assert cli.dispatch(["dump-srm"]) == 0
    assert capsys.readouterr().out.count("kernel") == 30


def test_steganalyze_and_payload_sweep(workspace):
    d, r = workspace / "data", str(workspace / "run" / "checkpoint.tstg")
    split = str(workspace / "split.txt")
    assert cli.dispatch(["steganalyze", "--checkpoint", r, "--cover-dir", str(d), "--split", split,
                         "--epochs", "1", "--out-dir", str(workspace / "sa")]) == 0
    assert "pe" in (workspace / "sa" / "steganalysis.csv").read_text()
    assert cli.dispatch(["sweep-payload", "--checkpoint", r, "--cover-dir", str(d), "--payloads", "0.14,0.4",
                         "--no-steganalysis", "--out-dir", str(workspace / "sp")]) == 0
    assert len((workspace / "sp" / "payload_sweep.csv").read_text().splitlines()) == 3


def test_steganalyze_refuses_training_covers(workspace, capsys):
    # the default split's test section overlaps the images the checkpoint was trained on
    assert cli.dispatch(["steganalyze", "--checkpoint", str(workspace / "run" / "checkpoint.tstg"), "--cover-dir",
                         str(workspace / "data"), "--section", "test", "--out-dir", str(workspace / "sa2")]) == 1
    assert "used to train" in capsys.readouterr().err


def test_sweep_beta_rejects_arch1(workspace):
    assert cli.dispatch(["sweep-beta", "--config", str(workspace / "tiny.txt"), "--cover-dir",
                         str(workspace / "data"), "--out-dir", str(workspace / "sb")]) == 1


def test_pretrain_eve_command(workspace):
    assert cli.dispatch(["pretrain-eve", "--config", str(workspace / "tiny.txt"), "--cover-dir",
                         str(workspace / "data"), "--epochs", "1", "--out-dir", str(workspace / "eve")]) == 0
    assert (workspace / "eve" / "eve.tstg").is_file()
