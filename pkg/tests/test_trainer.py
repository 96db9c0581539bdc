import csv
import logging

import numpy as np
import pytest
import torch

from triad_stego import checkpoint, trainer
from triad_stego.errors import CheckpointError, ConfigurationError, NonFiniteError
from triad_stego.trainer import TrainSession

from conftest import tiny_config


def snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


@pytest.mark.parametrize("arch", [1, 2, 3])
def test_freeze_contract(arch, covers16):
    session = TrainSession(tiny_config(arch=arch), covers16)
    eve0, ab0 = snapshot(session.eve), snapshot(session.model)
    session.team1_step()
    assert same(eve0, snapshot(session.eve))
    assert not same(ab0, snapshot(session.model))
    ab1 = snapshot(session.model)
    session.team2_step()
    assert same(ab1, snapshot(session.model))
    assert not same(eve0, snapshot(session.eve))


def test_loop_schedule_counts(covers16, monkeypatch):
    session = TrainSession(tiny_config(it1=50, it2=1, max_iter=2), covers16)
    calls = []
    monkeypatch.setattr(session, "team1_step", lambda: calls.append(1) or (0.0, 0.0, 0.0))
    monkeypatch.setattr(session, "team2_step", lambda: calls.append(2) or 0.0)
    session.run()
    assert calls == ([1] * 50 + [2]) * 2
    assert [r["loop"] for r in session.log] == [1, 2]


def test_it2_zero_keeps_eve(covers16):
    session = TrainSession(tiny_config(it2=0, max_iter=2), covers16)
    eve0 = snapshot(session.eve)
    session.run()
    assert same(eve0, snapshot(session.eve))


def test_max_iter_zero_changes_nothing(covers16):
    session = TrainSession(tiny_config(max_iter=0), covers16)
    before = snapshot(session.model), snapshot(session.eve)
    assert session.run() == []
    assert same(before[0], snapshot(session.model)) and same(before[1], snapshot(session.eve))


def test_log_records_and_csv(covers16, tmp_path):
    session = TrainSession(tiny_config(max_iter=2), covers16)
    session.run()
    trainer.write_log_csv(session.log, tmp_path / "log.csv")
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["loop", "l_alice", "l_bob", "l_eve", "ber", "change_rate", "phase"]
    assert len(rows) == 3 and rows[1][-1] == "real"
    rec = session.log[-1]
    assert 0 <= rec["ber"] <= 1 and 0 <= rec["change_rate"] <= 1


def test_save_load_save_is_byte_identical(covers16, tmp_path):
    session = TrainSession(tiny_config(max_iter=2), covers16)
    session.run()
    session.save(tmp_path / "a.tstg")
    again = TrainSession.load(tmp_path / "a.tstg", covers16)
    again.save(tmp_path / "b.tstg")
    assert (tmp_path / "a.tstg").read_bytes() == (tmp_path / "b.tstg").read_bytes()


@pytest.mark.parametrize("arch", [1, 3])
def test_split_run_matches_continuous_run(arch, covers16, tmp_path):
    cfg = tiny_config(arch=arch, max_iter=4, discretization_start=2, fine_tune_iters=6)
    full = TrainSession(cfg, covers16)
    full.run()
    part = TrainSession(cfg, covers16)
    part.run(loops=2)
    part.save(tmp_path / "mid.tstg")
    resumed = TrainSession.load(tmp_path / "mid.tstg", covers16)
    resumed.run()
    assert len(resumed.log) == len(full.log) == 4
    for a, b in zip(full.log, resumed.log):
        for k in ("l_alice", "l_bob", "l_eve", "ber", "change_rate"):
            assert abs(a[k] - b[k]) <= 1e-6, (k, a, b)
        assert a["phase"] == b["phase"]
    assert [r["phase"] for r in full.log] == ["real", "real", "discrete", "discrete"]


def test_checkpoint_errors(covers16, tmp_path):
    session = TrainSession(tiny_config(), covers16)
    raw = bytearray(session.state_bytes())
    (tmp_path / "bad.tstg").write_bytes(b"XXXX" + bytes(raw[4:]))
    with pytest.raises(CheckpointError, match="magic"):
        TrainSession.load(tmp_path / "bad.tstg")
    raw[4] = 9
    (tmp_path / "ver.tstg").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        TrainSession.load(tmp_path / "ver.tstg")


def test_discretization_phase(covers16, caplog):
    session = TrainSession(tiny_config(max_iter=10, fine_tune_iters=6), covers16)
    assert not session.discretizing
    session.enable_discretization()
    assert session.fine_tune_left == 2
    with caplog.at_level(logging.WARNING):
        session.enable_discretization()
    assert "already" in caplog.text
    session.run()
    assert session.loop == 2 and session.finished()
    x = trainer.to_tensor(covers16[:2])
    msg = trainer.make_message_batch(np.random.default_rng(0), 2, 16, 16, 0.4)
    y = session.make_stegos(x, msg) * 255
    assert torch.equal(y, torch.round(y))


def test_fine_tune_lr_applies_to_all_agents(covers16):
    session = TrainSession(tiny_config(fine_tune_lr=1e-5), covers16)
    opts = (session.opt_alice, session.opt_bob, session.opt_eve)
    assert all(g["lr"] == 1e-3 for o in opts for g in o.param_groups)
    session.enable_discretization()
    assert all(g["lr"] == 1e-5 for o in opts for g in o.param_groups)


def test_auto_discretization_start(covers16):
    cfg = tiny_config(max_iter=50, discretization_start="auto", convergence_window=2, convergence_tol=10.0,
                      fine_tune_iters=3)
    session = TrainSession(cfg, covers16)
    session.run()
    phases = [r["phase"] for r in session.log]
    assert phases == ["real"] * 4 + ["discrete"]


def test_non_finite_loss_dumps_checkpoint(covers16, tmp_path, monkeypatch):
    session = TrainSession(tiny_config(max_iter=3), covers16)
    session.run(loops=1)
    good = session.state_bytes()
    monkeypatch.setattr(session, "team1_step", lambda: (float("nan"), 0.0, 0.0))
    with pytest.raises(NonFiniteError):
        session.run(checkpoint_path=tmp_path / "dump.tstg")
    assert (tmp_path / "dump.tstg").read_bytes() == good


def test_fresh_keys_per_batch():
    rng = np.random.default_rng(0)
    a = trainer.make_message_batch(rng, 4, 16, 16, 0.4)
    b = trainer.make_message_batch(rng, 4, 16, 16, 0.4)
    keys = [k.tobytes() for k in a.keys + b.keys]
    assert len(set(keys)) == 8
    assert int(a.omega[0].sum()) == 102


def test_session_needs_covers():
    with pytest.raises(ConfigurationError):
        TrainSession(tiny_config(), np.zeros((0, 16, 16), np.uint8))
    with pytest.raises(ConfigurationError):
        TrainSession(tiny_config(batch_size=20), np.zeros((4, 16, 16), np.uint8))


def test_pretrain_eve_zero_epochs_and_determinism(covers16, tmp_path):
    cfg = tiny_config()
    torch.manual_seed(0)
    zero = trainer.pretrain_eve(covers16, cfg, seed=4, epochs=0)
    torch.manual_seed(4)
    from triad_stego.agents import Eve
    ref = Eve(cfg.agents, (16, 16))
    assert same(snapshot(ref), snapshot(zero.eve))
    a = trainer.pretrain_eve(covers16, cfg, seed=1, epochs=2)
    b = trainer.pretrain_eve(covers16, cfg, seed=1, epochs=2)
    assert same(snapshot(a.eve), snapshot(b.eve)) and a.val_accuracy == b.val_accuracy
    trainer.save_eve(a.eve, tmp_path / "eve.tstg", cfg)
    assert checkpoint.load(tmp_path / "eve.tstg")[0] == 0
    loaded = trainer.load_eve(tmp_path / "eve.tstg")
    assert same(snapshot(a.eve), snapshot(loaded))


def test_fit_steganalyzer_aborts_when_stuck(covers16):
    cfg = tiny_config()
    with pytest.raises(trainer.TrainingAborted):
        trainer.fit_steganalyzer(covers16[:8], covers16[:8], covers16[8:], covers16[8:], cfg, epochs=10,
                                 patience=1, seed=0)
