import dataclasses
import sys

import pytest

from triad_stego.agents import AgentConfig
from triad_stego.config import TrainConfig
from triad_stego.imaging import synth_textures

TINY_AGENTS = AgentConfig(alice_widths=[4, 4], bob_stack1_widths=[4], bob_stack2_widths=[4], unet_depth=2,
                          unet_base=2, eve_channels=[30, 4, 4, 4, 4], eve_fc=[4])


def tiny_config(**overrides) -> TrainConfig:
    base = TrainConfig(arch=2, it1=3, it2=1, max_iter=4, batch_size=2, image_size=16, val_images=2,
                       discretization_start="never", agents=TINY_AGENTS, lr_alice=1e-3, lr_bob=1e-3, lr_eve=1e-3,
                       eve_pretrain_epochs=2, eve_patience=2)
    return dataclasses.replace(base, **overrides)


@pytest.fixture(scope="session")
def covers16():
    return synth_textures(12, 16, 16, seed=5)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    verdicts = getattr(acceptance, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts):
            terminalreporter.write_line(verdicts[n])
