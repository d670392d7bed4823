import logging

import pytest
import torch

from ccreid.config import StageConfig, TrainingConfig
from ccreid.toybench import ToySpec, generate

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def toy_manifest(tmp_path_factory):
    """The default synthetic benchmark: 8 identities, 2 outfits, 160 images."""
    return generate(ToySpec(), tmp_path_factory.mktemp("toy"))


def small_config(**overrides) -> TrainingConfig:
    """A few seconds of toy training."""
    base = dict(stage1=StageConfig(2, 3.5e-3), stage2=StageConfig(2, 3e-4), P=4, K_p=4, batch_size=16,
                image_height=64, image_width=32, feature_dim=16, token_dim=16, encoder_width=8)
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture
def cfg():
    return small_config()


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.INFO)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts at the end of the run (output is captured otherwise)."""
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
