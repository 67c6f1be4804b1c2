from __future__ import annotations

import pytest
import torch

from tilt.model import TiltConfig

ACCEPTANCE_LINES: list[str] = []


def tiny_config(**overrides) -> TiltConfig:
    """Small enough for float64 finite differences and sub-second forwards."""
    base = dict(
        d_model=32,
        num_heads=2,
        d_ff=64,
        enc_layers=1,
        dec_layers=1,
        max_src_len=64,
        max_tgt_len=12,
        image_width=64,
        image_height=48,
        unet_channels=(4, 8, 16),
    )
    base.update(overrides)
    return TiltConfig(**base)


@pytest.fixture
def tiny_cfg() -> TiltConfig:
    return tiny_config()


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
