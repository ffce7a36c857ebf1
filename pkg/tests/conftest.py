import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ct2rep.config import ModelConfig  # noqa: E402


def tiny_model_config(**overrides) -> ModelConfig:
    """Grid 2x2x2, D=8, S=2: small enough for exhaustive finite differences."""
    base = dict(volume_shape=(4, 4, 4), patch=(2, 2, 2), dim=8, vision_depth=1, vision_heads=2,
                encoder_depth=1, encoder_heads=2, decoder_depth=1, decoder_heads=2, memory_slots=2,
                memory_heads=2, mlp_ratio=2, max_tokens=20)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def tiny_volume():
    return np.random.default_rng(5).uniform(-1, 1, size=(4, 4, 4))


ACCEPTANCE = {}  # criterion number -> (passed, description, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, desc, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {desc}{': ' + detail if detail else ''}")
