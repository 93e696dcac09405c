import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fedpatch.model import ModelConfig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def tiny_config(**kw) -> ModelConfig:
    base = dict(lookback=16, horizon=4, n_channels=1, patch_len=8, patch_stride=4, d_model=8, n_heads=2,
                n_layers=1, d_ff=8, dtype="float64")
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in mod.LINES:
            terminalreporter.write_line(line)
