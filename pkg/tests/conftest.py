import numpy as np
import pytest

from geodiffnet.diffusion import UNetConfig, init_frozen_unet

ACCEPTANCE_LINES = []


def central_difference(f, param, step=1e-4):
    """Central-difference gradient of scalar ``f()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param, dtype=np.float64)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = param[i]
        param[i] = orig + step
        fp = f()
        param[i] = orig - step
        fm = f()
        param[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """Per-tensor relative error ``|a - n| / max(|a|, |n|)`` in the Euclidean norm."""
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


@pytest.fixture(scope="session")
def small_unet():
    return init_frozen_unet(UNetConfig(input_size=16, channel_scale=8), seed=3)


@pytest.fixture(scope="session")
def unet64():
    return init_frozen_unet(UNetConfig(), seed=0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
