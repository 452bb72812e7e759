import numpy as np
import pytest

from normunify.config import Variant, tiny_config
from normunify.model import init_params


def assert_close(a, b, tol):
    diff = float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))
    assert diff <= tol, f"max abs diff {diff:.3e} > {tol:.1e}"


@pytest.fixture
def tiny_cfg():
    return tiny_config("float64", Variant.PRE_LN)


@pytest.fixture
def tiny_ln(tiny_cfg):
    # scale 0.5 gives non-trivial activations; 0.02 leaves the branches tiny
    return init_params(tiny_cfg, seed=11, scale=0.5), tiny_cfg


@pytest.fixture
def tiny_post():
    cfg = tiny_config("float64", Variant.POST_LN)
    return init_params(cfg, seed=12, scale=0.5), cfg


# one line per acceptance criterion, repeated in the terminal summary so it
# survives output capture
ACCEPTANCE: list[str] = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number:>2}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
