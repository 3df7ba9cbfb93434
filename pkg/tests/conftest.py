from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

settings.register_profile(
    "default",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")


def finite_bf16_bits(min_exp: int = 0, max_exp: int = 254):
    """Strategy for finite, non-subnormal bf16 bit patterns."""
    return st.builds(
        lambda s, e, m: (s << 15) | (e << 7) | (m if e else 0),
        st.integers(0, 1),
        st.integers(min_exp, max_exp),
        st.integers(0, 127),
    )


def bf16_arrays(min_size: int = 1, max_size: int = 300, min_exp: int = 0, max_exp: int = 254):
    return st.lists(finite_bf16_bits(min_exp, max_exp), min_size=min_size, max_size=max_size).map(
        lambda xs: np.array(xs, dtype=np.uint16)
    )


def random_bf16(rng: np.random.Generator, n: int, exp_lo: int = 1, exp_hi: int = 254) -> np.ndarray:
    s = rng.integers(0, 2, n)
    e = rng.integers(exp_lo, exp_hi + 1, n)
    m = rng.integers(0, 128, n)
    return ((s << 15) | (e << 7) | m).astype(np.uint16)


def gaussian_bf16(rng: np.random.Generator, shape, sigma: float = 0.02) -> np.ndarray:
    from cassandra_sd.bf16 import f32_to_bf16

    return f32_to_bf16(rng.normal(0.0, sigma, shape).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> bool:
    """Log one acceptance result; the lines are repeated in the terminal summary."""
    line = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
