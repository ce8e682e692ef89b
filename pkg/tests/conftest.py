import numpy as np
import pytest

from dpsapf.denoiser import Dataset, DenoiserConfig, init_params, make_schedule

TINY = DenoiserConfig(n_blocks=2, d_model=4, d_embed=4, n_classes=3, n_steps=10)


def tiny_params(seed: int, config: DenoiserConfig = TINY):
    return init_params(config, np.random.default_rng(seed))


def tiny_data(n: int, seed: int, config: DenoiserConfig = TINY) -> Dataset:
    rng = np.random.default_rng(seed)
    x = np.clip(rng.normal(0, 0.5, size=(n, config.n_pixels)), -1, 1)
    return Dataset(x, rng.integers(0, config.n_classes, size=n))


@pytest.fixture
def tiny_schedule():
    return make_schedule(TINY.n_steps, 0.01, 0.3)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
        print(line)
        request.config.stash.setdefault(_VERDICTS, []).append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
