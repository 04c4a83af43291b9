"""Shared fixtures: small layouts, sampled corpora and a trained preset model."""

import numpy as np
import pytest

from wssibp.data import FactorLayout, Hyperparams
from wssibp.engine import fit
from wssibp.sampler import SamplerParams, sample_dataset, sample_well_separated

# Standard synthetic preset used across the suite.
PRESET_LAYOUT = FactorLayout(k_o=4, k_a=6, k_max=20, d=16)
PRESET_PARAMS = SamplerParams(m=200, n=10, k_bg=3, label_rate=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_layout():
    return FactorLayout(k_o=2, k_a=3, k_max=8, d=5)


@pytest.fixture(scope="session")
def small_corpus(small_layout):
    params = SamplerParams(m=12, n=6, k_bg=2, label_rate=0.6)
    return sample_dataset(small_layout, params, seed=3)


@pytest.fixture(scope="session")
def separated_corpus():
    return sample_well_separated(PRESET_LAYOUT, PRESET_PARAMS, seed=7)


@pytest.fixture(scope="session")
def separated_state(separated_corpus):
    bags, _ = separated_corpus
    return fit(bags, PRESET_LAYOUT, Hyperparams(max_sweeps=100))


@pytest.fixture(scope="session")
def separated_model(separated_state):
    return separated_state.to_model()


# One summary line per acceptance criterion, printed after the run.
ACCEPTANCE_LINES: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
