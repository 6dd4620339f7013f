import math

import numpy as np
import pytest
from hypothesis import settings

from panco.model import GAMMA_E, GAMMA_HE3, CellConfig, QModel, SpeciesParams, k_he3_idealised
from panco.protocol import generate_signatures, khe_schedule

settings.register_profile("panco", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("panco")


def bare_cell(**kw) -> CellConfig:
    """Two species, no couplings, no rates, fixed q = 4."""
    base = dict(
        alkali=SpeciesParams("K", GAMMA_E, 0.0, 0.0),
        noble=SpeciesParams("3He", GAMMA_HE3, 0.0, 0.0),
        q_model=QModel("constant", 4.0),
    )
    base.update(kw)
    return CellConfig(**base)


@pytest.fixture
def bare():
    return bare_cell()


@pytest.fixture(scope="session")
def khe_cell():
    return k_he3_idealised(106.3)


@pytest.fixture(scope="session")
def khe_sched():
    return khe_schedule()


@pytest.fixture(scope="session")
def khe_sig(khe_cell, khe_sched):
    """Signatures of the idealised K-3He cell at its 106.3 nT operating point."""
    return generate_signatures(khe_cell, khe_sched)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


TWO_PI = 2 * math.pi


# scenario runs shared by the scenario, CLI and acceptance tests

def _run(name, **overrides):
    from panco.scenarios import default_spec, run_scenario
    spec = default_spec(name)
    for key, value in overrides.items():
        section, field = key.split("__")
        spec[section][field] = value
    return spec, run_scenario(spec)


@pytest.fixture(scope="session")
def fig2_run():
    return _run("fig2")


@pytest.fixture(scope="session")
def fig7_run():
    from panco.scenarios import default_spec, run_scenario
    spec = default_spec("fig7")
    return spec, run_scenario(spec, workers=1)


@pytest.fixture(scope="session")
def square_run():
    return _run("square_wave")


@pytest.fixture(scope="session")
def step_run():
    return _run("step_decomposition")


@pytest.fixture(scope="session")
def wobble_run():
    return _run("wobble")


# acceptance verdicts, printed once at the end of the session

_VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Record ``PASS``/``FAIL`` for an acceptance criterion, then assert it."""
    def record(n: int, ok: bool, detail: str):
        _VERDICTS[n] = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(_VERDICTS[n])
        assert ok, detail
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
