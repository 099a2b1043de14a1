import numpy as np
import pytest

from qbipw import NonProbSample, ProbSample
from qbipw.simulation import ScenarioConfig, default_threads, generate_population, run_scenario, select_nonprob, select_prob

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("abcdefgh")), str(k))):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}")


def make_pair(seed=0, N=10_000, n_B=500, model="PM1", outcome="OM1"):
    """Seeded sample pair from the simulation population."""
    pop = generate_population(N, seed)
    rng = np.random.default_rng(seed + 1000)
    a, _ = select_nonprob(pop, model, rng, outcome)
    b, _ = select_prob(pop, n_B, rng)
    return a, b, pop


@pytest.fixture(scope="session")
def scenario_I_pair():
    return make_pair(seed=11)


def small_random_pair(rng, n_A=50, n_B=100, p=2, N=1000.0):
    XB = rng.normal(size=(n_B, p))
    XA = rng.normal(loc=0.3, size=(n_A, p))
    yA = XA @ rng.normal(size=p) + rng.normal(size=n_A)
    a = NonProbSample(XA, yA)
    b = ProbSample(XB, np.full(n_B, N / n_B))
    return a, b


_DESK = {}


@pytest.fixture(scope="session")
def desk_results():
    """Desk-scale continuous runs, computed once per session and shared."""

    def get(scenario):
        if scenario not in _DESK:
            cfg = ScenarioConfig.at_scale("desk", scenario=scenario, master_seed=1, threads=default_threads())
            _DESK[scenario] = run_scenario(cfg)
        return _DESK[scenario]

    return get
