import numpy as np
import pytest
from hypothesis import settings

from csmorse.scenario import load_scenario
from csmorse.search import find_critical_points

settings.register_profile("csmorse", deadline=None, max_examples=60, derandomize=True)
settings.load_profile("csmorse")

FIXTURES = ("s4_max3", "s4_min3", "s3_linear", "s3_quadratic", "s2_bridge")

R2, R3 = 1 / np.sqrt(2), 1 / np.sqrt(3)


@pytest.fixture(scope="session")
def scenarios():
    return {name: load_scenario(name) for name in FIXTURES}


@pytest.fixture(scope="session")
def problems(scenarios):
    return {name: sc.build() for name, sc in scenarios.items()}


@pytest.fixture(scope="session")
def searches(scenarios, problems):
    out = {}
    for name, sc in scenarios.items():
        f, M = problems[name]
        out[name] = find_critical_points(f, M, sc.search)
    return out


def match_points(found, expected, tol):
    """True when the two point sets agree up to order within ``tol``."""
    found = [np.asarray(p, float) for p in found]
    expected = [np.asarray(p, float) for p in expected]
    if len(found) != len(expected):
        return False
    used = set()
    for e in expected:
        hit = [i for i, p in enumerate(found) if i not in used and np.linalg.norm(p - e) <= tol]
        if not hit:
            return False
        used.add(hit[0])
    return True


ACCEPTANCE = pytest.StashKey[dict]()


def record_criterion(config, number, ok, detail):
    """Remember one acceptance verdict for the terminal summary."""
    config.stash.setdefault(ACCEPTANCE, {})[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
