import numpy as np
import pytest

from spca.core import SampleSet


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def gaussian_set(rng, cov, n=4000, rotate_deg=0.0):
    L = np.linalg.cholesky(np.asarray(cov, dtype=float))
    X = rng.standard_normal((n, len(cov))) @ L.T
    if rotate_deg:
        a = np.radians(rotate_deg)
        R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        X = X @ R.T
    return SampleSet(X)


def angle_deg(u, v):
    c = abs(float(np.dot(u, v))) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(min(1.0, c))))


@pytest.fixture(scope="session")
def run_shipped(tmp_path_factory):
    """Run a shipped config once per (name, tag); returns (out_dir, report)."""
    from spca.config import load_config
    from spca.runner import run

    cache = {}

    def go(name, tag="a"):
        if (name, tag) not in cache:
            out = tmp_path_factory.mktemp(f"{name}_{tag}")
            cache[name, tag] = (out, run(load_config(name), out))
        return cache[name, tag]

    return go


ACCEPTANCE: dict = {}


def record(number, ok, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    ACCEPTANCE.setdefault(number, []).append((bool(ok), detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[number]
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
