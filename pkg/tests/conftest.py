import hypothesis
import numpy as np
import pytest

from oufactor.ou import OUParams

# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


hypothesis.settings.register_profile("ci", max_examples=30, deadline=None)
hypothesis.settings.load_profile("ci")

SETTING1 = OUParams.from_diag([[1.0, 0.6], [4.0, 5.0]], [1.0, 2.0])
SETTING2 = OUParams.from_diag([[1.0, 0.4], [1.8, 3.0]], [1.25, 2.0])


def random_ou(rng, p):
    """Random valid drift: positive diagonal, eigenvalues in the right half plane."""
    while True:
        theta = rng.normal(scale=0.6, size=(p, p))
        theta[np.diag_indices(p)] = rng.uniform(0.3, 3.0, size=p)
        if np.all(np.linalg.eigvals(theta).real > 0.1):
            return OUParams.from_diag(theta, rng.uniform(0.5, 2.0, size=p))


def random_grid(rng, n):
    return np.concatenate([[rng.uniform(0, 1)], rng.uniform(0.1, 2.0, size=n - 1)]).cumsum()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def setting2_data():
    from oufactor.simulation import TRUTHS, SimDesign, generate_dataset

    truth = TRUTHS["setting2"]
    return truth, generate_dataset(SimDesign(truth.params, N=200, seed=2024))


@pytest.fixture(scope="session")
def setting2_fit(setting2_data):
    from oufactor.estimation import FitConfig, fit

    truth, data = setting2_data
    return fit(data, truth.spec, FitConfig(seed=5, bootstrap_draws=500))
