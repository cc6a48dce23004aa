import numpy as np
import pytest

from hid.dataset import generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_synthetic(n_items=120, n_sessions=600, n_latent_intents=4, zipf_exponent=1.2,
                              noise_rate=0.2, mean_len=5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda r: int(r.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
