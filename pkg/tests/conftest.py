import numpy as np
import pytest

from agnocomm.env import EnvConfig
from agnocomm.nn import DenseParams, Mlp
from agnocomm.pisa import SetAutoencoder, init_autoencoder


def random_sets(rng, count, d_obs, n_min=0, n_max=5):
    return [rng.uniform(-1, 1, size=(int(rng.integers(n_min, n_max + 1)), d_obs)) for _ in range(count)]


def linear(w, b=None):
    w = np.asarray(w, dtype=float)
    return Mlp((DenseParams(w, np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=float)),),
               ("identity",))


@pytest.fixture
def tiny_ae():
    return init_autoencoder(np.random.default_rng(0), d_obs=3, d_z=6, n_max=4, hidden=8, d_key=4)


@pytest.fixture
def small_env():
    return EnvConfig(n_agents=3, episode_length=20)


def identity_autoencoder(d: int, n_max: int, d_key: int = 4) -> SetAutoencoder:
    """Hand-set single-layer networks used by formula oracles."""
    rng = np.random.default_rng(42)
    return SetAutoencoder(
        psi_key=linear(rng.normal(size=(d, d_key))),
        psi_val=linear(np.eye(d)),
        card_embed=rng.normal(size=(n_max + 1, d)),
        card_dec=linear(rng.normal(size=(n_max + 1, d))),
        phi_key=linear(rng.normal(size=(d, d_key))),
        phi_dec=linear(np.eye(d)),
    )


# acceptance criteria report one line each; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
