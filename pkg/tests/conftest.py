from pathlib import Path

import numpy as np
import pytest

from maa_planner.maa_bench import FIXTURES_ENV
from maa_planner.maa_model import DecPomdp
from maa_planner.maa_parser import load_dpomdp

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


@pytest.fixture(scope="session")
def dectiger() -> DecPomdp:
    return load_dpomdp(FIXTURES / "dectiger.dpomdp")


@pytest.fixture(scope="session")
def identity_pair() -> DecPomdp:
    return load_dpomdp(FIXTURES / "identity_pair.dpomdp")


@pytest.fixture
def fixtures_env(monkeypatch):
    monkeypatch.setenv(FIXTURES_ENV, str(FIXTURES))
    return FIXTURES


def benchmark_path(name: str) -> Path:
    "Path of a benchmark file; skips the test when it is not vendored."
    path = FIXTURES / f"{name}.dpomdp"
    if not path.is_file():
        pytest.skip(f"{path.name} is not in {FIXTURES}")
    return path


def random_model(seed: int, n_states: int = 2, n_actions: int = 2, n_obs: int = 2) -> DecPomdp:
    "Two-agent model with Dirichlet-sampled tables."
    rng = np.random.default_rng(seed)
    ja = n_actions * n_actions
    jo = n_obs * n_obs
    return DecPomdp(
        states=tuple(f"s{i}" for i in range(n_states)),
        actions=(tuple(f"a{i}" for i in range(n_actions)),) * 2,
        observations=(tuple(f"o{i}" for i in range(n_obs)),) * 2,
        transition=rng.dirichlet(np.ones(n_states), size=(n_states, ja)),
        observation=rng.dirichlet(np.ones(jo), size=(ja, n_states)),
        reward=rng.uniform(-5.0, 5.0, size=(n_states, ja)),
        initial_belief=rng.dirichlet(np.ones(n_states)),
        name=f"random-{seed}",
    )
