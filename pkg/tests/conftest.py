import numpy as np
import pytest

from fracimp.data import ObservedDataset
from fracimp.engine import FiConfig, stack_draws
from fracimp.proposal import BERNOULLI, fit_proposal
from fracimp.rng import StreamFactory
from fracimp.simulation import generate_sample

NAN = np.nan

# ten-unit binary example with two units missing X2
TOY_X1 = [1, 1, 0, 0, 0, 0, 1, 0, 1, 0]
TOY_X2 = [0, NAN, NAN, 1, 1, 1, 0, 0, 1, 1]
TOY_A = [0, 0, 0, 0, 0, 0, 1, 1, 0, 0]
TOY_Y = [0, 0, 0, 0, 1, 0, 0, 1, 0, 0]
TOY_DRAWS = {2: [0, 1, 0, 1, 1], 3: [0, 0, 0, 1, 1]}


def toy_data() -> ObservedDataset:
    return ObservedDataset(np.arange(1, 11), {"X1": TOY_X1, "X2": TOY_X2}, TOY_A, TOY_Y, "X2")


def toy_config(**kw) -> FiConfig:
    base = dict(M=5, update_alpha=True, outcome_family="binary", covariate_family="binary",
                proposal_family=BERNOULLI, outcome_formula=["X1", "X2", "A"],
                propensity_formula=["X1", "X2"], covariate_formula=["X1"], tolerance=1e-4)
    base.update(kw)
    return FiConfig(**base)


def toy_fractional():
    data = toy_data()
    proposal = fit_proposal(data, ["X1"], BERNOULLI)
    return data, proposal, stack_draws(data, proposal, TOY_DRAWS)


def sim_sample(n=300, seed=1):
    sample, tau0 = generate_sample(n, StreamFactory(seed).generator(0))
    return sample, tau0


def random_small_dataset(rng: np.random.Generator, n: int = 60) -> ObservedDataset:
    """Gaussian covariates with MAR-style missingness in X2."""
    x1 = rng.normal(size=n)
    x2 = 0.5 * x1 + rng.normal(size=n)
    a = (rng.random(n) < 1 / (1 + np.exp(-0.3 * x1 + 0.2 * x2))).astype(float)
    y = x1 - x2 + a + rng.normal(size=n)
    miss = rng.random(n) < 1 / (1 + np.exp(1.0 - 0.5 * x1))
    miss[:10] = False
    return ObservedDataset(np.arange(1, n + 1), {"X1": x1, "X2": np.where(miss, NAN, x2)}, a, y, "X2")


@pytest.fixture
def toy():
    return toy_fractional()


# lines recorded by the acceptance checks, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
