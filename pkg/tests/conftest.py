import numpy as np
import pytest

from cutflow.env import EnvSpec, build_environment, intensity_for_cell_mean


def poisson_spec(d1=5, d2=1, kappa=0.1, R=0.5, cell_mean=2.0, variant="symmetric", seed=11):
    spec = EnvSpec(d1=d1, d2=d2, kappa=kappa, range_R=R, intensity=0.0, variant=variant, master_seed=seed)
    return spec.replace(intensity=intensity_for_cell_mean(spec, cell_mean))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def sym_env():
    return build_environment(poisson_spec())


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line[1])
