import pytest

from hypwalk import (
    FreeGroupModel,
    PlaneModel,
    StepMeasure,
    solve_cocycle,
    uniform_measure,
)


@pytest.fixture(scope="session")
def fg():
    return FreeGroupModel(2, boundary_depth=8)


@pytest.fixture(scope="session")
def plane():
    return PlaneModel(delta=1.0)


@pytest.fixture(scope="session")
def uniform(fg):
    return uniform_measure(fg, ["a", "a^-1", "b", "b^-1"])


@pytest.fixture(scope="session")
def biased(fg):
    return StepMeasure((
        (fg.element("a"), 0.4),
        (fg.element("a^-1"), 0.2),
        (fg.element("b"), 0.2),
        (fg.element("b^-1"), 0.2),
    ))


@pytest.fixture(scope="session")
def cocycle_uniform(uniform, fg):
    return solve_cocycle(uniform, fg, depth=8)


@pytest.fixture(scope="session")
def cocycle_biased(biased, fg):
    return solve_cocycle(biased, fg, depth=8)
