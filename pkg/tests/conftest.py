import numpy as np
import pytest

from selfcorrect.env import Problem, answer_space


def make_problem(A=5, gt=0, level=1, pid="q0"):
    space = answer_space(A)
    return Problem(pid, f"toy problem {pid}", space, space[gt], level)


@pytest.fixture
def problem():
    return make_problem()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
