import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from riskjump.criterion import Criterion
from riskjump.model import JumpAtom, JumpMeasure, MarketModel, validate_model

ROOT = Path(__file__).resolve().parents[1]


def make_f1(**changes) -> MarketModel:
    raw = MarketModel(
        b=[0.1], B=[[-0.5]], Lambda=[[0.2, 0.05]], a0=0.02, A0=[0.0], a=[0.05], A=[[0.4]],
        Sigma=[[0.25, 0.0]],
        jumps=JumpMeasure((JumpAtom([-0.15], 1.0, True), JumpAtom([0.10], 1.5, True))),
    )
    return raw.with_(**changes) if changes else raw


def make_two_factor() -> MarketModel:
    return MarketModel(
        b=[0.1, 0.0], B=[[-0.5, 0.1], [0.0, -0.8]],
        Lambda=[[0.2, 0.05, 0.0], [0.03, 0.15, 0.02]],
        a0=0.02, A0=[0.0, 0.0], a=[0.05], A=[[0.4, -0.2]], Sigma=[[0.25, 0.0, 0.0]],
        jumps=JumpMeasure((JumpAtom([-0.15], 1.0, True), JumpAtom([0.10], 1.5, True))),
    )


@pytest.fixture(scope="session")
def f1():
    return validate_model(make_f1())


@pytest.fixture(scope="session")
def f1b():
    return validate_model(make_f1(A0=[0.1]))


@pytest.fixture(scope="session")
def f1_nojump():
    return validate_model(make_f1().without_jumps())


@pytest.fixture(scope="session")
def f1_xind():
    """F1 with A = A0 = 0, so the cost does not depend on the factor."""
    return validate_model(make_f1(A=[[0.0]]))


@pytest.fixture(scope="session")
def two_factor():
    return validate_model(make_two_factor())


@pytest.fixture(scope="session")
def crit():
    return Criterion(1.0, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
