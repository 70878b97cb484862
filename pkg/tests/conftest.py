import numpy as np
import pytest

from icam.instances import generate_uniform
from icam.model import ICAM, ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_model(problem="tsp", d=8, layers=2, ff=16, seed=0, **kw):
    return ICAM(ModelConfig(problem, embed_dim=d, ff_dim=ff, encoder_layers=layers, **kw), seed=seed)


@pytest.fixture
def tsp_model():
    return tiny_model("tsp")


@pytest.fixture
def cvrp_model():
    return tiny_model("cvrp")


def scalar_loop_tsp_instance(n, seed):
    return generate_uniform("tsp", n, seed=seed)


def split_routes(inst, sequence):
    """Greedy capacity split of a customer sequence into a depot-delimited order."""
    order, load = [0], 0
    for c in sequence:
        if load + inst.demands[c] > inst.capacity:
            order.append(0)
            load = 0
        order.append(int(c))
        load += int(inst.demands[c])
    return order + [0]


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
