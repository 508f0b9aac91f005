import numpy as np
import pytest

from mcdode.net import build_network, builtin_scenario
from mcdode.obs import BaselineProtocol, synthesize_truth
from mcdode.estimate import Scenario


@pytest.fixture(scope="session")
def seven():
    return build_network(builtin_scenario("seven_link"))


@pytest.fixture(scope="session")
def two():
    return build_network(builtin_scenario("two_link"))


@pytest.fixture(scope="session")
def baseline_truth(seven):
    net, grid = seven
    return synthesize_truth(net, grid, BaselineProtocol(), rng_seed=1)


@pytest.fixture(scope="session")
def baseline_scenario(seven, baseline_truth):
    net, grid = seven
    return Scenario(net, grid, baseline_truth.obs, portions=baseline_truth.portions)


def road(lid, a, b, **kw):
    d = {"id": lid, "from": a, "to": b, "length": 0.55, "speed": [35, 25],
         "capacity": [2200, 1200], "holding": [200, 80]}
    d.update(kw)
    return d
