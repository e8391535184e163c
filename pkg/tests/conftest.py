from pathlib import Path

import numpy as np
import pytest

from marginal_states import (Direction, Distributed, Single, assign_slack, continuation_to_ms, load_case,
                             to_per_unit)
from marginal_states.network import build_ybus
from marginal_states.powerflow import injections

CASES = Path(__file__).resolve().parent.parent / "cases"
TRANSFER_2_TO_3 = Direction({2: -1.0, 3: 1.0})


def case_path(name: str) -> Path:
    return CASES / f"{name}.json"


def pu(name: str, s_base=None):
    return to_per_unit(load_case(case_path(name)), s_base)


def random_state(net, rng, kinds=None):
    """Random (delta, v) with matching bus powers; returns (net_with_powers, delta, v)."""
    if kinds is not None:
        net = net.with_kinds(kinds)
    n = net.n
    delta = rng.uniform(-0.2, 0.2, n)
    delta[net.index(net.slack_bus)] = 0.0
    pq = net.mask("PQ")
    v = np.where(pq, rng.uniform(0.9, 1.1, n), net.v)
    p_inj, q_inj = injections(delta, v, build_ybus(net))
    return net.with_injections(p=-p_inj, q=-q_inj), delta, v


def fourbus_with_pq(net):
    """4-bus case with bus 2 turned into a PQ bus, to exercise the Q rows."""
    kinds = list(net.kinds)
    kinds[net.index(2)] = "PQ"
    return net.with_kinds(kinds)


@pytest.fixture(scope="session")
def fourbus():
    return pu("fourbus")


@pytest.fixture(scope="session")
def lossless():
    return pu("fourbus_lossless")


@pytest.fixture(scope="session")
def ninebus():
    return pu("ninebus")


def _ms(net, slack, direction=TRANSFER_2_TO_3):
    return continuation_to_ms(assign_slack(net, slack), slack, direction)


@pytest.fixture(scope="session")
def ms_slack4(fourbus):
    return _ms(fourbus, Single(4))


@pytest.fixture(scope="session")
def ms_slack1(fourbus):
    return _ms(fourbus, Single(1))


@pytest.fixture(scope="session")
def ms_lossless4(lossless):
    return _ms(lossless, Single(4))


@pytest.fixture(scope="session")
def ms_lossless1(lossless):
    return _ms(lossless, Single(1))


@pytest.fixture(scope="session")
def ms_distributed(fourbus):
    return _ms(fourbus, Distributed({2: 0.5, 4: 0.5}, 4), Direction({3: 1.0}))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number][1])
