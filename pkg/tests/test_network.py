import json

import numpy as np
import pytest

from conftest import case_path, pu
from marginal_states import CaseError, load_case, parse_case, to_per_unit
from marginal_states.network import (BranchSpec, BusSpec, NetworkCase, build_ybus, case_to_dict, from_per_unit)


def raw(name="fourbus"):
    return json.loads(case_path(name).read_text())


def test_fourbus_fixture_shape():
    case = load_case(case_path("fourbus"))
    assert case.bus_ids == [1, 2, 3, 4]
    assert len(case.branches) == 3
    assert all(b.v == 110 for b in case.buses)
    assert case.slack_bus == 4


def test_empty_bus_list_rejected():
    d = raw()
    d["buses"] = []
    with pytest.raises(CaseError, match="no buses"):
        parse_case(json.dumps(d))


def test_dangling_branch_rejected():
    d = raw()
    d["branches"].append({"from": 2, "to": 5, "r_ohm": 1.0, "x_ohm": 2.0})
    with pytest.raises(CaseError, match="endpoint 5"):
        parse_case(json.dumps(d))


@pytest.mark.parametrize("mutate, msg", [
    (lambda d: d["buses"].append(dict(d["buses"][0])), "duplicate"),
    (lambda d: d["buses"][0].update(kind="XX"), "kind"),
    (lambda d: d["buses"][0].update(colour="red"), "unknown key"),
    (lambda d: d["buses"][3].update(kind="PV"), "exactly one VD"),
    (lambda d: d["buses"][0].pop("v_kv"), "voltage magnitude"),
    (lambda d: d["branches"][0].update(r_ohm=0.0, x_ohm=0.0), "zero impedance"),
    (lambda d: d["branches"][0].update(to=1), "coincide"),
    (lambda d: d["branches"].pop(1), "not connected"),
    (lambda d: d.update(s_base_mva=-1), "positive"),
    (lambda d: d["buses"][0].update(p_mw="20"), "number"),
])
def test_invalid_cases(mutate, msg):
    d = raw()
    mutate(d)
    with pytest.raises(CaseError, match=msg):
        parse_case(json.dumps(d))


def test_bad_json_is_case_error():
    with pytest.raises(CaseError):
        parse_case("{not json")


def test_per_unit_impedance():
    # Z_base = 110^2 / 100 = 121 ohm
    net = pu("fourbus")
    z23 = net.branch_z[1]
    assert z23 == pytest.approx(20 / 121 + 40j / 121, rel=1e-12)
    assert z23.real == pytest.approx(0.16529, abs=5e-6)
    assert z23.imag == pytest.approx(0.33058, abs=5e-6)
    assert net.z_base == pytest.approx(121.0)


def test_per_unit_power():
    net = pu("fourbus")
    assert net.p[net.index(2)] == -0.5


def test_per_unit_round_trip():
    for name in ("fourbus", "ninebus"):
        case = load_case(case_path(name))
        back = from_per_unit(to_per_unit(case))
        assert back.bus_ids == case.bus_ids
        for a, b in zip(back.buses, case.buses):
            assert a.kind == b.kind
            assert a.p == pytest.approx(b.p, abs=1e-12)
            assert a.q == pytest.approx(b.q, abs=1e-12)
            if b.v is not None:
                assert a.v == pytest.approx(b.v)
            assert abs(a.shunt - b.shunt) < 1e-15
        for a, b in zip(back.branches, case.branches):
            assert (a.r, a.x, a.b) == pytest.approx((b.r, b.x, b.b), abs=1e-12)


def test_case_dict_round_trip():
    case = load_case(case_path("ninebus"))
    again = parse_case(json.dumps(case_to_dict(case)))
    assert again == case


def test_single_reactive_branch_admittance():
    case = NetworkCase((BusSpec(1, "VD", v=110.0), BusSpec(2, "PQ")), (BranchSpec(1, 2, 0.0, 10.0),))
    y = build_ybus(to_per_unit(case)).y
    # -1 / (j * 10/121) = +j 12.1
    assert y[0, 1] == pytest.approx(12.1j, rel=1e-12)
    assert y[0, 0] == pytest.approx(-12.1j, rel=1e-12)


def test_ybus_rows_sum_to_zero_without_shunts(fourbus):
    y = build_ybus(fourbus).y
    assert np.allclose(y.sum(axis=1), 0, atol=1e-12)


def test_ybus_chain_topology(fourbus):
    y = build_ybus(fourbus).y
    assert np.allclose(y, y.T)
    for i, j in [(0, 2), (0, 3), (1, 3)]:
        assert y[i, j] == 0 and y[j, i] == 0


def test_loss_angle_reactive_entries(lossless):
    ang = build_ybus(lossless).loss_angle
    nz = build_ybus(lossless).magnitude > 0
    wrapped = np.mod(ang[nz], 2 * np.pi)
    assert np.all(np.isclose(wrapped, 0, atol=1e-12) | np.isclose(wrapped, np.pi, atol=1e-12)
                  | np.isclose(wrapped, 2 * np.pi, atol=1e-12))


def test_ninebus_line_charging_and_shunt(ninebus):
    y = build_ybus(ninebus).y
    # row sums equal the shunt elements (half line charging at each end plus bus shunts)
    expected = ninebus.shunt.copy()
    for f, t, b in zip(ninebus.branch_from, ninebus.branch_to, ninebus.branch_b):
        expected[f] += 0.5j * b
        expected[t] += 0.5j * b
    assert np.allclose(y.sum(axis=1), expected, atol=1e-12)


def test_sbase_override():
    a = pu("fourbus")
    b = pu("fourbus", 1000.0)
    assert b.p[0] == pytest.approx(a.p[0] / 10)
    assert b.branch_z[0] == pytest.approx(a.branch_z[0] * 10)
