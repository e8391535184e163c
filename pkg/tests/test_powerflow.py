import numpy as np
import pytest

from conftest import fourbus_with_pq, pu, random_state
from marginal_states import (CaseError, Distributed, Single, SolverError, assign_slack, full_jacobian, jacobians,
                             make_partition, mismatch, newton_solve)
from marginal_states.errors import MaxIterationsError
from marginal_states.network import build_ybus
from marginal_states.powerflow import block_matrix

RNG_SEED = 20240611


def complex_mismatch(delta, v, p, q, y):
    # Independent oracle: complex power injection S = U * conj(Y U).
    u = v * np.exp(1j * delta)
    s = u * np.conj(y @ u)
    return np.concatenate([p + s.real, q + s.imag])


def fd_jacobian(delta, v, p, q, y, h=1e-6):
    n = len(delta)
    x = np.concatenate([delta, v])
    out = np.empty((2 * n, 2 * n))
    for i in range(2 * n):
        e = np.zeros(2 * n)
        e[i] = h
        fp = complex_mismatch(*np.split(x + e, 2), p, q, y)
        fm = complex_mismatch(*np.split(x - e, 2), p, q, y)
        out[:, i] = (fp - fm) / (2 * h)
    return out


def networks():
    four = pu("fourbus")
    return [four, fourbus_with_pq(four), pu("ninebus")]


# ---- mismatch ---------------------------------------------------------------

def test_flat_start_zero_injection_residuals_exact(fourbus):
    n = fourbus.n
    f = mismatch(np.zeros(n), np.ones(n), np.zeros(n), np.zeros(n), build_ybus(fourbus))
    assert np.all(f == 0.0)


def test_mismatch_matches_complex_power(ninebus):
    rng = np.random.default_rng(RNG_SEED)
    net, delta, v = random_state(ninebus, rng)
    y = build_ybus(net)
    p = rng.normal(size=net.n)
    q = rng.normal(size=net.n)
    assert np.allclose(mismatch(delta, v, p, q, y), complex_mismatch(delta, v, p, q, y.y), atol=1e-12)


def test_power_enters_additively(fourbus):
    st = newton_solve(fourbus)
    y = build_ybus(fourbus)
    f0 = mismatch(st.delta, st.v, st.p, st.q, y)
    p = st.p.copy()
    p[1] += 1e-3
    f1 = mismatch(st.delta, st.v, p, st.q, y)
    assert f1[1] - f0[1] == pytest.approx(1e-3, abs=1e-15)
    assert np.all(np.delete(f1 - f0, 1) == 0)


def test_mismatch_dimension_check(fourbus):
    with pytest.raises(ValueError):
        mismatch(np.zeros(3), np.ones(4), np.zeros(4), np.zeros(4), build_ybus(fourbus))


# ---- Jacobians --------------------------------------------------------------

@pytest.mark.parametrize("which", range(3))
def test_jacobian_matches_finite_differences(which):
    rng = np.random.default_rng(RNG_SEED + which)
    base = networks()[which]
    for _ in range(5):
        net, delta, v = random_state(base, rng)
        y = build_ybus(net)
        jf = full_jacobian(delta, v, y)
        fd = fd_jacobian(delta, v, net.p, net.q, y.y)
        assert np.all(np.abs(jf - fd) <= 1e-6 * np.maximum(np.abs(fd), 1.0))


def test_angle_shift_null_vector(ninebus):
    rng = np.random.default_rng(RNG_SEED)
    n = ninebus.n
    for _ in range(10):
        net, delta, v = random_state(ninebus, rng)
        jf = full_jacobian(delta, v, build_ybus(net))
        r = jf @ np.concatenate([np.ones(n), np.zeros(n)])
        assert np.linalg.norm(r) <= 1e-12 * np.linalg.norm(jf)


def test_flat_start_voltage_null_vector(fourbus):
    n = fourbus.n
    jf = full_jacobian(np.zeros(n), np.ones(n), build_ybus(fourbus))
    assert np.allclose(jf @ np.concatenate([np.zeros(n), np.ones(n)]), 0, atol=1e-12)
    assert np.linalg.matrix_rank(jf) == 2 * n - 2


def test_all_pv_reduced_jacobian_is_angle_block(fourbus):
    st = newton_solve(fourbus)
    b = st.jacobians()
    assert b.jlf.shape == (3, 3)
    assert np.array_equal(b.jlf, b.jf[:3, :3])
    assert b.ja.shape == (4, 4)


def test_augmented_null_vector():
    rng = np.random.default_rng(RNG_SEED)
    for base in networks():
        part = make_partition(base, Single(base.slack_bus))
        for _ in range(5):
            net, delta, v = random_state(base, rng)
            ja = jacobians(delta, v, build_ybus(net), part).ja
            e = np.where(part.aug_cols < net.n, 1.0, 0.0)
            assert np.linalg.norm(ja @ e) <= 1e-12 * np.linalg.norm(ja)


def test_block_matrix_determinant():
    rng = np.random.default_rng(RNG_SEED)
    for base in networks()[:2]:
        part = make_partition(base, Single(base.slack_bus))
        net, delta, v = random_state(base, rng)
        jf = full_jacobian(delta, v, build_ybus(net))
        big = block_matrix(jf, part, net)
        assert big.shape[0] == big.shape[1]
        jlf = jf[np.ix_(part.rows, part.cols)]
        assert np.linalg.det(big) == pytest.approx(np.linalg.det(jlf), rel=1e-9)


def test_pq_slack_rejected(ninebus):
    with pytest.raises(CaseError):
        make_partition(ninebus, Single(5))


# ---- Newton solve -----------------------------------------------------------

def test_base_case_slack_power(fourbus):
    st = newton_solve(fourbus, Single(4))
    assert st.p[3] * 100 == pytest.approx(-22.1951, abs=1e-3)
    assert st.losses * 100 == pytest.approx(2.1951, abs=1e-3)
    assert st.mismatch_norm < 1e-8
    y = build_ybus(fourbus)
    assert np.max(np.abs(mismatch(st.delta, st.v, st.p, st.q, y))) < 1e-8


def test_losses_equal_branch_i2r(ninebus):
    st = newton_solve(ninebus)
    assert st.losses == pytest.approx(st.branch_losses(), rel=1e-8)


def test_lossless_base_slack_power(lossless):
    st = newton_solve(lossless)
    assert st.p[3] * 100 == pytest.approx(-20.0, abs=1e-6)
    assert st.losses == pytest.approx(0.0, abs=1e-10)


def test_lossless_beyond_transfer_limit_diverges(lossless):
    p = lossless.p.copy()
    p[1], p[2] = -3.4, 3.4
    with pytest.raises(SolverError):
        newton_solve(lossless.with_injections(p=p))


def test_quadratic_convergence(ninebus):
    h = newton_solve(ninebus).history
    assert len(h) >= 4
    # e_{k+1} <= C e_k^2 once in the basin
    ratios = [h[k + 1] / h[k] ** 2 for k in range(1, len(h) - 1) if h[k] > 1e-12]
    assert max(ratios) < 10


def test_max_iterations(ninebus):
    with pytest.raises(MaxIterationsError):
        newton_solve(ninebus, max_iter=1)


def test_slack_indifference(fourbus):
    # the same operating point solved with bus 1 as slack
    a = newton_solve(fourbus, Single(4))
    net1 = assign_slack(fourbus, Single(1))
    b = newton_solve(net1, Single(1))
    shift = a.delta - b.delta
    assert np.allclose(shift, shift[0], atol=1e-9)
    assert np.allclose(a.p, b.p, atol=1e-9)
    assert np.allclose(a.q, b.q, atol=1e-9)


def test_base_power_invariance():
    a = newton_solve(pu("ninebus"))
    b = newton_solve(pu("ninebus", 1000.0))
    assert np.allclose(a.p * 100, b.p * 1000, atol=1e-6)
    assert np.allclose(a.delta, b.delta, atol=1e-9)
    assert np.allclose(a.v, b.v, atol=1e-9)


def test_distributed_indicator_equals_single(fourbus):
    a = newton_solve(fourbus, Single(4))
    b = newton_solve(fourbus, Distributed({4: 1.0}, 4))
    assert np.allclose(a.delta, b.delta, atol=1e-9)
    assert np.allclose(a.p, b.p, atol=1e-9)
    assert b.p_slack == pytest.approx(a.p_slack, abs=1e-9)


def test_distributed_shares_follow_alpha(ninebus):
    net = assign_slack(ninebus, Distributed({1: 0.5, 2: 0.3, 3: 0.2}, 1))
    p = net.p.copy()
    p[net.index(5)] += 0.5  # 50 MW extra load
    st = newton_solve(net.with_injections(p=p), Distributed({1: 0.5, 2: 0.3, 3: 0.2}, 1))
    dp = st.p - p
    assert dp[:3] == pytest.approx(np.array([0.5, 0.3, 0.2]) * st.p_slack, abs=1e-12)
    assert np.all(dp[3:] == 0)
    # generation covers the extra load plus the extra losses
    assert -st.p_slack == pytest.approx(0.5 + st.losses - newton_solve(ninebus).losses, rel=1e-9)


@pytest.mark.parametrize("alpha", [{1: 0.5, 2: 0.4}, {1: 1.2, 2: -0.2}, {}])
def test_distributed_alpha_validation(alpha):
    with pytest.raises(CaseError):
        Distributed(alpha, 1)
