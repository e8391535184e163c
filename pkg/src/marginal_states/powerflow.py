"""Polar load-flow mismatches, Jacobians and a damped Newton solver.

Mismatches are bus power balances in the load convention (positive P and
Q are consumption):

    dP_k = P_k - sum_m V_k V_m |Y_km| sin(d_k - d_m - a_km)
    dQ_k = Q_k + sum_m V_k V_m |Y_km| cos(d_k - d_m - a_km)

with a_km = angle(Y_km) + pi/2 and Y the standard nodal admittance matrix
(off-diagonal -1/z).  The sums are minus the injected powers, so a balance
reads "consumption plus injection into the network is zero".

The full Jacobian ``J_F`` has rows ``[dP_1..dP_n, dQ_1..dQ_n]`` and columns
``[d_1..d_n, V_1..V_n]``.  A :class:`Partition` selects the rows/columns
that make up the load-flow Jacobian for a given slack model.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import CaseError, DampingFloorError, MaxIterationsError, SingularJacobianError
from .network import AdmittanceMatrix, PerUnitNetwork, build_ybus

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Single:
    """One slack bus: its active power is dependent, its angle is the reference."""

    bus: int


@dataclass(frozen=True)
class Distributed:
    """Slack power ``P_S`` shared as ``alpha_k * P_S``; ``ref_bus`` fixes the angle."""

    alpha: tuple[tuple[int, float], ...]
    ref_bus: int
    voltage_bus: int | None = None
    nonnegative: bool = True

    def __init__(self, alpha, ref_bus, voltage_bus=None, nonnegative=True):
        items = tuple(sorted(dict(alpha).items()))
        object.__setattr__(self, "alpha", items)
        object.__setattr__(self, "ref_bus", ref_bus)
        object.__setattr__(self, "voltage_bus", voltage_bus)
        object.__setattr__(self, "nonnegative", nonnegative)
        total = sum(a for _, a in items)
        if not items or abs(total - 1.0) > 1e-9:
            raise CaseError(f"participation factors must sum to 1 (got {total:.12g})")
        if nonnegative and any(a < 0 for _, a in items):
            raise CaseError("participation factors must be nonnegative")

    @property
    def factors(self) -> dict[int, float]:
        return dict(self.alpha)


SlackModel = Single | Distributed


@dataclass(frozen=True, eq=False)
class Partition:
    """Dependent-variable layout for one slack model.

    ``rows``/``cols`` index into ``J_F``.  Distributed slack appends one
    extra column (``P_S``) holding ``alpha`` on the active-power rows.
    """

    slack: SlackModel
    n: int
    rows: np.ndarray
    cols: np.ndarray
    ids: tuple[int, ...]
    slack_index: int | None = None
    ref_index: int = 0
    alpha: np.ndarray | None = None
    pq: np.ndarray = field(default=None)

    @property
    def distributed(self) -> bool:
        return self.alpha is not None

    @property
    def size(self) -> int:
        return len(self.rows)

    @property
    def aug_rows(self) -> np.ndarray:
        return np.append(self.rows, self.slack_index)

    @property
    def aug_cols(self) -> np.ndarray:
        return np.append(self.cols, self.slack_index)

    def row_labels(self) -> list[tuple[str, int]]:
        return [_label(i, self.n, "P", "Q", self.ids) for i in self.rows]

    def col_labels(self) -> list[tuple[str, int]]:
        labels = [_label(i, self.n, "delta", "V", self.ids) for i in self.cols]
        if self.distributed:
            labels.append(("P_S", None))
        return labels

    def angle_cols(self) -> np.ndarray:
        """Positions (within ``cols``) of the angle unknowns."""
        return np.flatnonzero(self.cols < self.n)


def _label(i, n, a, b, ids):
    return (a, ids[i]) if i < n else (b, ids[i - n])


def make_partition(net: PerUnitNetwork, slack: SlackModel) -> Partition:
    n = net.n
    pq = net.mask("PQ")
    pq_idx = np.flatnonzero(pq)
    if isinstance(slack, Single):
        b = net.index(slack.bus)
        if pq[b]:
            raise CaseError(f"slack bus {slack.bus} must have a fixed voltage magnitude (PV or VD)")
        others = np.array([k for k in range(n) if k != b], dtype=int)
        rows = np.concatenate([others, n + pq_idx])
        cols = np.concatenate([others, n + pq_idx])
        return Partition(slack, n, rows, cols, net.ids, slack_index=b, ref_index=b, pq=pq)
    if isinstance(slack, Distributed):
        r = net.index(slack.ref_bus)
        if slack.voltage_bus is not None and pq[net.index(slack.voltage_bus)]:
            raise CaseError(f"voltage reference bus {slack.voltage_bus} must be PV or VD")
        if not np.any(~pq):
            raise CaseError("distributed slack needs at least one fixed-voltage bus")
        alpha = np.zeros(n)
        for bid, a in slack.alpha:
            alpha[net.index(bid)] = a
        others = np.array([k for k in range(n) if k != r], dtype=int)
        rows = np.concatenate([np.arange(n), n + pq_idx])
        cols = np.concatenate([others, n + pq_idx])
        return Partition(slack, n, rows, cols, net.ids, ref_index=r, alpha=alpha, pq=pq)
    raise TypeError(f"unsupported slack model {slack!r}")


def _terms(delta, v, ybus: AdmittanceMatrix):
    ang = delta[:, None] - delta[None, :] - ybus.loss_angle
    vv_y = np.outer(v, v) * ybus.magnitude
    return vv_y, np.sin(ang), np.cos(ang)


def injections(delta, v, ybus: AdmittanceMatrix):
    """Active and reactive power injected into the network at each bus."""
    u = np.asarray(v, float) * np.exp(1j * np.asarray(delta, float))
    # Y u written through voltage differences, so equal voltages give exact zeros.
    y_off = ybus.y - np.diag(ybus.y.diagonal())
    cur = (y_off * (u[None, :] - u[:, None])).sum(axis=1) + ybus.shunt * u
    s = u * np.conj(cur)
    return s.real, s.imag


def mismatch(delta, v, p, q, ybus: AdmittanceMatrix, partition: Partition | None = None):
    """Balance residuals ``[dP; dQ]``; restricted to ``partition.rows`` if given.

    ``p`` and ``q`` are load-convention bus powers.  For distributed slack
    the caller folds ``alpha * P_S`` into ``p``.
    """
    delta, v, p, q = (np.asarray(a, float) for a in (delta, v, p, q))
    n = ybus.y.shape[0]
    if not (delta.shape == v.shape == p.shape == q.shape == (n,)):
        raise ValueError(f"dimension mismatch: expected vectors of length {n}")
    p_inj, q_inj = injections(delta, v, ybus)
    f = np.concatenate([p + p_inj, q + q_inj])
    return f if partition is None else f[partition.rows]


def full_jacobian(delta, v, ybus: AdmittanceMatrix) -> np.ndarray:
    delta, v = np.asarray(delta, float), np.asarray(v, float)
    n = len(delta)
    if ybus.y.shape != (n, n) or v.shape != (n,):
        raise ValueError("dimension mismatch")
    vv_y, s, c = _terms(delta, v, ybus)
    y_mag = ybus.magnitude
    off = ~np.eye(n, dtype=bool)

    dp_dd = vv_y * c
    dq_dd = vv_y * s
    # Angle blocks: diagonal is minus the off-diagonal row sum.
    np.fill_diagonal(dp_dd, 0.0)
    np.fill_diagonal(dq_dd, 0.0)
    np.fill_diagonal(dp_dd, -dp_dd.sum(axis=1))
    np.fill_diagonal(dq_dd, -dq_dd.sum(axis=1))

    vy = v[:, None] * y_mag
    dp_dv = -vy * s
    dq_dv = vy * c
    my = y_mag * v[None, :]
    g_kk = ybus.y.real.diagonal()
    b_kk = ybus.y.imag.diagonal()
    dp_dv[np.diag_indices(n)] = 2 * v * g_kk - (my * s * off).sum(axis=1)
    dq_dv[np.diag_indices(n)] = -2 * v * b_kk + (my * c * off).sum(axis=1)
    return np.block([[dp_dd, dp_dv], [dq_dd, dq_dv]])


def reduced_jacobians(jf: np.ndarray, partition: Partition):
    """Return ``(J_LF, J_A)``; ``J_A`` is ``None`` for distributed slack."""
    jlf = jf[np.ix_(partition.rows, partition.cols)]
    if partition.distributed:
        col = np.concatenate([partition.alpha, np.zeros(len(partition.rows) - partition.n)])
        return np.column_stack([jlf, col]), None
    ja = jf[np.ix_(partition.aug_rows, partition.aug_cols)]
    return jlf, ja


def block_matrix(jf: np.ndarray, partition: Partition, net: PerUnitNetwork) -> np.ndarray:
    """Jacobian w.r.t. every dependent variable, single slack.

    Unknowns are the load-flow variables, the slack active power and the
    reactive powers of all fixed-voltage buses (slack included).
    """
    if partition.distributed:
        raise ValueError("block form is defined for a single slack bus")
    n = partition.n
    pv = np.flatnonzero(~net.mask("PQ"))
    rows = np.concatenate([partition.rows, [partition.slack_index], n + pv])
    m = len(partition.cols)
    out = np.zeros((len(rows), m + 1 + len(pv)))
    out[:, :m] = jf[np.ix_(rows, partition.cols)]
    out[m, m] = 1.0
    out[m + 1:, m + 1:] = np.eye(len(pv))
    return out


@dataclass(frozen=True, eq=False)
class JacobianBundle:
    jf: np.ndarray
    jlf: np.ndarray
    ja: np.ndarray | None
    partition: Partition


def jacobians(delta, v, ybus: AdmittanceMatrix, partition: Partition) -> JacobianBundle:
    jf = full_jacobian(delta, v, ybus)
    jlf, ja = reduced_jacobians(jf, partition)
    return JacobianBundle(jf, jlf, ja, partition)


@dataclass(frozen=True, eq=False)
class SteadyState:
    """Converged operating point.

    ``p``/``q`` are load-convention bus powers in per unit, including the
    dependent ones recovered by substitution.  ``p_slack`` is the slack-bus
    power (single) or ``P_S`` (distributed).
    """

    net: PerUnitNetwork
    ybus: AdmittanceMatrix
    slack: SlackModel
    delta: np.ndarray
    v: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_slack: float
    iterations: int = 0
    mismatch_norm: float = 0.0
    step_norm: float = 0.0
    history: tuple[float, ...] = ()

    @property
    def losses(self) -> float:
        """Total active loss: net injection over all buses."""
        return float(-self.p.sum())

    @property
    def partition(self) -> Partition:
        return make_partition(self.net, self.slack)

    def jacobians(self, slack: SlackModel | None = None) -> JacobianBundle:
        part = self.partition if slack is None else make_partition(self.net, slack)
        return jacobians(self.delta, self.v, self.ybus, part)

    def branch_losses(self) -> float:
        """Sum of series I^2 R plus shunt conductance losses."""
        net = self.net
        u = self.v * np.exp(1j * self.delta)
        f, t = net.branch_from, net.branch_to
        i_series = (u[f] - u[t]) / net.branch_z
        series = (np.abs(i_series) ** 2 * net.branch_z.real).sum()
        shunt = (np.abs(u) ** 2 * net.shunt.real).sum()
        return float(series + shunt)


def _unpack(x, partition: Partition, delta0, v0):
    n = partition.n
    delta, v = delta0.copy(), v0.copy()
    m = len(partition.cols)
    cols = partition.cols
    is_ang = cols < n
    delta[cols[is_ang]] = x[:m][is_ang]
    v[cols[~is_ang] - n] = x[:m][~is_ang]
    p_s = x[m] if partition.distributed else 0.0
    return delta, v, p_s


def _pack(delta, v, p_s, partition: Partition):
    n = partition.n
    cols = partition.cols
    x = np.where(cols < n, delta[np.minimum(cols, n - 1)], v[np.maximum(cols - n, 0)])
    if partition.distributed:
        x = np.append(x, p_s)
    return x


def residual(x, partition: Partition, net: PerUnitNetwork, ybus, delta0, v0):
    delta, v, p_s = _unpack(x, partition, delta0, v0)
    p = net.p if not partition.distributed else net.p + partition.alpha * p_s
    return mismatch(delta, v, p, net.q, ybus, partition)


def jacobian_at(x, partition: Partition, ybus, delta0, v0) -> np.ndarray:
    delta, v, _ = _unpack(x, partition, delta0, v0)
    return reduced_jacobians(full_jacobian(delta, v, ybus), partition)[0]


def state_from_vector(x, partition: Partition, net: PerUnitNetwork, ybus, delta0, v0, **info) -> SteadyState:
    """Recover dependent powers by substitution and wrap a :class:`SteadyState`."""
    delta, v, p_s = _unpack(x, partition, delta0, v0)
    p_inj, q_inj = injections(delta, v, ybus)
    p = net.p.astype(float)
    q = net.q.astype(float)
    if partition.distributed:
        p = p + partition.alpha * p_s
        p_slack = float(p_s)
    else:
        b = partition.slack_index
        p[b] = -p_inj[b]
        p_slack = float(p[b])
    fixed_v = ~partition.pq
    q[fixed_v] = -q_inj[fixed_v]
    for arr in (delta, v, p, q):
        arr.setflags(write=False)
    return SteadyState(net, ybus, partition.slack, delta, v, p, q, p_slack, **info)


def newton_solve(net: PerUnitNetwork, slack: SlackModel | None = None, start: SteadyState | None = None,
                 tol: float = 1e-8, step_tol: float = 1e-10, max_iter: int = 50,
                 ybus: AdmittanceMatrix | None = None, damping_floor: float = 1e-6) -> SteadyState:
    """Newton-Raphson load flow with step halving.

    :param net: per-unit network; bus powers are taken from ``net.p``/``net.q``.
    :param slack: slack model, defaults to the case's VD bus.
    :param start: warm-start state; flat start when omitted.
    :raises MaxIterationsError: no convergence within ``max_iter`` iterations.
    :raises DampingFloorError: step halving could not reduce the mismatch.
    """
    slack = Single(net.slack_bus) if slack is None else slack
    ybus = build_ybus(net) if ybus is None else ybus
    part = make_partition(net, slack)
    fixed_v = ~net.mask("PQ")

    if start is None:
        delta0 = np.zeros(net.n)
        delta0[part.ref_index] = net.delta[part.ref_index]
        v0 = np.where(fixed_v, net.v, 1.0)
        p_s = 0.0
    else:
        delta0 = np.array(start.delta, float)
        delta0[part.ref_index] = net.delta[part.ref_index]
        v0 = np.where(fixed_v, net.v, start.v)
        p_s = start.p_slack if isinstance(start.slack, Distributed) and part.distributed else 0.0

    x = _pack(delta0, v0, p_s, part)
    f = residual(x, part, net, ybus, delta0, v0)
    history = [float(np.max(np.abs(f), initial=0.0))]
    step_norm = 0.0
    it = 0
    while history[-1] >= tol:
        if it >= max_iter:
            raise MaxIterationsError(f"no convergence in {max_iter} iterations (mismatch {history[-1]:.3e})")
        it += 1
        j = jacobian_at(x, part, ybus, delta0, v0)
        try:
            dx = -np.linalg.solve(j, f)
        except np.linalg.LinAlgError:
            raise SingularJacobianError("load-flow Jacobian is singular") from None
        if not np.all(np.isfinite(dx)):
            raise SingularJacobianError("non-finite Newton step")
        norm0 = np.linalg.norm(f)
        s = 1.0
        while True:
            x_new = x + s * dx
            f_new = residual(x_new, part, net, ybus, delta0, v0)
            if np.all(np.isfinite(f_new)) and np.linalg.norm(f_new) < norm0:
                break
            s *= 0.5
            if s < damping_floor:
                raise DampingFloorError(f"step halving floor reached (mismatch {history[-1]:.3e})")
        step_norm = float(np.max(np.abs(s * dx)))
        x, f = x_new, f_new
        history.append(float(np.max(np.abs(f))))
        log.debug("iter %d mismatch %.3e step %.3e damping %g", it, history[-1], step_norm, s)
        if step_norm < step_tol and history[-1] >= tol:
            # Stagnated: the mismatch cannot be driven further down.
            raise MaxIterationsError(f"stagnated at mismatch {history[-1]:.3e}")

    return state_from_vector(x, part, net, ybus, delta0, v0, iterations=it,
                             mismatch_norm=history[-1], step_norm=step_norm, history=tuple(history))


def assign_slack(net: PerUnitNetwork, slack: SlackModel, **solver_opts) -> PerUnitNetwork:
    """Fix every bus power for use with a slack model other than the case's VD bus.

    The VD bus carries no specified active power in the case file.  When
    another slack model is used, the network is first solved with the VD
    bus as slack and the resulting bus powers become the specified ones.
    """
    if isinstance(slack, Single) and slack.bus == net.slack_bus:
        return net
    base = newton_solve(net, Single(net.slack_bus), **solver_opts)
    return net.with_injections(p=base.p, q=base.q)
