"""Marginal states along a power-change direction.

Bus powers move as ``p(t) = p0 + t * dp`` with ``dp`` given in MW per unit
of the loading parameter ``t``.  The driver steps ``t`` forward with plain
load-flow corrections, halving the step whenever the corrector fails or
lands past the fold, then pins the fold with a point-of-collapse Newton
solve on ``{F(x, t) = 0, J(x)^T lam = 0, lam^T lam = 1}``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (BaseCaseInfeasibleError, CaseError, NoProgressBeforeFloorError, NotLosslessError,
                     NotMarginalError, RefinementDivergedError, SolverError)
from .network import PerUnitNetwork, build_ybus
from .powerflow import (Single, SlackModel, SteadyState, _pack, jacobian_at, newton_solve, residual,
                        state_from_vector)
from .sensitivity import (MS_RELATIVE_THRESHOLD, LagrangeVector, itl, left_null_lambda, ms_threshold,
                          smallest_singular)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Direction:
    """Power change per unit of loading parameter, MW / MVAr by bus id."""

    dp: dict[int, float]
    dq: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if not any(self.dp.values()) and not any(self.dq.values()):
            raise CaseError("direction is zero")

    def arrays(self, net: PerUnitNetwork):
        dp = np.zeros(net.n)
        dq = np.zeros(net.n)
        for bid, val in self.dp.items():
            dp[net.index(bid)] = val / net.s_base
        for bid, val in self.dq.items():
            dq[net.index(bid)] = val / net.s_base
        return dp, dq

    def check(self, slack: SlackModel):
        if isinstance(slack, Single) and (self.dp.get(slack.bus) or self.dq.get(slack.bus)):
            raise CaseError(f"direction must not change the slack bus {slack.bus}")

    def scaled(self, c: float) -> "Direction":
        return Direction({k: c * v for k, v in self.dp.items()}, {k: c * v for k, v in self.dq.items()})

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(list(self.dp.values()) + list(self.dq.values())))


@dataclass(frozen=True, eq=False)
class TracePoint:
    t: float
    state: SteadyState
    sigma_min: float


@dataclass(frozen=True, eq=False)
class MsResult:
    state: SteadyState
    t: float
    lam: LagrangeVector | None
    sigma_min: float
    threshold: float
    direction: Direction
    base: SteadyState
    trace: tuple[TracePoint, ...] = ()
    refined: bool = True
    residual: float = float("nan")
    refine_iterations: int = 0

    @property
    def slack(self) -> SlackModel:
        return self.state.slack

    @property
    def marginal(self) -> bool:
        return self.sigma_min < self.threshold


def _loaded(net0: PerUnitNetwork, dp, dq, t: float) -> PerUnitNetwork:
    return net0.with_injections(p=net0.p + t * dp, q=net0.q + t * dq)


def _det_sign(j) -> float:
    return float(np.linalg.slogdet(j)[0])


def continuation_to_ms(net: PerUnitNetwork, slack: SlackModel, direction: Direction, step_mw: float = 10.0,
                       t_floor: float = 1e-6, sigma_factor: float = MS_RELATIVE_THRESHOLD,
                       max_steps: int = 5000, refine: bool = True, **solver_opts) -> MsResult:
    """Natural-parameter continuation to the fold, then point-of-collapse refinement.

    ``net`` must carry every specified bus power for ``slack`` (see
    :func:`~marginal_states.powerflow.assign_slack`).

    :raises BaseCaseInfeasibleError: the starting load flow does not solve.
    :raises NoProgressBeforeFloorError: no step could be taken, or the
        direction never brings the system to a fold within ``max_steps``.
    """
    direction.check(slack)
    ybus = build_ybus(net)
    try:
        base = newton_solve(net, slack, ybus=ybus, **solver_opts)
    except SolverError as exc:
        raise BaseCaseInfeasibleError(f"base case does not solve: {exc}") from exc
    dp, dq = direction.arrays(net)
    jlf0 = base.jacobians().jlf
    sigma0 = smallest_singular(jlf0).sigma
    threshold = ms_threshold(sigma0, sigma_factor)
    sign0 = _det_sign(jlf0)

    h = step_mw / direction.norm
    t, state = 0.0, base
    trace = [TracePoint(0.0, base, sigma0)]
    steps = 0
    while h >= t_floor:
        if steps >= max_steps:
            raise NoProgressBeforeFloorError(f"no fold reached after {max_steps} steps (t={t:g})")
        t_try = t + h
        try:
            cand = newton_solve(_loaded(net, dp, dq, t_try), slack, start=state, ybus=ybus, **solver_opts)
            jlf = cand.jacobians().jlf
            ok = _det_sign(jlf) == sign0
        except SolverError:
            ok = False
        if not ok:
            h *= 0.5
            continue
        steps += 1
        t, state = t_try, cand
        sigma = smallest_singular(jlf).sigma
        trace.append(TracePoint(t, state, sigma))
        log.debug("t=%.9g sigma_min=%.3e step=%.3g", t, sigma, h)
        if sigma < threshold:
            break
    if len(trace) == 1:
        raise NoProgressBeforeFloorError("continuation could not leave the base case")

    last = trace[-1]
    unrefined = MsResult(last.state, last.t, None, last.sigma_min, threshold, direction, base, tuple(trace),
                         refined=False)
    if not refine:
        return _with_lambda(unrefined)
    guess = smallest_singular(last.state.jacobians().jlf).u
    try:
        refined = poc_refine(last.state, last.t, guess, direction, threshold, base=base)
    except RefinementDivergedError as exc:
        log.warning("point-of-collapse refinement failed: %s", exc)
        return _with_lambda(unrefined)
    return MsResult(refined.state, refined.t, refined.lam, refined.sigma_min, threshold, direction, base,
                    tuple(trace), True, refined.residual, refined.refine_iterations)


def _with_lambda(ms: MsResult) -> MsResult:
    try:
        lam = left_null_lambda(ms.state.jacobians(), ms.threshold)
    except NotMarginalError:
        lam = None
    return MsResult(ms.state, ms.t, lam, ms.sigma_min, ms.threshold, ms.direction, ms.base, ms.trace,
                    ms.refined, ms.residual, ms.refine_iterations)


def _spec_network(state: SteadyState, t: float, dp, dq) -> PerUnitNetwork:
    """Network with the t = 0 specified powers (``state.net`` holds those at ``t``)."""
    net = state.net
    return net.with_injections(p=net.p - t * dp, q=net.q - t * dq)


def poc_refine(candidate: SteadyState, t: float, lam_guess, direction: Direction, threshold: float,
               base: SteadyState | None = None, tol: float = 1e-9, max_iter: int = 20,
               max_rel_jump: float = 0.1) -> MsResult:
    """Newton solve of the point-of-collapse system from a near-fold candidate.

    ``candidate.net`` carries the bus powers at ``t``.  ``lam_guess`` is a
    vector over the load-flow Jacobian rows (e.g. its left singular vector).
    Convergence is rejected when ``t`` moves by more than ``max_rel_jump``
    relative to its starting value, since the candidate must already lie in
    the neighbourhood of the fold.

    :raises RefinementDivergedError: no convergence within ``max_iter``.
    """
    part = candidate.partition
    ybus = candidate.ybus
    dp, dq = direction.arrays(candidate.net)
    net0 = _spec_network(candidate, t, dp, dq)
    delta0, v0 = np.array(candidate.delta), np.array(candidate.v)

    m = len(part.cols) + (1 if part.distributed else 0)
    r = len(part.rows)
    x = _pack(candidate.delta, candidate.v, candidate.p_slack, part)
    lam = np.asarray(lam_guess, float)
    lam = lam / np.linalg.norm(lam)
    ft = np.concatenate([dp, dq])[part.rows]

    def pieces(x, t, lam):
        net_t = _loaded(net0, dp, dq, t)
        f = residual(x, part, net_t, ybus, delta0, v0)
        j = jacobian_at(x, part, ybus, delta0, v0)
        g = np.concatenate([f, j.T @ lam, [lam @ lam - 1.0]])
        return g, j

    def hess_lam(x, lam):
        # d(J^T lam)/dx by central differences of the analytic Jacobian.
        out = np.empty((m, m))
        for i in range(m):
            hi = 1e-6 * max(1.0, abs(x[i]))
            e = np.zeros(m)
            e[i] = hi
            jp = jacobian_at(x + e, part, ybus, delta0, v0)
            jm = jacobian_at(x - e, part, ybus, delta0, v0)
            out[:, i] = (jp - jm).T @ lam / (2 * hi)
        return out

    t0 = t
    g, j = pieces(x, t, lam)
    it = 0
    while np.max(np.abs(g)) >= tol:
        if it >= max_iter or not np.all(np.isfinite(g)):
            raise RefinementDivergedError(f"no convergence in {it} iterations (residual {np.max(np.abs(g)):.3e})")
        it += 1
        big = np.zeros((r + m + 1, m + 1 + r))
        big[:r, :m] = j
        big[:r, m] = ft
        big[r:r + m, :m] = hess_lam(x, lam)
        big[r:r + m, m + 1:] = j.T
        big[-1, m + 1:] = 2 * lam
        try:
            step = np.linalg.solve(big, -g)
        except np.linalg.LinAlgError:
            raise RefinementDivergedError("singular extended Jacobian") from None
        x = x + step[:m]
        t = t + step[m]
        lam = lam + step[m + 1:]
        g, j = pieces(x, t, lam)
        log.debug("poc iter %d residual %.3e t=%.12g", it, np.max(np.abs(g)), t)
    res = float(np.max(np.abs(g)))
    if abs(t - t0) > max_rel_jump * max(abs(t0), 1e-12):
        raise RefinementDivergedError(f"refinement left the candidate neighbourhood (t {t0:g} -> {t:g})")

    net_t = _loaded(net0, dp, dq, t)
    state = state_from_vector(x, part, net_t, ybus, delta0, v0, iterations=it, mismatch_norm=float(
        np.max(np.abs(g[:r]))))
    bundle = state.jacobians()
    sigma = smallest_singular(bundle.jlf).sigma
    try:
        lam_vec = left_null_lambda(bundle, threshold)
    except NotMarginalError as exc:
        raise RefinementDivergedError(f"refined point is not marginal: {exc}") from exc
    return MsResult(state, t, lam_vec, sigma, threshold, direction, base if base is not None else candidate,
                    refined=True, residual=res, refine_iterations=it)


@dataclass(frozen=True, eq=False)
class Relocation:
    slack: SlackModel
    marginal: bool
    sigma_min: float
    threshold: float
    lam: LagrangeVector | None


def slack_relocation_check(ms: MsResult, new_slack: SlackModel | int) -> Relocation:
    """Re-partition the marginal state for another slack and test marginality."""
    if isinstance(new_slack, int):
        new_slack = Single(new_slack)
    if new_slack == ms.slack:
        raise CaseError("new slack equals the current one")
    bundle = ms.state.jacobians(new_slack)
    sigma = smallest_singular(bundle.jlf).sigma
    marginal = sigma < ms.threshold
    lam = left_null_lambda(bundle, ms.threshold) if marginal else None
    return Relocation(new_slack, marginal, sigma, ms.threshold, lam)


@dataclass(frozen=True)
class MsIdentities:
    sum_alpha_lambda: float
    itl_weighted_sum: float | None


def distributed_ms_identities(ms: MsResult, alpha: dict[int, float], new_slack: SlackModel | None = None
                              ) -> MsIdentities:
    """Slack-balance identities at a marginal state.

    ``sum_alpha_lambda`` is ``sum_m alpha_m lam_m`` with the unit-norm
    multipliers of ``ms``.  When ``new_slack`` is given, ITLs are recomputed
    at the same state under it and ``sum_m itl_m alpha_m`` is returned.
    """
    lam = ms.lam if ms.lam is not None else left_null_lambda(ms.state.jacobians(), ms.threshold)
    ids = ms.state.net.ids
    a = np.array([alpha.get(bid, 0.0) for bid in ids])
    s = float(a @ lam.p)
    weighted = None
    if new_slack is not None:
        itl_new = np.nan_to_num(itl(ms.state, new_slack).p)  # own slack bus counts as 0
        weighted = float(a @ itl_new)
    return MsIdentities(s, weighted)


@dataclass(frozen=True, eq=False)
class NullCombination:
    residual: float
    n_small: int
    singular_values: np.ndarray

    @property
    def rank_deficiency_two(self) -> bool:
        return self.n_small == 2


def lossless_null_combination(ms: MsResult, beta: float) -> NullCombination:
    """Check that ``beta*[e; 0; 1] + [lam_P; lam_Q; 0]`` is a left null vector of ``J_A``."""
    net = ms.state.net
    if not net.lossless:
        raise NotLosslessError("network has resistive elements")
    if not isinstance(ms.slack, Single):
        raise CaseError("augmented Jacobian needs a single slack bus")
    bundle = ms.state.jacobians()
    sigma = smallest_singular(bundle.jlf).sigma
    if sigma >= ms.threshold:
        raise NotMarginalError(f"sigma_min={sigma:.3e} is not below {ms.threshold:.3e}")
    part = bundle.partition
    lam = ms.lam if ms.lam is not None else left_null_lambda(bundle, ms.threshold)
    lam_rows = lam.vector(part, augmented=True)
    lam_rows[-1] = 0.0
    ones = np.where(part.aug_rows < part.n, 1.0, 0.0)
    vec = beta * ones + lam_rows
    res = float(np.linalg.norm(bundle.ja.T @ vec))
    s = np.linalg.svd(bundle.ja, compute_uv=False)
    return NullCombination(res, int(np.sum(s < ms.threshold)), s)
