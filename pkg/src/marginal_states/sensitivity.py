"""Singular values, loss sensitivities and Lagrange multipliers of the load flow.

Multipliers are attached to the balance equations.  For a single slack bus
``b`` they form the left null vector of the augmented Jacobian, ordered as
(active-power rows of non-slack buses, reactive rows of PQ buses, slack
row).  Away from a marginal state they are related to incremental
transmission losses by ``lam_m = (1 - itl_m) * lam_b``.

Incremental transmission losses (ITL) are derivatives of total active loss
with respect to power *injected* at a bus, i.e. minus the derivative with
respect to the load-convention powers stored on the network.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NotMarginalError, SingularJacobianError
from .powerflow import (JacobianBundle, Partition, Single, SlackModel, SteadyState, make_partition,
                        mismatch)

NORMALIZATIONS = ("slack-one", "unit-euclidean", "sup-norm")

# Relative MS threshold: sigma_min(J_LF) below this fraction of its base-case value.
MS_RELATIVE_THRESHOLD = 1e-6


@dataclass(frozen=True, eq=False)
class SingularTriple:
    sigma: float
    u: np.ndarray
    v: np.ndarray


def smallest_singular(j) -> SingularTriple:
    """Smallest singular value and its left/right vectors from a full SVD.

    Both vectors are flipped together so that the largest-magnitude entry of
    ``u`` is positive.
    """
    j = np.asarray(j, float)
    if not np.all(np.isfinite(j)):
        raise ValueError("matrix has non-finite entries")
    u, s, vt = np.linalg.svd(j)
    k = int(np.argmin(s))
    left, right = u[:, k].copy(), vt[k].copy()
    if left[np.argmax(np.abs(left))] < 0:
        left, right = -left, -right
    return SingularTriple(float(s[k]), left, right)


def ms_threshold(base_sigma: float, factor: float = MS_RELATIVE_THRESHOLD) -> float:
    return factor * base_sigma


@dataclass(frozen=True, eq=False)
class ItlVector:
    """Per-bus loss sensitivities; NaN where undefined.

    ``p[m]`` is d(loss)/d(active injection at m), ``q[m]`` the same for
    reactive injection (PQ buses only).  The single-slack bus has NaN.
    """

    ids: tuple[int, ...]
    p: np.ndarray
    q: np.ndarray
    slack: SlackModel

    def as_dict(self) -> dict[int, dict[str, float | None]]:
        return {bid: {"P": _opt(self.p[k]), "Q": _opt(self.q[k])} for k, bid in enumerate(self.ids)}

    def p_of(self, bus_id: int) -> float:
        return float(self.p[self.ids.index(bus_id)])


def _opt(x):
    return None if np.isnan(x) else float(x)


def _adjoint(bundle: JacobianBundle) -> np.ndarray:
    """Multipliers over ``J_LF`` rows, scaled so the slack multiplier is one."""
    part = bundle.partition
    jlf = bundle.jlf
    if part.distributed:
        rhs = np.zeros(jlf.shape[1])
        rhs[-1] = 1.0
    else:
        b = part.slack_index
        rhs = -bundle.jf[b, part.cols]
    cond = np.linalg.cond(jlf)
    if not np.isfinite(cond) or cond > 1e13:
        raise SingularJacobianError(f"load-flow Jacobian is (near) singular, cond={cond:.3e}")
    return np.linalg.solve(jlf.T, rhs)


def _spread(mu, part: Partition):
    """Map a vector over ``J_LF`` rows to per-bus (P, Q) arrays (NaN elsewhere)."""
    n = part.n
    p = np.full(n, np.nan)
    q = np.full(n, np.nan)
    is_p = part.rows < n
    p[part.rows[is_p]] = mu[is_p]
    q[part.rows[~is_p] - n] = mu[~is_p]
    return p, q


def itl(state: SteadyState, slack: SlackModel | None = None) -> ItlVector:
    """Incremental transmission losses by the reduced-gradient adjoint.

    Solves ``J_LF^T mu = -(dP_b/dx)^T`` (single slack) and returns
    ``1 - mu`` on the active channel and ``-mu`` on the reactive channel.
    """
    slack = state.slack if slack is None else slack
    bundle = state.jacobians(slack)
    mu = _adjoint(bundle)
    mp, mq = _spread(mu, bundle.partition)
    return ItlVector(state.net.ids, 1.0 - mp, -mq, slack)


@dataclass(frozen=True, eq=False)
class LagrangeVector:
    """Multipliers per bus.

    ``p`` holds active-power multipliers for every bus (slack included),
    ``q`` reactive ones (zero at fixed-voltage buses, whose reactive power
    is dependent).  ``s`` is ``alpha^T p`` for distributed slack.
    """

    ids: tuple[int, ...]
    p: np.ndarray
    q: np.ndarray
    slack: SlackModel
    normalization: str = "slack-one"
    s: float | None = None
    sigma_min: float | None = None
    residual: float | None = None

    @property
    def slack_value(self) -> float:
        """Multiplier of the slack balance (``lam_b`` or ``lam_S``)."""
        if isinstance(self.slack, Single):
            return float(self.p[self.ids.index(self.slack.bus)])
        return float(self.s)

    def p_of(self, bus_id: int) -> float:
        return float(self.p[self.ids.index(bus_id)])

    def vector(self, partition: Partition, augmented: bool = True) -> np.ndarray:
        """Stack as (J_LF rows[, slack row]) to match ``J_LF``/``J_A``."""
        n = partition.n
        rows = partition.aug_rows if augmented and not partition.distributed else partition.rows
        return np.where(rows < n, self.p[np.minimum(rows, n - 1)], self.q[np.maximum(rows - n, 0)])

    def _components(self) -> np.ndarray:
        # Q multipliers at fixed-voltage buses are identically zero, so they do
        # not affect any norm.
        return np.concatenate([self.p, self.q])

    def normalized(self, how: str) -> "LagrangeVector":
        if how not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization {how!r}")
        if how == "slack-one":
            scale = self.slack_value
            if scale == 0:
                raise ZeroDivisionError("slack multiplier is zero; use a norm-based normalization")
        else:
            comp = self._components()
            scale = np.linalg.norm(comp) if how == "unit-euclidean" else np.max(np.abs(comp))
            if comp[np.argmax(np.abs(comp))] < 0:
                scale = -scale
            if scale == 0:
                return replace(self, normalization=how)
        s = None if self.s is None else self.s / scale
        return replace(self, p=self.p / scale, q=self.q / scale, s=s, normalization=how)

    def as_dict(self) -> dict:
        out = {bid: {"P": float(self.p[k]), "Q": float(self.q[k])} for k, bid in enumerate(self.ids)}
        return out


def lagrange_from_itl(itl_vec: ItlVector, lam_ref: float = 1.0, slack: SlackModel | None = None) -> LagrangeVector:
    slack = itl_vec.slack if slack is None else slack
    p = (1.0 - np.nan_to_num(itl_vec.p)) * lam_ref
    q = -np.nan_to_num(itl_vec.q) * lam_ref
    s = None
    if isinstance(slack, Single):
        p[itl_vec.ids.index(slack.bus)] = lam_ref
    else:
        s = lam_ref
    return LagrangeVector(itl_vec.ids, p, q, slack, "slack-one", s)


def slack_change_ratio(itl_b: ItlVector, new_slack: int, tol: float = 1e-6) -> ItlVector:
    """Re-reference single-slack ITLs from bus ``b`` to bus ``new_slack``.

    Uses ``1 - itl_k(m) = (1 - itl_b(m)) / (1 - itl_b(k))``.
    """
    if not isinstance(itl_b.slack, Single):
        raise ValueError("slack re-referencing needs single-slack ITLs")
    ids = itl_b.ids
    old = itl_b.slack.bus
    if new_slack == old:
        return itl_b
    k = ids.index(new_slack)
    one_minus = 1.0 - np.nan_to_num(itl_b.p)  # slack entry: 1 - 0
    denom = one_minus[k]
    if abs(denom) < tol:
        raise ZeroDivisionError(
            f"bus {new_slack} has ITL 1 under slack {old}; it cannot serve as the reference")
    p = 1.0 - one_minus / denom
    q = itl_b.q / denom
    p[k] = np.nan
    return ItlVector(ids, p, q, Single(new_slack))


def left_null_lambda(bundle: JacobianBundle, threshold: float, normalization: str = "unit-euclidean") -> LagrangeVector:
    """Multipliers at a marginal state from the left singular vectors.

    Single slack: taken from the left null space of ``J_A``; if it is more
    than one-dimensional (lossless networks) the member with zero slack
    multiplier is chosen.  Distributed slack: left null vector of ``J_LF``.

    :raises NotMarginalError: ``sigma_min(J_LF)`` is not below ``threshold``.
    """
    part = bundle.partition
    sigma = smallest_singular(bundle.jlf).sigma
    if sigma >= threshold:
        raise NotMarginalError(f"sigma_min={sigma:.3e} is not below the MS threshold {threshold:.3e}")
    n = part.n
    if part.distributed:
        u, s, _ = np.linalg.svd(bundle.jlf)
        lam = u[:, -1]
        rows = part.rows
        res = float(np.linalg.norm(bundle.jlf.T @ lam))
    else:
        u, s, _ = np.linalg.svd(bundle.ja)
        small = np.flatnonzero(s < threshold)
        if len(small) <= 1:
            lam = u[:, -1]
        else:
            basis = u[:, small]
            # Combination with zero slack-row component.
            _, _, wt = np.linalg.svd(basis[-1:, :])
            lam = basis @ wt[-1]
        rows = part.aug_rows
        # Column of J_A for the slack angle; its product with lam must vanish.
        res = float(abs(lam @ bundle.ja[:, -1]))
    p = np.zeros(n)
    q = np.zeros(n)
    is_p = rows < n
    p[rows[is_p]] = lam[is_p]
    q[rows[~is_p] - n] = lam[~is_p]
    s_val = float(part.alpha @ p) if part.distributed else None
    out = LagrangeVector(part.ids, p, q, part.slack, "unit-euclidean", s_val, sigma, res)
    return out.normalized(normalization)


@dataclass(frozen=True)
class KktResidual:
    grad_x: float
    grad_y: float
    mismatch: float
    slack_condition: float | None = None


def kkt_residual(state: SteadyState, lam: LagrangeVector, grad_p, grad_q=None, grad_slack: float = 0.0,
                 slack: SlackModel | None = None) -> KktResidual:
    """Norms of the first-order conditions of ``min f(P, Q) s.t. load flow``.

    The Lagrangian is ``f - dF^T lam``.  ``grad_p``/``grad_q`` are per-bus
    gradients of ``f`` with respect to the load-convention powers; entries
    for dependent powers (slack P, fixed-voltage Q) are ignored except that
    ``grad_slack`` is the derivative with respect to the slack power.

    Returns ``|grad_X L|`` (dependent variables incl. slack power),
    ``|grad_Y L|`` (specified powers) and the mismatch norm.  For distributed
    slack ``slack_condition`` is ``|df/dP_S - alpha^T lam_P|``.
    """
    slack = state.slack if slack is None else slack
    part = make_partition(state.net, slack)
    n = part.n
    grad_p = np.asarray(grad_p, float)
    grad_q = np.zeros(n) if grad_q is None else np.asarray(grad_q, float)
    bundle = state.jacobians(slack)
    pq = part.pq

    if part.distributed:
        lam_rows = lam.vector(part, augmented=False)
        state_cols = bundle.jlf[:, :-1]
        slack_cond = grad_slack - float(part.alpha @ lam.p)
        gx = np.append(-state_cols.T @ lam_rows, slack_cond)
        indep_p = np.ones(n, bool)
        slack_out = abs(slack_cond)
    else:
        lam_rows = lam.vector(part, augmented=True)
        b = part.slack_index
        jx = bundle.jf[np.ix_(part.aug_rows, part.cols)]
        gx = np.append(-jx.T @ lam_rows, grad_slack - lam.p[b])
        indep_p = np.arange(n) != b
        slack_out = None
    # Each specified power enters its own balance with coefficient +1.
    gy = np.concatenate([grad_p[indep_p] - lam.p[indep_p], grad_q[pq] - lam.q[pq]])
    rows = mismatch(state.delta, state.v, state.p, state.q, state.ybus, part)
    mis = np.max(np.abs(rows), initial=0.0)
    return KktResidual(float(np.linalg.norm(gx)), float(np.linalg.norm(gy)), float(mis), slack_out)

