"""Serialisable reports in physical units (MW, MVAr, kV, degrees)."""
from __future__ import annotations

import csv
import io
import json
import math

import numpy as np

from .powerflow import Distributed, Single, SlackModel, SteadyState

SIG_DIGITS = 6


def _round(obj):
    if isinstance(obj, dict):
        return {str(k): _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, (bool, str)) or obj is None:
        return obj
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    x = float(obj)
    if not math.isfinite(x):
        return None
    if x == 0:
        return 0.0
    return float(f"{x:.{SIG_DIGITS}g}")


def dumps(obj) -> str:
    return json.dumps(_round(obj), indent=2) + "\n"


def slack_dict(slack: SlackModel) -> dict:
    if isinstance(slack, Single):
        return {"type": "single", "bus": slack.bus}
    assert isinstance(slack, Distributed)
    return {"type": "distributed", "alpha": {str(b): a for b, a in slack.alpha}, "ref_bus": slack.ref_bus}


def state_dict(state: SteadyState) -> dict:
    net = state.net
    buses = []
    for k, bid in enumerate(net.ids):
        buses.append({
            "id": bid,
            "kind": net.kinds[k],
            "delta_deg": np.degrees(state.delta[k]),
            "v_kv": state.v[k] * net.v_base,
            "p_mw": state.p[k] * net.s_base,
            "q_mvar": state.q[k] * net.s_base,
        })
    out = {
        "slack": slack_dict(state.slack),
        "buses": buses,
        "losses_mw": state.losses * net.s_base,
        "iterations": state.iterations,
        "mismatch_norm": state.mismatch_norm,
    }
    if isinstance(state.slack, Distributed):
        out["p_s_mw"] = state.p_slack * net.s_base
    return out


def lambda_dict(lam) -> dict:
    out = {
        "normalization": lam.normalization,
        "buses": [{"id": bid, "lambda_p": lam.p[k], "lambda_q": lam.q[k]} for k, bid in enumerate(lam.ids)],
    }
    if lam.s is not None:
        out["lambda_s"] = lam.s
    if lam.sigma_min is not None:
        out["sigma_min"] = lam.sigma_min
    return out


def itl_dict(vec) -> dict:
    return {
        "slack": slack_dict(vec.slack),
        "buses": [{"id": bid, "itl_p": vec.p[k], "itl_q": vec.q[k]} for k, bid in enumerate(vec.ids)],
    }


def ms_dict(ms) -> dict:
    out = {
        "t": ms.t,
        "direction_mw": {str(k): v for k, v in ms.direction.dp.items()},
        "sigma_min": ms.sigma_min,
        "threshold": ms.threshold,
        "refined": ms.refined,
        "refinement_residual": ms.residual,
        "continuation_points": len(ms.trace),
        "state": state_dict(ms.state),
    }
    if ms.lam is not None:
        out["lambda"] = lambda_dict(ms.lam)
    return out


def nose_csv(ms) -> str:
    ids = ms.state.net.ids
    s_base, v_base = ms.state.net.s_base, ms.state.net.v_base
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", *(f"P_{b}" for b in ids), *(f"V_{b}" for b in ids), "sigma_min"])
    rows = [(tp.t, tp.state, tp.sigma_min) for tp in ms.trace]
    if ms.refined:
        rows.append((ms.t, ms.state, ms.sigma_min))
    for t, st, sig in rows:
        vals = [t, *(st.p * s_base), *(st.v * v_base), sig]
        w.writerow([f"{x:.{SIG_DIGITS}g}" for x in vals])
    return buf.getvalue()


def render_table(title: str, ids, scenarios) -> str:
    """Text grid with one P row and one lambda row per scenario.

    ``scenarios`` is a list of ``(heading, p_mw, lam)`` tuples.
    """
    width = 11

    def cell(x):
        # Avoid printing "-0.0000" for round-off noise.
        return f"{(x if abs(x) >= 5e-5 else 0.0):{width}.4f}"

    lines = [title, "Bus".ljust(6) + "".join(str(b).rjust(width) for b in ids)]
    for heading, p, lam in scenarios:
        lines.append(heading)
        lines.append("P".ljust(6) + "".join(cell(x) for x in p))
        if lam is not None:
            lines.append("λ".ljust(6) + "".join(cell(x) for x in lam))
    return "\n".join(lines) + "\n"
