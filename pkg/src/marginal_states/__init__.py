"""AC load flow, loss sensitivities and marginal states."""
from .errors import CaseError, MarginalStateError, SolverError
from .marginal import (Direction, MsResult, continuation_to_ms, distributed_ms_identities, lossless_null_combination,
                       poc_refine, slack_relocation_check)
from .network import (BranchSpec, BusSpec, NetworkCase, PerUnitNetwork, build_ybus, load_case, parse_case,
                      to_per_unit)
from .powerflow import (Distributed, Single, SteadyState, assign_slack, full_jacobian, jacobians, make_partition,
                        mismatch, newton_solve)
from .sensitivity import LagrangeVector, itl, kkt_residual, lagrange_from_itl, left_null_lambda, smallest_singular

__all__ = [
    "BranchSpec", "BusSpec", "CaseError", "Direction", "Distributed", "LagrangeVector", "MarginalStateError",
    "MsResult", "NetworkCase", "PerUnitNetwork", "Single", "SolverError", "SteadyState", "assign_slack",
    "build_ybus", "continuation_to_ms", "distributed_ms_identities", "full_jacobian", "itl", "jacobians",
    "kkt_residual", "lagrange_from_itl", "left_null_lambda", "load_case", "lossless_null_combination",
    "make_partition", "mismatch", "newton_solve", "parse_case", "poc_refine", "slack_relocation_check",
    "smallest_singular", "to_per_unit",
]
