"""Order-completion solutions of nonlinear PDEs on grids.

Local polynomial sub- and super-solutions are stitched into piecewise grid
functions whose singular sets stay nowhere dense; refining the defect band
and taking envelopes gives an interval-valued cut around the solution.
"""
__version__ = "0.1.0"

from .expr import OperatorSpec, ParseError, eval_operator, free_jet_variables, parse, pretty, to_source
from .jets import JetPolynomial, jet_of, multi_indices, poly_derivative_at, poly_eval, recenter
from .fnspaces import Grid, GridError, PiecewiseFn, SingularMask, apply_operator, natural_leq, pullback_leq
from .hausdorff import Interval, IntervalFn, graph_complete, inf_family, is_hcontinuous, sup_family
from .solver import (
    CoverIncomplete,
    CutSolution,
    EvalFault,
    LocalPatch,
    NoBracket,
    RadiusUnderflow,
    SolverConfig,
    SolverError,
    audit_patch,
    band_audit,
    build_cover,
    global_approx,
    local_subsolution,
    local_supersolution,
    refine_cut,
    viscous_guide,
)
from .bench import BenchmarkCase, builtin_cases, get_case, load_case, run_case
