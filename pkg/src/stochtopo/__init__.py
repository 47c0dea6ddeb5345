"""Randomized multiple-load-case topology optimization.

Density-based (SIMP) and ground-structure truss optimization where the
weighted compliance over many load cases is estimated from a few random
combinations of the loads, with move-limit damping to force convergence.
"""
from .damping import DampingState, RunMetrics, effective_step_ratio, gradient_alignment, kkt_angle
from .density import (ContinuationSchedule, DensityParams, DensityProblem, build_filter, run_density,
                      true_compliance_and_gradient)
from .fem import LoadSet, Material, Mesh, SolveCounter, assemble_stiffness
from .gsm import (FilterState, GSMParams, GSMProblem, cleanup_final, discrete_filter_standard,
                  discrete_filter_stochastic, generate_ground_structure, run_gsm, true_compliance_and_gradient_gsm)
from .oc import DesignField, oc_update
from .problems import (box_density_problem, box_gsm_problem, builtin_problem, parse_problem, three_bar_params,
                       three_bar_problem)
from .results import RunResult
from .sampling import (SampleBatch, draw_rademacher, estimate_compliance, estimate_sensitivity, exact_compliance,
                       exact_variance, hutchinson_trace, sample_variance)

__version__ = "0.1.0"
