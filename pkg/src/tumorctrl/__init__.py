"""Sparse optimal control of a three-field tumor-growth phase-field system.

Forward, linearized and adjoint PDE solvers, proximal-gradient optimization
under box constraints with L1 / directional sparsity, sparsity certificates
and an independent verification harness.
"""

__version__ = "0.1.0"

from .fields import (Field, GridSpec, ShapeMismatch, SpaceTimeField,
                     StateTriple, TimeGrid, Trajectory, grid1d, grid2d, inner,
                     laplacian_neumann, norm, slice_norms)
from .model import (BoxBounds, InterpolantSpec, ModelParams, PotentialSpec,
                    SingularDomain, ValidationReport, eval_h, eval_potential,
                    logarithmic_potential, regular_potential, smoothstep7,
                    validate_setup)
from .optim import (OptimizeOptions, OptimizeResult, StepsizeCollapse,
                    ThresholdReport, kappa_sweep, proximal_gradient_solve,
                    reduced_cost, smooth_gradient, support_measure,
                    vi_residual, zero_control_threshold)
from .presets import (Problem, make_problem, preset_names, preset_problem,
                      preset_settings, random_admissible_controls)
from .solver import (AdjointTriple, ControlPair, LinearizedSpec,
                     NewtonDivergence, SeparationLoss, Targets,
                     solve_adjoint, solve_linearized, solve_state,
                     state_balance_report)
from .sparsity import (BadBounds, BisectionFailure, BoundsNotSignedError,
                       CertificateReport, SparsityMode, SubgradientPair,
                       certificate, eval_g, prox, select_subgradient)
from .verify import (CheckReport, DimensionTooLarge, brute_force_optimize,
                     duality_gap, fd_gradient_check, linearized_fd_check,
                     linearized_fd_refinement, separation_monitor)
