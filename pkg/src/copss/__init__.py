"""Co-primary spectrum sharing simulator.

Stochastic-geometry rate models for cellular and D2D links, operator
utility maximization under rate-target box constraints, best-response and
Jacobi-play negotiation dynamics with provable-convergence smoothing, and
equilibrium analysis (uniqueness certificates, social optimum, bargaining,
efficiency ratios).
"""

__version__ = "0.1.0"

from .errors import (BargainingInfeasibleError, ConditionViolatedError,
                     CopssError, InfeasibleError, NonConcaveError,
                     QuadratureError, ScenarioFormatError, StructureError)
from .numerics import NumericsConfig
from .stochgeom import (InterferenceField, LinkKind, PathlossModel,
                        RadioConstants, active_bs_probability,
                        cellular_activity_factor, coverage_probability,
                        laplace_interference, pathloss_gain,
                        spectral_efficiency, thermal_noise_w)
from .operators import (BaselineResult, BoxConstraint, OperatorParams,
                        RateTriple, Scenario, SharingScheme, UtilityKind,
                        baseline_utility, best_response, beta_max,
                        box_constraint, constraint_values, normalized_weights,
                        rate_triple, utility)
from .game import (ConvergenceReport, DynamicsConfig, DynamicsMode,
                   JacobianEstimate, KappaPolicy, StrategyProfile, Verdict,
                   contraction_check, gerschgorin_bound, jacobian_br,
                   jp_step, kappa_bound, kappa_max, pooled_eigen_condition,
                   run_dynamics)
from .analysis import (BargainingResult, EquilibriumCertificate, IndexCheck,
                       UniquenessStatus, WelfareResult, brute_force_ne,
                       diag_dominance_index, nash_bargaining,
                       performance_gain, social_welfare_opt, verify_ne)
