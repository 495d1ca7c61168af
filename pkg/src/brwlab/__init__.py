"""Numerical laboratory for critical lattice branching random walks.

Computes heat kernels and lattice Green functions by torus quadrature,
criticality thresholds and growth eigenvalues of point perturbations,
the factorial-moment hierarchy on truncated lattices, and event-driven
Monte Carlo of the particle field, with cross-checks between all routes.
"""

__version__ = "0.1.0"

from .errors import (BrwlabError, DivergentGreen, FitUnstable, HeavyTailWarning,
                     InconsistentDiagnostic, LowConfidenceWarning, MissingOutput,
                     NoConvergence, NoRoot, ParseError, PopulationExplosion,
                     QuadratureResolutionWarning, RangeViolation, SourceOutsideBox,
                     SupercriticalInput, TruncationWarning, UnstableStep,
                     ValidationError)
from .kernels import (GreenAsymptoteFit, JumpKernel, TorusGrid, TransienceReport,
                      green_asymptote_fit, green_function, green_function_many,
                      is_transient, load_kernel, resolvent_integral, symbol_eval,
                      transience_check, transition_probability,
                      transition_probability_field)
from .moments import (BoundCheckReport, BoundSequence, GeneratingFunctionResult,
                      LatticeBox, MajorizationReport, MomentTable, bound_sequence,
                      build_generator, kpp_generating_function,
                      kpp_moment_estimates, majorization_check,
                      moment_bound_check, solve_factorial_moments,
                      solve_first_moment)
from .scenario import Scenario, load_scenario, validate_scenario, write_scenario
from .simulate import (DistributionSnapshot, EmptyProbabilityEstimate,
                       FieldTrajectory, LocalTimeEstimate, LocalTimeSample,
                       MomentEstimate, OccupancyReport, ParticleField, SimStats,
                       distribution_snapshot, empty_probability_superposition,
                       estimate_moments, local_time_mc, occupancy_stats,
                       run_ensemble, run_field, walk_endpoints)
from .spectral import (BoxEigenvalue, PerturbationField, SpectralReport,
                       bound_constant_B, box_principal_eigenvalue,
                       cosine_trial_function, critical_threshold,
                       growth_eigenvalue, spectral_report, steady_mean_constant)

__all__ = [name for name in dir() if not name.startswith("_")]
