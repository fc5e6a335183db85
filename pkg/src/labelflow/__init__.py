"""Particle schemes for agents that move in space while updating mixed strategies."""

from .ensemble import AgentState, EmpiricalMeasure, first_moment, push_forward, support_radius, wasserstein1
from .errors import (ContractViolation, GeodesicFailure, InvalidLabelError, InvalidRateMatrix, LabelflowError,
                     NearSingularMetricError, NonUniqueStationaryError, NotReversibleError, ProxNonConvergence,
                     ScenarioError, SchemeAbort, SimplexViolation)
from .explicit_scheme import SchemeConfig, Trajectory, run_explicit, step_size_guard, weak_residual
from .fields import (LabelOperator, PayoffKernel, RateMatrixField, VelocityField, builtin_kernel, builtin_rates,
                     builtin_velocity)
from .harness import (Scenario, StudyReport, convergence_study, export_report, load_scenario, residual_study,
                      run_scenario, sample_initial)
from .label_geometry import (LabelDistribution, LabelMetricSpace, as_distribution, bl_norm, hellinger,
                             spherical_hellinger, tv_norm)
from .markov_geometry import MarkovGeometry, geodesic_distance, stationary_distribution
from .markov_prox import MarginMonitor, prox_markov_full, prox_markov_surrogate, run_implicit_markov
from .replicator_prox import ProxResult, prox_hs, run_implicit_replicator

__version__ = "0.1.0"
