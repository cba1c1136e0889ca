"""Space-time mixing diffusion bridges at desk scale.

Closed-form Gaussian statistics of affine-drift base processes and their
endpoint-pinned bridges, Euler-Maruyama samplers with reproducible
counter-based noise, a small score network trained against analytic targets,
and evidence-based refinement of the affine drift.
"""

__version__ = "0.1.0"

from .grids import TimeGrid, clipped_grid, full_grid, EPS_DEFAULT, N_STEPS_DEFAULT
from .schedules import (DriftSchedule, TabulatedSchedule, brownian_schedule,
                        constant_schedule, pinned_drift_schedule, make_schedule)
from .propagator import (Propagator, solve_propagator, propagator_inverse_path,
                         covariance_integral, drift_offset_integral)
from .laplacian import (GridLaplacian, EigenBasis, build_grid_laplacian,
                        eigendecompose, matrix_power_one_minus_t)
from .bridge import (GaussianMarginal, BridgeSpec, EndTables,
                     ConditionedGaussianBridge, GeneralNormalBridge,
                     gaussian_logpdf, basic_conditional, doob_score, bar_drift,
                     bridge_marginal, laplacian_bridge_closed_form,
                     conditioned_marginal, general_normal_bridge, fp_residual)
from .sde import (TrajectoryBatch, DriftField, simulate_forward, simulate_reverse,
                  sample_bridge_exact)
from .score import (ScoreModel, TrainConfig, analytic_ft_target, analytic_rt_target,
                    loss_and_grad, train, score_drift_field)
from .affine_opt import (ElboEstimate, ScheduleFamily, elbo, elbo_evidence,
                         max_elbo, extract_hessian, hessian_regression_loss,
                         refine_drift_iteration)
from .data import (SampleSet, InitialDistribution, make_dataset, energy_distance,
                   sliced_wasserstein)
