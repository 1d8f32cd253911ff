"""Probabilistic safety filters from Gaussian-process models of residual barrier dynamics."""

from .barrier import (BarrierSpec, ConstraintConstants, barrier_constants, constraint_constants,
                      hocbf_constants, quadrotor_barrier, residual_truth, segway_barrier)
from .dynamics import (ControlAffineModel, Trajectory, eval_nominal, eval_true, make_quadrotor,
                       make_quadrotor_extended, make_segway, rollout, step_rk4)
from .errors import (ConditioningError, ConfigError, ContractViolation, InfeasibleError,
                     IntegrationBlowup, ProbfError, SolverStall, StructuralError)
from .gp import (GPResidualModel, KernelHyperparams, PosteriorBlocks, ResidualDataset,
                 fit_hyperparams, log_marginal_likelihood, posterior_blocks, posterior_predict,
                 train)
from .safety_filter import (BackoffSchedule, FilterResult, build_program, cbf_qp,
                            chance_validate, delta_from_epsilon, probf_filter, solve)

__all__ = [name for name in dir() if not name.startswith("_")]
