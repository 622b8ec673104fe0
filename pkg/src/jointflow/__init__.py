"""Joint flow-map distillation: few-step sampling and few-step likelihood on 2D densities."""

from .autodiff import AdamState, ContractViolation, adam_step, grad, hutchinson_trace, jacobian_trace_exact, jvp, lr_schedule
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .densities import Checkerboard, GaussianMixture, InterpolantBatch, StandardGaussian, gaussian_logpdf, make_interpolant_batch
from .losses import LossTerms
from .metrics import CalibrationSummary, density_grid, energy_distance, nll_calibration, per_sample_nll_error
from .model import JointFlowMapModel, TraceMode, flow_map_apply, flowmap_residuals, joint_forward, logdensity_map_apply
from .rng import RngStream, RngStreams
from .sampling import GuidanceConfig, LikelihoodReport, euler_sample, likelihood_fewstep, likelihood_reference, nats_to_bpd, self_guided_sample
from .training import EarlyStopping, StageConfig, StagePlan, run_plan, run_stage

__version__ = "0.1.0"
