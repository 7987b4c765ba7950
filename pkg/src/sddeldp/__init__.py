"""Numerical laboratory for small-noise large deviations of delay SDEs."""
from .core import (AssumptionReport, BlowUpError, CoefficientModel, ConditionRecord, Control,
                   Declared, EventSpec, GridAlignmentError, InitialSegment, ModelEvaluationError,
                   SddeError, TimeGrid, Trajectory, check_assumptions, eval_path, l2_norm_sq,
                   make_grid, op_G, read_control_csv, read_path_csv, write_control_csv,
                   write_path_csv)
from .mc import (FitError, ProbEstimate, ReliabilityWarning, SweepResult, SweepRow,
                 epsilon_sweep, estimate_prob)
from .modelfile import ModelFileError, load_phi, parse_model, parse_model_file
from .models import BUILTINS, ExpressionError, builtin_model, compile_expression, expression_model
from .rate import (MinimizeConfig, RateCertificate, RateMinResult, adjoint_gradient,
                   evaluate_rate, fd_gradient, minimize_rate)
from .sdde import (GENERATOR_ID, SCHEMES, ControlledRun, HypothesisWarning, MomentRow, RngStream,
                   derive_stream, moment_sweep, simulate, simulate_batch, simulate_controlled)
from .skeleton import (PicardDivergenceError, SkeletonConfig, TruncationActiveError, apriori_bound,
                       solve_skeleton, solve_skeleton_batch, truncate_sigma)

__version__ = "0.1.0"
