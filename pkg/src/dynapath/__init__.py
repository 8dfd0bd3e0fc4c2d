"""Input-dependent sublayer and token skipping for a small numpy encoder-decoder transformer.

The pieces, bottom up: :mod:`~dynapath.tensor` (float64 reverse-mode autodiff),
:mod:`~dynapath.model` (the gated transformer), :mod:`~dynapath.decisions`
(keep bits and token strategies), :mod:`~dynapath.policy`,
:mod:`~dynapath.flops`, :mod:`~dynapath.trainer` (joint training with the
lexicographic policy update), :mod:`~dynapath.tasks`, plus persistence and
the CLI.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, save_config
from .decisions import (
    STRATEGIES,
    CapacityError,
    DecisionDistribution,
    Decisions,
    DecisionSpace,
    argmax_decisions,
    enumerate_decisions,
    log_prob,
    sample_decisions,
)
from .flops import FlopsReport, path_flops
from .model import ModelConfig, TransformerModel
from .policy import PolicyNetwork, policy_forward, pool_hidden
from .runner import read_metrics, run_training
from .tasks import TaskSpec, generate_example, make_batches
from .trainer import (
    RewardSpec,
    TrainerConfig,
    TrainingDiverged,
    TrainState,
    estimate_objectives,
    joint_train_step,
    lexico_lambda,
    lexico_update,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
