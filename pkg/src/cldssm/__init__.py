"""Continual-learning deep state-space models trained through a differentiable ensemble Kalman filter.

Modules:
    numcore    -- reverse-mode autodiff on numpy matrices
    nets       -- transition / recognition networks, parameter registries, checkpoints
    enkf       -- the differentiable stochastic ensemble Kalman filter
    continual  -- EWC (online and vanilla), MAS, SI and LwF regularizers
    training   -- Adam, per-task training, evaluation grids
    data       -- CSV loading, task partitioning, synthetic generators, exact Kalman oracle
    cli        -- ``cldssm train | eval | synth``
"""

from .continual import ImportanceState, Kind, Regularizer, penalty
from .data import TaskDataset, kalman_filter, load_csv, partition_tasks, synth_lgssm, synth_regimes
from .enkf import EmissionModel, run_filter, sequence_loss
from .errors import CLDSSMError
from .nets import DSSM, ModelConfig
from .training import TrainConfig, run_sequence

__version__ = "0.1.0"

__all__ = [
    "CLDSSMError", "DSSM", "EmissionModel", "ImportanceState", "Kind", "ModelConfig",
    "Regularizer", "TaskDataset", "TrainConfig", "kalman_filter", "load_csv",
    "partition_tasks", "penalty", "run_filter", "run_sequence", "sequence_loss",
    "synth_lgssm", "synth_regimes",
]
