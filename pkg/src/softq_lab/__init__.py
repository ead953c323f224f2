"""Model-based soft actor-critic for a tendon-driven soft quadruped.

Modules: kinematics (tendon geometry, expert gait), plant (reference
simulator), dataset, nn (numpy MLP and Adam), surrogate (learned dynamics),
sac, pipeline (MBRL, post-training, model-free baseline), metrics
(stability, cost of transport, Kalman velocity) and config/cli.
"""
from .kinematics import ActionLimits, ExpertGait, GaitWaveSpec, expert_gait
from .plant import PlantConfig, ReferencePlant
from .surrogate import SurrogateDynamics, train_surrogate, validate
from .sac import RewardWeights, SACAgent, SACConfig
from .pipeline import PipelineConfig, run_mbrl, run_mfrl, run_post_training
from .metrics import EvalReport, KalmanVelocityEstimator, evaluate
from .config import RunConfig, parse_config

__version__ = "0.1.0"

__all__ = [
    "ActionLimits", "ExpertGait", "GaitWaveSpec", "expert_gait",
    "PlantConfig", "ReferencePlant",
    "SurrogateDynamics", "train_surrogate", "validate",
    "RewardWeights", "SACAgent", "SACConfig",
    "PipelineConfig", "run_mbrl", "run_mfrl", "run_post_training",
    "EvalReport", "KalmanVelocityEstimator", "evaluate",
    "RunConfig", "parse_config",
]
