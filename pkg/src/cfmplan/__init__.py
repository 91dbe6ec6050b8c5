"""Constrained flow-matching trajectory planning on synthetic 2D scenes.

A rectified-flow velocity field generates ego trajectories conditioned
on scene context, intent, and a progress reward; sampling can correct
the velocity toward feasible anchors, restart the chain from one, and
refine endpoints by energy descent.  Everything runs on numpy with an
optional compiled geometry kernel.
"""

__version__ = "0.1.0"

from .errors import (CfmError, ConfigError, DataFormatError,
                     GenerationError, ShapeError, StateError)
from .flownet import ConditionSet, VelocityModel, intent_condition
from .harness import (ExperimentSpec, ImitationBaseline, Metrics,
                      TrainConfig, ablation_suite, evaluate,
                      mode_collapse_report, train_imitation, train_model)
from .sampler import (FlowPath, SamplerConfig, cvf_correct,
                      epsilon_schedule, refine_only, sample,
                      sample_multimodal)
from .scenario import (Obstacle, Record, Scene, Trajectory, dataset_build,
                       generate_scene, load_dataset)
from .vocab import AnchorVocab, ConstraintAnchor, fps_build, \
    select_constraint_anchor

__all__ = [
    "__version__",
    "CfmError", "ShapeError", "StateError", "ConfigError",
    "DataFormatError", "GenerationError",
    "Scene", "Obstacle", "Trajectory", "Record",
    "generate_scene", "dataset_build", "load_dataset",
    "AnchorVocab", "ConstraintAnchor", "fps_build",
    "select_constraint_anchor",
    "VelocityModel", "ConditionSet", "intent_condition",
    "SamplerConfig", "FlowPath", "sample", "sample_multimodal",
    "refine_only", "cvf_correct", "epsilon_schedule",
    "TrainConfig", "ExperimentSpec", "Metrics", "ImitationBaseline",
    "train_model", "train_imitation", "evaluate", "ablation_suite",
    "mode_collapse_report",
]
