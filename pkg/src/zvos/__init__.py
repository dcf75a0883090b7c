"""Zero-shot video object segmentation on synthetic clips.

Three-stage pipeline: a multitask saliency+depth network (stage 1), a
multi-source fusion network for moving objects (stage 2), and a per-frame
predictor selector that arbitrates between the two routes (stage 3).
Everything runs on a numpy-based reverse-mode autodiff core.
"""

from .autodiff import Tensor, backward
from .dataset import DatasetConfig, SplitSpec, generate_dataset, read_sample, read_split, write_sample
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .evaluate import AblateConfig, FrameRecord, ablate, evaluate, evaluate_with_records
from .metrics import EvalReport, SequenceScore, boundary_f, mae, region_j
from .stage1 import MultiTaskModel, load_stage1, multitask_forward, save_stage1
from .stage2 import FusionModel, fusion_forward, load_stage2, save_stage2
from .stage3 import APSModel, aps_forward, load_stage3, make_label, save_stage3, select
from .synth import GeneratorConfig, VideoSample, corrupt_flow, flow_to_color, generate_sequence
from .train import SGD, TrainConfig, VARIANTS, poly_lr, train_stage

__version__ = "0.1.0"

__all__ = [
    "ablate", "AblateConfig", "aps_forward", "APSModel", "backward",
    "boundary_f", "ConfigError", "ContractError", "corrupt_flow",
    "DatasetConfig", "DimensionError", "evaluate", "evaluate_with_records",
    "EvalReport", "flow_to_color", "FormatError", "FrameRecord",
    "FusionModel", "fusion_forward", "generate_dataset", "generate_sequence",
    "GeneratorConfig", "load_stage1", "load_stage2", "load_stage3", "mae",
    "make_label", "multitask_forward", "MultiTaskModel", "poly_lr",
    "read_sample", "read_split", "region_j", "save_stage1", "save_stage2",
    "save_stage3", "select", "SequenceScore", "SGD", "SplitSpec",
    "Tensor", "TrainConfig", "train_stage", "VARIANTS", "VideoSample",
    "write_sample",
]
