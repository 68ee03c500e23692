"""Uncertainty-aware feature distillation on a from-scratch numpy tensor engine."""

from .ablation import AblationGrid, default_grids, run_ablation
from .data import DataConfig, Dataset, gen_sample, gen_split
from .distill import DistillConfig, distance, extract, kd_loss_et, kd_loss_uet
from .gradcheck import gradcheck
from .model import PyramidSpec, build_detnet, forward_head, forward_pyramid
from .rng import Rng
from .tensor import Tensor
from .train import PRESETS, TrainConfig, TrainReport, distill_student, evaluate, train_teacher
from .uncertainty import RatioSchedule, estimate_uncertainty, schedule_ratios

__version__ = "0.1.0"

__all__ = [
    "AblationGrid",
    "DataConfig",
    "Dataset",
    "DistillConfig",
    "PRESETS",
    "PyramidSpec",
    "RatioSchedule",
    "Rng",
    "Tensor",
    "TrainConfig",
    "TrainReport",
    "build_detnet",
    "default_grids",
    "distance",
    "distill_student",
    "estimate_uncertainty",
    "evaluate",
    "extract",
    "forward_head",
    "forward_pyramid",
    "gen_sample",
    "gen_split",
    "gradcheck",
    "kd_loss_et",
    "kd_loss_uet",
    "run_ablation",
    "schedule_ratios",
    "train_teacher",
]
