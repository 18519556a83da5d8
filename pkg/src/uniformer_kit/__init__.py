"""UniFormer toolkit: numpy autodiff, block and backbone builders, cost analyzer, toy trainer."""

from .analyzer import CostReport, count_macs, count_params, resolution_sweep
from .autodiff import Tensor, backward, gradcheck, no_grad, tensor
from .config import ModelConfig, StageConfig, build_hybrid_stage3, load_config, preset, stage_type_presets, tiny_config
from .core import BlockConfig, BlockType, UniFormerBlock
from .hourglass import HourglassBlock, recover_tokens, shrink_tokens
from .model import UniFormer, build_model, inflate_2d_to_3d
from .rng import SplitMix64

__version__ = "0.1.0"

__all__ = [
    "BlockConfig", "BlockType", "CostReport", "HourglassBlock", "ModelConfig", "SplitMix64", "StageConfig",
    "Tensor", "UniFormer", "UniFormerBlock", "backward", "build_hybrid_stage3", "build_model", "count_macs",
    "count_params", "gradcheck", "inflate_2d_to_3d", "load_config", "no_grad", "preset", "recover_tokens",
    "resolution_sweep", "shrink_tokens", "stage_type_presets", "tensor", "tiny_config",
]
