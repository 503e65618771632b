"""Low-rank and kernel-lifted quadratic adapters for frozen networks."""
from .adapter import AdaptedModel, Adapter, AdapterConfig, SparsityMask, attach, merge_report
from .basemodel import BaseModel, init_primary_from_checkpoint
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import QuadAdaptError
from .harness import TrainConfig, adapt, compare, pretrain, scratch_vs_adapt, train
from .numerics import Tensor, backward, finite_diff_check, no_grad
from .quadratic import FullQuadraticLayer, KernelMap, LowRankQuadraticTerm
from .shiftbench import BenchConfig, ShiftBenchmark, generate

__version__ = "0.1.0"

__all__ = [
    "AdaptedModel", "Adapter", "AdapterConfig", "BaseModel", "BenchConfig", "FullQuadraticLayer",
    "KernelMap", "LowRankQuadraticTerm", "QuadAdaptError", "ShiftBenchmark", "SparsityMask",
    "Tensor", "TrainConfig", "adapt", "attach", "backward", "compare", "finite_diff_check",
    "generate", "init_primary_from_checkpoint", "load_checkpoint", "merge_report", "no_grad",
    "pretrain", "save_checkpoint", "scratch_vs_adapt", "train",
]
