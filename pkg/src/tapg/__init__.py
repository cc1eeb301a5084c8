"""Temporal action proposal generation with a boundary transformer and a
sparse-window proposal transformer, on a small numpy autograd core."""

from .data import VideoRecord, synth_generate
from .inference import MatchConfig, ScoredProposal, generate, soft_nms
from .metrics import EvalConfig, evaluate
from .model import TAPGModel, TrainConfig, total_loss, train
from .sampler import enumerate_windows, fibonacci_group, stride
from .tensor import Tensor
from .transformer import QueryForm, TransformerConfig

__all__ = [
    "EvalConfig", "MatchConfig", "QueryForm", "ScoredProposal", "TAPGModel", "Tensor",
    "TrainConfig", "TransformerConfig", "VideoRecord", "enumerate_windows", "evaluate",
    "fibonacci_group", "generate", "soft_nms", "stride", "synth_generate", "total_loss",
    "train",
]

__version__ = "0.1.0"
