"""Top-k mixture-of-experts fine-tuning on a frozen toy decoder, plus a
single-layer mixture-of-agents ensemble, for financial sentiment classification."""

from .data import SentimentLabel, byte_tokenize, detokenize, render_example
from .errors import AggregationError, ConfigError, ContractError, InputError, ShapeError, TrainingError
from .metrics import confusion, evaluate, metrics
from .moa import AgentSpec, LocalModelAgent, ScriptedAgent, parse_label, run_moa
from .model import ModelConfig, TrainConfig, build_model, forward, gradient_check, score_labels, train_step
from .moe import MoEConfig, load_balance_loss, moe_backward, moe_forward, route

__all__ = [
    "AgentSpec", "AggregationError", "ConfigError", "ContractError", "InputError", "LocalModelAgent",
    "MoEConfig", "ModelConfig", "ScriptedAgent", "SentimentLabel", "ShapeError", "TrainConfig",
    "TrainingError", "build_model", "byte_tokenize", "confusion", "detokenize", "evaluate",
    "forward", "gradient_check", "load_balance_loss", "metrics", "moe_backward", "moe_forward",
    "parse_label", "render_example", "route", "run_moa", "score_labels", "train_step",
]

__version__ = "0.1.0"
