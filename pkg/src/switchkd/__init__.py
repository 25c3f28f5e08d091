"""Visual-switch knowledge distillation with a dynamic bidirectional logit-difference loss."""

from .knee import knee_index
from .losses import LossStrategy, StrategyName, dbild_loss, sequence_loss

__version__ = "0.1.0"

__all__ = ["knee_index", "dbild_loss", "sequence_loss", "LossStrategy", "StrategyName"]
