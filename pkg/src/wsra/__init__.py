"""Weakly supervised temporal-textual grounding with referring attention."""
from .grounding import GroundingResult, ProposalSet, ground
from .losses import LossBreakdown, LossWeights, total_loss
from .numgrad import AdamState, Tensor, adam_step
from .scoring import ScoringParams, WsraModel
from .spans import TemporalSpan

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "GroundingResult",
    "LossBreakdown",
    "LossWeights",
    "ProposalSet",
    "ScoringParams",
    "Tensor",
    "TemporalSpan",
    "WsraModel",
    "adam_step",
    "ground",
    "total_loss",
]
