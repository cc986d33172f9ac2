"""Structure-aware synthesis of matrix-game solvers and maps of where each solver works."""

from .diagnostics import StructureDiagnostics, structure_diagnostics
from .game import MixedStrategyPair, PayoffGame, RolloutTrace, center_normalize, exploitability, project_simplex
from .primitives import DEFAULT_LIBRARY, Primitive, PrimitiveScorecard, RolloutConfig, rollout, score_primitives

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LIBRARY",
    "MixedStrategyPair",
    "PayoffGame",
    "Primitive",
    "PrimitiveScorecard",
    "RolloutConfig",
    "RolloutTrace",
    "StructureDiagnostics",
    "center_normalize",
    "exploitability",
    "project_simplex",
    "rollout",
    "score_primitives",
    "structure_diagnostics",
]
