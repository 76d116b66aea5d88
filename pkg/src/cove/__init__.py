"""Chain-of-Verification: draft, plan verification questions, answer them, revise."""

__version__ = "0.1.0"

from .backend import ReplayBackend, ScriptedBackend, HTTPBackend  # noqa: E402
from .model import PipelineConfig, PipelineResult, Query, TaskKind, Variant, PlannerStrategy  # noqa: E402
from .pipeline import run  # noqa: E402

__all__ = [
    "HTTPBackend", "PipelineConfig", "PipelineResult", "PlannerStrategy", "Query",
    "ReplayBackend", "ScriptedBackend", "TaskKind", "Variant", "run",
]
