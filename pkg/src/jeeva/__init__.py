"""Jeeva: enterprise-grid middleware and portal for parallel SVM-based
protein secondary-structure prediction."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    JobGraph,
    PredictionResult,
    ProteinSequence,
    StructureString,
    TaskKind,
    build_prediction_dag,
    q3_score,
    ready_tasks,
    validate_sequence,
)
