"""Version control for machine-learning pipelines with metric-driven merge."""

from pipevc.errors import PipevcError
from pipevc.model import (
    ComponentKind,
    ComponentVersion,
    PipelineSpec,
    PipelineVersion,
    SemanticVersion,
    is_compatible,
    next_version,
    schema_hash,
)

__version__ = "0.1.0"

__all__ = [
    "ComponentKind",
    "ComponentVersion",
    "PipelineSpec",
    "PipelineVersion",
    "PipevcError",
    "SemanticVersion",
    "is_compatible",
    "next_version",
    "schema_hash",
]
