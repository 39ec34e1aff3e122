# app/core/errors.py
from typing import Any, Dict, List, Optional


class VRDError(Exception):
    """Base error for the relation detection pipeline.

    ``kind`` is the short machine-readable tag the CLI prints.
    """

    kind = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context: Dict[str, Any] = context

    def __str__(self) -> str:
        return self.message


class ConfigurationError(VRDError):
    kind = "config"


class ContractViolation(VRDError, ValueError):
    kind = "contract"


class GraphParseError(VRDError):
    kind = "parse"

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}", line=line)
        self.line = line


class DatasetLoadError(VRDError):
    kind = "dataset"

    def __init__(self, message: str, line: Optional[int] = None, record_id: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record_id is not None:
            where.append(f"record {record_id}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}", line=line, record_id=record_id)
        self.line = line
        self.record_id = record_id


class InsufficientSupportError(VRDError):
    kind = "support"

    def __init__(self, relation: str, available: int, required: int):
        super().__init__(
            f"relationship '{relation}' has {available} instances, {required} required",
            relation=relation,
            available=available,
            required=required,
        )
        self.relation = relation


class TrainingDivergedError(VRDError):
    kind = "diverged"

    def __init__(self, message: str, lr: float, batch: int, parameter_norms: Dict[str, float]):
        super().__init__(message, lr=lr, batch=batch, parameter_norms=parameter_norms)
        self.lr = lr
        self.batch = batch
        self.parameter_norms = parameter_norms


class CheckpointError(VRDError):
    kind = "checkpoint"


class UsageError(VRDError):
    kind = "usage"


class ReplayMismatchError(VRDError):
    kind = "replay"

    def __init__(self, manifest: str, mismatched: List[str]):
        super().__init__(f"{manifest}: outputs differ after replay: {', '.join(mismatched)}", mismatched=mismatched)
        self.mismatched = mismatched
