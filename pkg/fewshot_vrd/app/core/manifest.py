# app/core/manifest.py
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

from pydantic import BaseModel, Field

from app.core.errors import ConfigurationError

MANIFEST_SUFFIX = ".manifest.json"


class RunManifest(BaseModel):
    """Everything needed to re-run a CLI command and check its outputs.

    No wall-clock fields: two identical runs write identical manifests.
    """

    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def digests(paths: Iterable[Path]) -> Dict[str, str]:
    return {str(p): file_digest(p) for p in sorted({Path(p) for p in paths}, key=str)}


def manifest_path(primary_output: Path) -> Path:
    primary_output = Path(primary_output)
    return primary_output.with_name(primary_output.name + MANIFEST_SUFFIX)


def write_manifest(
    primary_output: Path,
    command: str,
    argv: List[str],
    config: Dict[str, Any],
    seed: Optional[int],
    inputs: Iterable[Path],
    outputs: Iterable[Path],
) -> Path:
    manifest = RunManifest(
        command=command,
        argv=list(argv),
        config=config,
        seed=seed,
        inputs=digests(inputs),
        outputs=digests(outputs),
    )
    target = manifest_path(primary_output)
    target.write_text(
        json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return target


def read_manifest(path: Path) -> RunManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"manifest not found: {path}")
    try:
        return RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    except ValueError as exc:
        raise ConfigurationError(f"invalid manifest {path}: {exc}") from exc
