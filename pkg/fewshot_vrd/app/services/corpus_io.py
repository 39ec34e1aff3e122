# app/services/corpus_io.py
"""Dataset JSONL files, their binary feature store, and caption corpora.

A dataset ``train.jsonl`` keeps its object features in two sidecars:
``train.features.bin`` (little-endian float64 vectors, back to back) and
``train.features.idx`` (TSV ``ref<TAB>byte_offset<TAB>dim``).
"""
import json
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import ValidationError

from app.core.errors import DatasetLoadError
from app.models.schemas import Caption, DatasetRecord

logger = structlog.get_logger(__name__)

FEATURE_DTYPE = np.dtype("<f8")


def feature_paths(dataset_path: Path) -> Tuple[Path, Path]:
    dataset_path = Path(dataset_path)
    return dataset_path.with_suffix(".features.bin"), dataset_path.with_suffix(".features.idx")


class FeatureStore:
    def __init__(self, index: Dict[str, Tuple[int, int]], data: bytes):
        self.index = index
        self.data = data

    def __contains__(self, ref: object) -> bool:
        return ref in self.index

    def __len__(self) -> int:
        return len(self.index)

    def get(self, ref: str) -> np.ndarray:
        offset, dim = self.index[ref]
        return np.frombuffer(self.data, dtype=FEATURE_DTYPE, count=dim, offset=offset).astype(np.float64)

    @classmethod
    def empty(cls) -> "FeatureStore":
        return cls({}, b"")

    @classmethod
    def load(cls, dataset_path: Path) -> "FeatureStore":
        bin_path, idx_path = feature_paths(dataset_path)
        if not bin_path.exists() or not idx_path.exists():
            raise DatasetLoadError(f"feature store missing next to {dataset_path} ({bin_path.name}, {idx_path.name})")
        data = bin_path.read_bytes()
        index: Dict[str, Tuple[int, int]] = {}
        for number, raw in enumerate(idx_path.read_text(encoding="utf-8").splitlines(), start=1):
            if not raw.strip():
                continue
            fields = raw.split("\t")
            try:
                ref, offset, dim = fields[0], int(fields[1]), int(fields[2])
            except (IndexError, ValueError):
                raise DatasetLoadError(f"{idx_path.name}: expected ref<TAB>offset<TAB>dim", line=number) from None
            if len(fields) != 3 or ref in index:
                raise DatasetLoadError(f"{idx_path.name}: malformed or repeated entry {ref!r}", line=number)
            if offset < 0 or dim < 1 or offset + dim * FEATURE_DTYPE.itemsize > len(data):
                raise DatasetLoadError(f"{idx_path.name}: entry {ref!r} lies outside the feature file", line=number)
            index[ref] = (offset, dim)
        return cls(index, data)


def write_feature_store(dataset_path: Path, features: Iterable[Tuple[str, np.ndarray]]) -> None:
    bin_path, idx_path = feature_paths(dataset_path)
    chunks: List[bytes] = []
    lines: List[str] = []
    offset = 0
    for ref, vector in features:
        payload = np.asarray(vector, dtype=FEATURE_DTYPE).tobytes()
        lines.append(f"{ref}\t{offset}\t{len(payload) // FEATURE_DTYPE.itemsize}")
        chunks.append(payload)
        offset += len(payload)
    bin_path.write_bytes(b"".join(chunks))
    idx_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


class Dataset(NamedTuple):
    records: List[DatasetRecord]
    store: FeatureStore
    feature_dim: Optional[int]


def load_dataset(path: Path) -> Dataset:
    """Read a dataset JSONL file and resolve every object feature."""
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"dataset not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not any(line.strip() for line in lines):
        return Dataset([], FeatureStore.empty(), None)

    store = FeatureStore.load(path)
    records: List[DatasetRecord] = []
    seen_ids = set()
    feature_dim: Optional[int] = None
    for number, raw in enumerate(lines, start=1):
        if not raw.strip():
            continue
        try:
            data = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetLoadError(f"malformed JSON: {exc.msg}", line=number) from None
        record_id = data.get("image_id") if isinstance(data, dict) else None
        try:
            record = DatasetRecord.model_validate(data)
        except ValidationError as exc:
            problem = exc.errors()[0]
            where = ".".join(str(p) for p in problem["loc"]) or "record"
            raise DatasetLoadError(f"{where}: {problem['msg']}", line=number, record_id=record_id) from None
        if record.image_id in seen_ids:
            raise DatasetLoadError("duplicate image id", line=number, record_id=record.image_id)
        seen_ids.add(record.image_id)

        features = []
        for obj in record.objects:
            if obj.feature not in store:
                raise DatasetLoadError(f"unknown feature reference {obj.feature!r}", line=number, record_id=record.image_id)
            vector = store.get(obj.feature)
            if feature_dim is None:
                feature_dim = len(vector)
            elif len(vector) != feature_dim:
                raise DatasetLoadError(
                    f"feature {obj.feature!r} has dimension {len(vector)}, expected {feature_dim}",
                    line=number,
                    record_id=record.image_id,
                )
            features.append(vector)
        records.append(record.model_copy(update={"features": features}))

    logger.info("dataset.loaded", path=str(path), records=len(records), features=len(store), dim=feature_dim)
    return Dataset(records, store, feature_dim)


def record_to_json(record: DatasetRecord) -> dict:
    return {
        "image_id": record.image_id,
        "objects": [{"box": list(o.box), "class": o.class_tag, "feature": o.feature} for o in record.objects],
        "relations": [{"subject": r.subject, "predicate": r.predicate, "object": r.object} for r in record.relations],
    }


def write_dataset(path: Path, records: Sequence[DatasetRecord]) -> None:
    """Write the JSONL file and both feature sidecars."""
    path = Path(path)
    features: Dict[str, np.ndarray] = {}
    for record in records:
        if record.features is None:
            raise DatasetLoadError("cannot write a record without resolved features", record_id=record.image_id)
        for obj, vector in zip(record.objects, record.features):
            features.setdefault(obj.feature, vector)
    lines = [json.dumps(record_to_json(r), sort_keys=True, separators=(",", ":")) for r in records]
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    write_feature_store(path, features.items())


# caption corpora


def load_captions(path: Path) -> List[Caption]:
    """JSONL with one ``{"id", "text"}`` object per line."""
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"caption file not found: {path}")
    captions: List[Caption] = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            captions.append(Caption.model_validate_json(raw))
        except ValidationError as exc:
            raise DatasetLoadError(f"bad caption: {exc.errors()[0]['msg']}", line=number) from None
    return captions


def write_captions(path: Path, captions: Iterable[Caption]) -> None:
    lines = [json.dumps({"id": c.id, "text": c.text}, separators=(",", ":")) for c in captions]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_name_list(path: Path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise DatasetLoadError(f"name list not found: {path}")
    return [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_name_list(path: Path, names: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{n}\n" for n in names), encoding="utf-8")
