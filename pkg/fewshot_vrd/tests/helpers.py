from typing import Callable, Sequence, Tuple

import numpy as np

from app.models.schemas import DatasetRecord, ObjectEntry, RelationEntry


def numeric_grad(f: Callable[[], float], param: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` with respect to ``param``, perturbed in place."""
    grad = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = param[idx]
        param[idx] = original + eps
        plus = f()
        param[idx] = original - eps
        minus = f()
        param[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def make_record(image_id: str, objects: Sequence[Tuple[str, Sequence[float]]], relations: Sequence[Tuple[int, str, int]] = ()) -> DatasetRecord:
    """Record with objects laid out left to right and features already resolved."""
    n = len(objects)
    entries = [
        ObjectEntry(box=(i / n, 0.2, (i + 0.5) / n, 0.8), class_tag=class_tag, feature=f"{image_id}/{i}")
        for i, (class_tag, _) in enumerate(objects)
    ]
    return DatasetRecord(
        image_id=image_id,
        objects=entries,
        relations=[RelationEntry(subject=s, predicate=p, object=o) for s, p, o in relations],
        features=[np.asarray(feature, dtype=np.float64) for _, feature in objects],
    )
