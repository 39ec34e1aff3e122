# app/services/eval_metrics.py
"""Ranking and recall metrics for predicate classification.

Every ordered pair of ground-truth objects is scored against every candidate
predicate except no-relation; top-k is taken per image.
"""
import json
import math
from pathlib import Path
from typing import Callable, Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from app.core.errors import ConfigurationError, ContractViolation
from app.models.schemas import NO_RELATION, DatasetRecord, ObjectDescriptor, RecallMode, RecallSubset, RelationInstance
from app.services.fusion_core import CandidateSet, FusionModel, build_inputs

logger = structlog.get_logger(__name__)

REPORT_KS = (20, 50, 100)


class RankedPrediction(NamedTuple):
    image_id: str
    subject: int
    predicate: str
    object: int
    score: float


class GTTriplet(NamedTuple):
    subject: int
    predicate: str
    object: int
    subject_class: str
    object_class: str

    @property
    def pair(self) -> Tuple[str, str]:
        return (self.subject_class, self.object_class)

    @property
    def class_triplet(self) -> Tuple[str, str, str]:
        return (self.subject_class, self.predicate, self.object_class)


GroundTruth = Dict[str, List[GTTriplet]]
Rankings = Mapping[str, Sequence[RankedPrediction]]


def ground_truth(records: Iterable[DatasetRecord], predicates: Optional[Iterable[str]] = None) -> GroundTruth:
    """Labeled triplets per image, optionally restricted to a predicate set."""
    keep = None if predicates is None else set(predicates)
    gt: GroundTruth = {}
    for record in records:
        triplets = []
        for rel in record.relations:
            if rel.predicate == NO_RELATION or (keep is not None and rel.predicate not in keep):
                continue
            triplets.append(
                GTTriplet(
                    rel.subject,
                    rel.predicate,
                    rel.object,
                    record.objects[rel.subject].class_tag,
                    record.objects[rel.object].class_tag,
                )
            )
        gt[record.image_id] = triplets
    return gt


class SeenSets(NamedTuple):
    seen_pairs: FrozenSet[Tuple[str, str]]
    seen_triplets: FrozenSet[Tuple[str, str, str]]

    @classmethod
    def empty(cls) -> "SeenSets":
        return cls(frozenset(), frozenset())

    @classmethod
    def from_support(cls, instances: Iterable[RelationInstance], candidates: CandidateSet) -> "SeenSets":
        pairs, triplets = set(), set()
        for inst in instances:
            predicate = candidates.predicates[inst.predicate_index]
            if predicate == NO_RELATION:
                continue
            pairs.add((inst.subject.class_tag, inst.object.class_tag))
            triplets.add((inst.subject.class_tag, predicate, inst.object.class_tag))
        return cls(frozenset(pairs), frozenset(triplets))

    @classmethod
    def from_dict(cls, data: Mapping) -> "SeenSets":
        seen = cls(
            frozenset(tuple(p) for p in data.get("seen_pairs", [])),
            frozenset(tuple(t) for t in data.get("seen_triplets", [])),
        )
        if any((s, o) not in seen.seen_pairs for s, _, o in seen.seen_triplets):
            raise ConfigurationError("seen triplets do not project into seen pairs")
        return seen

    def to_dict(self) -> dict:
        return {
            "seen_pairs": [list(p) for p in sorted(self.seen_pairs)],
            "seen_triplets": [list(t) for t in sorted(self.seen_triplets)],
        }

    def is_seen(self, triplet: GTTriplet, mode: RecallMode) -> bool:
        if mode is RecallMode.PAIR:
            return triplet.pair in self.seen_pairs
        return triplet.class_triplet in self.seen_triplets


# ranking


def _sort_key(entry: Tuple[float, int, int]) -> Tuple[float, int, int]:
    score, pair, predicate = entry
    return (-score, pair, predicate)


def rank_scores(
    image_id: str,
    pairs: Sequence[Tuple[int, int]],
    probabilities: np.ndarray,
    candidates: CandidateSet,
    graph_constraint: bool = False,
) -> List[RankedPrediction]:
    """Rank a pair-by-candidate probability matrix; column 0 is no-relation and never ranked."""
    entries: List[Tuple[float, int, int]] = []
    for row in range(len(pairs)):
        scores = probabilities[row]
        if graph_constraint:
            k = 1 + int(np.argmax(scores[1:]))
            entries.append((float(scores[k]), row, k))
        else:
            entries.extend((float(scores[k]), row, k) for k in range(1, len(candidates)))
    entries.sort(key=_sort_key)
    return [
        RankedPrediction(image_id, pairs[row][0], candidates.predicates[k], pairs[row][1], score)
        for score, row, k in entries
    ]


def ordered_pairs(n_objects: int) -> List[Tuple[int, int]]:
    return [(i, j) for i in range(n_objects) for j in range(n_objects) if i != j]


def rank_image(
    model: FusionModel,
    image_id: str,
    objects: Sequence[ObjectDescriptor],
    graph_constraint: bool = False,
) -> List[RankedPrediction]:
    if len(objects) < 2:
        return []
    pairs = ordered_pairs(len(objects))
    probabilities = model.predict_proba(build_inputs([(objects[i], objects[j]) for i, j in pairs]))
    return rank_scores(image_id, pairs, probabilities, model.candidates, graph_constraint)


def rank_dataset(
    model: FusionModel, records: Sequence[DatasetRecord], graph_constraint: bool = False
) -> Dict[str, List[RankedPrediction]]:
    rankings = {r.image_id: rank_image(model, r.image_id, r.descriptors(), graph_constraint) for r in records}
    logger.info("metrics.ranked", images=len(rankings), predictions=sum(len(v) for v in rankings.values()))
    return rankings


def random_rankings(
    records: Sequence[DatasetRecord], candidates: CandidateSet, rng: np.random.Generator
) -> Dict[str, List[RankedPrediction]]:
    """Baseline ranker with uniform random scores."""
    rankings = {}
    for record in records:
        pairs = ordered_pairs(len(record.objects))
        if not pairs:
            rankings[record.image_id] = []
            continue
        scores = rng.random((len(pairs), len(candidates)))
        rankings[record.image_id] = rank_scores(record.image_id, pairs, scores, candidates)
    return rankings


def expected_random_recall(records: Sequence[DatasetRecord], gt: GroundTruth, n_predicates: int, k: int) -> float:
    """Expected R@k of the random ranker: mean over GT triplets of min(k, T) / T."""
    sizes = {r.image_id: len(ordered_pairs(len(r.objects))) * n_predicates for r in records}
    terms = [min(k, sizes[image]) / sizes[image] for image, triplets in gt.items() for _ in triplets]
    if not terms:
        return float("nan")
    return float(np.mean(terms))


# recall


def _check_k(k: int) -> None:
    if k < 1:
        raise ContractViolation(f"k must be at least 1, got {k}")


def recall_counts(
    rankings: Rankings,
    gt: GroundTruth,
    k: int,
    keep: Optional[Callable[[GTTriplet], bool]] = None,
) -> Tuple[int, int]:
    """(recalled, total) GT triplets, over the triplets selected by ``keep``."""
    _check_k(k)
    hits = total = 0
    for image_id, triplets in gt.items():
        top = {(p.subject, p.predicate, p.object) for p in rankings.get(image_id, ())[:k]}
        for t in triplets:
            if keep is not None and not keep(t):
                continue
            total += 1
            hits += (t.subject, t.predicate, t.object) in top
    return hits, total


def _ratio(hits: int, total: int, metric: str, k: int) -> float:
    if total == 0:
        logger.warning("metrics.empty_denominator", metric=metric, k=k)
        return float("nan")
    return hits / total


def recall_at_k(rankings: Rankings, gt: GroundTruth, k: int) -> float:
    return _ratio(*recall_counts(rankings, gt, k), metric="recall", k=k)


def mean_recall_at_k(
    rankings: Rankings, gt: GroundTruth, k: int, predicates: Optional[Iterable[str]] = None
) -> float:
    """Unweighted mean of per-predicate recall over predicates with at least one GT triplet."""
    present = sorted({t.predicate for triplets in gt.values() for t in triplets})
    if predicates is not None:
        allowed = set(predicates)
        present = [p for p in present if p in allowed]
    recalls = []
    for predicate in present:
        hits, total = recall_counts(rankings, gt, k, keep=lambda t, p=predicate: t.predicate == p)
        recalls.append(hits / total)
    if not recalls:
        _check_k(k)
        logger.warning("metrics.empty_denominator", metric="mean_recall", k=k)
        return float("nan")
    return float(np.mean(recalls))


def seen_unseen_recall(
    rankings: Rankings,
    gt: GroundTruth,
    seen: SeenSets,
    mode: RecallMode,
    subset: RecallSubset,
    k: int,
) -> float:
    want_seen = subset is RecallSubset.SEEN
    hits, total = recall_counts(rankings, gt, k, keep=lambda t: seen.is_seen(t, mode) == want_seen)
    return _ratio(hits, total, metric=f"{mode.value}_{subset.value}", k=k)


# reporting


def _finite_or_none(value: float) -> Optional[float]:
    return None if value is None or math.isnan(value) else value


def build_report(
    rankings: Rankings,
    gt: GroundTruth,
    seen: SeenSets,
    ks: Sequence[int] = REPORT_KS,
    predicates: Optional[Iterable[str]] = None,
    config: Optional[dict] = None,
) -> dict:
    predicates = None if predicates is None else list(predicates)
    report: dict = {"recall": {}, "mean_recall": {}, "seen": {"pair": {}, "triplet": {}}, "unseen": {"pair": {}, "triplet": {}}}
    for k in ks:
        key = str(k)
        report["recall"][key] = _finite_or_none(recall_at_k(rankings, gt, k))
        report["mean_recall"][key] = _finite_or_none(mean_recall_at_k(rankings, gt, k, predicates))
        for subset in RecallSubset:
            for mode in RecallMode:
                value = seen_unseen_recall(rankings, gt, seen, mode, subset, k)
                report[subset.value][mode.value][key] = _finite_or_none(value)
    report["counts"] = {
        "images": len(gt),
        "gt_triplets": sum(len(v) for v in gt.values()),
        "seen_pairs": len(seen.seen_pairs),
        "seen_triplets": len(seen.seen_triplets),
    }
    report["config"] = config or {}
    return report


def write_report(path: Path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: malformed report: {exc}") from exc


REPORT_COLUMNS = [
    ("R", ("recall",)),
    ("mR", ("mean_recall",)),
    ("psR", ("seen", "pair")),
    ("puR", ("unseen", "pair")),
    ("tsR", ("seen", "triplet")),
    ("tuR", ("unseen", "triplet")),
]


def report_frame(report: dict) -> pd.DataFrame:
    """One row per k, percentages, columns in the usual table order."""
    rows = []
    for key in sorted(report["recall"], key=int):
        row = {"k": int(key)}
        for label, path in REPORT_COLUMNS:
            node = report
            for part in path:
                node = node[part]
            value = node.get(key)
            row[label] = np.nan if value is None else 100.0 * value
        rows.append(row)
    return pd.DataFrame(rows, columns=["k"] + [label for label, _ in REPORT_COLUMNS]).set_index("k")


def render_report_table(report: dict) -> str:
    return report_frame(report).to_string(float_format=lambda v: f"{v:.2f}", na_rep="-")
