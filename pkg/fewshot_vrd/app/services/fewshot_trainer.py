# app/services/fewshot_trainer.py
"""N-way K-shot support sampling and end-to-end training of the fusion head."""
import math
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import structlog

from app.core.config import EpisodeConfig, TrainConfig, settings
from app.core.errors import ConfigurationError, InsufficientSupportError, TrainingDivergedError
from app.models.schemas import NO_RELATION, DatasetRecord, RelationInstance
from app.services.eval_metrics import SeenSets
from app.services.fusion_core import CandidateSet, FusionModel, instance_inputs, load_model, save_model
from app.services.optim import make_optimizer
from app.services.text_knowledge import ContextEncoder, TokenEmbeddingTable
from app.services.vrk_encoder import RelationEncoder

logger = structlog.get_logger(__name__)


# benchmarks


def read_relation_list(path: Path) -> List[str]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"relation list not found: {path}")
    names = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n and not n.startswith("#")]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"{path}: relation list repeats a name")
    if not names:
        raise ConfigurationError(f"{path}: relation list is empty")
    return names


def benchmark_relations(config: EpisodeConfig) -> List[str]:
    """Target relations in benchmark order; an explicit list wins over the bundled file."""
    if config.relations:
        return list(dict.fromkeys(config.relations))
    return read_relation_list(settings.benchmark_path(config.benchmark))


# instance pool


class PoolEntry(NamedTuple):
    image_id: str
    subject_index: int
    object_index: int
    predicate: str


class InstancePool:
    """Labeled relations by predicate and unlabeled ordered pairs by image."""

    def __init__(self, records: Sequence[DatasetRecord]):
        self.records: Dict[str, DatasetRecord] = {}
        self.positives: Dict[str, List[PoolEntry]] = {}
        self.unlabeled: Dict[str, List[Tuple[int, int]]] = {}
        for record in records:
            self.records[record.image_id] = record
            labeled = set()
            for rel in record.relations:
                labeled.add((rel.subject, rel.object))
                if rel.predicate != NO_RELATION:
                    entry = PoolEntry(record.image_id, rel.subject, rel.object, rel.predicate)
                    self.positives.setdefault(rel.predicate, []).append(entry)
            n = len(record.objects)
            self.unlabeled[record.image_id] = [
                (i, j) for i in range(n) for j in range(n) if i != j and (i, j) not in labeled
            ]

    def count(self, predicate: str) -> int:
        return len(self.positives.get(predicate, ()))

    def instance(self, entry: PoolEntry, candidates: CandidateSet) -> RelationInstance:
        record = self.records[entry.image_id]
        return RelationInstance(
            image_id=entry.image_id,
            subject=record.descriptor(entry.subject_index),
            object=record.descriptor(entry.object_index),
            predicate_index=candidates.position(entry.predicate),
            subject_index=entry.subject_index,
            object_index=entry.object_index,
        )


class SupportSet(NamedTuple):
    instances: List[RelationInstance]
    positives: int
    negatives: int

    def __len__(self) -> int:
        return len(self.instances)


def negative_count(ratio: float, n_way: int, shots: int) -> int:
    """ceil(ratio * N * K), taken on the decimal value of ``ratio`` so 0.2 * 15 is 3, not 4."""
    return math.ceil(Fraction(str(ratio)) * n_way * shots)


def sample_support(pool: InstancePool, config: EpisodeConfig, candidates: CandidateSet) -> SupportSet:
    """K positives per target relation plus no-relation pairs from the same images."""
    rng = np.random.default_rng(config.seed)
    chosen: List[PoolEntry] = []
    for relation in candidates.relations:
        available = pool.positives.get(relation, [])
        if len(available) < config.shots:
            raise InsufficientSupportError(relation, len(available), config.shots)
        picks = rng.choice(len(available), size=config.shots, replace=False)
        chosen.extend(available[i] for i in sorted(picks.tolist()))

    images = list(dict.fromkeys(e.image_id for e in chosen))
    negative_pool = [
        PoolEntry(image, i, j, NO_RELATION) for image in images for i, j in pool.unlabeled[image]
    ]
    wanted = negative_count(config.negative_ratio, len(candidates.relations), config.shots)
    if wanted > len(negative_pool):
        logger.warning("support.short_negatives", wanted=wanted, available=len(negative_pool))
        wanted = len(negative_pool)
    if wanted:
        picks = rng.choice(len(negative_pool), size=wanted, replace=False)
        chosen.extend(negative_pool[i] for i in sorted(picks.tolist()))

    instances = [pool.instance(e, candidates) for e in chosen]
    positives = len(candidates.relations) * config.shots
    logger.info(
        "support.sampled",
        relations=len(candidates.relations),
        shots=config.shots,
        positives=positives,
        negatives=len(instances) - positives,
        seed=config.seed,
    )
    return SupportSet(instances, positives, len(instances) - positives)


# training


def seeded_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for initialization and for batch order."""
    init, order = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), np.random.default_rng(order)


def new_model(
    candidates: CandidateSet,
    table: TokenEmbeddingTable,
    raw_dim: int,
    config: TrainConfig,
    vrk: Optional[RelationEncoder] = None,
) -> FusionModel:
    init_rng, _ = seeded_streams(config.seed)
    return FusionModel.initialize(
        candidates,
        table,
        raw_dim,
        config,
        init_rng,
        vrk=vrk if config.use_vrk else None,
        context=ContextEncoder.identity(table.dim),
    )


class TrainingResult(NamedTuple):
    model: FusionModel
    loss_curve: List[float]
    accuracy: float


def training_accuracy(model: FusionModel, instances: Sequence[RelationInstance]) -> float:
    inputs = instance_inputs(instances)
    predicted = np.argmax(model.predict_proba(inputs), axis=1)
    return float(np.mean(predicted == inputs.gold))


def train(model: FusionModel, support: SupportSet, config: Optional[TrainConfig] = None) -> TrainingResult:
    config = config or model.config
    instances = support.instances
    if not instances:
        raise ConfigurationError("cannot train on an empty support set")

    _, order_rng = seeded_streams(config.seed)
    optimizer = make_optimizer(config.optimizer, model.trainable_parameters(), config.learning_rate)
    loss_curve: List[float] = []
    for epoch in range(config.epochs):
        order = order_rng.permutation(len(instances))
        for start in range(0, len(order), config.batch_size):
            batch = instance_inputs([instances[i] for i in order[start : start + config.batch_size]])
            loss, grads = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in model.trainable_parameters().items()}
                raise TrainingDivergedError(
                    f"training loss diverged at epoch {epoch}", config.learning_rate, len(loss_curve), norms
                )
            optimizer.step(grads)
            loss_curve.append(loss)
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            logger.debug("trainer.epoch", epoch=epoch, loss=loss_curve[-1])

    accuracy = training_accuracy(model, instances)
    logger.info("trainer.done", steps=len(loss_curve), loss=loss_curve[-1], accuracy=accuracy)
    return TrainingResult(model, loss_curve, accuracy)


def write_loss_curve(path: Path, loss_curve: Sequence[float]) -> None:
    frame = pd.DataFrame({"step": np.arange(len(loss_curve)), "loss": np.asarray(loss_curve, dtype=np.float64)})
    frame.to_csv(path, index=False, float_format="%.17g")


def read_loss_curve(path: Path) -> List[float]:
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != ["step", "loss"]:
        raise ConfigurationError(f"{path}: expected columns step,loss")
    return frame["loss"].astype(float).tolist()


# checkpoints


def save_checkpoint(
    path: Path, model: FusionModel, support: Optional[SupportSet] = None, extra: Optional[dict] = None
) -> None:
    """Model checkpoint; the seen sets of the support travel with it for evaluation."""
    payload = dict(extra or {})
    if support is not None:
        payload.update(SeenSets.from_support(support.instances, model.candidates).to_dict())
    save_model(path, model, extra=payload)


def load_checkpoint(path: Path) -> Tuple[FusionModel, SeenSets, dict]:
    model, extra = load_model(path)
    return model, SeenSets.from_dict(extra), extra
