# app/services/synthetic.py
"""Compositional relation benchmark for desk-scale experiments.

Classes are split into groups and a group-by-group rule table fixes the
relation of every ordered class pair. A share of the class pairs is held out
of the training split, so the test split carries pairs no training image
shows. The generator also produces the caption corpus and the word vectors
that would otherwise come from external resources: captions describe every
class pair, and class-name vectors cluster by group.
"""
import json
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core.config import SyntheticSpec, settings
from app.core.errors import ConfigurationError
from app.models.schemas import NO_RELATION, Caption, DatasetRecord, ObjectEntry, RelationEntry
from app.services.corpus_io import write_captions, write_dataset, write_name_list
from app.services.text_knowledge import UNK_TOKEN, TokenEmbeddingTable, template_vocabulary, write_embedding_table

logger = structlog.get_logger(__name__)

ClassPair = Tuple[str, str]

# horizontal share of a slot taken by the subject and object boxes of a labeled pair
_SUBJECT_SPAN = (0.05, 0.5)
_OBJECT_SPAN = (0.4, 0.95)
_BOX_JITTER = 0.03


def load_vocabulary(path: Optional[Path] = None) -> Tuple[List[str], List[str]]:
    """Class and relation names, in file order."""
    path = Path(path) if path is not None else settings.vocabulary_path
    if not path.exists():
        raise ConfigurationError(f"vocabulary file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
        return list(data["classes"]), list(data["relations"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: expected {{'classes': [...], 'relations': [...]}}") from exc


class SyntheticWorld(NamedTuple):
    classes: List[str]
    relations: List[str]
    groups: Dict[str, int]
    rule_table: np.ndarray
    centers: np.ndarray
    seen_pairs: List[ClassPair]
    unseen_pairs: List[ClassPair]
    distractors: List[str]

    def relation_of(self, subject_class: str, object_class: str) -> str:
        return self.relations[int(self.rule_table[self.groups[subject_class], self.groups[object_class]])]

    def partition(self) -> dict:
        return {
            "classes": self.classes,
            "relations": self.relations,
            "groups": {c: self.groups[c] for c in self.classes},
            "rule_table": [[self.relations[int(r)] for r in row] for row in self.rule_table],
            "seen_pairs": [list(p) for p in self.seen_pairs],
            "unseen_pairs": [list(p) for p in self.unseen_pairs],
            "distractors": self.distractors,
        }


class SyntheticBenchmark(NamedTuple):
    world: SyntheticWorld
    train: List[DatasetRecord]
    test: List[DatasetRecord]
    captions: List[Caption]
    table: TokenEmbeddingTable


def ordered_class_pairs(classes: Sequence[str]) -> List[ClassPair]:
    return [(a, b) for a in classes for b in classes if a != b]


def holdout_size(n_pairs: int, fraction: float) -> int:
    return int(round(fraction * n_pairs))


def check_rule_table(table: Sequence[Sequence[int]], num_groups: int, num_relations: int) -> np.ndarray:
    if len(table) != num_groups or any(len(row) != num_groups for row in table):
        raise ConfigurationError(f"rule table must cover all {num_groups}x{num_groups} group pairs")
    array = np.asarray(table)
    if not np.issubdtype(array.dtype, np.integer) or array.min() < 0 or array.max() >= num_relations:
        raise ConfigurationError(f"rule table entries must be relation indices in [0, {num_relations})")
    return array.astype(np.int64)


def _random_rule_table(num_groups: int, num_relations: int, rng: np.random.Generator) -> np.ndarray:
    cells = num_groups * num_groups
    if cells < num_relations:
        raise ConfigurationError(f"{num_groups} class groups give {cells} rule cells for {num_relations} relations")
    # every relation owns at least one cell
    return rng.permutation(np.arange(cells) % num_relations).reshape(num_groups, num_groups)


def build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    all_classes, all_relations = load_vocabulary()
    if spec.num_classes + spec.distractor_classes > len(all_classes) or spec.num_relations > len(all_relations):
        raise ConfigurationError(
            f"vocabulary holds {len(all_classes)} classes and {len(all_relations)} relations, "
            f"asked for {spec.num_classes} (+{spec.distractor_classes} distractors) and {spec.num_relations}"
        )
    classes = all_classes[: spec.num_classes]
    distractors = all_classes[spec.num_classes : spec.num_classes + spec.distractor_classes]
    relations = all_relations[: spec.num_relations]

    assignment = rng.permutation(np.arange(spec.num_classes) % spec.num_groups)
    groups = {c: int(g) for c, g in zip(classes, assignment)}
    if spec.rule_table is not None:
        rule_table = check_rule_table(spec.rule_table, spec.num_groups, spec.num_relations)
    else:
        rule_table = _random_rule_table(spec.num_groups, spec.num_relations, rng)
    centers = rng.normal(size=(spec.num_classes, spec.feature_dim))

    pairs = ordered_class_pairs(classes)
    held = set(rng.choice(len(pairs), size=holdout_size(len(pairs), spec.holdout_fraction), replace=False).tolist())
    seen = [p for i, p in enumerate(pairs) if i not in held]
    unseen = [p for i, p in enumerate(pairs) if i in held]
    return SyntheticWorld(classes, relations, groups, rule_table, centers, seen, unseen, distractors)


def _jittered(rng: np.random.Generator, left: float, width: float, span: Tuple[float, float], top: float, bottom: float):
    j = rng.uniform(-_BOX_JITTER, _BOX_JITTER, size=4)
    return (
        left + width * (span[0] + j[0]),
        top + j[1],
        left + width * (span[1] + j[2]),
        bottom + j[3],
    )


def make_image(
    image_id: str,
    world: SyntheticWorld,
    allowed: Sequence[ClassPair],
    spec: SyntheticSpec,
    rng: np.random.Generator,
) -> DatasetRecord:
    """One image: labeled pairs sit side by side, subject left of and overlapping its object;
    the remaining objects line the bottom edge and stay unlabeled."""
    placed: List[Tuple[str, Tuple[float, float, float, float]]] = []
    labeled: List[Tuple[int, int]] = []
    used = set()
    width = 1.0 / spec.relations_per_image
    for slot in range(spec.relations_per_image):
        options = [p for p in allowed if p[0] not in used and p[1] not in used]
        if not options:
            raise ConfigurationError(f"{image_id}: no class pair left to place with distinct classes")
        subject_class, object_class = options[int(rng.integers(len(options)))]
        used.update((subject_class, object_class))
        left = slot * width
        placed.append((subject_class, _jittered(rng, left, width, _SUBJECT_SPAN, 0.3, 0.7)))
        placed.append((object_class, _jittered(rng, left, width, _OBJECT_SPAN, 0.35, 0.75)))
        labeled.append((len(placed) - 2, len(placed) - 1))

    remaining = [c for c in world.classes if c not in used]
    extra = spec.objects_per_image - len(placed)
    for k, pick in enumerate(sorted(rng.choice(len(remaining), size=extra, replace=False).tolist())):
        placed.append((remaining[pick], ((k + 0.1) / extra, 0.82, (k + 0.9) / extra, 0.98)))

    order = rng.permutation(len(placed))
    position = {int(old): new for new, old in enumerate(order)}
    objects, features = [], []
    for new, old in enumerate(order):
        class_tag, box = placed[int(old)]
        center = world.centers[world.classes.index(class_tag)]
        objects.append(ObjectEntry(box=box, class_tag=class_tag, feature=f"{image_id}/{new}"))
        features.append(center + spec.noise * rng.normal(size=spec.feature_dim))
    relations = [
        RelationEntry(
            subject=position[s],
            predicate=world.relation_of(placed[s][0], placed[o][0]),
            object=position[o],
        )
        for s, o in labeled
    ]
    return DatasetRecord(image_id=image_id, objects=objects, relations=relations, features=features)


def article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def caption_text(subject_class: str, relation: str, object_class: str) -> str:
    """A caption whose parse is exactly ``(subject_class, relation, object_class)``."""
    return f"{article(subject_class)} {subject_class} {relation.replace('_', ' ')} {article(object_class)} {object_class}"


def make_captions(world: SyntheticWorld, spec: SyntheticSpec, rng: np.random.Generator) -> List[Caption]:
    captions: List[Caption] = []
    for subject_class, object_class in ordered_class_pairs(world.classes):
        covered = rng.random() < spec.caption_coverage
        for _ in range(spec.captions_per_pair):
            relation = world.relation_of(subject_class, object_class)
            if rng.random() < spec.caption_noise:
                relation = world.relations[int(rng.integers(len(world.relations)))]
            if covered:
                text = caption_text(subject_class, relation, object_class)
                captions.append(Caption(id=f"syn{len(captions):05d}", text=text))

    # distractors relate to benchmark classes (one hop out) and to each other (two hops)
    for subject_class, object_class in ordered_class_pairs(world.classes + world.distractors):
        if subject_class not in world.distractors and object_class not in world.distractors:
            continue
        relation = world.relations[int(rng.integers(len(world.relations)))]
        for _ in range(spec.captions_per_pair):
            text = caption_text(subject_class, relation, object_class)
            captions.append(Caption(id=f"syn{len(captions):05d}", text=text))
    return captions


def make_word_vectors(world: SyntheticWorld, spec: SyntheticSpec, rng: np.random.Generator) -> TokenEmbeddingTable:
    """Class-name vectors scatter around one center per group; other tokens are independent."""
    words = template_vocabulary(world.relations + [NO_RELATION])
    words = [w for w in words if w not in world.groups] + [UNK_TOKEN]
    group_centers = rng.normal(size=(spec.num_groups, spec.word_dim))
    class_vectors = np.stack(
        [group_centers[world.groups[c]] + spec.word_noise * rng.normal(size=spec.word_dim) for c in world.classes]
    )
    other_vectors = rng.normal(size=(len(words), spec.word_dim))
    return TokenEmbeddingTable(world.classes + words, np.vstack([class_vectors, other_vectors]))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticBenchmark:
    rng = np.random.default_rng(spec.seed)
    world = build_world(spec, rng)
    all_pairs = world.seen_pairs + world.unseen_pairs
    train = [make_image(f"train{i:05d}", world, world.seen_pairs, spec, rng) for i in range(spec.train_images)]
    test = [make_image(f"test{i:05d}", world, all_pairs, spec, rng) for i in range(spec.test_images)]
    captions = make_captions(world, spec, rng)
    table = make_word_vectors(world, spec, rng)
    logger.info(
        "synthetic.generated",
        classes=len(world.classes),
        relations=len(world.relations),
        seen_pairs=len(world.seen_pairs),
        unseen_pairs=len(world.unseen_pairs),
        train=len(train),
        test=len(test),
        captions=len(captions),
        seed=spec.seed,
    )
    return SyntheticBenchmark(world, train, test, captions, table)


BENCHMARK_FILES = {
    "train": "train.jsonl",
    "test": "test.jsonl",
    "captions": "captions.jsonl",
    "embeddings": "embeddings.txt",
    "relations": "relations.txt",
    "classes": "classes.txt",
    "partition": "partition.json",
}


def write_benchmark(out_dir: Path, benchmark: SyntheticBenchmark) -> Dict[str, Path]:
    """Write every artifact under ``out_dir``; returns the paths by role."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {role: out_dir / name for role, name in BENCHMARK_FILES.items()}
    write_dataset(paths["train"], benchmark.train)
    write_dataset(paths["test"], benchmark.test)
    write_captions(paths["captions"], benchmark.captions)
    write_embedding_table(paths["embeddings"], benchmark.table)
    write_name_list(paths["relations"], benchmark.world.relations)
    write_name_list(paths["classes"], benchmark.world.classes)
    paths["partition"].write_text(
        json.dumps(benchmark.world.partition(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return paths


def read_partition(path: Path) -> Tuple[List[ClassPair], List[ClassPair]]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"partition file not found: {path}")
    data = json.loads(path.read_text(encoding="utf-8"))
    return [tuple(p) for p in data["seen_pairs"]], [tuple(p) for p in data["unseen_pairs"]]
