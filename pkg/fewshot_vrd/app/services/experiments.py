# app/services/experiments.py
"""In-memory pipeline runs: caption knowledge, one few-shot episode, and
multi-seed ablations over the synthetic benchmark."""
import math
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence

import pandas as pd
import structlog

from app.core.config import EpisodeConfig, ReconstructionConfig, SyntheticSpec, TrainConfig
from app.core.errors import ConfigurationError
from app.models.schemas import Caption, DatasetRecord, TemplateName
from app.services.caption_parser import Lexicon, parse_corpus
from app.services.eval_metrics import REPORT_KS, SeenSets, build_report, ground_truth, rank_dataset
from app.services.fewshot_trainer import InstancePool, SupportSet, benchmark_relations, new_model, sample_support, train
from app.services.fusion_core import CandidateSet, FusionModel
from app.services.relation_kg import FilterSpec, VisualRelationKG, apply_filters, build_graph, filter_spec
from app.services.synthetic import generate_synthetic
from app.services.text_knowledge import TokenEmbeddingTable
from app.services.vrk_encoder import RelationEncoder, train_reconstruction

logger = structlog.get_logger(__name__)


class Knowledge(NamedTuple):
    graph: VisualRelationKG
    encoder: RelationEncoder
    accuracy: float


def build_knowledge(
    captions: Sequence[Caption],
    lexicon: Lexicon,
    spec: FilterSpec,
    config: ReconstructionConfig,
    candidates: Iterable[str] = (),
    n_jobs: int = 1,
) -> Knowledge:
    graph = apply_filters(build_graph(parse_corpus(captions, lexicon, n_jobs)), spec)
    result = train_reconstruction(graph, config, list(candidates))
    return Knowledge(graph, result.encoder, result.accuracy)


class EpisodeOutcome(NamedTuple):
    model: FusionModel
    support: SupportSet
    seen: SeenSets
    loss_curve: List[float]
    report: dict


def evaluate_model(
    model: FusionModel,
    seen: SeenSets,
    records: Sequence[DatasetRecord],
    graph_constraint: bool = False,
    ks: Sequence[int] = REPORT_KS,
    config: Optional[dict] = None,
) -> dict:
    """Rank every test pair and build the recall report over the model's relations."""
    relations = model.candidates.relations
    rankings = rank_dataset(model, records, graph_constraint)
    return build_report(rankings, ground_truth(records, relations), seen, ks=ks, predicates=relations, config=config)


def run_episode(
    train_records: Sequence[DatasetRecord],
    test_records: Sequence[DatasetRecord],
    table: TokenEmbeddingTable,
    episode: EpisodeConfig,
    train_config: TrainConfig,
    vrk: Optional[RelationEncoder] = None,
    graph_constraint: bool = False,
    ks: Sequence[int] = REPORT_KS,
) -> EpisodeOutcome:
    if train_config.use_vrk and vrk is None:
        raise ConfigurationError("the knowledge prior needs a trained relation encoder (or disable it)")
    if not train_records:
        raise ConfigurationError("training split is empty")
    candidates = CandidateSet(benchmark_relations(episode))
    support = sample_support(InstancePool(train_records), episode, candidates)
    raw_dim = len(train_records[0].features[0])
    model = new_model(candidates, table, raw_dim, train_config, vrk)
    result = train(model, support, train_config)
    seen = SeenSets.from_support(support.instances, candidates)
    report = evaluate_model(result.model, seen, test_records, graph_constraint, ks)
    return EpisodeOutcome(result.model, support, seen, result.loss_curve, report)


# ablations


class Variant(NamedTuple):
    """One ablation arm: training switches plus the knowledge-graph regime feeding the prior."""

    name: str
    overrides: Dict[str, object]
    node_mode: str = "all"
    relations: str = "all"


VARIANTS = {
    "full": Variant("full", {}),
    "no_vrk": Variant("no_vrk", {"use_vrk": False}),
    "no_textual": Variant("no_textual", {"use_textual": False}),
    "no_vrk_no_textual": Variant("no_vrk_no_textual", {"use_vrk": False, "use_textual": False}),
    "cloze": Variant("cloze", {"template": TemplateName.CLOZE}),
    "t5": Variant("t5", {"template": TemplateName.T5_STYLE}),
    "kg_0hop": Variant("kg_0hop", {}, node_mode="0hop"),
    "kg_1hop": Variant("kg_1hop", {}, node_mode="1hop"),
    "kg_top5": Variant("kg_top5", {}, relations="top:5"),
}

RECALL_COLUMNS = {
    "R": ("recall",),
    "mR": ("mean_recall",),
    "psR": ("seen", "pair"),
    "puR": ("unseen", "pair"),
    "tsR": ("seen", "triplet"),
    "tuR": ("unseen", "triplet"),
}


def report_row(report: dict, k: int) -> Dict[str, float]:
    row = {}
    for label, path in RECALL_COLUMNS.items():
        node = report
        for part in path:
            node = node[part]
        value = node.get(str(k))
        row[label] = math.nan if value is None else float(value)
    return row


def run_ablation(
    spec: SyntheticSpec,
    seeds: Sequence[int],
    variants: Sequence[Variant],
    lexicon: Lexicon,
    train_config: TrainConfig,
    recon_config: ReconstructionConfig,
    shots: int = 5,
    ks: Sequence[int] = (20,),
) -> pd.DataFrame:
    """Per-seed recall of every variant at every cut-off in ``ks``.

    Each seed draws its own benchmark and support set; one trained model is
    scored at all cut-offs, so the frame has one row per (seed, variant, k).
    """
    ks = sorted(set(ks))
    if not ks or ks[0] < 1:
        raise ConfigurationError(f"recall cut-offs must be positive, got {ks}")
    rows = []
    for seed in seeds:
        bench = generate_synthetic(spec.model_copy(update={"seed": seed}))
        relations = bench.world.relations
        episode = EpisodeConfig(benchmark="custom", relations=relations, shots=shots, seed=seed)
        knowledge: Dict[tuple, Knowledge] = {}
        for variant in variants:
            regime = (variant.node_mode, variant.relations)
            config = train_config.model_copy(update={**variant.overrides, "seed": seed})
            vrk = None
            if config.use_vrk:
                if regime not in knowledge:
                    kg_filter = filter_spec(variant.node_mode, variant.relations, bench.world.classes)
                    knowledge[regime] = build_knowledge(
                        bench.captions, lexicon, kg_filter, recon_config.model_copy(update={"seed": seed}), relations
                    )
                vrk = knowledge[regime].encoder
            outcome = run_episode(bench.train, bench.test, bench.table, episode, config, vrk, ks=ks)
            for k in ks:
                row = {"seed": seed, "variant": variant.name, "k": k, **report_row(outcome.report, k)}
                logger.info("ablation.run", **row)
                rows.append(row)
    return pd.DataFrame(rows, columns=["seed", "variant", "k"] + list(RECALL_COLUMNS))


def summarize(frame: pd.DataFrame, k: Optional[int] = None) -> pd.DataFrame:
    """Mean recall per variant at one cut-off, in first-run order, as percentages.

    ``k`` may be omitted when the frame holds a single cut-off.
    """
    available = sorted(int(v) for v in frame["k"].unique())
    if k is None:
        if len(available) != 1:
            raise ConfigurationError(f"frame holds cut-offs {available}; pick one")
        k = available[0]
    if k not in available:
        raise ConfigurationError(f"no rows at k={k}; frame holds {available}")
    at_k = frame[frame["k"] == k]
    means = at_k.groupby("variant", sort=False)[list(RECALL_COLUMNS)].mean()
    return means * 100.0


def margins(summary: pd.DataFrame, baseline: str = "full") -> pd.DataFrame:
    """How far each variant falls behind the baseline arm (positive: the baseline wins)."""
    if baseline not in summary.index:
        raise ConfigurationError(f"baseline variant {baseline!r} was not run")
    return summary.rsub(summary.loc[baseline], axis=1)
