# app/services/relation_kg.py
"""Visual relation knowledge graph built from caption triplets.

Edges are counted (subject, relation, object) triples. Graphs are immutable;
every filter returns a new graph.
"""
import re
from collections import Counter
from pathlib import Path
from types import MappingProxyType
from typing import Dict, FrozenSet, Iterable, List, Mapping, NamedTuple, Optional, Set, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.errors import ConfigurationError, GraphParseError
from app.models.schemas import ExtractedTriplet, NodeMode, RelationMode

logger = structlog.get_logger(__name__)

EdgeKey = Tuple[str, str, str]
NODE_PREFIX = "#node\t"
_DIGITS_RE = re.compile(r"[0-9]+")


class KGEdge(NamedTuple):
    subject: str
    relation: str
    object: str
    count: int


class GraphStats(NamedTuple):
    nodes: int
    relations: int
    edges: int
    total_count: int


class FilterSpec(BaseModel):
    """Node and relation filter regime for one knowledge graph variant."""

    model_config = ConfigDict(frozen=True)

    node_mode: NodeMode = NodeMode.ALL
    relation_mode: RelationMode = RelationMode.ALL
    top_k: Optional[int] = Field(None, ge=1)
    anchors: FrozenSet[str] = frozenset()

    @model_validator(mode="after")
    def modes_have_arguments(self) -> "FilterSpec":
        if self.node_mode in (NodeMode.ZERO_HOP, NodeMode.ONE_HOP) and not self.anchors:
            raise ValueError(f"{self.node_mode.value} filtering needs anchor classes")
        if self.relation_mode is RelationMode.TOP_K and self.top_k is None:
            raise ValueError("top-k relation filtering needs k")
        return self


class VisualRelationKG:
    def __init__(self, counts: Mapping[EdgeKey, int], nodes: Optional[Iterable[str]] = None):
        for key, count in counts.items():
            if count < 1:
                raise ValueError(f"edge {key} has count {count}")
        endpoints = {n for s, _, o in counts for n in (s, o)}
        extra = set(nodes) if nodes is not None else set()
        self._counts: Mapping[EdgeKey, int] = MappingProxyType(dict(counts))
        self._nodes = frozenset(endpoints | extra)
        self._relations = frozenset(r for _, r, _ in counts)

    @property
    def nodes(self) -> FrozenSet[str]:
        return self._nodes

    @property
    def relations(self) -> FrozenSet[str]:
        return self._relations

    @property
    def counts(self) -> Mapping[EdgeKey, int]:
        return self._counts

    @property
    def edges(self) -> List[KGEdge]:
        return [KGEdge(s, r, o, self._counts[(s, r, o)]) for s, r, o in sorted(self._counts)]

    def __len__(self) -> int:
        return len(self._counts)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VisualRelationKG):
            return NotImplemented
        return self._nodes == other._nodes and dict(self._counts) == dict(other._counts)

    def __hash__(self) -> int:
        return hash((self._nodes, frozenset(self._counts.items())))

    def __repr__(self) -> str:
        return f"VisualRelationKG(nodes={len(self._nodes)}, relations={len(self._relations)}, edges={len(self._counts)})"


def build_graph(triplets: Iterable[ExtractedTriplet]) -> VisualRelationKG:
    counts = Counter(t.key() for t in triplets)
    graph = VisualRelationKG(counts)
    logger.debug("kg.built", **graph_stats(graph)._asdict())
    return graph


def merge_graphs(first: VisualRelationKG, second: VisualRelationKG) -> VisualRelationKG:
    counts: Counter = Counter(first.counts)
    counts.update(second.counts)
    return VisualRelationKG(counts, nodes=first.nodes | second.nodes)


def filter_nodes(graph: VisualRelationKG, spec: FilterSpec) -> VisualRelationKG:
    if spec.node_mode is NodeMode.ALL:
        return graph
    keep: Set[str] = set(graph.nodes & spec.anchors)
    if spec.node_mode is NodeMode.ONE_HOP:
        core = frozenset(keep)
        for s, _, o in graph.counts:
            if s in core:
                keep.add(o)
            if o in core:
                keep.add(s)
    counts = {k: c for k, c in graph.counts.items() if k[0] in keep and k[2] in keep}
    return VisualRelationKG(counts, nodes=keep)


def relation_totals(graph: VisualRelationKG) -> Dict[str, int]:
    totals: Counter = Counter()
    for (_, r, _), count in graph.counts.items():
        totals[r] += count
    return dict(totals)


def filter_relations(graph: VisualRelationKG, spec: FilterSpec) -> VisualRelationKG:
    if spec.relation_mode is RelationMode.ALL:
        return graph
    assert spec.top_k is not None
    ranked = sorted(relation_totals(graph).items(), key=lambda item: (-item[1], item[0]))
    kept = {r for r, _ in ranked[: spec.top_k]}
    # isolated nodes are dropped: nodes re-derived from the surviving edges
    return VisualRelationKG({k: c for k, c in graph.counts.items() if k[1] in kept})


def apply_filters(graph: VisualRelationKG, spec: FilterSpec) -> VisualRelationKG:
    filtered = filter_relations(filter_nodes(graph, spec), spec)
    logger.info(
        "kg.filtered",
        node_mode=spec.node_mode.value,
        relation_mode=spec.relation_mode.value,
        top_k=spec.top_k,
        **graph_stats(filtered)._asdict(),
    )
    return filtered


def graph_stats(graph: VisualRelationKG) -> GraphStats:
    return GraphStats(
        nodes=len(graph.nodes),
        relations=len(graph.relations),
        edges=len(graph.counts),
        total_count=sum(graph.counts.values()),
    )


def serialize(graph: VisualRelationKG) -> bytes:
    endpoints = {n for s, _, o in graph.counts for n in (s, o)}
    lines = [f"{NODE_PREFIX}{name}\n" for name in sorted(graph.nodes - endpoints)]
    lines.extend(f"{e.subject}\t{e.relation}\t{e.object}\t{e.count}\n" for e in graph.edges)
    return "".join(lines).encode("utf-8")


def deserialize(payload: bytes) -> VisualRelationKG:
    counts: Dict[EdgeKey, int] = {}
    nodes: Set[str] = set()
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise GraphParseError(f"invalid UTF-8 at byte {exc.start}", payload.count(b"\n", 0, exc.start) + 1) from None
    for number, raw in enumerate(text.splitlines(), start=1):
        if raw.startswith(NODE_PREFIX):
            name = raw[len(NODE_PREFIX):]
            if not name:
                raise GraphParseError("empty node name", number)
            nodes.add(name)
            continue
        if raw.startswith("#") or not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 4:
            raise GraphParseError(f"expected 4 fields, got {len(fields)}", number)
        subject, relation, obj, count_text = fields
        if not (subject and relation and obj):
            raise GraphParseError("empty subject, relation or object", number)
        if not _DIGITS_RE.fullmatch(count_text) or int(count_text) < 1:
            raise GraphParseError(f"count {count_text!r} is not a positive integer", number)
        key = (subject, relation, obj)
        if key in counts:
            raise GraphParseError(f"duplicate edge {subject}-{relation}-{obj}", number)
        counts[key] = int(count_text)
    return VisualRelationKG(counts, nodes=nodes)


def write_graph(path: Path, graph: VisualRelationKG) -> None:
    Path(path).write_bytes(serialize(graph))


def read_graph(path: Path) -> VisualRelationKG:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"graph file not found: {path}")
    return deserialize(path.read_bytes())


def read_anchor_classes(path: Path) -> FrozenSet[str]:
    """One class name per line; blank lines and '#' comments skipped."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"anchor class file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    return frozenset(line.strip() for line in lines if line.strip() and not line.startswith("#"))


def filter_spec(node_mode: str, relations: str = "all", anchors: Iterable[str] = ()) -> FilterSpec:
    """Filter regime from its command-line spelling: ``0hop|1hop|all`` and ``all|top:<k>``."""
    try:
        mode = NodeMode(node_mode)
    except ValueError:
        raise ConfigurationError(f"unknown node mode {node_mode!r}; expected 0hop, 1hop or all") from None
    values: dict = {"node_mode": mode, "anchors": frozenset(anchors)}
    if relations != RelationMode.ALL.value:
        prefix, _, k = relations.partition(":")
        if prefix != RelationMode.TOP_K.value or not _DIGITS_RE.fullmatch(k):
            raise ConfigurationError(f"relation regime must be 'all' or 'top:<k>', got {relations!r}")
        values.update(relation_mode=RelationMode.TOP_K, top_k=int(k))
    try:
        return FilterSpec(**values)
    except ValueError as exc:
        raise ConfigurationError(f"invalid knowledge graph filter: {exc}") from exc
