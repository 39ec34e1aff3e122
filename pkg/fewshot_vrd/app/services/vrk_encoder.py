# app/services/vrk_encoder.py
"""Visual relation knowledge encoder.

A masked query ``subject [MASK] object`` is answered by a small mask network
whose output ``m`` is dotted with averaged output embeddings of each candidate
relation. The encoder is fitted by reconstructing the relation of every
knowledge-graph edge from its masked query.
"""
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core import checkpoint
from app.core.config import ReconstructionConfig
from app.core.errors import CheckpointError, ConfigurationError, ContractViolation, TrainingDivergedError
from app.models.schemas import NO_RELATION, SamplingMode
from app.services.caption_parser import tokenize
from app.services.optim import Adam
from app.services.relation_kg import KGEdge, VisualRelationKG
from app.services.text_knowledge import predicate_words

logger = structlog.get_logger(__name__)

MAGIC = b"KFVVRK1"
NOREL_TOKEN = "[NOREL]"
UNK_TOKEN = "[UNK]"
PARAMETER_NAMES = ("E_in", "W1", "b1", "W2", "b2", "E_out")


class MaskedQuery(NamedTuple):
    subject_tokens: Tuple[str, ...]
    object_tokens: Tuple[str, ...]

    @classmethod
    def of(cls, subject_class: str, object_class: str) -> "MaskedQuery":
        query = cls(tuple(tokenize(predicate_words(subject_class))), tuple(tokenize(predicate_words(object_class))))
        if not query.subject_tokens or not query.object_tokens:
            raise ContractViolation(f"empty masked query for ({subject_class!r}, {object_class!r})")
        return query


def edge_to_sentence(edge: KGEdge) -> List[str]:
    return (
        tokenize(predicate_words(edge.subject))
        + tokenize(predicate_words(edge.relation))
        + tokenize(predicate_words(edge.object))
    )


def relation_tokens(predicate: str) -> List[str]:
    if predicate == NO_RELATION:
        return [NOREL_TOKEN]
    tokens = tokenize(predicate_words(predicate))
    if not tokens:
        raise ContractViolation(f"predicate {predicate!r} has no tokens")
    return tokens


def encoder_vocabulary(graph: VisualRelationKG, candidates: Iterable[str] = ()) -> List[str]:
    words = set()
    for name in graph.nodes:
        words.update(tokenize(predicate_words(name)))
    for name in list(graph.relations) + [c for c in candidates if c != NO_RELATION]:
        words.update(relation_tokens(name))
    return sorted(words) + [NOREL_TOKEN, UNK_TOKEN]


class _EdgeBatch(NamedTuple):
    subject_weights: np.ndarray  # B x V
    object_weights: np.ndarray  # B x V
    relation_weights: np.ndarray  # R x V
    targets: np.ndarray  # B


class _PriorCache(NamedTuple):
    subject_weights: np.ndarray
    object_weights: np.ndarray
    candidate_weights: np.ndarray
    x: np.ndarray
    h: np.ndarray
    m: np.ndarray
    rel: np.ndarray


class RelationEncoder:
    def __init__(self, vocabulary: Sequence[str], params: Dict[str, np.ndarray]):
        if len(set(vocabulary)) != len(vocabulary) or UNK_TOKEN not in vocabulary or NOREL_TOKEN not in vocabulary:
            raise ConfigurationError("encoder vocabulary must be unique and hold the reserved tokens")
        missing = set(PARAMETER_NAMES) - set(params)
        if missing:
            raise ConfigurationError(f"encoder parameters missing: {sorted(missing)}")
        self.vocabulary: Tuple[str, ...] = tuple(vocabulary)
        self.index = {t: i for i, t in enumerate(self.vocabulary)}
        self.params = {k: np.array(params[k], dtype=np.float64) for k in PARAMETER_NAMES}
        v = len(self.vocabulary)
        p = self.params
        if p["E_in"].shape[0] != v or p["E_out"].shape[0] != v:
            raise ConfigurationError("embedding tables do not match the vocabulary")
        if p["W1"].shape[1] != 2 * p["E_in"].shape[1] or p["W2"].shape != (p["E_out"].shape[1], p["W1"].shape[0]):
            raise ConfigurationError("mask network shapes disagree")

    @classmethod
    def initialize(
        cls, vocabulary: Sequence[str], config: ReconstructionConfig, rng: np.random.Generator
    ) -> "RelationEncoder":
        v, d_in, d_h, d_k = len(vocabulary), config.input_dim, config.hidden_dim, config.mask_dim
        params = {
            "E_in": rng.normal(0.0, 1.0, (v, d_in)),
            "W1": rng.normal(0.0, 1.0 / np.sqrt(2 * d_in), (d_h, 2 * d_in)),
            "b1": np.zeros(d_h),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(d_h), (d_k, d_h)),
            "b2": np.zeros(d_k),
            "E_out": rng.normal(0.0, 1.0 / np.sqrt(d_k), (v, d_k)),
        }
        return cls(vocabulary, params)

    @property
    def mask_dim(self) -> int:
        return int(self.params["E_out"].shape[1])

    def parameters(self) -> Dict[str, np.ndarray]:
        return self.params

    def token_ids(self, tokens: Iterable[str]) -> List[int]:
        unk = self.index[UNK_TOKEN]
        return [self.index.get(t, unk) for t in tokens]

    def _weights(self, token_lists: Sequence[Sequence[str]]) -> np.ndarray:
        weights = np.zeros((len(token_lists), len(self.vocabulary)))
        for row, tokens in enumerate(token_lists):
            ids = self.token_ids(tokens)
            np.add.at(weights[row], ids, 1.0 / len(ids))
        return weights

    def query_weights(self, pairs: Sequence[Tuple[str, str]]) -> Tuple[np.ndarray, np.ndarray]:
        queries = [MaskedQuery.of(s, o) for s, o in pairs]
        return self._weights([q.subject_tokens for q in queries]), self._weights([q.object_tokens for q in queries])

    def candidate_weights(self, predicates: Sequence[str]) -> np.ndarray:
        return self._weights([relation_tokens(p) for p in predicates])

    def _mask_features(self, subject_weights: np.ndarray, object_weights: np.ndarray):
        p = self.params
        x = np.concatenate([subject_weights @ p["E_in"], object_weights @ p["E_in"]], axis=1)
        h = np.tanh(x @ p["W1"].T + p["b1"])
        m = h @ p["W2"].T + p["b2"]
        return x, h, m

    def encode_mask(self, query: MaskedQuery) -> np.ndarray:
        _, _, m = self._mask_features(self._weights([query.subject_tokens]), self._weights([query.object_tokens]))
        return m[0]

    def relation_embeddings(self, predicates: Sequence[str]) -> np.ndarray:
        return self.candidate_weights(predicates) @ self.params["E_out"]

    def relation_embedding(self, predicate: str) -> np.ndarray:
        return self.relation_embeddings([predicate])[0]

    def prior_scores(self, subject_class: str, object_class: str, candidates: Sequence[str]) -> np.ndarray:
        if not candidates:
            raise ContractViolation("prior scores need at least one candidate")
        m = self.encode_mask(MaskedQuery.of(subject_class, object_class))
        return self.relation_embeddings(candidates) @ m

    def prior_forward(
        self, subject_weights: np.ndarray, object_weights: np.ndarray, candidate_weights: np.ndarray
    ) -> Tuple[np.ndarray, _PriorCache]:
        """Scores of every candidate for every query row, with the values backward needs."""
        x, h, m = self._mask_features(subject_weights, object_weights)
        rel = candidate_weights @ self.params["E_out"]
        return m @ rel.T, _PriorCache(subject_weights, object_weights, candidate_weights, x, h, m, rel)

    def prior_backward(self, grad_scores: np.ndarray, cache: _PriorCache) -> Dict[str, np.ndarray]:
        p = self.params
        d_m = grad_scores @ cache.rel
        d_rel = grad_scores.T @ cache.m
        d_z = (d_m @ p["W2"]) * (1.0 - cache.h**2)
        d_x = d_z @ p["W1"]
        d_in = cache.x.shape[1] // 2
        return {
            "E_in": cache.subject_weights.T @ d_x[:, :d_in] + cache.object_weights.T @ d_x[:, d_in:],
            "W1": d_z.T @ cache.x,
            "b1": d_z.sum(axis=0),
            "W2": d_m.T @ cache.h,
            "b2": d_m.sum(axis=0),
            "E_out": cache.candidate_weights.T @ d_rel,
        }

    def prior_matrix(self, pairs: Sequence[Tuple[str, str]], candidates: Sequence[str]) -> np.ndarray:
        """Prior scores for many class pairs at once, one row per pair."""
        subject_weights, object_weights = self.query_weights(pairs)
        scores, _ = self.prior_forward(subject_weights, object_weights, self.candidate_weights(candidates))
        return scores

    # reconstruction objective

    def edge_batch(self, edges: Sequence[KGEdge], relations: Sequence[str]) -> _EdgeBatch:
        position = {r: i for i, r in enumerate(relations)}
        subject_weights, object_weights = self.query_weights([(e.subject, e.object) for e in edges])
        return _EdgeBatch(
            subject_weights=subject_weights,
            object_weights=object_weights,
            relation_weights=self.candidate_weights(relations),
            targets=np.array([position[e.relation] for e in edges], dtype=np.int64),
        )

    def reconstruction_logits(self, batch: _EdgeBatch) -> np.ndarray:
        logits, _ = self.prior_forward(batch.subject_weights, batch.object_weights, batch.relation_weights)
        return logits

    def reconstruction_loss(self, batch: _EdgeBatch) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean softmax cross-entropy over the batch and its exact gradients."""
        logits, cache = self.prior_forward(batch.subject_weights, batch.object_weights, batch.relation_weights)
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        n = len(batch.targets)
        rows = np.arange(n)
        loss = float(-np.log(probs[rows, batch.targets]).mean())

        d_logits = probs
        d_logits[rows, batch.targets] -= 1.0
        d_logits /= n
        return loss, self.prior_backward(d_logits, cache)

    # persistence

    def state(self) -> Tuple[dict, Dict[str, np.ndarray]]:
        return {"vocabulary": list(self.vocabulary)}, dict(self.params)

    @classmethod
    def from_state(cls, metadata: dict, arrays: Dict[str, np.ndarray]) -> "RelationEncoder":
        try:
            return cls(metadata["vocabulary"], arrays)
        except (KeyError, ConfigurationError) as exc:
            raise CheckpointError(f"invalid relation encoder state: {exc}") from exc


class ReconstructionResult(NamedTuple):
    encoder: RelationEncoder
    accuracy: float
    loss_curve: List[float]


def reconstruction_accuracy(encoder: RelationEncoder, graph: VisualRelationKG) -> float:
    edges = graph.edges
    if not edges:
        return float("nan")
    relations = sorted(graph.relations)
    batch = encoder.edge_batch(edges, relations)
    predicted = np.argmax(encoder.reconstruction_logits(batch), axis=1)
    return float(np.mean(predicted == batch.targets))


def train_reconstruction(
    graph: VisualRelationKG,
    config: ReconstructionConfig,
    candidates: Sequence[str] = (),
    encoder: Optional[RelationEncoder] = None,
) -> ReconstructionResult:
    edges = graph.edges
    if not edges:
        raise ConfigurationError("cannot train the relation encoder on an empty knowledge graph")

    rng = np.random.default_rng(config.seed)
    if encoder is None:
        encoder = RelationEncoder.initialize(encoder_vocabulary(graph, candidates), config, rng)
    relations = sorted(graph.relations)
    counts = np.array([e.count for e in edges], dtype=np.float64)
    weights = counts / counts.sum()
    optimizer = Adam(encoder.parameters(), lr=config.learning_rate)

    full = encoder.edge_batch(edges, relations)
    loss_curve: List[float] = []
    for epoch in range(config.epochs):
        if config.sampling is SamplingMode.COUNT_WEIGHTED:
            order = rng.choice(len(edges), size=len(edges), p=weights)
        else:
            order = rng.permutation(len(edges))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = _EdgeBatch(full.subject_weights[idx], full.object_weights[idx], full.relation_weights, full.targets[idx])
            loss, grads = encoder.reconstruction_loss(batch)
            if not np.isfinite(loss):
                norms = {k: float(np.linalg.norm(v)) for k, v in encoder.parameters().items()}
                raise TrainingDivergedError(
                    f"reconstruction loss diverged at epoch {epoch}", config.learning_rate, start // config.batch_size, norms
                )
            optimizer.step(grads)
            epoch_loss += loss * len(idx)
        loss_curve.append(epoch_loss / len(order))
        if epoch % 50 == 0 or epoch == config.epochs - 1:
            logger.debug("vrk.epoch", epoch=epoch, loss=loss_curve[-1])

    accuracy = reconstruction_accuracy(encoder, graph)
    logger.info("vrk.trained", edges=len(edges), relations=len(relations), accuracy=accuracy, loss=loss_curve[-1])
    return ReconstructionResult(encoder, accuracy, loss_curve)


def save_encoder(path: Path, encoder: RelationEncoder) -> None:
    metadata, arrays = encoder.state()
    checkpoint.write(path, MAGIC, metadata, arrays)


def load_encoder(path: Path) -> RelationEncoder:
    metadata, arrays = checkpoint.read(path, MAGIC)
    return RelationEncoder.from_state(metadata, arrays)
