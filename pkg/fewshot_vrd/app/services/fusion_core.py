# app/services/fusion_core.py
"""Classification head for ordered object pairs.

For a pair (o_i, o_j) the head computes

* v_ij = W_v [o_i; box_i; o_j; box_j] + b_v
* s_t[k] = cos(v_ij, p_k), p_k the predicate representation of candidate k
* s_v = prior scores of the relation knowledge encoder
* s = softmax(W_f [s_v; s_t] + b_f), or softmax(W_g s_t + b_g) without the prior

and the exact gradients of the cross-entropy loss for every trainable tensor.
"""
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog

from app.core import checkpoint
from app.core.config import TrainConfig
from app.core.errors import CheckpointError, ContractViolation
from app.models.schemas import NO_RELATION, MetricPolarity, ObjectDescriptor, RelationInstance
from app.services.text_knowledge import (
    ContextEncoder,
    PromptBatch,
    PromptTemplate,
    TokenEmbeddingTable,
    build_prompt_batch,
    get_template,
    render_prompt,
    static_raw,
)
from app.services.vrk_encoder import RelationEncoder

logger = structlog.get_logger(__name__)

MAGIC = b"KFVFUS1"
PROBABILITY_FLOOR = 1e-12
HEAD_PARAMETERS = ("W_v", "b_v", "W_p", "b_p", "W_f", "b_f", "W_g", "b_g")
CONTEXT_PARAMETERS = ("U_x", "U_l", "U_r", "c_ctx")
VRK_PREFIX = "vrk."


class CandidateSet:
    """Candidate predicates with no-relation fixed at index 0."""

    def __init__(self, predicates: Sequence[str]):
        predicates = [p for p in predicates if p != NO_RELATION]
        if len(set(predicates)) != len(predicates):
            raise ContractViolation("candidate predicates repeat")
        self.predicates: Tuple[str, ...] = (NO_RELATION, *predicates)
        self.index: Dict[str, int] = {p: i for i, p in enumerate(self.predicates)}

    def __len__(self) -> int:
        return len(self.predicates)

    def __iter__(self):
        return iter(self.predicates)

    def __contains__(self, predicate: object) -> bool:
        return predicate in self.index

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CandidateSet) and self.predicates == other.predicates

    def position(self, predicate: str) -> int:
        try:
            return self.index[predicate]
        except KeyError:
            raise ContractViolation(f"predicate {predicate!r} is not a candidate") from None

    @property
    def relations(self) -> Tuple[str, ...]:
        return self.predicates[1:]


class ScoreVector(NamedTuple):
    s_t: np.ndarray
    s_v: np.ndarray
    s: np.ndarray


# single-pair operations


def encode_pair(o_i: ObjectDescriptor, o_j: ObjectDescriptor, W_v: np.ndarray, b_v: np.ndarray) -> np.ndarray:
    x = np.concatenate([o_i.augmented, o_j.augmented])
    if x.shape[0] != W_v.shape[1]:
        raise ContractViolation(f"pair input has width {x.shape[0]}, W_v expects {W_v.shape[1]}")
    return W_v @ x + b_v


def metric_scores(
    v_ij: np.ndarray, reps: np.ndarray, polarity: MetricPolarity = MetricPolarity.SIMILARITY
) -> np.ndarray:
    reps = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    if reps.shape[1] != v_ij.shape[0]:
        raise ContractViolation(f"predicate representations have width {reps.shape[1]}, pair feature {v_ij.shape[0]}")
    cos, _ = _cosine(v_ij[None, :], reps[None, :, :])
    return _apply_polarity(cos[0], polarity)


def fuse(s_v: np.ndarray, s_t: np.ndarray, W_f: np.ndarray, b_f: np.ndarray) -> np.ndarray:
    if s_v.shape != s_t.shape:
        raise ContractViolation(f"prior scores {s_v.shape} and metric scores {s_t.shape} differ in length")
    if W_f.shape != (s_t.shape[-1], 2 * s_t.shape[-1]):
        raise ContractViolation(f"W_f has shape {W_f.shape}, expected {(s_t.shape[-1], 2 * s_t.shape[-1])}")
    return softmax(np.concatenate([s_v, s_t], axis=-1) @ W_f.T + b_f)


def fuse_textual_only(s_t: np.ndarray, W_g: np.ndarray, b_g: np.ndarray) -> np.ndarray:
    return softmax(s_t @ W_g.T + b_g)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def loss(s: np.ndarray, gold: int) -> float:
    p = float(s[gold])
    if p < PROBABILITY_FLOOR:
        logger.warning("fusion.loss_clamped", gold=gold, probability=p, floor=PROBABILITY_FLOOR)
        p = PROBABILITY_FLOOR
    return -float(np.log(p))


def predict(s: np.ndarray) -> int:
    return int(np.argmax(s))


def _apply_polarity(cos: np.ndarray, polarity: MetricPolarity) -> np.ndarray:
    return cos if polarity is MetricPolarity.SIMILARITY else 1.0 - cos


def _cosine(V: np.ndarray, P: np.ndarray) -> Tuple[np.ndarray, dict]:
    """Cosine of V[b] with each P[b, k]; zero-norm operands score 0."""
    v_norm = np.linalg.norm(V, axis=1)
    p_norm = np.linalg.norm(P, axis=2)
    denom = v_norm[:, None] * p_norm
    valid = denom > 0.0
    inv = np.where(valid, 1.0 / np.where(valid, denom, 1.0), 0.0)
    cos = np.einsum("bh,bkh->bk", V, P) * inv
    if not valid.all():
        logger.warning("fusion.zero_norm", scores=int((~valid).sum()))
    return cos, {"inv": inv, "v_norm": v_norm, "p_norm": p_norm}


def _cosine_backward(d_cos: np.ndarray, V: np.ndarray, P: np.ndarray, cos: np.ndarray, aux: dict):
    inv = aux["inv"]
    v_sq = np.where(aux["v_norm"] > 0, aux["v_norm"] ** 2, 1.0)
    p_sq = np.where(aux["p_norm"] > 0, aux["p_norm"] ** 2, 1.0)
    scaled = d_cos * inv
    d_V = np.einsum("bk,bkh->bh", scaled, P) - (d_cos * cos).sum(axis=1)[:, None] * V / v_sq[:, None]
    d_P = scaled[..., None] * V[:, None, :] - (d_cos * cos / p_sq)[..., None] * P
    return d_V, d_P


# batched model


class PairInputs(NamedTuple):
    features: np.ndarray  # B x 2(D_v + 4)
    pairs: List[Tuple[str, str]]  # distinct (subject class, object class)
    pair_index: np.ndarray  # B, row into pairs
    gold: Optional[np.ndarray] = None


def build_inputs(
    object_pairs: Sequence[Tuple[ObjectDescriptor, ObjectDescriptor]], gold: Optional[Sequence[int]] = None
) -> PairInputs:
    pairs: List[Tuple[str, str]] = []
    position: Dict[Tuple[str, str], int] = {}
    index = np.zeros(len(object_pairs), dtype=np.int64)
    rows = []
    for b, (o_i, o_j) in enumerate(object_pairs):
        key = (o_i.class_tag, o_j.class_tag)
        if key not in position:
            position[key] = len(pairs)
            pairs.append(key)
        index[b] = position[key]
        rows.append(np.concatenate([o_i.augmented, o_j.augmented]))
    width = rows[0].shape[0] if rows else 0
    features = np.stack(rows) if rows else np.zeros((0, width))
    return PairInputs(features, pairs, index, None if gold is None else np.asarray(gold, dtype=np.int64))


def instance_inputs(instances: Sequence[RelationInstance]) -> PairInputs:
    return build_inputs([(r.subject, r.object) for r in instances], [r.predicate_index for r in instances])


class _Forward(NamedTuple):
    inputs: PairInputs
    V: np.ndarray
    P: np.ndarray  # U x n x H (contextual) or n x H (static)
    P_rows: np.ndarray  # B x n x H
    cos: np.ndarray
    cos_aux: dict
    s_t: np.ndarray
    s_v: np.ndarray
    logits: np.ndarray
    probs: np.ndarray
    text: Optional[tuple]
    prior: Optional[tuple]


class FusionModel:
    def __init__(
        self,
        candidates: CandidateSet,
        table: TokenEmbeddingTable,
        context: ContextEncoder,
        params: Dict[str, np.ndarray],
        config: TrainConfig,
        vrk: Optional[RelationEncoder] = None,
    ):
        if config.use_vrk and vrk is None:
            raise ContractViolation("the prior branch is enabled but no relation encoder was given")
        if context.dim != table.dim:
            raise ContractViolation("context encoder and token table widths differ")
        self.candidates = candidates
        self.table = table
        self.context = context
        self.vrk = vrk
        self.config = config
        self.template: PromptTemplate = get_template(config.template)
        self.params = {k: np.array(params[k], dtype=np.float64) for k in HEAD_PARAMETERS}
        self._prior_cache: Dict[Tuple[str, str], np.ndarray] = {}
        self._prompt_cache: Dict[Tuple[str, str], PromptBatch] = {}
        self._static_raw = np.stack([static_raw(p, table) for p in candidates])
        self._check_shapes()

    @classmethod
    def initialize(
        cls,
        candidates: CandidateSet,
        table: TokenEmbeddingTable,
        raw_dim: int,
        config: TrainConfig,
        rng: np.random.Generator,
        vrk: Optional[RelationEncoder] = None,
        context: Optional[ContextEncoder] = None,
    ) -> "FusionModel":
        n, h, d_t = len(candidates), config.hidden_dim, table.dim
        fan_in = 2 * (raw_dim + 4)
        gain = config.fusion_metric_scale * (1.0 if config.metric_polarity is MetricPolarity.SIMILARITY else -1.0)
        params = {
            "W_v": rng.normal(0.0, 1.0 / np.sqrt(fan_in), (h, fan_in)),
            "b_v": np.zeros(h),
            "W_p": rng.normal(0.0, 1.0 / np.sqrt(d_t), (h, d_t)),
            "b_p": np.zeros(h),
            "W_f": np.hstack([np.eye(n), gain * np.eye(n)]),
            "b_f": np.zeros(n),
            "W_g": gain * np.eye(n),
            "b_g": np.zeros(n),
        }
        return cls(candidates, table, context or ContextEncoder.identity(d_t), params, config, vrk)

    def _check_shapes(self) -> None:
        n, p = len(self.candidates), self.params
        h = p["W_v"].shape[0]
        expected = {
            "b_v": (h,),
            "W_p": (h, self.table.dim),
            "b_p": (h,),
            "W_f": (n, 2 * n),
            "b_f": (n,),
            "W_g": (n, n),
            "b_g": (n,),
        }
        for name, shape in expected.items():
            if p[name].shape != shape:
                raise ContractViolation(f"{name} has shape {p[name].shape}, expected {shape}")

    @property
    def raw_dim(self) -> int:
        return self.params["W_v"].shape[1] // 2 - 4

    @property
    def hidden_dim(self) -> int:
        return self.params["W_v"].shape[0]

    def parameters(self) -> Dict[str, np.ndarray]:
        named = dict(self.params)
        named.update(self.context.parameters())
        return named

    def trainable_parameters(self) -> Dict[str, np.ndarray]:
        names = ["W_v", "b_v", "W_p", "b_p"]
        names += ["W_f", "b_f"] if self.config.use_vrk else ["W_g", "b_g"]
        active = {k: self.params[k] for k in names}
        if self.config.use_textual and self.config.train_context_encoder:
            active.update(self.context.parameters())
        if self.config.use_vrk and not self.config.freeze_vrk and self.vrk is not None:
            active.update({VRK_PREFIX + k: v for k, v in self.vrk.parameters().items()})
        return active

    # forward

    def _pair_prompts(self, pair: Tuple[str, str]) -> PromptBatch:
        cached = self._prompt_cache.get(pair)
        if cached is None:
            s, o = pair
            cached = build_prompt_batch(self.table, [render_prompt(self.template, s, o, c) for c in self.candidates])
            self._prompt_cache[pair] = cached
        return cached

    def _prompt_batch(self, pairs: Sequence[Tuple[str, str]]) -> PromptBatch:
        """Candidate prompts of every pair, pair-major, padded to one length."""
        parts = [self._pair_prompts(pair) for pair in pairs]
        n = len(self.candidates)
        longest = max(part.inputs.shape[1] for part in parts)
        inputs = np.zeros((len(parts) * n, longest, self.table.dim))
        mask = np.zeros((len(parts) * n, longest))
        weights = np.zeros_like(mask)
        for u, part in enumerate(parts):
            rows, width = slice(u * n, (u + 1) * n), part.inputs.shape[1]
            inputs[rows, :width] = part.inputs
            mask[rows, :width] = part.mask
            weights[rows, :width] = part.span_weights
        return PromptBatch(inputs, mask, weights)

    def _predicate_representations(self, pairs: Sequence[Tuple[str, str]]):
        p = self.params
        if not self.config.use_textual:
            return self._static_raw @ p["W_p"].T + p["b_p"], None
        n = len(self.candidates)
        batch = self._prompt_batch(pairs)
        outputs, ctx_cache = self.context.forward_batch(batch.inputs, batch.mask)
        raw = np.einsum("bl,bld->bd", batch.span_weights, outputs)
        reps = (raw @ p["W_p"].T + p["b_p"]).reshape(len(pairs), n, -1)
        return reps, (batch, ctx_cache, raw)

    def _prior_scores(self, pairs: Sequence[Tuple[str, str]]):
        n = len(self.candidates)
        if not self.config.use_vrk or self.vrk is None:
            return np.zeros((len(pairs), n)), None
        if self.config.freeze_vrk:
            missing = [pair for pair in pairs if pair not in self._prior_cache]
            if missing:
                for pair, row in zip(missing, self.vrk.prior_matrix(missing, self.candidates.predicates)):
                    self._prior_cache[pair] = row
            return np.stack([self._prior_cache[pair] for pair in pairs]), None
        subject_weights, object_weights = self.vrk.query_weights(pairs)
        scores, cache = self.vrk.prior_forward(
            subject_weights, object_weights, self.vrk.candidate_weights(self.candidates.predicates)
        )
        return scores, cache

    def clear_prior_cache(self) -> None:
        self._prior_cache.clear()

    def _forward(self, inputs: PairInputs) -> _Forward:
        p = self.params
        if inputs.features.shape[1] != p["W_v"].shape[1]:
            raise ContractViolation(f"pair input has width {inputs.features.shape[1]}, W_v expects {p['W_v'].shape[1]}")
        V = inputs.features @ p["W_v"].T + p["b_v"]
        P, text = self._predicate_representations(inputs.pairs)
        P_rows = P[inputs.pair_index] if text is not None else np.broadcast_to(P, (len(V),) + P.shape)
        cos, aux = _cosine(V, P_rows)
        s_t = _apply_polarity(cos, self.config.metric_polarity)
        pair_prior, prior = self._prior_scores(inputs.pairs)
        s_v = pair_prior[inputs.pair_index]
        if self.config.use_vrk:
            logits = np.concatenate([s_v, s_t], axis=1) @ p["W_f"].T + p["b_f"]
        else:
            logits = s_t @ p["W_g"].T + p["b_g"]
        return _Forward(inputs, V, P, P_rows, cos, aux, s_t, s_v, logits, softmax(logits), text, prior)

    def scores(self, inputs: PairInputs) -> ScoreVector:
        fwd = self._forward(inputs)
        return ScoreVector(fwd.s_t, fwd.s_v, fwd.probs)

    def predict_proba(self, inputs: PairInputs) -> np.ndarray:
        return self._forward(inputs).probs

    # loss and backward

    def loss_and_grads(self, inputs: PairInputs) -> Tuple[float, Dict[str, np.ndarray]]:
        """Mean cross-entropy over the batch and exact gradients of the trainable tensors."""
        if inputs.gold is None:
            raise ContractViolation("training inputs carry no gold predicates")
        fwd = self._forward(inputs)
        p = self.params
        b = len(inputs.gold)
        rows = np.arange(b)
        value = _mean_nll(fwd.logits, inputs.gold)

        d_logits = fwd.probs.copy()
        d_logits[rows, inputs.gold] -= 1.0
        d_logits /= b

        grads: Dict[str, np.ndarray] = {}
        n = len(self.candidates)
        if self.config.use_vrk:
            fused_in = np.concatenate([fwd.s_v, fwd.s_t], axis=1)
            grads["W_f"] = d_logits.T @ fused_in
            grads["b_f"] = d_logits.sum(axis=0)
            d_s_v = d_logits @ p["W_f"][:, :n]
            d_s_t = d_logits @ p["W_f"][:, n:]
        else:
            grads["W_g"] = d_logits.T @ fwd.s_t
            grads["b_g"] = d_logits.sum(axis=0)
            d_s_v = None
            d_s_t = d_logits @ p["W_g"]

        d_cos = d_s_t if self.config.metric_polarity is MetricPolarity.SIMILARITY else -d_s_t
        d_V, d_P_rows = _cosine_backward(d_cos, fwd.V, fwd.P_rows, fwd.cos, fwd.cos_aux)
        grads["W_v"] = d_V.T @ inputs.features
        grads["b_v"] = d_V.sum(axis=0)

        if fwd.text is None:
            d_P = d_P_rows.sum(axis=0)
            grads["W_p"] = d_P.T @ self._static_raw
            grads["b_p"] = d_P.sum(axis=0)
        else:
            batch, ctx_cache, raw = fwd.text
            d_P = np.zeros_like(fwd.P)
            np.add.at(d_P, inputs.pair_index, d_P_rows)
            d_P = d_P.reshape(-1, d_P.shape[-1])
            grads["W_p"] = d_P.T @ raw
            grads["b_p"] = d_P.sum(axis=0)
            if self.config.train_context_encoder:
                d_raw = d_P @ p["W_p"]
                d_outputs = batch.span_weights[..., None] * d_raw[:, None, :]
                grads.update(self.context.backward_batch(d_outputs, ctx_cache))

        if fwd.prior is not None and d_s_v is not None:
            d_pair_prior = np.zeros((len(inputs.pairs), n))
            np.add.at(d_pair_prior, inputs.pair_index, d_s_v)
            vrk_grads = self.vrk.prior_backward(d_pair_prior, fwd.prior)
            grads.update({VRK_PREFIX + k: v for k, v in vrk_grads.items()})
        return value, grads

    def loss(self, inputs: PairInputs) -> float:
        if inputs.gold is None:
            raise ContractViolation("training inputs carry no gold predicates")
        return _mean_nll(self._forward(inputs).logits, inputs.gold)


def _mean_nll(logits: np.ndarray, gold: np.ndarray) -> float:
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(gold)), gold].mean())


def _config_metadata(config: TrainConfig) -> dict:
    return config.model_dump(mode="json")


def save_model(path: Path, model: FusionModel, extra: Optional[dict] = None) -> None:
    """Write the head, the token table, the context encoder and the knowledge encoder to one file."""
    arrays: Dict[str, np.ndarray] = dict(model.params)
    arrays.update(model.context.parameters())
    arrays["table"] = model.table.vectors
    metadata = {
        "dims": {
            "D_v": model.raw_dim,
            "H": model.hidden_dim,
            "D_t": model.table.dim,
            "D_k": model.vrk.mask_dim if model.vrk is not None else 0,
            "n": len(model.candidates),
        },
        "candidates": list(model.candidates.predicates),
        "config": _config_metadata(model.config),
        "table_tokens": list(model.table.tokens),
        "vrk": None,
        "extra": extra or {},
    }
    if model.vrk is not None:
        vrk_meta, vrk_arrays = model.vrk.state()
        metadata["vrk"] = vrk_meta
        arrays.update({VRK_PREFIX + k: v for k, v in vrk_arrays.items()})
    checkpoint.write(path, MAGIC, metadata, arrays)


def load_model(path: Path) -> Tuple[FusionModel, dict]:
    metadata, arrays = checkpoint.read(path, MAGIC)
    try:
        config = TrainConfig(**metadata["config"])
        candidates = CandidateSet(metadata["candidates"])
        if tuple(metadata["candidates"]) != candidates.predicates:
            raise CheckpointError("candidate map is not in canonical order")
        table = TokenEmbeddingTable(metadata["table_tokens"], arrays["table"])
        context = ContextEncoder(*(arrays[name] for name in CONTEXT_PARAMETERS))
        vrk = None
        if metadata.get("vrk") is not None:
            vrk = RelationEncoder.from_state(
                metadata["vrk"],
                {k[len(VRK_PREFIX):]: v for k, v in arrays.items() if k.startswith(VRK_PREFIX)},
            )
        model = FusionModel(candidates, table, context, arrays, config, vrk)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid fusion checkpoint {path}: {exc}") from exc
    return model, metadata.get("extra", {})
