# app/services/text_knowledge.py
"""Prompt-conditioned predicate representations.

A candidate predicate is placed in a prompt template together with the
subject and object classes, the prompt is embedded with a frozen token table
and mixed by a shallow trainable context encoder, and the predicate span is
averaged and projected to the pair-feature width.
"""
import re
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import ConfigurationError, ContractViolation
from app.models.schemas import NO_RELATION, TemplateName
from app.services.caption_parser import tokenize

logger = structlog.get_logger(__name__)

UNK_TOKEN = "<unk>"
SLOTS = ("<S>", "<P>", "<O>")
_SLOT_RE = re.compile(r"(<S>|<P>|<O>)")


class PromptTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: TemplateName
    pattern: str

    @model_validator(mode="after")
    def each_slot_once(self) -> "PromptTemplate":
        for slot in SLOTS:
            if self.pattern.count(slot) != 1:
                raise ValueError(f"template {self.name.value} must contain {slot} exactly once")
        return self


TEMPLATES: Dict[TemplateName, PromptTemplate] = {
    TemplateName.CLOZE: PromptTemplate(name=TemplateName.CLOZE, pattern="The relationship between <S> and <O> is <P>"),
    TemplateName.T5_STYLE: PromptTemplate(name=TemplateName.T5_STYLE, pattern="<S> and <O> are <P>."),
    TemplateName.TRIPLET: PromptTemplate(name=TemplateName.TRIPLET, pattern="<S> is <P> <O>"),
}


def get_template(name: TemplateName) -> PromptTemplate:
    return TEMPLATES[TemplateName(name)]


def predicate_words(predicate: str) -> str:
    if predicate == NO_RELATION:
        return "no relation"
    return predicate.replace("_", " ")


class FilledPrompt(NamedTuple):
    text: str
    tokens: List[str]
    span: Tuple[int, int]  # predicate tokens, end exclusive


def render_prompt(template: PromptTemplate, subject_class: str, object_class: str, predicate: str) -> FilledPrompt:
    if not (subject_class and object_class and predicate):
        raise ContractViolation("template inputs must be non-empty")
    values = {"<S>": subject_class, "<O>": object_class, "<P>": predicate_words(predicate)}
    text_parts: List[str] = []
    tokens: List[str] = []
    span = (0, 0)
    for piece in _SLOT_RE.split(template.pattern):
        if piece in values:
            value = values[piece]
            if piece == "<P>":
                start = len(tokens)
                tokens.extend(tokenize(value))
                span = (start, len(tokens))
            else:
                tokens.extend(tokenize(value))
            text_parts.append(value)
        else:
            tokens.extend(tokenize(piece))
            text_parts.append(piece)
    return FilledPrompt(text="".join(text_parts), tokens=tokens, span=span)


def fill_template(template: PromptTemplate, subject_class: str, object_class: str, predicate: str) -> str:
    return render_prompt(template, subject_class, object_class, predicate).text


class TokenEmbeddingTable:
    """Frozen word vectors. Unknown tokens map to the ``<unk>`` row, or zeros without one."""

    def __init__(self, tokens: Sequence[str], vectors: np.ndarray):
        vectors = np.array(vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(tokens):
            raise ConfigurationError(f"embedding table has {len(tokens)} tokens but vectors of shape {vectors.shape}")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("embedding table repeats a token")
        vectors.setflags(write=False)
        self.tokens: Tuple[str, ...] = tuple(tokens)
        self.vectors = vectors
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        self.dim = int(vectors.shape[1])
        unk = self.index.get(UNK_TOKEN)
        self._fallback = vectors[unk] if unk is not None else np.zeros(self.dim)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: object) -> bool:
        return token in self.index

    def vector(self, token: str) -> np.ndarray:
        row = self.index.get(token)
        return self.vectors[row] if row is not None else self._fallback

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        if not tokens:
            return np.zeros((0, self.dim))
        return np.stack([self.vector(t) for t in tokens])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TokenEmbeddingTable):
            return NotImplemented
        return self.tokens == other.tokens and np.array_equal(self.vectors, other.vectors)


def load_embedding_table(path: Path) -> TokenEmbeddingTable:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"embedding table not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("D_t="):
        raise ConfigurationError(f"{path}:1: expected header 'D_t=<int>'")
    try:
        dim = int(lines[0][len("D_t="):])
    except ValueError:
        raise ConfigurationError(f"{path}:1: bad dimension {lines[0]!r}") from None
    if dim < 1:
        raise ConfigurationError(f"{path}:1: dimension must be positive")

    tokens: List[str] = []
    rows: List[List[float]] = []
    for number, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        token, sep, values = raw.partition("\t")
        if not sep:
            raise ConfigurationError(f"{path}:{number}: expected token<TAB>values")
        try:
            row = [float(v) for v in values.split(",")]
        except ValueError:
            raise ConfigurationError(f"{path}:{number}: non-numeric vector") from None
        if len(row) != dim:
            raise ConfigurationError(f"{path}:{number}: vector has {len(row)} values, expected {dim}")
        tokens.append(token)
        rows.append(row)
    logger.info("embeddings.loaded", path=str(path), tokens=len(tokens), dim=dim)
    return TokenEmbeddingTable(tokens, np.array(rows, dtype=np.float64).reshape(len(rows), dim))


def write_embedding_table(path: Path, table: TokenEmbeddingTable) -> None:
    lines = [f"D_t={table.dim}"]
    lines.extend(f"{t}\t{','.join(repr(float(v)) for v in table.vectors[i])}" for i, t in enumerate(table.tokens))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class PromptBatch(NamedTuple):
    """Prompts embedded and right-padded for one vectorized pass."""

    inputs: np.ndarray  # B x L x D_t
    mask: np.ndarray  # B x L
    span_weights: np.ndarray  # B x L, 1/|span| on the predicate span


def build_prompt_batch(table: TokenEmbeddingTable, prompts: Sequence[FilledPrompt]) -> PromptBatch:
    longest = max((len(p.tokens) for p in prompts), default=0)
    inputs = np.zeros((len(prompts), longest, table.dim))
    mask = np.zeros((len(prompts), longest))
    weights = np.zeros((len(prompts), longest))
    for b, prompt in enumerate(prompts):
        n = len(prompt.tokens)
        start, end = prompt.span
        if end <= start:
            raise ContractViolation(f"empty predicate span in prompt {prompt.text!r}")
        inputs[b, :n] = table.lookup(prompt.tokens)
        mask[b, :n] = 1.0
        weights[b, start:end] = 1.0 / (end - start)
    return PromptBatch(inputs, mask, weights)


class _ContextCache(NamedTuple):
    inputs: np.ndarray
    left: np.ndarray
    right: np.ndarray
    activation: np.ndarray
    mask: np.ndarray


class ContextEncoder:
    """y_i = x_i + tanh(U_x x_i + U_l l_i + U_r r_i + c).

    l_i and r_i are the means of the tokens strictly left and right of i
    (zero at the ends). The U_x term lets the shift a token receives from
    its neighbours depend on the token itself, so two predicates in the same
    prompt move differently. Zero parameters give the identity map.
    """

    def __init__(self, U_x: np.ndarray, U_l: np.ndarray, U_r: np.ndarray, c: np.ndarray):
        self.U_x = np.array(U_x, dtype=np.float64)
        self.U_l = np.array(U_l, dtype=np.float64)
        self.U_r = np.array(U_r, dtype=np.float64)
        self.c = np.array(c, dtype=np.float64)
        d = self.c.shape[0]
        if any(U.shape != (d, d) for U in (self.U_x, self.U_l, self.U_r)):
            raise ConfigurationError("context encoder shapes disagree")
        self.dim = d

    @classmethod
    def identity(cls, dim: int) -> "ContextEncoder":
        return cls(np.zeros((dim, dim)), np.zeros((dim, dim)), np.zeros((dim, dim)), np.zeros(dim))

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, scale: float = 0.5) -> "ContextEncoder":
        std = scale / np.sqrt(dim)
        U_x, U_l, U_r = (rng.normal(0, std, (dim, dim)) for _ in range(3))
        return cls(U_x, U_l, U_r, rng.normal(0, std, dim))

    def parameters(self) -> Dict[str, np.ndarray]:
        return {"U_x": self.U_x, "U_l": self.U_l, "U_r": self.U_r, "c_ctx": self.c}

    def forward_batch(self, inputs: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, _ContextCache]:
        m = mask[..., None]
        masked = inputs * m
        inclusive = np.cumsum(masked, axis=1)
        counts = np.cumsum(mask, axis=1)
        left_sum = inclusive - masked
        right_sum = inclusive[:, -1:, :] - inclusive
        left_n = counts - mask
        right_n = counts[:, -1:] - counts
        left = left_sum / np.maximum(left_n, 1.0)[..., None]
        right = right_sum / np.maximum(right_n, 1.0)[..., None]
        activation = np.tanh(masked @ self.U_x.T + left @ self.U_l.T + right @ self.U_r.T + self.c)
        outputs = (inputs + activation) * m
        return outputs, _ContextCache(masked, left, right, activation, mask)

    def backward_batch(self, grad_outputs: np.ndarray, cache: _ContextCache) -> Dict[str, np.ndarray]:
        grad_pre = grad_outputs * cache.mask[..., None] * (1.0 - cache.activation**2)
        return {
            "U_x": np.einsum("bld,ble->de", grad_pre, cache.inputs),
            "U_l": np.einsum("bld,ble->de", grad_pre, cache.left),
            "U_r": np.einsum("bld,ble->de", grad_pre, cache.right),
            "c_ctx": grad_pre.sum(axis=(0, 1)),
        }

    def encode(self, vectors: np.ndarray) -> np.ndarray:
        vectors = np.asarray(vectors, dtype=np.float64)
        outputs, _ = self.forward_batch(vectors[None], np.ones((1, vectors.shape[0])))
        return outputs[0]


def encode_prompt(encoder: ContextEncoder, table: TokenEmbeddingTable, prompt: str) -> np.ndarray:
    tokens = tokenize(prompt)
    if not tokens:
        raise ContractViolation("prompt has no tokens")
    return encoder.encode(table.lookup(tokens))


def predicate_repr(contextual: np.ndarray, span: Tuple[int, int]) -> np.ndarray:
    start, end = span
    if not (0 <= start < end <= len(contextual)):
        raise ContractViolation(f"predicate span {span} is empty or outside {len(contextual)} tokens")
    return np.asarray(contextual[start:end]).mean(axis=0)


def project(raw: np.ndarray, W_p: np.ndarray, b_p: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != W_p.shape[1]:
        raise ContractViolation(f"raw predicate vector has width {raw.shape[-1]}, projection expects {W_p.shape[1]}")
    return raw @ W_p.T + b_p


def static_raw(predicate: str, table: TokenEmbeddingTable) -> np.ndarray:
    tokens = tokenize(predicate_words(predicate))
    if not tokens:
        raise ContractViolation(f"predicate {predicate!r} has no tokens")
    return table.lookup(tokens).mean(axis=0)


def static_repr(predicate: str, table: TokenEmbeddingTable, W_p: np.ndarray, b_p: np.ndarray) -> np.ndarray:
    """Average of frozen word vectors for the predicate words, projected."""
    return project(static_raw(predicate, table), W_p, b_p)


def contextual_repr(
    encoder: ContextEncoder,
    table: TokenEmbeddingTable,
    template: PromptTemplate,
    subject_class: str,
    object_class: str,
    predicate: str,
    W_p: np.ndarray,
    b_p: np.ndarray,
) -> np.ndarray:
    prompt = render_prompt(template, subject_class, object_class, predicate)
    contextual = encoder.encode(table.lookup(prompt.tokens))
    return project(predicate_repr(contextual, prompt.span), W_p, b_p)


def template_vocabulary(words: Iterable[str], templates: Optional[Iterable[PromptTemplate]] = None) -> List[str]:
    """Every token that prompts over ``words`` can produce, in first-seen order."""
    seen: Dict[str, None] = {}
    for template in templates or TEMPLATES.values():
        for piece in _SLOT_RE.split(template.pattern):
            if piece not in SLOTS:
                seen.update(dict.fromkeys(tokenize(piece)))
    for word in words:
        seen.update(dict.fromkeys(tokenize(predicate_words(word))))
    return list(seen)
