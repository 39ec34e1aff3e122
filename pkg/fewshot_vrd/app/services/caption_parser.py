# app/services/caption_parser.py
"""Rule-based subject-predicate-object extraction from caption text.

Tokens are tagged from a bundled lexicon with suffix fallbacks, grouped into
chunks (noun phrases, verb groups, prepositions, relative pronouns) and
matched left to right against three patterns:

* NP ADP NP                     prepositional relation, ``dog-on-sofa``
* NP (REL) VG NP                relative or participial attachment
* NP ... VG NP                  verbal relation, auxiliaries kept: ``is_eating``
"""
import re
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import structlog
from joblib import Parallel, delayed
from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigurationError
from app.models.schemas import Caption, ExtractedTriplet, Tag, TaggedToken

logger = structlog.get_logger(__name__)

_TOKEN_RE = re.compile(r"[^\W_]+")
RELATIVE_PRONOUNS = frozenset({"who", "that", "which"})

NP, VG, ADP, REL, BLOCK = "NP", "VG", "ADP", "REL", "BLOCK"


class Lexicon:
    """word -> Tag map. Treated as immutable once loaded."""

    def __init__(self, entries: Dict[str, Tag], source: Optional[Path] = None):
        self._entries = dict(entries)
        self.source = source

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, word: object) -> bool:
        return word in self._entries

    def get(self, word: str) -> Optional[Tag]:
        return self._entries.get(word)

    def is_noun(self, word: str) -> bool:
        return self._entries.get(word) is Tag.NOUN


def load_lexicon(path: Optional[Path] = None) -> Lexicon:
    """Load a ``word<TAB>TAG`` lexicon (UTF-8, ``#`` comments allowed)."""
    path = Path(path) if path is not None else settings.lexicon_path
    if not path.exists():
        raise ConfigurationError(f"lexicon file not found: {path}")

    entries: Dict[str, Tag] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ConfigurationError(f"{path}:{number}: expected word<TAB>TAG")
        word, tag = parts[0].strip().lower(), parts[1].strip().upper()
        try:
            entries[word] = Tag(tag)
        except ValueError:
            raise ConfigurationError(f"{path}:{number}: unknown tag {tag!r}") from None

    logger.debug("lexicon.loaded", path=str(path), entries=len(entries))
    return Lexicon(entries, source=path)


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def _suffix_tag(token: str, lexicon: Lexicon) -> Tag:
    if token.endswith("ing"):
        return Tag.VERB
    if token.endswith("es") and lexicon.is_noun(token[:-2]):
        return Tag.NOUN
    if token.endswith("s") and lexicon.is_noun(token[:-1]):
        return Tag.NOUN
    return Tag.OTHER


def tag_tokens(tokens: Sequence[str], lexicon: Lexicon) -> List[TaggedToken]:
    tagged = []
    for token in tokens:
        tag = lexicon.get(token)
        tagged.append(TaggedToken(surface=token, tag=tag if tag is not None else _suffix_tag(token, lexicon)))
    return tagged


def normalize_phrase(span: Sequence[TaggedToken], lexicon: Lexicon) -> Optional[str]:
    """Head noun of a phrase with simple plural stripping; None if the span has no noun."""
    nouns = [t.surface for t in span if t.tag is Tag.NOUN]
    if not nouns:
        return None
    head = nouns[-1]
    if head.endswith("es") and lexicon.is_noun(head[:-2]):
        return head[:-2]
    if head.endswith("s") and lexicon.is_noun(head[:-1]):
        return head[:-1]
    return head


class _Unit(NamedTuple):
    kind: str
    tokens: Tuple[TaggedToken, ...]


def _chunk(tagged: Sequence[TaggedToken]) -> List[_Unit]:
    units: List[_Unit] = []
    i, n = 0, len(tagged)
    while i < n:
        tag = tagged[i].tag
        if tag in (Tag.DET, Tag.ADJ, Tag.NOUN):
            # (DET|ADJ)* NOUN+ ; a modifier run with no noun blocks
            j = i
            while j < n and tagged[j].tag in (Tag.DET, Tag.ADJ):
                j += 1
            k = j
            while k < n and tagged[k].tag is Tag.NOUN:
                k += 1
            if k > j:
                units.append(_Unit(NP, tuple(tagged[i:k])))
                i = k
            else:
                units.append(_Unit(BLOCK, tuple(tagged[i:j])))
                i = j
        elif tag in (Tag.AUX, Tag.VERB):
            j = i
            while j < n and tagged[j].tag in (Tag.AUX, Tag.VERB):
                j += 1
            units.append(_Unit(VG, tuple(tagged[i:j])))
            i = j
        elif tag is Tag.ADP:
            units.append(_Unit(ADP, (tagged[i],)))
            i += 1
        elif tagged[i].surface in RELATIVE_PRONOUNS:
            units.append(_Unit(REL, (tagged[i],)))
            i += 1
        else:
            units.append(_Unit(BLOCK, (tagged[i],)))
            i += 1

    # verb groups take a following preposition when a noun phrase follows it
    merged: List[_Unit] = []
    i = 0
    while i < len(units):
        unit = units[i]
        if (
            unit.kind == VG
            and i + 2 < len(units)
            and units[i + 1].kind == ADP
            and units[i + 2].kind == NP
        ):
            merged.append(_Unit(VG, unit.tokens + units[i + 1].tokens))
            i += 2
            continue
        if unit.kind == VG and all(t.tag is Tag.AUX for t in unit.tokens):
            unit = _Unit(BLOCK, unit.tokens)
        merged.append(unit)
        i += 1
    return merged


def _is_bare_participle(unit: _Unit) -> bool:
    if any(t.tag is Tag.AUX for t in unit.tokens):
        return False
    verbs = [t for t in unit.tokens if t.tag is Tag.VERB]
    return bool(verbs) and verbs[0].surface.endswith("ing")


def _anchor(units: Sequence[_Unit], before: int) -> Optional[_Unit]:
    """Nearest earlier NP that is not the object of a preposition or verb."""
    for idx in range(before - 1, -1, -1):
        if units[idx].kind != NP:
            continue
        if idx > 0 and units[idx - 1].kind in (ADP, VG):
            continue
        return units[idx]
    return None


def extract_triplets(tagged: Sequence[TaggedToken], source: str, lexicon: Lexicon) -> List[ExtractedTriplet]:
    units = _chunk(tagged)
    found: List[ExtractedTriplet] = []
    seen = set()

    def emit(subject_np: _Unit, predicate: str, object_np: _Unit) -> None:
        subject = normalize_phrase(subject_np.tokens, lexicon)
        obj = normalize_phrase(object_np.tokens, lexicon)
        if subject is None or obj is None:
            return
        key = (subject, predicate, obj)
        if key in seen:
            return
        seen.add(key)
        found.append(ExtractedTriplet(subject=subject, predicate=predicate, object=obj, source=source))

    for i, unit in enumerate(units):
        nxt = units[i + 1] if i + 1 < len(units) else None
        if unit.kind == NP and nxt is not None and nxt.kind == ADP:
            if i + 2 < len(units) and units[i + 2].kind == NP:
                emit(unit, nxt.tokens[0].surface, units[i + 2])
        elif unit.kind == VG and nxt is not None and nxt.kind == NP:
            predicate = "_".join(t.surface for t in unit.tokens)
            prev = units[i - 1] if i > 0 else None
            subject: Optional[_Unit]
            if prev is not None and prev.kind == REL and i > 1 and units[i - 2].kind == NP:
                subject = units[i - 2]
            elif prev is not None and prev.kind == NP and _is_bare_participle(unit):
                subject = prev
            else:
                subject = _anchor(units, i)
            if subject is not None:
                emit(subject, predicate, nxt)
    return found


def parse_caption(caption: Caption, lexicon: Lexicon) -> List[ExtractedTriplet]:
    return extract_triplets(tag_tokens(tokenize(caption.text), lexicon), caption.id, lexicon)


def parse_corpus(captions: Iterable[Caption], lexicon: Lexicon, n_jobs: int = 1) -> List[ExtractedTriplet]:
    """Parse many captions, optionally in parallel; output sorted by (caption id, triplet)."""
    captions = list(captions)
    if n_jobs == 1 or len(captions) < 2:
        per_caption = [parse_caption(c, lexicon) for c in captions]
    else:
        per_caption = Parallel(n_jobs=n_jobs)(delayed(parse_caption)(c, lexicon) for c in captions)
    triplets = [t for batch in per_caption for t in batch]
    triplets.sort(key=lambda t: (t.source, t.key()))
    logger.info("captions.parsed", captions=len(captions), triplets=len(triplets))
    return triplets


def format_triplets_tsv(triplets: Iterable[ExtractedTriplet]) -> str:
    return "".join(f"{t.subject}\t{t.predicate}\t{t.object}\t{t.source}\n" for t in triplets)


def read_triplets_tsv(path: Path) -> List[ExtractedTriplet]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"triplet file not found: {path}")
    triplets = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) != 4:
            raise ConfigurationError(f"{path}:{number}: expected 4 tab-separated fields, got {len(fields)}")
        try:
            triplets.append(ExtractedTriplet(subject=fields[0], predicate=fields[1], object=fields[2], source=fields[3]))
        except ValidationError as exc:
            problem = exc.errors()[0]
            field = ".".join(str(p) for p in problem["loc"])
            raise ConfigurationError(f"{path}:{number}: {field}: {problem['msg']}") from None
    return triplets
