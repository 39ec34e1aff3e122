# app/models/schemas.py
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

NO_RELATION = "__no_relation__"


class Tag(str, Enum):
    NOUN = "NOUN"
    VERB = "VERB"
    ADP = "ADP"
    DET = "DET"
    ADJ = "ADJ"
    AUX = "AUX"
    OTHER = "OTHER"


class TemplateName(str, Enum):
    CLOZE = "cloze"
    T5_STYLE = "t5"
    TRIPLET = "triplet"


class NodeMode(str, Enum):
    ZERO_HOP = "0hop"
    ONE_HOP = "1hop"
    ALL = "all"


class RelationMode(str, Enum):
    TOP_K = "top"
    ALL = "all"


class SamplingMode(str, Enum):
    UNIFORM_EDGES = "uniform"
    COUNT_WEIGHTED = "count"


class OptimizerKind(str, Enum):
    GRADIENT_DESCENT = "sgd"
    ADAM = "adam"


class MetricPolarity(str, Enum):
    SIMILARITY = "similarity"
    DISTANCE = "distance"


class RecallMode(str, Enum):
    PAIR = "pair"
    TRIPLET = "triplet"


class RecallSubset(str, Enum):
    SEEN = "seen"
    UNSEEN = "unseen"


class Caption(BaseModel):
    """One caption of the knowledge corpus."""

    id: str
    text: str

    @field_validator("text")
    @classmethod
    def text_not_blank(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("caption text is empty")
        return v


class TaggedToken(BaseModel):
    model_config = ConfigDict(frozen=True)

    surface: str
    tag: Tag

    @field_validator("surface")
    @classmethod
    def no_whitespace(cls, v: str) -> str:
        if not v or any(ch.isspace() for ch in v):
            raise ValueError(f"invalid token surface {v!r}")
        return v.lower()


class ExtractedTriplet(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject: str
    predicate: str
    object: str
    source: str

    @field_validator("subject", "predicate", "object")
    @classmethod
    def not_empty(cls, v: str) -> str:
        if not v:
            raise ValueError("triplet fields must be non-empty")
        return v

    def key(self) -> Tuple[str, str, str]:
        return (self.subject, self.predicate, self.object)


Box = Tuple[float, float, float, float]


def check_box(v: Box) -> Box:
    x1, y1, x2, y2 = v
    if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
        raise ValueError(f"box {v} is not a normalized (x1, y1, x2, y2) box")
    return v


class ObjectDescriptor(BaseModel):
    """A detected object: normalized box, class name and raw visual feature."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    box: Box
    class_tag: str
    raw_feature: np.ndarray

    @field_validator("raw_feature", mode="before")
    @classmethod
    def as_float_array(cls, v) -> np.ndarray:
        arr = np.asarray(v, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("raw_feature must be a vector")
        return arr

    @field_validator("box")
    @classmethod
    def valid_box(cls, v: Box) -> Box:
        return check_box(v)

    @property
    def augmented(self) -> np.ndarray:
        return np.concatenate([self.raw_feature, np.asarray(self.box, dtype=np.float64)])


class RelationInstance(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    image_id: str
    subject: ObjectDescriptor
    object: ObjectDescriptor
    predicate_index: int
    subject_index: int = 0
    object_index: int = 1


class ObjectEntry(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    box: Box
    class_tag: str = Field(alias="class")
    feature: str

    @field_validator("box")
    @classmethod
    def valid_box(cls, v: Box) -> Box:
        return check_box(v)


class RelationEntry(BaseModel):
    subject: int
    predicate: str
    object: int


class DatasetRecord(BaseModel):
    """One annotated image as stored in dataset JSONL files."""

    image_id: str
    objects: List[ObjectEntry]
    relations: List[RelationEntry] = []
    features: Optional[List[np.ndarray]] = None

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def indices_in_range(self) -> "DatasetRecord":
        n = len(self.objects)
        for rel in self.relations:
            if not (0 <= rel.subject < n and 0 <= rel.object < n):
                raise ValueError(
                    f"relation ({rel.subject}, {rel.predicate}, {rel.object}) "
                    f"indexes outside {n} objects"
                )
            if rel.subject == rel.object:
                raise ValueError(f"relation on object {rel.subject} with itself")
        return self

    def descriptor(self, index: int) -> ObjectDescriptor:
        if self.features is None:
            raise ValueError(f"record {self.image_id} has no resolved features")
        entry = self.objects[index]
        return ObjectDescriptor(
            box=entry.box, class_tag=entry.class_tag, raw_feature=self.features[index]
        )

    def descriptors(self) -> List[ObjectDescriptor]:
        return [self.descriptor(i) for i in range(len(self.objects))]
