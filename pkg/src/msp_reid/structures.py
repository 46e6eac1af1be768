"""Sample record and the small enums shared by the augmentation and data modules."""

import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .masks import SemanticMap


class HairstyleLabel(enum.Enum):
    SHORT = "short"
    MEDIUM = "medium"
    LONG = "long"
    ORIGINAL = "original"

    @classmethod
    def parse(cls, value) -> "HairstyleLabel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            return cls[str(value).upper()]

    @property
    def index(self) -> int:
        return list(HairstyleLabel).index(self)


SYNTH_STYLES = (HairstyleLabel.SHORT, HairstyleLabel.MEDIUM, HairstyleLabel.LONG)


class View(enum.Enum):
    RAW = "raw"
    ERASED = "erased"
    HSOA_AUG = "hsoa_aug"


@dataclass
class Sample:
    sample_id: str
    image: np.ndarray
    identity: int
    clothes: int
    hairstyle: HairstyleLabel = HairstyleLabel.ORIGINAL
    camera: int = 0
    semantic_map: Optional[SemanticMap] = None
    view: View = View.RAW
    split: str = "train"
    source_id: Optional[str] = None
    flags: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if min(self.identity, self.clothes, self.camera) < 0:
            raise ValueError(f"{self.sample_id}: identity/clothes/camera labels must be >= 0")
        if self.semantic_map is not None and self.semantic_map.labels.shape != self.image.shape[:2]:
            raise ValueError(
                f"{self.sample_id}: semantic map {self.semantic_map.labels.shape} "
                f"does not match image {self.image.shape[:2]}")

    def replace(self, **changes) -> "Sample":
        return dataclasses.replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        for f in dataclasses.fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if f.name == "image":
                if a.shape != b.shape or a.dtype != b.dtype or not np.array_equal(a, b):
                    return False
            elif f.name == "semantic_map":
                if (a is None) != (b is None):
                    return False
                if a is not None and not np.array_equal(a.labels, b.labels):
                    return False
            elif a != b:
                return False
        return True

    __hash__ = None
