"""Semantic maps and the binary region masks derived from them."""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

from . import kernels
from .errors import ConfigurationError, DataError, SchemaError

# 20-class human-parsing convention (LIP / SCHP ordering).
DEFAULT_LABEL_SCHEMA: dict[str, int] = {
    "background": 0,
    "hat": 1,
    "hair": 2,
    "glove": 3,
    "sunglasses": 4,
    "upper_cloth": 5,
    "dress": 6,
    "coat": 7,
    "socks": 8,
    "pants": 9,
    "jumpsuit": 10,
    "scarf": 11,
    "skirt": 12,
    "face": 13,
    "left_arm": 14,
    "right_arm": 15,
    "left_leg": 16,
    "right_leg": 17,
    "left_shoe": 18,
    "right_shoe": 19,
}

DEFAULT_SUBSETS: dict[str, tuple[str, ...]] = {
    "face": ("face",),
    "hair": ("hair",),
    "cloth": ("upper_cloth", "dress", "coat", "pants", "jumpsuit", "skirt"),
    "limbs": ("left_arm", "right_arm", "left_leg", "right_leg"),
}


@dataclass(frozen=True)
class SemanticMap:
    labels: np.ndarray
    label_schema: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LABEL_SCHEMA))

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise SchemaError(f"semantic map must be 2-D, got shape {labels.shape}")
        known = np.fromiter(self.label_schema.values(), dtype=np.int64)
        unknown = np.setdiff1d(np.unique(labels), known)
        if unknown.size:
            raise SchemaError(f"label values {unknown.tolist()} are not in the label schema")
        object.__setattr__(self, "labels", labels.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class RegionMasks:
    face: np.ndarray
    hair: np.ndarray
    head: np.ndarray
    cloth: np.ndarray
    limbs: np.ndarray
    dilation_radius_cloth: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.face.shape

    def with_cloth_dilated(self, radius: int) -> "RegionMasks":
        return RegionMasks(self.face, self.hair, self.head, dilate_mask(self.cloth, radius),
                           self.limbs, dilation_radius_cloth=radius)


def resolve_subsets(schema: Mapping[str, int],
                    subsets: Mapping[str, tuple[str, ...]] = DEFAULT_SUBSETS) -> dict[str, frozenset[int]]:
    """Map named class subsets to label-integer sets, validating them against ``schema``."""
    missing = {"face", "hair", "cloth", "limbs"} - set(subsets)
    if missing:
        raise ConfigurationError(f"schema subsets missing {sorted(missing)}")
    resolved = {}
    for region, names in subsets.items():
        ids = set()
        for name in names:
            if isinstance(name, (int, np.integer)):
                ids.add(int(name))
            elif name in schema:
                ids.add(schema[name])
            else:
                raise ConfigurationError(f"class {name!r} of subset {region!r} not in label schema")
        resolved[region] = frozenset(ids)
    if resolved["face"] & resolved["hair"]:
        raise ConfigurationError("face and hair label sets overlap")
    return resolved


def _indicator(labels: np.ndarray, ids: frozenset[int]) -> np.ndarray:
    return np.isin(labels, sorted(ids)).astype(np.uint8)


def derive_masks(semantic_map: SemanticMap,
                 schema_subsets: Mapping[str, tuple[str, ...]] = DEFAULT_SUBSETS) -> RegionMasks:
    sets = resolve_subsets(semantic_map.label_schema, schema_subsets)
    p = semantic_map.labels
    face = _indicator(p, sets["face"])
    hair = _indicator(p, sets["hair"])
    return RegionMasks(
        face=face,
        hair=hair,
        head=face | hair,
        cloth=_indicator(p, sets["cloth"]),
        limbs=_indicator(p, sets["limbs"]),
    )


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)x(2r+1) square, i.e. Chebyshev distance <= r."""
    if radius < 0:
        raise ValueError(f"dilation radius must be >= 0, got {radius}")
    mask = np.asarray(mask)
    if radius == 0:
        return (mask != 0).astype(np.uint8)
    return kernels.dilate_chebyshev(mask, radius)


def downsample_mask(mask: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Area-weighted mean of a binary (or soft) mask onto a coarser grid.

    Output values stay soft in [0, 1]; nothing is re-thresholded.
    """
    th, tw = target
    if th <= 0 or tw <= 0:
        raise ValueError(f"target dims must be positive, got {target}")
    mask = np.asarray(mask)
    h, w = mask.shape
    if th > h or tw > w:
        raise ValueError(f"cannot downsample {h}x{w} to larger grid {th}x{tw}")
    return kernels.area_downsample(mask, th, tw)


def downsample_masks(masks: RegionMasks, target: tuple[int, int]) -> dict[str, np.ndarray]:
    return {name: downsample_mask(getattr(masks, name), target)
            for name in ("face", "hair", "head", "cloth", "limbs")}


def read_semantic_map(path: str | Path, label_schema: Mapping[str, int] = DEFAULT_LABEL_SCHEMA) -> SemanticMap:
    with Image.open(path) as im:
        if im.mode not in ("P", "L"):
            raise DataError(f"{path}: semantic map must be a single-channel PNG, got mode {im.mode}")
        labels = np.array(im)
    try:
        return SemanticMap(labels, label_schema)
    except SchemaError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _palette(n: int = 256) -> list[int]:
    rng = np.random.default_rng(20)
    pal = rng.integers(0, 256, size=(n, 3))
    pal[0] = 0
    return pal.astype(np.uint8).ravel().tolist()


def write_semantic_map(path: str | Path, semantic_map: SemanticMap) -> None:
    labels = np.ascontiguousarray(semantic_map.labels, dtype=np.uint8)
    im = Image.frombytes("P", (labels.shape[1], labels.shape[0]), labels.tobytes())
    im.putpalette(_palette())
    im.save(path, optimize=False)
