"""Hairstyle-oriented augmentation: same identity, different hair.

Heads are cut out with the head mask, handed to a pluggable hair
synthesizer, and the synthesized hair is pasted back only where the source
image had hair.
"""

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

from . import kernels
from .errors import MSPError
from .masks import RegionMasks
from .structures import SYNTH_STYLES, HairstyleLabel, Sample, View

log = logging.getLogger(__name__)


class SynthesisError(MSPError):
    code = "synthesis_error"


@dataclass(frozen=True)
class SynthesizedHead:
    image: np.ndarray
    style: HairstyleLabel
    source_sample_id: str


class HairSynthesizer(Protocol):
    def synthesize(self, head_crop: np.ndarray, head_masks: RegionMasks, style: HairstyleLabel,
                   sample_id: str = "") -> SynthesizedHead: ...


def _check_same_hw(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"spatial shapes differ: {sorted(shapes)}")


def extract_head(image: np.ndarray, masks: RegionMasks) -> np.ndarray:
    _check_same_hw(image, masks.head)
    return image * masks.head.astype(image.dtype)[..., None]


def composite_hair(image: np.ndarray, hair_mask: np.ndarray, synth_head: SynthesizedHead) -> np.ndarray:
    """Paste synthesized hair into ``image`` under the source hair mask.

    For a binary mask the blend ``M*h + (1-M)*x`` is a per-pixel select, so
    every pixel outside the mask is returned bit-identical.
    """
    _check_same_hw(image, hair_mask, synth_head.image)
    return kernels.composite_select(image, hair_mask, synth_head.image)


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# Hair colors in RGB, 0..255.
HAIR_PALETTE = np.array([
    [20, 16, 14], [60, 38, 24], [110, 70, 40], [170, 120, 60], [215, 180, 110],
    [150, 40, 30], [200, 200, 205], [90, 90, 95], [40, 60, 140], [160, 60, 150],
], dtype=np.float64)

_STYLE_REACH = {HairstyleLabel.SHORT: 0.0, HairstyleLabel.MEDIUM: 0.6, HairstyleLabel.LONG: None}


class ProceduralStub:
    """Deterministic stand-in for a hair GAN.

    Recolors the hair region and trims it to a style template (short hair
    stops above the face, medium reaches partway down it, long keeps the full
    source silhouette).  Trimmed hair pixels get ``fill``.  Face pixels are
    never touched.
    """

    def __init__(self, fill: float = 128.0, texture_std: float = 10.0, salt: str = ""):
        self.fill = fill
        self.texture_std = texture_std
        self.salt = salt

    def synthesize(self, head_crop, head_masks, style, sample_id=""):
        style = HairstyleLabel.parse(style)
        if style not in SYNTH_STYLES:
            raise SynthesisError(f"unsupported style {style}")
        _check_same_hw(head_crop, head_masks.hair)
        rng = np.random.default_rng(_stable_seed(self.salt, sample_id, style.value))
        hair = head_masks.hair != 0
        out = head_crop.astype(np.float64)
        ys = np.nonzero(hair)[0]
        if ys.size:
            face_rows = np.nonzero(head_masks.face.any(axis=1))[0]
            reach = _STYLE_REACH[style]
            if reach is None:
                limit = head_crop.shape[0]
            elif face_rows.size:
                ft, fb = face_rows.min(), face_rows.max()
                limit = ft + int(round(reach * (fb - ft + 1)))
            else:
                limit = ys.min() + int(round((0.35 + reach * 0.4) * (ys.max() - ys.min() + 1)))
            rows = np.arange(head_crop.shape[0])[:, None]
            styled = hair & (rows < limit)
            color = HAIR_PALETTE[rng.integers(len(HAIR_PALETTE))]
            texture = rng.normal(0.0, self.texture_std, size=head_crop.shape[:2] + (1,))
            out[styled] = np.clip(color + texture[styled], 0, 255)
            out[hair & ~styled] = self.fill
        if np.issubdtype(head_crop.dtype, np.integer):
            out = np.rint(out).astype(head_crop.dtype)
        else:
            out = out.astype(head_crop.dtype)
        # exact face preservation regardless of rounding
        face = head_masks.face != 0
        out[face] = head_crop[face]
        return SynthesizedHead(out, style, sample_id)


class FileAdapter:
    """Loads precomputed heads from ``<root>/<sample_id>/<style>.png``."""

    def __init__(self, root: str | Path, face_tolerance: int = 0):
        self.root = Path(root)
        self.face_tolerance = face_tolerance

    def path_for(self, sample_id: str, style: HairstyleLabel) -> Path:
        return self.root / sample_id / f"{HairstyleLabel.parse(style).value}.png"

    def synthesize(self, head_crop, head_masks, style, sample_id=""):
        style = HairstyleLabel.parse(style)
        path = self.path_for(sample_id, style)
        if not path.exists():
            raise SynthesisError(f"no synthesized head at {path}")
        with Image.open(path) as im:
            img = np.array(im.convert("RGB"))
        if img.shape != head_crop.shape:
            raise SynthesisError(f"{path}: shape {img.shape} != head crop {head_crop.shape}")
        face = head_masks.face != 0
        if face.any():
            drift = np.abs(img[face].astype(np.int64) - head_crop[face].astype(np.int64)).max()
            if drift > self.face_tolerance:
                raise SynthesisError(f"{path}: face pixels drift by {drift} > {self.face_tolerance}")
        return SynthesizedHead(img.astype(head_crop.dtype), style, sample_id)


def augment_identity(sample: Sample, masks: RegionMasks, synthesizer: HairSynthesizer,
                     styles: Sequence[HairstyleLabel], report: list | None = None) -> list[Sample]:
    """One hairstyle-swapped copy of ``sample`` per style.

    Styles the synthesizer fails on are skipped; with no hair pixels at all
    the source image is returned per style with an ``empty_hair`` flag.  Both
    cases are appended to ``report`` when given.
    """
    out = []
    if not styles:
        return out
    if not masks.hair.any():
        for style in styles:
            style = HairstyleLabel.parse(style)
            out.append(sample.replace(hairstyle=style, view=View.HSOA_AUG,
                                      source_id=sample.sample_id,
                                      sample_id=f"{sample.sample_id}__{style.value}",
                                      flags=sample.flags + ("empty_hair",)))
        if report is not None:
            report.append({"source_id": sample.sample_id, "reason": "empty_hair"})
        return out
    head = extract_head(sample.image, masks)
    for style in styles:
        style = HairstyleLabel.parse(style)
        try:
            synth = synthesizer.synthesize(head, masks, style, sample_id=sample.sample_id)
        except SynthesisError as exc:
            log.warning("skipping %s/%s: %s", sample.sample_id, style.value, exc)
            if report is not None:
                report.append({"source_id": sample.sample_id, "style": style.value, "reason": str(exc)})
            continue
        out.append(sample.replace(
            image=composite_hair(sample.image, masks.hair, synth),
            hairstyle=style,
            view=View.HSOA_AUG,
            source_id=sample.sample_id,
            sample_id=f"{sample.sample_id}__{style.value}",
        ))
    return out
