"""Datasets, PK batch sampling, the on-disk layout and the synthetic
factored pedestrian generator."""

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, FormatError
from .hsoa import HAIR_PALETTE
from .masks import DEFAULT_LABEL_SCHEMA, SemanticMap, read_semantic_map, write_semantic_map
from .structures import SYNTH_STYLES, HairstyleLabel, Sample, View

MANIFEST = "manifest.jsonl"


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, split: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.split == split])

    @property
    def identities(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.int64)

    def positive_clothes_map(self) -> dict[int, list[int]]:
        out = defaultdict(set)
        for s in self.samples:
            out[s.identity].add(s.clothes)
        return {k: sorted(v) for k, v in sorted(out.items())}


# ---------------------------------------------------------------------------
# Synthetic generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticConfig:
    num_identities: int = 8
    clothes_per_identity: int = 2
    hairstyles_per_identity: int = 3
    images_per_combination: int = 2
    image_size: tuple[int, int] = (64, 32)
    noise_std: float = 0.03
    seed: int = 0
    num_cameras: int = 3
    num_test_identities: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(int(v) for v in self.image_size))
        for name in ("num_identities", "clothes_per_identity", "hairstyles_per_identity",
                     "images_per_combination", "num_cameras"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if not 0 <= self.num_test_identities < self.num_identities:
            raise ConfigurationError("num_test_identities must lie in [0, num_identities)")
        if self.hairstyles_per_identity > len(SYNTH_STYLES):
            raise ConfigurationError(f"at most {len(SYNTH_STYLES)} hairstyles per identity")
        h, w = self.image_size
        if h < 48 or w < 24:
            raise ConfigurationError(f"image size {self.image_size} too small to place all body parts")


L = DEFAULT_LABEL_SCHEMA

CLOTH_PALETTE = np.array([
    [200, 30, 30], [30, 160, 40], [30, 60, 200], [230, 200, 40], [140, 40, 170],
    [240, 130, 20], [20, 180, 190], [240, 240, 240], [40, 40, 40], [120, 80, 40],
    [250, 120, 170], [100, 130, 60],
], dtype=np.float64)

BACKGROUNDS = np.array([[110, 120, 105], [95, 100, 125], [130, 115, 100], [105, 110, 110]], dtype=np.float64)


def _rng(cfg_seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(cfg_seed, spawn_key=tuple(key)))


def _identity_factors(cfg: SyntheticConfig) -> list[dict]:
    rng = _rng(cfg.seed, 0)
    # Skin tones are kept apart by a per-channel margin so the face/limb cue
    # survives brightness jitter; the margin relaxes if the palette gets crowded.
    skins, margin, misses = [], 16.0, 0
    while len(skins) < cfg.num_identities:
        c = np.array([205.0, 160.0, 130.0]) + rng.uniform(-45, 45, size=3)
        if all(np.abs(c - s).max() > margin for s in skins):
            skins.append(c)
            misses = 0
        else:
            misses += 1
            if misses >= 2000:
                margin, misses = margin * 0.75, 0
    factors = []
    for i in range(cfg.num_identities):
        r = _rng(cfg.seed, 1, i)
        styles = list(r.permutation(len(SYNTH_STYLES))[:cfg.hairstyles_per_identity])
        factors.append({
            "skin": skins[i],
            "body_w": r.uniform(0.34, 0.56),
            "torso_len": r.uniform(0.24, 0.31),
            "leg_len": r.uniform(0.25, 0.33),
            "head_w": r.uniform(0.22, 0.30),
            "clothes": [
                {"upper": CLOTH_PALETTE[r.integers(len(CLOTH_PALETTE))],
                 "lower": CLOTH_PALETTE[r.integers(len(CLOTH_PALETTE))],
                 "texture": int(r.integers(3)),
                 "accent": CLOTH_PALETTE[r.integers(len(CLOTH_PALETTE))]}
                for _ in range(cfg.clothes_per_identity)
            ],
            "hair": [
                {"style": SYNTH_STYLES[s], "color": _hair_color(r)}
                for s in sorted(styles)
            ],
        })
    return factors


def _hair_color(r):
    return HAIR_PALETTE[r.integers(len(HAIR_PALETTE))]


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0


def _rect(h, w, y0, y1, x0, x1):
    m = np.zeros((h, w), dtype=bool)
    y0, y1 = max(0, int(round(y0))), min(h, int(round(y1)))
    x0, x1 = max(0, int(round(x0))), min(w, int(round(x1)))
    m[y0:y1, x0:x1] = True
    return m


def render_figure(h: int, w: int, ident: dict, clothes: dict, hair: dict, jitter: dict):
    """Rasterize one figure; returns float RGB (h, w, 3) and label map (h, w)."""
    s = h / 64.0
    cx = w / 2.0 + jitter["dx"]
    top = 3.0 * s + jitter["dy"]
    head_rx = ident["head_w"] * w / 2.0
    head_ry = 5.0 * s
    face_cy = top + 2.0 * s + head_ry
    torso_y0 = face_cy + head_ry + 1.0 * s
    torso_y1 = torso_y0 + ident["torso_len"] * h
    body_half = ident["body_w"] * w / 2.0
    pants_y1 = torso_y1 + 0.5 * ident["leg_len"] * h
    leg_y1 = min(h - 1.0, torso_y1 + ident["leg_len"] * h + 2.0 * s)
    arm_w = max(2.0, 2.5 * s)

    img = np.zeros((h, w, 3))
    lab = np.zeros((h, w), dtype=np.uint8)

    def paint(mask, color, label):
        img[mask] = color
        lab[mask] = label

    paint(np.ones((h, w), bool), jitter["background"], L["background"])
    leg_w = max(2.0, body_half * 0.55)
    paint(_rect(h, w, pants_y1, leg_y1, cx - body_half * 0.9, cx - body_half * 0.9 + leg_w),
          ident["skin"], L["left_leg"])
    paint(_rect(h, w, pants_y1, leg_y1, cx + body_half * 0.9 - leg_w, cx + body_half * 0.9),
          ident["skin"], L["right_leg"])
    paint(_rect(h, w, leg_y1 - 2 * s, leg_y1 + 1, cx - body_half * 0.95, cx - body_half * 0.9 + leg_w),
          np.array([30.0, 25.0, 25.0]), L["left_shoe"])
    paint(_rect(h, w, leg_y1 - 2 * s, leg_y1 + 1, cx + body_half * 0.9 - leg_w, cx + body_half * 0.95),
          np.array([30.0, 25.0, 25.0]), L["right_shoe"])

    lower = _rect(h, w, torso_y1, pants_y1, cx - body_half * 0.92, cx + body_half * 0.92)
    paint(lower, clothes["lower"], L["pants"])
    upper = _rect(h, w, torso_y0, torso_y1, cx - body_half, cx + body_half)
    paint(upper, clothes["upper"], L["upper_cloth"])
    yy, xx = np.mgrid[0:h, 0:w]
    if clothes["texture"] == 1:
        stripes = upper & (((yy - int(torso_y0)) // max(1, int(2 * s))) % 2 == 0)
        img[stripes] = clothes["accent"]
    elif clothes["texture"] == 2:
        checks = upper & (((yy // max(1, int(3 * s))) + (xx // max(1, int(3 * s)))) % 2 == 0)
        img[checks] = clothes["accent"]

    arm_y1 = torso_y1 + 3.0 * s
    paint(_rect(h, w, torso_y0 + 1, arm_y1, cx - body_half - arm_w, cx - body_half),
          ident["skin"], L["left_arm"])
    paint(_rect(h, w, torso_y0 + 1, arm_y1, cx + body_half, cx + body_half + arm_w),
          ident["skin"], L["right_arm"])

    style = hair["style"]
    cap = _ellipse(h, w, face_cy - 1.5 * s, cx, head_ry + 2.0 * s, head_rx + 1.5 * s)
    if style is HairstyleLabel.SHORT:
        hair_mask = cap & (yy + 0.5 < face_cy - 0.4 * head_ry)
    elif style is HairstyleLabel.MEDIUM:
        hair_mask = cap & (yy + 0.5 < face_cy + 0.6 * head_ry)
    else:
        strands = _rect(h, w, face_cy - head_ry * 0.5, torso_y0 + 0.45 * (torso_y1 - torso_y0),
                        cx - head_rx - 1.5 * s, cx + head_rx + 1.5 * s)
        hair_mask = cap | strands
    paint(hair_mask, hair["color"], L["hair"])
    face = _ellipse(h, w, face_cy, cx, head_ry, head_rx)
    paint(face, ident["skin"], L["face"])
    return img, lab


def generate_synthetic_dataset(config: SyntheticConfig) -> Dataset:
    """Render a deterministic factored dataset.

    Identity fixes skin color and body proportions; clothes and hairstyle
    are independent decoys.  Identities ``>= num_identities -
    num_test_identities`` go to the test side: image index 0 of every
    (clothes, hairstyle) combination is a query, the rest gallery.
    """
    h, w = config.image_size
    factors = _identity_factors(config)
    n_train = config.num_identities - config.num_test_identities
    samples = []
    for i, ident in enumerate(factors):
        for j, clothes in enumerate(ident["clothes"]):
            for k, hair in enumerate(ident["hair"]):
                for n in range(config.images_per_combination):
                    r = _rng(config.seed, 2, i, j, k, n)
                    camera = n % config.num_cameras
                    jitter = {
                        "dx": float(r.integers(-2, 3)) * h / 64.0,
                        "dy": float(r.integers(-2, 3)) * h / 64.0,
                        "background": BACKGROUNDS[camera % len(BACKGROUNDS)] + r.uniform(-8, 8, size=3),
                    }
                    img, lab = render_figure(h, w, ident, clothes, hair, jitter)
                    if config.noise_std > 0:
                        img = img * (1.0 + r.uniform(-2, 2) * config.noise_std)
                        img = img + r.normal(0.0, config.noise_std * 255.0, size=img.shape)
                    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
                    if i < n_train:
                        split = "train"
                    else:
                        split = "query" if n == 0 else "gallery"
                    samples.append(Sample(
                        sample_id=f"s{i:04d}_c{j}_h{k}_n{n:02d}",
                        image=img,
                        identity=i,
                        clothes=i * config.clothes_per_identity + j,
                        hairstyle=hair["style"],
                        camera=camera,
                        semantic_map=SemanticMap(lab),
                        split=split,
                    ))
    return Dataset(samples)


# ---------------------------------------------------------------------------
# PK sampling
# ---------------------------------------------------------------------------

def pk_sample(labels: Sequence[int] | Dataset, P: int, K: int, rng) -> list[list[int]]:
    """One epoch of PK batches: ceil(#ids / P) batches of P identities x K indices.

    Identities are visited in a random permutation so every identity appears
    at least once per epoch; the last batch is topped up with other random
    identities.  Identities with fewer than K images are sampled with
    replacement.
    """
    if isinstance(labels, Dataset):
        labels = labels.identities
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    labels = np.asarray(labels)
    by_id = defaultdict(list)
    for idx, pid in enumerate(labels):
        by_id[int(pid)].append(idx)
    ids = np.array(sorted(by_id))
    if P > len(ids):
        raise ConfigurationError(f"P={P} exceeds the {len(ids)} identities available")
    if P < 1 or K < 1:
        raise ConfigurationError("P and K must be >= 1")
    order = list(rng.permutation(ids))
    batches = []
    for b in range(math.ceil(len(ids) / P)):
        chosen = order[b * P:(b + 1) * P]
        if len(chosen) < P:
            rest = np.setdiff1d(ids, chosen)
            chosen = chosen + list(rng.choice(rest, P - len(chosen), replace=False))
        batch = []
        for pid in chosen:
            pool = by_id[int(pid)]
            batch.extend(int(x) for x in rng.choice(pool, K, replace=len(pool) < K))
        batches.append(batch)
    return batches


# ---------------------------------------------------------------------------
# Directory format
# ---------------------------------------------------------------------------

def _record(sample: Sample) -> dict:
    rec = {
        "file": f"{sample.sample_id}.png",
        "identity": int(sample.identity),
        "clothes": int(sample.clothes),
        "hairstyle": sample.hairstyle.value,
        "camera": int(sample.camera),
        "split": sample.split,
        "view": sample.view.value,
    }
    if sample.source_id is not None:
        rec["source_id"] = sample.source_id
    if sample.flags:
        rec["flags"] = list(sample.flags)
    return rec


def write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path, optimize=False)


def write_directory_dataset(samples: Iterable[Sample], root: str | Path) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rec = _record(s)
        write_png(root / "images" / rec["file"], s.image)
        if s.semantic_map is not None:
            write_semantic_map(root / "masks" / rec["file"], s.semantic_map)
        lines.append(json.dumps(rec, sort_keys=True))
    (root / MANIFEST).write_text("".join(line + "\n" for line in lines))
    return root


REQUIRED_KEYS = ("file", "identity", "clothes", "hairstyle", "camera")


def load_directory_dataset(root: str | Path,
                           label_schema: Mapping[str, int] = DEFAULT_LABEL_SCHEMA) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST
    if not manifest.exists():
        raise FormatError(f"missing manifest {manifest}")
    samples = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}:{lineno}: {exc}") from exc
        missing = [k for k in REQUIRED_KEYS if k not in rec]
        if missing:
            raise FormatError(f"{manifest}:{lineno}: missing keys {missing}")
        img_path = root / "images" / rec["file"]
        if not img_path.exists():
            raise DataError(f"missing image {img_path}")
        with Image.open(img_path) as im:
            image = np.array(im.convert("RGB"))
        mask_path = root / "masks" / rec["file"]
        semantic_map: Optional[SemanticMap] = None
        if mask_path.exists():
            semantic_map = read_semantic_map(mask_path, label_schema)
            if semantic_map.labels.shape != image.shape[:2]:
                raise DataError(f"mask {mask_path} is {semantic_map.labels.shape}, image is {image.shape[:2]}")
        try:
            samples.append(Sample(
                sample_id=Path(rec["file"]).stem,
                image=image,
                identity=int(rec["identity"]),
                clothes=int(rec["clothes"]),
                hairstyle=HairstyleLabel.parse(rec["hairstyle"]),
                camera=int(rec["camera"]),
                semantic_map=semantic_map,
                view=View(rec.get("view", "raw")),
                split=rec.get("split", "train"),
                source_id=rec.get("source_id"),
                flags=tuple(rec.get("flags", ())),
            ))
        except ValueError as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from exc
    return Dataset(samples)
