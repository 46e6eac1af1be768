"""Cloth-preserved random erasing (CPRE) and the raw/erased mix decision."""

import enum
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .masks import DEFAULT_SUBSETS, derive_masks, dilate_mask
from .structures import Sample, View


class KeepMode(enum.Enum):
    BERNOULLI = "bernoulli"
    PATCH = "patch"


class MixAssignment(enum.Enum):
    DETERMINISTIC_HALF = "half"
    BERNOULLI = "bernoulli"


@dataclass(frozen=True)
class KeepMask:
    grid: np.ndarray
    keep_ratio: float
    seed: Optional[int] = None


@dataclass(frozen=True)
class MixPolicy:
    assignment: MixAssignment = MixAssignment.DETERMINISTIC_HALF
    raw_fraction: float = 0.5


def _as_generator(rng) -> tuple[np.random.Generator, Optional[int]]:
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), (None if rng is None else int(rng))


def sample_keep_mask(cloth_mask: np.ndarray, r: float, rng, mode: KeepMode | str = KeepMode.BERNOULLI,
                     max_patches: int = 10_000) -> KeepMask:
    """Draw which clothing pixels survive erasing.

    Bernoulli mode keeps each pixel independently with probability ``r``.
    Patch mode zeroes random rectangles inside the cloth bounding box until
    the kept fraction of cloth pixels first drops to ``r`` or below.  Pixels
    outside the cloth mask are always marked kept.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"keep ratio must lie in [0, 1], got {r}")
    gen, seed = _as_generator(rng)
    cloth = np.asarray(cloth_mask) != 0
    mode = KeepMode(mode)
    if mode is KeepMode.BERNOULLI:
        grid = (gen.random(cloth.shape) < r) | ~cloth
        return KeepMask(grid.astype(np.uint8), float(r), seed)

    grid = np.ones(cloth.shape, dtype=np.uint8)
    total = int(cloth.sum())
    if total == 0:
        return KeepMask(grid, float(r), seed)
    ys, xs = np.nonzero(cloth)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    bh, bw = y1 - y0, x1 - x0
    kept = total
    for _ in range(max_patches):
        if kept / total <= r:
            break
        ph = int(gen.integers(1, max(2, bh // 3) + 1))
        pw = int(gen.integers(1, max(2, bw // 3) + 1))
        py = int(gen.integers(y0, y1 - min(ph, bh) + 1))
        px = int(gen.integers(x0, x1 - min(pw, bw) + 1))
        patch = grid[py:py + ph, px:px + pw]
        kept -= int((patch.astype(bool) & cloth[py:py + ph, px:px + pw]).sum())
        patch[...] = 0
    grid[~cloth] = 1
    return KeepMask(grid, float(r), seed)


def apply_cpre(image: np.ndarray, cloth_mask: np.ndarray, keep: KeepMask | np.ndarray,
               fill=0.0) -> np.ndarray:
    grid = keep.grid if isinstance(keep, KeepMask) else np.asarray(keep)
    if not (image.shape[:2] == cloth_mask.shape == grid.shape):
        raise ValueError(f"shape mismatch: image {image.shape[:2]}, cloth {cloth_mask.shape}, keep {grid.shape}")
    fill = np.asarray(fill, dtype=image.dtype)
    return kernels.cpre_select(image, cloth_mask, grid, fill)


def sample_streams(rng, n: int) -> list[np.random.Generator]:
    """Counter-based child streams, one per batch position."""
    if isinstance(rng, np.random.Generator):
        root = np.random.SeedSequence(int(rng.integers(2**63)))
    elif isinstance(rng, np.random.SeedSequence):
        root = rng
    else:
        root = np.random.SeedSequence(rng)
    return [np.random.default_rng(s) for s in root.spawn(n)]


def cloth_mask_for(sample: Sample, radius: int, subsets=DEFAULT_SUBSETS) -> Optional[np.ndarray]:
    if sample.semantic_map is None:
        return None
    return dilate_mask(derive_masks(sample.semantic_map, subsets).cloth, radius)


def mix_batch(samples: Sequence[Sample], erase_range: tuple[float, float], policy: MixPolicy, rng,
              cloth_masks: Optional[Sequence[Optional[np.ndarray]]] = None, fill=0.0,
              mode: KeepMode | str = KeepMode.BERNOULLI, dilation_radius: int = 2) -> list[Sample]:
    """Split a batch into raw and CPRE-erased views.

    ``erase_range`` is the keep-ratio interval ``[r_min, r_max]``.  Under the
    deterministic-half policy each identity contributes ceil(n/2) raw and
    floor(n/2) erased samples; samples without a cloth mask always stay raw.
    """
    r_min, r_max = erase_range
    if not 0.0 <= r_min <= r_max <= 1.0:
        raise ConfigurationError(f"invalid keep range [{r_min}, {r_max}]")
    n = len(samples)
    if cloth_masks is None:
        cloth_masks = [cloth_mask_for(s, dilation_radius) for s in samples]
    streams = sample_streams(rng, n + 1)
    assign_rng = streams[n]

    erase = np.zeros(n, dtype=bool)
    if policy.assignment is MixAssignment.DETERMINISTIC_HALF:
        groups = defaultdict(list)
        for i, s in enumerate(samples):
            groups[s.identity].append(i)
        for members in groups.values():
            n_erase = len(members) // 2
            eligible = [i for i in members if cloth_masks[i] is not None]
            if not eligible or n_erase == 0:
                continue
            chosen = assign_rng.permutation(eligible)[:n_erase]
            erase[chosen] = True
    else:
        draws = assign_rng.random(n) >= policy.raw_fraction
        erase = draws & np.array([m is not None for m in cloth_masks], dtype=bool)

    out = []
    for i, s in enumerate(samples):
        if not erase[i]:
            out.append(s.replace(view=View.RAW))
            continue
        gen = streams[i]
        r = float(gen.uniform(r_min, r_max)) if r_max > r_min else float(r_min)
        keep = sample_keep_mask(cloth_masks[i], r, gen, mode)
        out.append(s.replace(image=apply_cpre(s.image, cloth_masks[i], keep, fill), view=View.ERASED))
    return out
