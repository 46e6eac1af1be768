"""Hot per-pixel and per-query loops.

Every kernel exists twice: a numba ``@njit`` version (``*_nb``) and a
vectorised numpy version (``*_np``).  The public names dispatch on
:data:`msp_reid._accel.USE_NUMBA`; both variants stay importable so tests
can hold them against each other and ``benchmarks/bench_kernels.py`` can
time them.
"""

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# Chebyshev dilation (square structuring element), separable max filter
# ---------------------------------------------------------------------------


@njit(cache=True)
def _dilate_rows_nb(src, dst, radius):
    # Sliding count of nonzero pixels in the window [j - radius, j + radius].
    h, w = src.shape
    for i in range(h):
        count = 0
        for k in range(min(radius, w)):
            count += src[i, k] != 0
        for j in range(w):
            hi = j + radius
            if hi < w:
                count += src[i, hi] != 0
            lo = j - radius - 1
            if lo >= 0:
                count -= src[i, lo] != 0
            dst[i, j] = 1 if count > 0 else 0


@njit(cache=True)
def dilate_chebyshev_nb(mask, radius):
    h, w = mask.shape
    tmp = np.zeros((h, w), dtype=np.uint8)
    _dilate_rows_nb(mask, tmp, radius)
    # Vertical pass walks rows in memory order with one running count per column.
    out = np.zeros((h, w), dtype=np.uint8)
    count = np.zeros(w, dtype=np.int64)
    for k in range(min(radius, h)):
        for j in range(w):
            count[j] += tmp[k, j]
    for i in range(h):
        hi = i + radius
        lo = i - radius - 1
        for j in range(w):
            if hi < h:
                count[j] += tmp[hi, j]
            if lo >= 0:
                count[j] -= tmp[lo, j]
            out[i, j] = 1 if count[j] > 0 else 0
    return out


def dilate_chebyshev_np(mask, radius):
    m = (mask != 0).astype(np.uint8)
    if radius == 0:
        return m
    h, w = m.shape
    padded = np.pad(m, radius)
    rows = np.zeros((h + 2 * radius, w), dtype=np.uint8)
    for d in range(2 * radius + 1):
        np.maximum(rows, padded[:, d:d + w], out=rows)
    out = np.zeros((h, w), dtype=np.uint8)
    for d in range(2 * radius + 1):
        np.maximum(out, rows[d:d + h, :], out=out)
    return out


# ---------------------------------------------------------------------------
# Area-weighted downsampling
# ---------------------------------------------------------------------------


def _overlap_matrix(n_in, n_out):
    """Row i holds the overlap of each input pixel with output cell i, over cell width."""
    scale = n_in / n_out
    weights = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start, stop = i * scale, (i + 1) * scale
        for y in range(int(np.floor(start)), min(n_in, int(np.ceil(stop)))):
            ov = min(stop, y + 1) - max(start, y)
            if ov > 0:
                weights[i, y] = ov / scale
    return weights


@njit(cache=True)
def area_downsample_nb(mask, out_h, out_w):
    h, w = mask.shape
    sh = h / out_h
    sw = w / out_w
    out = np.zeros((out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        y0 = i * sh
        y1 = (i + 1) * sh
        for j in range(out_w):
            x0 = j * sw
            x1 = (j + 1) * sw
            acc = 0.0
            wsum = 0.0
            for y in range(int(np.floor(y0)), min(h, int(np.ceil(y1)))):
                oy = min(y1, y + 1.0) - max(y0, float(y))
                if oy <= 0.0:
                    continue
                for x in range(int(np.floor(x0)), min(w, int(np.ceil(x1)))):
                    ox = min(x1, x + 1.0) - max(x0, float(x))
                    if ox <= 0.0:
                        continue
                    acc += oy * ox * mask[y, x]
                    wsum += oy * ox
            # Dividing by the summed weights (not the nominal cell area) makes
            # an all-ones cell come out as exactly 1.
            out[i, j] = min(1.0, max(0.0, acc / wsum))
    return out


def area_downsample_np(mask, out_h, out_w):
    h, w = mask.shape
    rh = _overlap_matrix(h, out_h)
    rw = _overlap_matrix(w, out_w)
    num = rh @ mask.astype(np.float64) @ rw.T
    den = rh @ np.ones((h, w)) @ rw.T
    return np.clip(num / den, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Pixel selects: cloth-preserved erasing and hair compositing
# ---------------------------------------------------------------------------


@njit(cache=True)
def cpre_select_nb(image, cloth, keep, fill):
    h, w, c = image.shape
    out = image.copy()
    for i in range(h):
        for j in range(w):
            if cloth[i, j] != 0 and keep[i, j] == 0:
                for k in range(c):
                    out[i, j, k] = fill[k]
    return out


def cpre_select_np(image, cloth, keep, fill):
    erase = (cloth != 0) & (keep == 0)
    out = image.copy()
    out[erase] = fill
    return out


@njit(cache=True)
def composite_select_nb(image, mask, synth):
    h, w, c = image.shape
    out = image.copy()
    for i in range(h):
        for j in range(w):
            if mask[i, j] != 0:
                for k in range(c):
                    out[i, j, k] = synth[i, j, k]
    return out


def composite_select_np(image, mask, synth):
    return np.where((mask != 0)[..., None], synth, image)


# ---------------------------------------------------------------------------
# Ranking metrics over pre-sorted gallery orders
# ---------------------------------------------------------------------------


@njit(cache=True)
def rank_metrics_nb(order, matches, valid):
    """Per-query AP and first-hit rank (within valid items) for sorted galleries.

    ``order[q]`` lists gallery indices by decreasing similarity.  Returns
    ``(ap, first_hit, num_pos)``; ``first_hit`` is -1 when the query has no
    valid positive.
    """
    nq, ng = order.shape
    ap = np.zeros(nq, dtype=np.float64)
    first_hit = np.full(nq, -1, dtype=np.int64)
    num_pos = np.zeros(nq, dtype=np.int64)
    for q in range(nq):
        rank = 0
        hits = 0
        acc = 0.0
        for t in range(ng):
            g = order[q, t]
            if not valid[q, g]:
                continue
            rank += 1
            if matches[q, g]:
                hits += 1
                acc += hits / rank
                if first_hit[q] < 0:
                    first_hit[q] = rank - 1
        num_pos[q] = hits
        if hits > 0:
            ap[q] = acc / hits
    return ap, first_hit, num_pos


def rank_metrics_np(order, matches, valid):
    rows = np.arange(order.shape[0])[:, None]
    v = valid[rows, order]
    m = matches[rows, order] & v
    ranks = np.cumsum(v, axis=1)
    hits = np.cumsum(m, axis=1)
    num_pos = hits[:, -1].astype(np.int64) if order.shape[1] else np.zeros(len(order), np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(m, hits / np.maximum(ranks, 1), 0.0)
        ap = np.where(num_pos > 0, prec.sum(axis=1) / np.maximum(num_pos, 1), 0.0)
    first_hit = np.full(order.shape[0], -1, dtype=np.int64)
    has = num_pos > 0
    first_idx = np.argmax(m, axis=1)
    first_hit[has] = ranks[has, first_idx[has]] - 1
    return ap.astype(np.float64), first_hit, num_pos


# ---------------------------------------------------------------------------
# Dispatchers
# ---------------------------------------------------------------------------

if USE_NUMBA:
    _dilate, _downsample = dilate_chebyshev_nb, area_downsample_nb
    _cpre, _composite, _rank = cpre_select_nb, composite_select_nb, rank_metrics_nb
else:
    _dilate, _downsample = dilate_chebyshev_np, area_downsample_np
    _cpre, _composite, _rank = cpre_select_np, composite_select_np, rank_metrics_np


def dilate_chebyshev(mask: np.ndarray, radius: int) -> np.ndarray:
    return _dilate(np.ascontiguousarray(mask != 0, dtype=np.uint8), int(radius))


def area_downsample(mask: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    return _downsample(np.ascontiguousarray(mask, dtype=np.float64), int(out_h), int(out_w))


def cpre_select(image: np.ndarray, cloth: np.ndarray, keep: np.ndarray, fill: np.ndarray) -> np.ndarray:
    image = np.ascontiguousarray(image)
    fill = np.ascontiguousarray(np.broadcast_to(fill, (image.shape[2],)), dtype=image.dtype)
    return _cpre(image, np.ascontiguousarray(cloth, dtype=np.uint8),
                 np.ascontiguousarray(keep, dtype=np.uint8), fill)


def composite_select(image: np.ndarray, mask: np.ndarray, synth: np.ndarray) -> np.ndarray:
    image = np.ascontiguousarray(image)
    synth = np.ascontiguousarray(synth, dtype=image.dtype)
    return _composite(image, np.ascontiguousarray(mask, dtype=np.uint8), synth)


def rank_metrics(order: np.ndarray, matches: np.ndarray, valid: np.ndarray):
    return _rank(np.ascontiguousarray(order, dtype=np.int64),
                 np.ascontiguousarray(matches, dtype=np.bool_),
                 np.ascontiguousarray(valid, dtype=np.bool_))
