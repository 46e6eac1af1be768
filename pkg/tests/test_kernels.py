"""The numba and numpy variants of each kernel must agree with each other and
with a per-element brute-force oracle."""

import os
import subprocess
import sys

import numpy as np
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msp_reid import _accel, kernels

shapes = st.tuples(st.integers(1, 9), st.integers(1, 9))
bits = st.integers(0, 1)


@given(arrays(np.uint8, shapes, elements=bits), st.integers(0, 5))
def test_dilate_variants_agree(mask, r):
    assert np.array_equal(kernels.dilate_chebyshev_nb(mask, r), kernels.dilate_chebyshev_np(mask, r))


@given(arrays(np.float64, shapes, elements=st.floats(0, 1)), st.data())
def test_downsample_variants_agree(mask, data):
    th = data.draw(st.integers(1, mask.shape[0]))
    tw = data.draw(st.integers(1, mask.shape[1]))
    np.testing.assert_allclose(kernels.area_downsample_nb(mask, th, tw),
                               kernels.area_downsample_np(mask, th, tw), atol=1e-12)


@given(st.data())
def test_select_kernels_match_ternary_oracle(data):
    h, w = data.draw(shapes)
    image = data.draw(arrays(np.uint8, (h, w, 3)))
    synth = data.draw(arrays(np.uint8, (h, w, 3)))
    cloth = data.draw(arrays(np.uint8, (h, w), elements=bits))
    keep = data.draw(arrays(np.uint8, (h, w), elements=bits))
    fill = np.array(data.draw(st.lists(st.integers(0, 255), min_size=3, max_size=3)), dtype=np.uint8)

    cpre_oracle = image.copy()
    comp_oracle = image.copy()
    for i in range(h):
        for j in range(w):
            if cloth[i, j] and not keep[i, j]:
                cpre_oracle[i, j] = fill
            if cloth[i, j]:
                comp_oracle[i, j] = synth[i, j]
    for fn in (kernels.cpre_select_nb, kernels.cpre_select_np):
        assert np.array_equal(fn(image, cloth, keep, fill), cpre_oracle)
    for fn in (kernels.composite_select_nb, kernels.composite_select_np):
        assert np.array_equal(fn(image, cloth, synth), comp_oracle)


def _rank_oracle(order, matches, valid):
    ap, first, npos = [], [], []
    for q in range(order.shape[0]):
        ranked = [g for g in order[q] if valid[q, g]]
        hits = [k for k, g in enumerate(ranked, 1) if matches[q, g]]
        npos.append(len(hits))
        first.append(hits[0] - 1 if hits else -1)
        ap.append(np.mean([(n + 1) / k for n, k in enumerate(hits)]) if hits else 0.0)
    return np.array(ap), np.array(first), np.array(npos)


@given(st.data())
def test_rank_metrics_variants_match_oracle(data):
    nq = data.draw(st.integers(1, 5))
    ng = data.draw(st.integers(1, 8))
    order = np.stack([np.random.default_rng(data.draw(st.integers(0, 2**32 - 1))).permutation(ng)
                      for _ in range(nq)]).astype(np.int64)
    matches = data.draw(arrays(np.bool_, (nq, ng)))
    valid = data.draw(arrays(np.bool_, (nq, ng)))
    oracle = _rank_oracle(order, matches, valid)
    for fn in (kernels.rank_metrics_nb, kernels.rank_metrics_np):
        ap, first, npos = fn(order, matches, valid)
        np.testing.assert_allclose(ap, oracle[0], rtol=0, atol=1e-12)
        assert np.array_equal(first, oracle[1])
        assert np.array_equal(npos, oracle[2])


def test_backend_flag_selects_numpy_in_subprocess():
    env = dict(os.environ, MSP_REID_DISABLE_NUMBA="1")
    code = "from msp_reid import kernels, _accel; print(_accel.backend(), kernels._rank.__name__)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "rank_metrics_np"]


def test_default_backend_reports_numba_when_available():
    expected = "numba" if _accel.NUMBA_AVAILABLE and not _accel._DISABLED else "numpy"
    assert _accel.backend() == expected
