"""Time the numba and numpy variants of every hot kernel on realistic shapes.

    python benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Each kernel is warmed up once (this triggers JIT compilation) before timing,
and both variants are checked for equal output on the benchmark inputs.
"""

import argparse
import json
import time

import numpy as np

from msp_reid import _accel, kernels


def _inputs(rng):
    h, w = 384, 192
    mask = (rng.random((h, w)) < 0.05).astype(np.uint8)
    image = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    cloth = (rng.random((h, w)) < 0.4).astype(np.uint8)
    keep = (rng.random((h, w)) < 0.2).astype(np.uint8)
    fill = np.zeros(3, dtype=np.uint8)
    synth = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    nq, ng = 300, 3000
    sim = rng.random((nq, ng))
    order = np.argsort(-sim, axis=1, kind="stable").astype(np.int64)
    qid, gid = rng.integers(0, 100, nq), rng.integers(0, 100, ng)
    matches = qid[:, None] == gid[None, :]
    valid = rng.random((nq, ng)) < 0.9
    return {
        "dilate_chebyshev (384x192, r=2)": ("dilate_chebyshev", (mask, 2)),
        "area_downsample (384x192 -> 24x12)": ("area_downsample", (mask.astype(np.float64), 24, 12)),
        "cpre_select (384x192x3)": ("cpre_select", (image, cloth, keep, fill)),
        "composite_select (384x192x3)": ("composite_select", (image, mask, synth)),
        "rank_metrics (300 x 3000)": ("rank_metrics", (order, matches, valid)),
    }


def _time(fn, args, repeat):
    fn(*args)  # warm-up / compile
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=0, atol=1e-12)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)

    if not _accel.NUMBA_AVAILABLE:
        print("numba unavailable (or disabled): both columns time the numpy/python code")
    rows = []
    for label, (name, inputs) in _inputs(np.random.default_rng(args.seed)).items():
        nb = getattr(kernels, name + "_nb")
        npy = getattr(kernels, name + "_np")
        agree = _same(nb(*inputs), npy(*inputs))
        t_nb, t_np = _time(nb, inputs, args.repeat), _time(npy, inputs, args.repeat)
        rows.append({"kernel": label, "numba_ms": 1e3 * t_nb, "numpy_ms": 1e3 * t_np,
                     "speedup": t_np / t_nb if t_nb > 0 else float("inf"), "outputs_agree": bool(agree)})

    print(f"{'kernel':38s} {'numba ms':>10s} {'numpy ms':>10s} {'np/nb':>7s}  agree")
    for r in rows:
        print(f"{r['kernel']:38s} {r['numba_ms']:10.3f} {r['numpy_ms']:10.3f} {r['speedup']:7.2f}  {r['outputs_agree']}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"backend": _accel.backend(), "rows": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
