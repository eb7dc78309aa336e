"""Time the numba kernels against their numpy twins on representative shapes.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Parity is asserted before timing so a fast but wrong kernel never reports a win.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from msclip import _accel as A


def cases(rng: np.random.Generator):
    img = rng.uniform(0, 5000, size=(10, 64, 64)).astype(np.float32)
    x = rng.standard_normal((32 * 17, 128))
    gamma, beta = rng.standard_normal(128), rng.standard_normal(128)
    y, xhat, rstd = A.np_layer_norm_forward(x, gamma, beta)
    dy = rng.standard_normal(x.shape)
    h = rng.standard_normal((32, 17, 512))
    _, t = A.np_gelu_forward(h)
    scores = rng.standard_normal((128, 16, 16))
    rel = (rng.random(300) < 0.1).astype(np.uint8)
    return [
        ("resize 10x64x64 -> 32x32", "resize_stack", (img, 32, 32)),
        ("layer_norm fwd 544x128", "layer_norm_forward", (x, gamma, beta)),
        ("layer_norm bwd 544x128", "layer_norm_backward", (dy, xhat, rstd, gamma)),
        ("gelu fwd 32x17x512", "gelu_forward", (h,)),
        ("gelu bwd 32x17x512", "gelu_backward", (h, h, t)),
        ("softmax causal 128x16x16", "softmax_rows", (scores, True)),
        ("AP@100 over 300", "ap_from_relevance", (rel, int(rel.sum()), 100)),
    ]


def _flat(out):
    return [np.asarray(o, dtype=np.float64) for o in (out if isinstance(out, tuple) else (out,))]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not A.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<28} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for label, name, fargs in cases(rng):
        f_np, f_nb = getattr(A, "np_" + name), getattr(A, "nb_" + name)
        f_nb(*fargs)  # compile outside the timed region
        for a, b in zip(_flat(f_np(*fargs)), _flat(f_nb(*fargs))):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-4 if label.startswith("resize") else 1e-10)
        t_np = min(timeit.repeat(lambda: f_np(*fargs), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*fargs), number=1, repeat=args.repeat)) * 1e3
        print(f"{label:<28} {t_np:>10.3f} {t_nb:>10.3f} {t_np / t_nb:>7.2f}x")


if __name__ == "__main__":
    main()
