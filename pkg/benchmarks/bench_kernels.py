"""Time each kernel under the compiled and pure-python backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Inputs are sized like a mast-b stage-1 block at 1/4 batch (one spectrogram).
Both backends are checked to agree before timing.
"""

from __future__ import annotations

import argparse
import json
import timeit

import numpy as np

from mast.kernels import available_backends, load_backend


def cases(rng: np.random.Generator) -> dict:
    x = rng.standard_normal((1, 32, 256, 96)).astype(np.float32)
    g = rng.standard_normal((1, 16, 128, 96)).astype(np.float32)
    img = rng.standard_normal((1, 1, 128, 1024)).astype(np.float32)
    cols = rng.standard_normal((1, 32 * 256, 49)).astype(np.float32)
    act = rng.standard_normal((8193, 384)).astype(np.float32)
    idx = rng.integers(0, 511, 256 * 256)
    src = rng.standard_normal((256 * 256, 96))
    return {
        "gelu_forward": lambda k: k.gelu_forward(act),
        "gelu_backward": lambda k: k.gelu_backward(act, act),
        "pool_forward": lambda k: k.pool_forward(x, 2, 2),
        "pool_backward": lambda k: k.pool_backward(g, 32, 256, 2, 2),
        "im2col": lambda k: k.im2col(img, 7, 7, 4, 4, 3, 3),
        "col2im": lambda k: k.col2im(cols, (1, 1, 128, 1024), 7, 7, 4, 4, 3, 3),
        "scatter_rows_add": lambda k: k.scatter_rows_add(idx, src, 511),
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--json", help="write results here as JSON")
    args = ap.parse_args(argv)

    backends = {name: load_backend(name) for name in available_backends()}
    work = cases(np.random.default_rng(0))
    results = {}
    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}")
    for name, fn in work.items():
        outs = {b: fn(k) for b, k in backends.items()}
        ref = outs["python"]
        for b, out in outs.items():
            np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-5, err_msg=f"{name}: {b} disagrees")
        times = {
            b: 1e3 * min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat))
            for b, k in backends.items()
        }
        speed = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        results[name] = {**times, "speedup": speed}
        print(f"{name:<18}" + "".join(f"{times[b]:>14.3f}" for b in backends) + f"{speed:>10.2f}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
