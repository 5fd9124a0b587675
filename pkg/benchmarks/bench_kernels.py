"""Compare the compiled and numpy im2col/col2im backends.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--batch 8] [--size 64] [--channels 16]

Times im2col, col2im, and a full conv forward + backward for a 3x3 pad-1
layer, then a stride-B measurement layer, on each available backend.
"""
import argparse
import timeit

import numpy as np

from blockcs import _backend
from blockcs.kernels import ConvSpec, conv2d_backward, conv2d_forward


def cases(batch, size, channels, block):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((batch, channels, size, size)).astype(np.float32)
    w = rng.standard_normal((channels, channels, 3, 3)).astype(np.float32)
    b = np.zeros(channels, dtype=np.float32)
    spec = ConvSpec(channels, channels, 3, 3, 1, 1, 1, 1)
    cols = _backend.im2col(x, 3, 3, 1, 1, 1, 1, size, size)
    g = rng.standard_normal((batch, channels, size, size)).astype(np.float32)
    img = rng.standard_normal((batch, 1, size, size)).astype(np.float32)
    mw = rng.standard_normal((16, 1, block, block)).astype(np.float32)
    mspec = ConvSpec(1, 16, block, block, block, block, 0, 0, has_bias=False)
    return {
        "im2col 3x3": lambda: _backend.im2col(x, 3, 3, 1, 1, 1, 1, size, size),
        "col2im 3x3": lambda: _backend.col2im(cols, x.shape, 3, 3, 1, 1, 1, 1, size, size),
        "conv fwd 3x3": lambda: conv2d_forward(x, w, b, spec),
        "conv bwd 3x3": lambda: conv2d_backward(x, w, spec, g),
        f"measure fwd B={block}": lambda: conv2d_forward(img, mw, None, mspec),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--batch", type=int, default=8)
    parser.add_argument("--size", type=int, default=64)
    parser.add_argument("--channels", type=int, default=16)
    parser.add_argument("--block", type=int, default=8)
    args = parser.parse_args()

    backends = _backend.available_backends()
    timings = {}
    previous = _backend.active_backend()
    try:
        for name in backends:
            _backend.set_backend(name)
            for label, fn in cases(args.batch, args.size, args.channels, args.block).items():
                fn()
                best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
                timings[(label, name)] = best
    finally:
        _backend.set_backend(previous)

    labels = list(dict.fromkeys(label for label, _ in timings))
    print(f"batch={args.batch} size={args.size} channels={args.channels} threads={_backend.NUM_THREADS}")
    print(f"{'kernel':<18}" + "".join(f"{b + ' ms':>14}" for b in backends)
          + ("   speedup" if len(backends) > 1 else ""))
    for label in labels:
        row = [timings[(label, b)] * 1e3 for b in backends]
        line = f"{label:<18}" + "".join(f"{t:>14.2f}" for t in row)
        if "cython" in backends and "python" in backends:
            line += f"   {timings[(label, 'python')] / timings[(label, 'cython')]:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
