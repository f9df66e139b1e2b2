"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Also times a full flow encode/decode of a 256x256 synthetic mask with each
backend (each in its own subprocess, since the backend is fixed at import).
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from cyclepose import kernels


def best_of(func, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        func()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    # disk of radius 20 inside a padded bounding box
    yy, xx = np.mgrid[:43, :43]
    inside = (yy - 21) ** 2 + (xx - 21) ** 2 <= 400
    ys, xs = np.nonzero(inside)
    diffuse = lambda f: lambda: f(np.zeros(43 * 43), ys, xs, 21, 21, 43, 160)

    dP = rng.normal(size=(2, 256, 256))
    p = rng.uniform(0, 255, size=(20000, 2))
    follow = lambda f: lambda: f(p.copy(), dP, 200, 1.0)

    theta = rng.uniform(0, 2 * np.pi, size=(35, 35))
    grads = np.stack([np.cos(theta), np.sin(theta)], -1)
    perlin = lambda f: lambda: f(512, 512, 1 / 16, grads)

    a = rng.integers(0, 60, 512 * 512)
    b = rng.integers(0, 60, 512 * 512)
    cont = lambda f: lambda: f(a, b, 60, 60)

    return {
        "diffuse (r=20 disk, 160 sweeps)": (diffuse, kernels.diffuse_numpy, kernels.diffuse_numba),
        "follow_flows (20k pts, 200 steps)": (follow, kernels.follow_flows_numpy, kernels.follow_flows_numba),
        "perlin_lattice (512x512)": (perlin, kernels.perlin_lattice_numpy, kernels.perlin_lattice_numba),
        "contingency (512x512, 60x60)": (cont, kernels.contingency_numpy, kernels.contingency_numba),
    }


_CODEC_SNIPPET = """
import json, time
from cyclepose import _jit
from cyclepose.flowcodec import DecodeConfig, decode_flows, encode_flows
from cyclepose.synthmask import DeformConfig, EllipseConfig, synthesize_mask
cfg = EllipseConfig(canvas_size=(256, 256))
warm = synthesize_mask(cfg, DeformConfig(), 1)
decode_flows(encode_flows(warm))  # compile / load cache outside the timed region
mask = synthesize_mask(cfg, DeformConfig(), 0)
t0 = time.perf_counter(); flows = encode_flows(mask); t1 = time.perf_counter()
decode_flows(flows, DecodeConfig()); t2 = time.perf_counter()
print(json.dumps({"backend": _jit.BACKEND, "encode": t1 - t0, "decode": t2 - t1}))
"""


def codec_timing(disable):
    env = dict(os.environ, CYCLEPOSE_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", _CODEC_SNIPPET], env=env, capture_output=True, text=True,
                         check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-codec", action="store_true")
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    print(f"{'kernel':36s} {'numpy [ms]':>11s} {'numba [ms]':>11s} {'speedup':>8s}")
    for name, (make, f_np, f_nb) in kernel_cases(rng).items():
        make(f_nb)()  # compile outside the timed region
        t_np = best_of(make(f_np), args.repeat)
        t_nb = best_of(make(f_nb), args.repeat)
        print(f"{name:36s} {1e3 * t_np:11.2f} {1e3 * t_nb:11.2f} {t_np / t_nb:7.1f}x")

    if not args.skip_codec:
        print()
        for disable in (True, False):
            r = codec_timing(disable)
            print(f"codec 256x256, {r['backend']:5s}: encode {r['encode']:.3f} s, decode {r['decode']:.3f} s")


if __name__ == "__main__":
    main()
