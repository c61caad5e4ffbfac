"""Time the compiled kernels against the numpy fallback, plus one training step.

    python benchmarks/bench_kernels.py [--grid 30] [--samples 50] [--sources 6] [--repeat 20]

Prints one line per kernel with the median wall time of each backend and the
speed-up. Both backends are also checked to agree before timing.
"""
import argparse
import statistics
import time

import numpy as np

from mgpa import _kernels_py, kernels
from mgpa.kron_conv import build_kernel

try:
    from mgpa import _ckernels
except ImportError:
    _ckernels = None


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--grid", type=int, default=30)
    ap.add_argument("--samples", type=int, default=50)
    ap.add_argument("--sources", type=int, default=6)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    g = args.grid
    f = g**3
    fz, fy, fx = build_kernel((g, g, g), 2.0).factors
    vol = rng.standard_normal((g, g, g))
    mu = rng.standard_normal((args.sources, f))
    log_rho2 = rng.standard_normal((args.sources, f))
    y = rng.standard_normal((args.samples, f))
    s = rng.standard_normal((args.samples, args.sources))
    a = rng.standard_normal((args.sources, f))
    z = rng.standard_normal(f)

    cases = {
        "separable_conv3d": ("separable_conv3d", (vol, fz, fy, fx)),
        "kl_codes_grad": ("kl_codes_grad", (mu, log_rho2)),
        "residual_moments": ("residual_moments", (y, s, a, z)),
    }
    print(f"active backend: {kernels.BACKEND}; grid {g}^3, P={args.samples}, N_s={args.sources}")
    print(f"{'kernel':<18} {'numpy ms':>10} {'cython ms':>10} {'speed-up':>9}")
    for label, (name, inputs) in cases.items():
        py_fn = getattr(_kernels_py, name)
        t_py = median_time(lambda: py_fn(*inputs), args.repeat)
        if _ckernels is None:
            print(f"{label:<18} {1e3 * t_py:10.3f} {'n/a':>10} {'n/a':>9}")
            continue
        c_fn = getattr(_ckernels, name)
        ref, got = py_fn(*inputs), c_fn(*inputs)
        ref = ref if isinstance(ref, tuple) else (ref,)
        got = got if isinstance(got, tuple) else (got,)
        for r, c in zip(ref, got):
            np.testing.assert_allclose(c, r, rtol=1e-8, atol=1e-8)
        t_c = median_time(lambda: c_fn(*inputs), args.repeat)
        print(f"{label:<18} {1e3 * t_py:10.3f} {1e3 * t_c:10.3f} {t_py / t_c:8.2f}x")

    from mgpa.optimizer import FitConfig, initial_state, train_step
    from mgpa.synth_bench import SynthSpec, generate

    data, _ = generate(SynthSpec(grid=(g, g, g), n_times=args.samples))
    cfg = FitConfig(optimize_timeshift=False, n_epochs=1, block_len=args.repeat + 1)
    state = initial_state(data, cfg)
    y_scaled = data.y / state.data_scale
    t_step = median_time(lambda: train_step(state, y_scaled, cfg), args.repeat)
    print(f"{'train_step':<18} {1e3 * t_step:10.3f} ms with the active backend")


if __name__ == "__main__":
    main()
