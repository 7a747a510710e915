"""Compare the compiled convolution kernels against the numpy fallback.

Times the three raw kernels over U-Net-typical shapes and a full training
iteration (forward + backward + Adam) on the tiny 16x16 denoiser.

    python benchmarks/bench_kernels.py
"""

import pathlib
import sys
import time

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).parent.parent / "src"))

from smokediff import kernels  # noqa: E402
from smokediff import tensor as T  # noqa: E402
from smokediff.data import NormStats, TrainSample  # noqa: E402
from smokediff.ddpm import build_condition  # noqa: E402
from smokediff.rng import Rng  # noqa: E402
from smokediff.train import TrainConfig, train  # noqa: E402
from smokediff.unet import UNetConfig  # noqa: E402


def timeit(fn, repeat=50):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn()
    return (time.perf_counter() - t0) / repeat


def bench_kernels(backend):
    kernels.use_backend(backend)
    rng = np.random.default_rng(0)
    rows = []
    for c_in, c_out, h, k, stride in [(16, 16, 16, 3, 1), (32, 32, 8, 3, 1), (16, 16, 16, 3, 2)]:
        x = rng.standard_normal((c_in, h, h)).astype(np.float32)
        w = rng.standard_normal((c_out, c_in, k, k)).astype(np.float32)
        pad = 1
        ho = (h + 2 * pad - k) // stride + 1
        gy = rng.standard_normal((c_out, ho, ho)).astype(np.float32)
        rows.append((
            f"conv {c_in}->{c_out} {h}x{h} k{k} s{stride}",
            timeit(lambda: kernels.conv2d_fwd(x, w, stride, pad)),
            timeit(lambda: kernels.conv2d_bwd_input(gy, w, stride, pad, h, h)),
            timeit(lambda: kernels.conv2d_bwd_kernel(gy, x, stride, pad, k, k)),
        ))
    return rows


def bench_train_step(backend):
    kernels.use_backend(backend)
    rng = Rng(0)
    x0 = rng.normal((2, 16, 16)).astype(np.float32)
    cond = build_condition(rng.uniform((16, 16)).astype(np.float32), 2.0, 8.0)
    sample = TrainSample(x0=x0, cond=cond, scene_index=0, tau=2.0)
    cfg = TrainConfig(epochs=30, batch_size=1, base_lr=1e-3, T=50, beta_start=1e-4, beta_end=0.13, seed=0)
    ucfg = UNetConfig(levels=2, base_channels=16, channel_mult=(1, 2), groups=8, time_embed_dim=32)
    t0 = time.perf_counter()
    train([sample], NormStats(1.0, 1.0), cfg, ucfg)
    return (time.perf_counter() - t0) / 30


def main():
    available = kernels.available_backends()
    print(f"available backends: {available}")
    if len(available) < 2:
        print("compiled extension not built; run `python setup.py build_ext --inplace` to compare")
    results = {b: bench_kernels(b) for b in available}
    print(f"\n{'case':34s}" + "".join(f"{b + ' fwd/bwd_in/bwd_k (us)':>42s}" for b in available))
    n_rows = len(next(iter(results.values())))
    for i in range(n_rows):
        line = f"{results[available[0]][i][0]:34s}"
        for b in available:
            _, f, bi, bk = results[b][i]
            line += f"{f * 1e6:12.1f} {bi * 1e6:12.1f} {bk * 1e6:12.1f}    "
        print(line)
    print("\nfull training iteration (tiny 16x16 denoiser):")
    for b in available:
        dt = bench_train_step(b)
        print(f"  {b:10s} {dt * 1e3:8.2f} ms/iter")
    kernels.use_backend(available[-1])


if __name__ == "__main__":
    main()
