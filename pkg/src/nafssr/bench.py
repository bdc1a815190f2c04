"""Microbenchmark comparing the two kernel lanes on the operations they
implement: 3x3 convolution forward/backward (dense and depthwise), windowed
box sums, and a small end-to-end model step.

Each case is warmed up once per lane (the compiled lane pays its JIT cost
there), then timed ``repeats`` times; the table reports the best wall time
per lane and the speedup of the compiled lane over the pure-numpy one.
"""

import time

import numpy as np

from . import autodiff as ad
from .backend import available_backends, backend_name, kernels, set_backend
from .model import ModelConfig, build_model, model_forward
from .train import l1_loss


def _conv_case(n, cin, cout, hw, groups):
    rng = np.random.default_rng(42)
    xp = rng.standard_normal((n, cin, hw + 2, hw + 2)).astype(np.float32)
    w = rng.standard_normal((cout, cin // groups, 3, 3)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    gy = rng.standard_normal((n, cout, hw, hw)).astype(np.float32)
    return xp, w, b, gy


def _cases():
    xp_d, w_d, b_d, gy_d = _conv_case(2, 32, 32, 64, groups=1)
    xp_w, w_w, b_w, gy_w = _conv_case(2, 64, 64, 64, groups=64)
    box = np.random.default_rng(7).standard_normal((2, 32, 96, 96))
    box = box.astype(np.float32)

    cfg = ModelConfig(width=16, n_blocks=2, scale=2, scam_count=2)
    store = build_model(cfg, seed=(0, 0))
    rng = np.random.default_rng(3)
    lr = rng.random((2, 3, 16, 48)).astype(np.float32)
    hr = rng.random((2, 3, 32, 96)).astype(np.float32)

    def model_step():
        tl = ad.Tensor4(lr)
        tr = ad.Tensor4(lr[:, :, :, ::-1].copy())
        sl, sr = model_forward(store, tl, tr)
        loss = l1_loss(sl, sr, ad.Tensor4(hr), ad.Tensor4(hr))
        ad.backward(loss)
        return loss.item()

    return [
        ("conv3x3 dense fwd",
         lambda: kernels().conv3x3_forward(xp_d, w_d, b_d)),
        ("conv3x3 dense bwd",
         lambda: kernels().conv3x3_backward(xp_d, w_d, gy_d)),
        ("conv3x3 depthwise fwd",
         lambda: kernels().conv3x3_forward(xp_w, w_w, b_w)),
        ("conv3x3 depthwise bwd",
         lambda: kernels().conv3x3_backward(xp_w, w_w, gy_w)),
        ("box sums 96x96 w45x135",
         lambda: kernels().box_pool_sums(box, 22, 22, 67, 67)),
        ("micro model fwd+bwd", model_step),
    ]


def _time(fn, repeats):
    fn()  # warmup: JIT compile and cache priming
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run_bench(repeats=5, log=print):
    lanes = available_backends()
    previous = backend_name()
    results = {}
    try:
        for lane in lanes:
            set_backend(lane)
            log(f"timing lane: {lane}")
            for name, fn in _cases():
                results.setdefault(name, {})[lane] = _time(fn, repeats)
    finally:
        set_backend(previous)

    header = f"{'case':<26}" + "".join(f"{lane:>12}" for lane in lanes)
    if "numba" in lanes and "numpy" in lanes:
        header += f"{'speedup':>10}"
    lines = [header, "-" * len(header)]
    for name, per in results.items():
        row = f"{name:<26}" + "".join(f"{per[lane] * 1e3:>10.2f}ms"
                                      for lane in lanes)
        if "numba" in per and "numpy" in per:
            row += f"{per['numpy'] / per['numba']:>9.2f}x"
        lines.append(row)
    table = "\n".join(lines)
    log(table)
    return table
