#!/usr/bin/env python3
"""Smoke test for the diffex_py extension module.

Build the module first:

    cargo build --release -p diffex-py

then run this script from the repository root:

    python3 python/smoke_test.py
"""

import math
import os
import shutil
import sys
import tempfile


def locate_module():
    here = os.path.dirname(os.path.abspath(__file__))
    root = os.path.dirname(here)
    candidates = [
        os.path.join(root, "target", "release", "libdiffex_py.so"),
        os.path.join(root, "target", "debug", "libdiffex_py.so"),
        os.path.join(root, "target", "release", "libdiffex_py.dylib"),
        os.path.join(root, "target", "debug", "libdiffex_py.dylib"),
    ]
    for cand in candidates:
        if os.path.exists(cand):
            stage = tempfile.mkdtemp(prefix="diffex_py_")
            ext = ".so" if cand.endswith(".so") else ".so"  # python loads .so on mac too
            dest = os.path.join(stage, "diffex_py" + ext)
            shutil.copyfile(cand, dest)
            sys.path.insert(0, stage)
            return cand
    raise SystemExit(
        "libdiffex_py not found; run `cargo build --release -p diffex-py` first"
    )


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def main():
    built_from = locate_module()
    import diffex_py as dx

    # schedule: two-step hand case
    sched = dx.make_schedule(2, 0.1, 0.2)
    approx(sched.alpha_bar(0), 1.0)
    approx(sched.alpha_bar(1), 0.9, 1e-12)
    approx(sched.alpha_bar(2), 0.72, 1e-12)
    assert sched.t_max == 2
    try:
        dx.make_schedule(0, 0.1, 0.2)
        raise SystemExit("schedule with t_max=0 should fail")
    except ValueError:
        pass

    # q_sample / predict_x0 round trip on a constant image
    side = 16
    n = 3 * side * side
    x0 = [0.5] * n
    eps = [1.0] * n
    xt = sched.q_sample(x0, 2, eps, side)
    expect = math.sqrt(0.72) * 0.5 + math.sqrt(0.28)
    approx(xt[0], expect, 1e-12)
    back = sched.predict_x0(xt, 2, eps, side)
    approx(back[0], 0.5, 1e-9)

    # metrics identities
    img = [((i * 37) % 256) / 255.0 for i in range(n)]
    approx(dx.ssim(img, img, side), 1.0, 0.0)
    approx(dx.mse([0.0] * n, [1.0] * n, side), 1.0, 0.0)

    # kid against a tiny python oracle
    import random

    rng = random.Random(7)
    d = 4
    a = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(8)]
    b = [[rng.gauss(0, 1) for _ in range(d)] for _ in range(6)]

    def kernel(x, y):
        return (sum(p * q for p, q in zip(x, y)) / d + 1.0) ** 3

    def kid_oracle(xs, ys):
        nx, ny = len(xs), len(ys)
        sxx = sum(kernel(xs[i], xs[j]) for i in range(nx) for j in range(nx) if i != j)
        syy = sum(kernel(ys[i], ys[j]) for i in range(ny) for j in range(ny) if i != j)
        sxy = sum(kernel(x, y) for x in xs for y in ys)
        return sxx / (nx * (nx - 1)) + syy / (ny * (ny - 1)) - 2 * sxy / (nx * ny)

    approx(dx.kid(a, b), kid_oracle(a, b), 1e-9)
    try:
        dx.kid([[1.0]], a)
        raise SystemExit("kid with one row should fail")
    except ValueError:
        pass

    # contrastive hand case: two samples, two directions, orthogonal features
    f = [
        [[1.0, 0.0], [0.0, 1.0]],
        [[1.0, 0.0], [0.0, 1.0]],
    ]
    approx(dx.contrastive_loss(f, 1.0), math.log(2.0) - 1.0, 1e-12)

    # KL hand value
    approx(dx.kl_div([0.9, 0.1], [0.5, 0.5]), 0.9 * math.log(1.8) + 0.1 * math.log(0.2), 1e-12)

    # dataset primitives: determinism and class separation
    f0 = dx.sample_factors(0, 7)
    f0b = dx.sample_factors(0, 7)
    assert f0.jitter_seed == f0b.jitter_seed
    assert f0.nucleus_count == f0b.nucleus_count
    f1 = dx.sample_factors(1, 7)
    assert f1.cytoplasm_intensity < f0.cytoplasm_intensity
    img_a = dx.render_image(f0, 32)
    img_b = dx.render_image(f0, 32)
    assert img_a == img_b, "rendering must be deterministic"
    assert all(0.0 <= v <= 1.0 for v in img_a)
    # class 0 has brighter cytoplasm (channel 0 = first side*side block)
    c0_mean = sum(img_a[: 32 * 32]) / (32 * 32)
    img_c1 = dx.render_image(f1, 32)
    c1_mean = sum(img_c1[: 32 * 32]) / (32 * 32)
    assert c0_mean > c1_mean, f"cytoplasm means {c0_mean} vs {c1_mean}"

    # config validation surfaces the seed and rejects unknown keys
    with tempfile.NamedTemporaryFile("w", suffix=".toml", delete=False) as fh:
        fh.write("schema_version = 1\nseed = 9\n")
        cfg_path = fh.name
    assert dx.validate_config(cfg_path) == 9
    with tempfile.NamedTemporaryFile("w", suffix=".toml", delete=False) as fh:
        fh.write("schema_version = 1\nseed = 9\n[directions]\ntaus = 1.0\n")
        bad_path = fh.name
    try:
        dx.validate_config(bad_path)
        raise SystemExit("unknown key should fail validation")
    except ValueError as e:
        assert "did you mean" in str(e), str(e)

    print(f"smoke test passed ({built_from})")


if __name__ == "__main__":
    main()
