"""Built-in oracle and invariant suites behind the `selftest` CLI verb.

Each suite re-derives expected values from an independent route (literal
double sums, scalar-loop interpolation, finite differences, closed-form
substitutions) and checks the production path against it. Kept fast so
the whole battery runs in well under a minute; the pytest acceptance
module is the full-strength version of these checks.
"""

from __future__ import annotations

import math

import numpy as np

from .contraction import ContractionConfig, compute_alignment, contract_unbounded_raw
from .distortion import (distloss_backward, distloss_forward, distloss_oracle,
                         random_batch)
from .grid import create_grid, new_grad_buffer, trilinear_sample, tv_add_grad
from .optimizer import AdamState, adam_reference_step, adam_step
from .rendering import (Camera, RenderSettings, backward_rays, composite,
                        forward_rays, pixel_rays, sample_points)


def _check_distortion():
    rng = np.random.default_rng(11)
    for _ in range(100):
        batch = random_batch(rng, int(rng.integers(1, 16)), 1, 48)
        fast = distloss_forward(batch)
        slow = distloss_oracle(batch)
        rel = abs(fast - slow) / max(abs(slow), 1e-12)
        assert rel <= 1e-6, f"forward vs oracle rel err {rel:.2e}"
    for _ in range(10):
        batch = random_batch(rng, 3, 1, 8)
        grad = distloss_backward(batch)
        eps = 1e-6
        for i in range(batch.n_samples):
            w0 = batch.w[i]
            batch.w[i] = w0 + eps
            fp = distloss_forward(batch)
            batch.w[i] = w0 - eps
            fm = distloss_forward(batch)
            batch.w[i] = w0
            fd = (fp - fm) / (2 * eps)
            assert abs(grad[i] - fd) <= 1e-5 * max(abs(fd), 1.0), \
                f"backward vs finite difference at sample {i}"


def _check_adam():
    rng = np.random.default_rng(3)
    n = 512
    p1 = rng.normal(size=n)
    p2 = p1.copy()
    s1 = AdamState.fresh(n)
    s2 = AdamState.fresh(n)
    for _ in range(25):
        g = rng.normal(size=n)
        g[g == 0.0] = 1.0
        adam_step(p1, g, s1)
        adam_reference_step(p2, g, s2)
    assert np.abs(p1 - p2).max() <= 1e-12, "dense fused vs reference"
    p = np.array([1.5, -2.0])
    s = AdamState.fresh(2)
    adam_step(p, np.array([0.3, 0.0]), s)
    assert p[1] == -2.0 and s.m[1] == 0.0 and s.v[1] == 0.0, "zero-grad skip"


def _check_grid():
    rng = np.random.default_rng(5)
    grid = create_grid((6, 5, 7), 2, [[0, 0, 0], [1, 2, 1.5]], 0.0)
    grid.data[:] = rng.normal(size=grid.data.shape)
    pts = rng.random((200, 3))
    fast = trilinear_sample(grid, pts)
    n = np.array(grid.resolution)
    for k in range(0, 200, 17):
        x = np.clip(pts[k] * (n - 1), 0, n - 1)
        i0 = np.minimum(x.astype(int), n - 2)
        f = x - i0
        want = np.zeros(grid.channels)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    wgt = ((f[0] if dx else 1 - f[0]) * (f[1] if dy else 1 - f[1])
                           * (f[2] if dz else 1 - f[2]))
                    want += wgt * grid.data[i0[0] + dx, i0[1] + dy, i0[2] + dz]
        assert np.abs(fast[k] - want).max() <= 1e-12, "interp vs scalar loop"

    small = create_grid((4, 4, 4), 1, [[0, 0, 0], [1, 1, 1]], 0.0)
    small.data[:] = rng.normal(size=small.data.shape)
    gbuf = new_grad_buffer(small)
    n_pairs = tv_add_grad(small, gbuf, 0.7, True)

    def tv_value(data):
        tot = 0.0
        for ax in range(3):
            d = np.abs(np.diff(data, axis=ax))
            tot += np.sum(np.where(d <= 1.0, 0.5 * d * d, d - 0.5))
        return 0.7 * tot / n_pairs

    eps = 1e-5
    flat = small.data.reshape(-1)
    for i in range(0, flat.size, 7):
        v = flat[i]
        flat[i] = v + eps
        fp = tv_value(small.data)
        flat[i] = v - eps
        fm = tv_value(small.data)
        flat[i] = v
        fd = (fp - fm) / (2 * eps)
        assert abs(gbuf.reshape(-1)[i] - fd) <= 1e-5 * max(abs(fd), 1e-3), \
            "tv gradient vs finite difference"

    dense = new_grad_buffer(small)
    sparse = new_grad_buffer(small)
    tv_add_grad(small, dense, 0.7, True)
    tv_add_grad(small, sparse, 0.7, False,
                np.ones(small.resolution, dtype=np.bool_))
    assert np.abs(dense - sparse).max() <= 1e-12, "sparse(all) vs dense"


def _check_contraction():
    rng = np.random.default_rng(9)
    for p in (2.0, float("inf")):
        cfg = ContractionConfig(mode="unbounded", b=1.0, p=p)
        pts = rng.normal(0, 3.0, size=(20000, 3))
        raw = contract_unbounded_raw(pts, cfg)
        if p == 2.0:
            norms = np.linalg.norm(raw, axis=1)
        else:
            norms = np.abs(raw).max(axis=1)
        assert norms.max() <= 2.0 + 1e-12, "boundedness ||x'|| <= 1 + b"
        inside = rng.normal(size=(500, 3))
        inside *= (0.99 * rng.random((500, 1))
                   / np.maximum(np.linalg.norm(inside, axis=1, keepdims=True), 1e-9))
        assert np.abs(contract_unbounded_raw(inside, cfg) - inside).max() <= 1e-12, \
            "identity inside the unit ball"
    cfg2 = ContractionConfig(mode="unbounded", b=1.0, p=2.0)
    got = contract_unbounded_raw(np.array([2.0, 0.0, 0.0]), cfg2)
    assert np.abs(got - [1.5, 0.0, 0.0]).max() <= 1e-12, "closed form p=2"
    cfgi = ContractionConfig(mode="unbounded", b=1.0, p=float("inf"))
    got = contract_unbounded_raw(np.array([2.0, 1.0, 0.0]), cfgi)
    assert np.abs(got - [1.5, 0.75, 0.0]).max() <= 1e-12, "closed form p=inf"

    theta = np.linspace(0, 2 * math.pi, 24, endpoint=False)
    ring = np.stack([2.0 * np.cos(theta), np.zeros(24), 2.0 * np.sin(theta)], 1)
    tf = compute_alignment(ring)
    assert np.abs(tf.apply(ring)[:, 2]).max() <= 1e-9, "ring realigned into XY"


def _check_compositing():
    rng = np.random.default_rng(13)
    counts = rng.integers(1, 120, size=300)
    offsets = np.zeros(301, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    m = int(offsets[-1])
    alphas = rng.uniform(0.0, 0.95, size=m)
    colors = rng.random((m, 3))
    bg = np.array([1.0, 1.0, 1.0])
    rgb_h, w_h, t_h = composite(alphas, colors, bg, offsets, 1e-3)
    rgb_f, w_f, t_f = composite(alphas, colors, bg, offsets, 0.0)
    wsum = np.add.reduceat(w_h, offsets[:-1])
    assert np.abs(wsum + t_h - 1.0).max() <= 1e-6, "sum w + T == 1"
    assert np.abs(rgb_h - rgb_f).max() <= 2e-3, "early-halt bound"


def _check_end_to_end():
    rng = np.random.default_rng(17)
    dens = create_grid((4, 4, 4), 1, [[0, 0, 0], [1, 1, 1]], 0.0)
    col = create_grid((4, 4, 4), 3, [[0, 0, 0], [1, 1, 1]], 0.0)
    dens.data[:] = rng.normal(0, 2, dens.data.shape)
    col.data[:] = rng.normal(0, 1, col.data.shape)
    cfg = ContractionConfig(mode="bounded", aabb=dens.aabb)
    st = RenderSettings(contraction=cfg, step_size=0.5, halt_threshold=0.0,
                        alpha_init=1e-2, near=0.01, far=10.0)
    cam = Camera(width=2, height=2, focal=2.0, cx=1.0, cy=1.0,
                 c2w=np.array([[0.0, 0.0, 1.0, -1.5], [1.0, 0.0, 0.0, 0.5],
                               [0.0, 1.0, 0.0, 0.5], [0.0, 0.0, 0.0, 1.0]]))
    origins, dirs = pixel_rays(cam)
    gt = rng.random((4, 3))
    shift = st.shift(dens.resolution)

    def loss():
        s = sample_points(origins, dirs, st, dens.resolution)
        f = forward_rays(dens, col, s, st, shift)
        return float(np.mean((f.rgb - gt) ** 2)), s, f

    base, s, f = loss()
    d_rgb = 2.0 * (f.rgb - gt) / f.rgb.size
    dg = new_grad_buffer(dens)
    cg = new_grad_buffer(col)
    touched = np.zeros(dens.resolution, dtype=np.bool_)
    backward_rays(s, f, d_rgb, st, shift, dg, cg, touched)
    eps = 1e-5
    scale = max(np.abs(dg).max(), np.abs(cg).max())
    for grid, buf in ((dens, dg), (col, cg)):
        flat = grid.data.reshape(-1)
        for i in range(0, flat.size, 11):
            v = flat[i]
            flat[i] = v + eps
            lp = loss()[0]
            flat[i] = v - eps
            lm = loss()[0]
            flat[i] = v
            fd = (lp - lm) / (2 * eps)
            assert abs(buf.reshape(-1)[i] - fd) <= 1e-4 * max(scale, 1e-9), \
                "render gradient vs finite difference"


SUITES = [
    ("distortion forward/backward vs oracle", _check_distortion),
    ("fused adam vs reference, zero-skip", _check_adam),
    ("grid interpolation / tv gradients", _check_grid),
    ("scene contraction and alignment", _check_contraction),
    ("compositing identities", _check_compositing),
    ("end-to-end render gradient", _check_end_to_end),
]


def run_all(verbose: bool = True) -> bool:
    ok = True
    for name, fn in SUITES:
        try:
            fn()
        except AssertionError as e:
            ok = False
            if verbose:
                print(f"[FAIL] {name}: {e}")
        else:
            if verbose:
                print(f"[ ok ] {name}")
    return ok
