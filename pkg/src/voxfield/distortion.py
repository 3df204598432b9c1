"""Ray-weight spread penalty with linear-time forward and backward passes.

For one ray with sample weights w, interval midpoints m and interval
lengths ell, the penalty is

    L = sum_i sum_j w_i w_j |m_i - m_j|  +  (1/3) sum_i w_i^2 ell_i

Within a ray the midpoints are sorted, so the pairwise term collapses to
running sums: with exclusive prefix sums P_w and P_wm of w and w*m,

    sum_ij w_i w_j |m_i - m_j| = 2 sum_i w_i (m_i P_w[i] - P_wm[i])

and the derivative for w_k needs the matching exclusive suffix sums,

    dL1/dw_k = 2 m_k P_w[k] - 2 P_wm[k] + 2 S_wm[k] - 2 m_k S_w[k].

Both passes therefore run in one sweep per ray, O(total samples) time and
memory, instead of forming all O(N^2) pairs. A literal double-sum
evaluator is kept alongside as a verification oracle.

Batches are ragged: rays may carry any number of samples, delimited by
`ray_offsets`. Prefix/suffix sums never cross ray boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

WEIGHT_SUM_SLACK = 1e-6


@dataclass
class RaySampleBatch:
    """Ragged per-ray samples.

    ray_offsets delimits each ray's samples: ray r owns samples
    [ray_offsets[r], ray_offsets[r+1]). Each ray has one more interval
    boundary than samples, so ray r's boundaries live at
    s[ray_offsets[r] + r : ray_offsets[r+1] + r + 1]. Midpoints and
    lengths are derived from the boundaries.
    """

    ray_offsets: np.ndarray  # (R+1,) int64
    s: np.ndarray            # (M+R,) float64, boundaries in [0, 1]
    w: np.ndarray            # (M,) float64, per-sample weights
    m: np.ndarray            # (M,) float64, interval midpoints
    len: np.ndarray          # (M,) float64, interval lengths

    @classmethod
    def from_boundaries(cls, ray_offsets, s, w) -> "RaySampleBatch":
        """Build a batch from boundary values, deriving midpoints/lengths."""
        ray_offsets = np.ascontiguousarray(ray_offsets, dtype=np.int64)
        s = np.ascontiguousarray(s, dtype=np.float64)
        w = np.ascontiguousarray(w, dtype=np.float64)
        n_rays = ray_offsets.shape[0] - 1
        counts = np.diff(ray_offsets)
        if np.any(counts < 1):
            raise ValueError("every ray needs at least one sample")
        total = int(ray_offsets[-1])
        if w.shape[0] != total:
            raise ValueError(f"w has {w.shape[0]} entries, offsets expect {total}")
        if s.shape[0] != total + n_rays:
            raise ValueError(f"s has {s.shape[0]} boundaries, expected {total + n_rays}")
        ray_of = np.repeat(np.arange(n_rays, dtype=np.int64), counts)
        lo = s[np.arange(total) + ray_of]
        hi = s[np.arange(total) + ray_of + 1]
        return cls(ray_offsets, s, w, 0.5 * (lo + hi), hi - lo)

    @property
    def n_rays(self) -> int:
        return self.ray_offsets.shape[0] - 1

    @property
    def n_samples(self) -> int:
        return int(self.ray_offsets[-1])

    def validate(self) -> None:
        """Raise ValueError if any batch invariant is broken."""
        off = self.ray_offsets
        if off[0] != 0 or np.any(np.diff(off) < 1):
            raise ValueError("ray_offsets must start at 0 and strictly increase")
        if np.any(self.len < 0.0):
            raise ValueError("negative interval length")
        # m strictly increasing within each ray
        dm = np.diff(self.m)
        at_ray_start = np.zeros(dm.shape[0], dtype=bool)
        inner = off[1:-1]
        at_ray_start[inner - 1] = True
        if np.any(dm[~at_ray_start] <= 0.0):
            raise ValueError("midpoints must be strictly increasing within each ray")
        if np.any(self.s < -1e-9) or np.any(self.s > 1.0 + 1e-9):
            raise ValueError("boundaries must lie in [0, 1]")
        w_per_ray = np.add.reduceat(self.w, off[:-1]) if self.n_samples else np.zeros(0)
        if np.any(w_per_ray > 1.0 + WEIGHT_SUM_SLACK):
            raise ValueError("per-ray weight sum exceeds 1")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.s))):
            raise ValueError("non-finite batch values")


@njit(cache=True, parallel=True)
def _forward_kernel(offsets, w, m, ell, per_ray, flags):
    n_rays = offsets.shape[0] - 1
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        cum_w = 0.0
        cum_wm = 0.0
        acc = 0.0
        prev_m = -1.0
        bad = 0
        for i in range(lo, hi):
            wi = w[i]
            mi = m[i]
            li = ell[i]
            if li < 0.0:
                bad |= 1
            if i > lo and mi <= prev_m:
                bad |= 2
            prev_m = mi
            acc += 2.0 * wi * (mi * cum_w - cum_wm) + wi * wi * li / 3.0
            cum_w += wi
            cum_wm += wi * mi
        per_ray[r] = acc
        flags[r] = bad


@njit(cache=True, parallel=True)
def _backward_kernel(offsets, w, m, ell, grad, flags):
    n_rays = offsets.shape[0] - 1
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        tot_w = 0.0
        tot_wm = 0.0
        prev_m = -1.0
        bad = 0
        for i in range(lo, hi):
            mi = m[i]
            if ell[i] < 0.0:
                bad |= 1
            if i > lo and mi <= prev_m:
                bad |= 2
            prev_m = mi
            tot_w += w[i]
            tot_wm += w[i] * mi
        flags[r] = bad
        cum_w = 0.0
        cum_wm = 0.0
        for i in range(lo, hi):
            wi = w[i]
            mi = m[i]
            suf_w = tot_w - cum_w - wi
            suf_wm = tot_wm - cum_wm - wi * mi
            grad[i] = (2.0 * mi * cum_w - 2.0 * cum_wm
                       + 2.0 * suf_wm - 2.0 * mi * suf_w
                       + 2.0 * wi * ell[i] / 3.0)
            cum_w += wi
            cum_wm += wi * mi


@njit(cache=True, parallel=True)
def _oracle_kernel(offsets, w, m, ell, per_ray):
    n_rays = offsets.shape[0] - 1
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        acc = 0.0
        for i in range(lo, hi):
            for j in range(lo, hi):
                acc += w[i] * w[j] * abs(m[i] - m[j])
        for i in range(lo, hi):
            acc += w[i] * w[i] * ell[i] / 3.0
        per_ray[r] = acc


def _raise_bad(flags: np.ndarray) -> None:
    bad = int(np.bitwise_or.reduce(flags)) if flags.size else 0
    if bad & 1:
        raise ValueError("negative interval length")
    if bad & 2:
        raise ValueError("midpoints must be strictly increasing within each ray")


def distloss_forward(batch: RaySampleBatch) -> float:
    """Spread penalty summed over all rays, O(total samples).

    Input validation (sorted midpoints, nonnegative lengths) is fused into
    the same pass."""
    per_ray = np.empty(batch.n_rays, dtype=np.float64)
    flags = np.empty(batch.n_rays, dtype=np.int64)
    _forward_kernel(batch.ray_offsets, batch.w, batch.m, batch.len, per_ray,
                    flags)
    _raise_bad(flags)
    return float(np.sum(per_ray))


def distloss_backward(batch: RaySampleBatch) -> np.ndarray:
    """dL/dw per sample, O(total samples).

    Only the weights are treated as inputs; midpoints and lengths are
    fixed sample geometry and carry no gradient.
    """
    grad = np.empty(batch.n_samples, dtype=np.float64)
    flags = np.empty(batch.n_rays, dtype=np.int64)
    _backward_kernel(batch.ray_offsets, batch.w, batch.m, batch.len, grad,
                     flags)
    _raise_bad(flags)
    return grad


def distloss_oracle(batch: RaySampleBatch, max_total_samples: int = 100_000) -> float:
    """Literal double-sum evaluation; O(N^2) per ray.

    Guarded against accidental huge inputs; raise the cap explicitly for
    benchmarking.
    """
    if batch.n_samples > max_total_samples:
        raise ValueError(
            f"oracle guard: {batch.n_samples} samples exceeds cap {max_total_samples}")
    per_ray = np.empty(batch.n_rays, dtype=np.float64)
    _oracle_kernel(batch.ray_offsets, batch.w, batch.m, batch.len, per_ray)
    return float(np.sum(per_ray))


def random_batch(rng: np.random.Generator, n_rays: int,
                 min_samples: int = 1, max_samples: int = 64) -> RaySampleBatch:
    """Seeded random ragged batch honoring all invariants (testing/benchmarks)."""
    counts = rng.integers(min_samples, max_samples + 1, size=n_rays)
    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    bounds = []
    for n in counts:
        b = np.sort(rng.random(n + 1))
        # enforce strictly increasing boundaries
        b = np.unique(b)
        while b.shape[0] < n + 1:
            b = np.unique(np.concatenate([b, rng.random(n + 1 - b.shape[0])]))
        bounds.append(b[: n + 1])
    s = np.concatenate(bounds)
    w = rng.random(int(offsets[-1]))
    # scale per ray so weight sums stay <= 1
    for r in range(n_rays):
        seg = slice(offsets[r], offsets[r + 1])
        total = w[seg].sum()
        if total > 0:
            w[seg] *= rng.uniform(0.1, 1.0) / total
    return RaySampleBatch.from_boundaries(offsets, s, w)


def benchmark_scaling(samples_per_ray, n_rays: int = 4096, repeats: int = 3,
                      seed: int = 0, include_oracle: bool = True):
    """Time the linear path and the quadratic oracle at fixed rays, varying N.

    Returns a list of (N, t_fast_seconds, t_oracle_seconds) rows; the
    oracle column is NaN when disabled.
    """
    import time

    rng = np.random.default_rng(seed)
    rows = []
    for n in samples_per_ray:
        batch = random_batch(rng, n_rays, min_samples=n, max_samples=n)
        distloss_forward(batch)  # warm compile before timing
        t_fast = min(
            _timed(time, distloss_forward, batch) for _ in range(repeats))
        if include_oracle:
            distloss_oracle(batch, max_total_samples=batch.n_samples)
            t_oracle = min(
                _timed(time, distloss_oracle, batch, batch.n_samples)
                for _ in range(repeats))
        else:
            t_oracle = float("nan")
        rows.append((int(n), t_fast, t_oracle))
    return rows


def _timed(time_mod, fn, *args):
    t0 = time_mod.perf_counter()
    fn(*args)
    return time_mod.perf_counter() - t0
