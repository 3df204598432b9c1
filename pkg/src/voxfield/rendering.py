"""Ray generation, parsimonious sampling, and early-terminated compositing.

The pipeline for a batch of rays:

  1. clip each ray against the scene (slab test against the box in
     bounded mode, contracted-space march range otherwise);
  2. march the ray with a fixed step of `step_size` voxel edges measured
     in the marching space (world units for bounded scenes, contracted
     units for unbounded, layer units for forward-facing), skipping
     samples whose occupancy cell is free;
  3. interpolate raw density, activate it through a shifted softplus and
     convert to per-sample opacity alpha = 1 - exp(-softplus(raw+shift)*delta);
  4. composite front to back, halting a ray once its transmittance drops
     below `halt_threshold`.

The softplus shift is solved so a zero-initialized grid produces a chosen
initial alpha at the reference step of half a voxel. Gradients are
hand-derived and flow from pixel values through weights and alphas back
into the density and color grids; `backward_rays` performs that chain and
scatters into gradient buffers.

Sampling emits ragged arrays plus per-sample interval boundaries
normalized to [0, 1] along each ray, which is exactly what the spread
penalty consumes. When occupancy skips interior samples, the boundary
between two surviving neighbors is placed at the midpoint of the gap, so
intervals stay contiguous and midpoints stay strictly increasing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .contraction import (MODE_BOUNDED, MODE_UNBOUNDED, ContractionConfig,
                          _pnorm)
from .grid import VoxelGrid

ALPHA_CAP = 1.0 - 1e-6


# ---------------------------------------------------------------------------
# rays and cameras

@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 0.05
    far: float = 1e6

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-8:
            raise ValueError(f"direction must be unit length, |d| = {n}")
        if not (0 < self.near < self.far):
            raise ValueError(f"need 0 < near < far, got {self.near}, {self.far}")


@dataclass
class Camera:
    width: int
    height: int
    focal: float
    cx: float
    cy: float
    c2w: np.ndarray  # (4, 4) camera-to-world, camera looks down -z

    @classmethod
    def from_angle(cls, width: int, height: int, camera_angle_x: float,
                   c2w: np.ndarray) -> "Camera":
        focal = 0.5 * width / math.tan(0.5 * camera_angle_x)
        return cls(width=width, height=height, focal=focal,
                   cx=width / 2.0, cy=height / 2.0,
                   c2w=np.asarray(c2w, dtype=np.float64))

    def validate(self) -> None:
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValueError(
                f"invalid intrinsics: {self.width}x{self.height}, focal {self.focal}")
        rot = self.c2w[:3, :3]
        if np.abs(rot @ rot.T - np.eye(3)).max() > 1e-6:
            raise ValueError("camera pose rotation is not orthonormal")

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        return -self.c2w[:3, 2]


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays through every pixel, row-major (i * W + j). Returns (origins, dirs)."""
    camera.validate()
    h, w = camera.height, camera.width
    i, j = np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([(j - camera.cx) / camera.focal,
                         -(i - camera.cy) / camera.focal,
                         -np.ones_like(i)], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# ray / box intersection (slab method)

@njit(cache=True, inline="always")
def _slab(ox, oy, oz, dx, dy, dz, ax0, ay0, az0, ax1, ay1, az1, tmin, tmax):
    t0 = tmin
    t1 = tmax
    for axis in range(3):
        if axis == 0:
            o = ox; d = dx; lo = ax0; hi = ax1
        elif axis == 1:
            o = oy; d = dy; lo = ay0; hi = ay1
        else:
            o = oz; d = dz; lo = az0; hi = az1
        if abs(d) < 1e-300:
            if o < lo or o > hi:
                return 1.0, 0.0  # empty interval: miss
        else:
            inv = 1.0 / d
            ta = (lo - o) * inv
            tb = (hi - o) * inv
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
            if t0 > t1:
                return 1.0, 0.0
    return t0, t1


@njit(cache=True, parallel=True)
def _slab_batch(origins, dirs, aabb, near, far, t0_out, t1_out):
    for r in prange(origins.shape[0]):
        t0, t1 = _slab(origins[r, 0], origins[r, 1], origins[r, 2],
                       dirs[r, 0], dirs[r, 1], dirs[r, 2],
                       aabb[0, 0], aabb[0, 1], aabb[0, 2],
                       aabb[1, 0], aabb[1, 1], aabb[1, 2], near, far)
        t0_out[r] = t0
        t1_out[r] = t1


def ray_aabb_intersect(ray: Ray, aabb: np.ndarray):
    """Entry/exit distances clipped to [ray.near, ray.far], or None on miss."""
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    o, d = ray.origin, ray.direction
    t0, t1 = _slab(o[0], o[1], o[2], d[0], d[1], d[2],
                   aabb[0, 0], aabb[0, 1], aabb[0, 2],
                   aabb[1, 0], aabb[1, 1], aabb[1, 2], ray.near, ray.far)
    if t0 > t1:
        return None
    return float(t0), float(t1)


def ray_aabb_intersect_batch(origins, dirs, aabb, near: float, far: float):
    """Vectorized slab test. Returns (t0, t1, hit)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    aabb = np.ascontiguousarray(np.asarray(aabb, dtype=np.float64).reshape(2, 3))
    n = origins.shape[0]
    t0 = np.empty(n)
    t1 = np.empty(n)
    _slab_batch(origins, dirs, aabb, near, far, t0, t1)
    return t0, t1, t0 <= t1


# ---------------------------------------------------------------------------
# density activation

def alpha_shift(alpha_init: float, ref_delta: float) -> float:
    """Softplus offset making a zero grid produce alpha_init at ref_delta."""
    if not 0 < alpha_init < 1:
        raise ValueError("alpha_init must be in (0, 1)")
    return math.log((1.0 - alpha_init) ** (-1.0 / ref_delta) - 1.0)


@njit(cache=True, inline="always")
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, inline="always")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def density_to_alpha(raw, interval_len, shift: float, with_grad: bool = False):
    """alpha = 1 - exp(-softplus(raw + shift) * interval_len).

    When with_grad is set, also return d(alpha)/d(raw) computed in the
    same pass.
    """
    raw = np.asarray(raw, dtype=np.float64)
    interval_len = np.asarray(interval_len, dtype=np.float64)
    if np.any(interval_len < 0):
        raise ValueError("interval_len must be >= 0")
    pre = raw + shift
    sp = np.logaddexp(0.0, pre)
    alpha = -np.expm1(-sp * interval_len)
    if not with_grad:
        return alpha
    sig = 1.0 / (1.0 + np.exp(-np.clip(pre, -500, 500)))
    dalpha = (1.0 - alpha) * interval_len * sig
    return alpha, dalpha


# ---------------------------------------------------------------------------
# occupancy mask

@dataclass
class OccupancyMask:
    occupied: np.ndarray  # (nx, ny, nz) bool over normalized [0, 1]^3

    @classmethod
    def all_occupied(cls, resolution) -> "OccupancyMask":
        res = tuple(int(r) for r in resolution)
        if any(r < 1 for r in res):
            raise ValueError(f"mask resolution must be >= 1, got {res}")
        return cls(occupied=np.ones(res, dtype=np.bool_))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.occupied.shape

    def fraction_occupied(self) -> float:
        return float(np.count_nonzero(self.occupied)) / self.occupied.size


@njit(cache=True)
def _occupancy_kernel(dens, occupied, thr, shift, ref_delta):
    nx, ny, nz = dens.shape[0], dens.shape[1], dens.shape[2]
    mx, my, mz = occupied.shape
    for cx in range(mx):
        # padded node range: one extra node so every interpolation corner of
        # any sample inside the cell is covered
        x0 = int(math.floor(cx / mx * (nx - 1))) - 1
        x1 = int(math.ceil((cx + 1) / mx * (nx - 1))) + 1
        if x0 < 0:
            x0 = 0
        if x1 > nx - 1:
            x1 = nx - 1
        for cy in range(my):
            y0 = int(math.floor(cy / my * (ny - 1))) - 1
            y1 = int(math.ceil((cy + 1) / my * (ny - 1))) + 1
            if y0 < 0:
                y0 = 0
            if y1 > ny - 1:
                y1 = ny - 1
            for cz in range(mz):
                if not occupied[cx, cy, cz]:
                    continue
                z0 = int(math.floor(cz / mz * (nz - 1))) - 1
                z1 = int(math.ceil((cz + 1) / mz * (nz - 1))) + 1
                if z0 < 0:
                    z0 = 0
                if z1 > nz - 1:
                    z1 = nz - 1
                raw_max = -1e300
                for i in range(x0, x1 + 1):
                    for j in range(y0, y1 + 1):
                        for k in range(z0, z1 + 1):
                            v = dens[i, j, k, 0]
                            if v > raw_max:
                                raw_max = v
                a = 1.0 - math.exp(-_softplus(raw_max + shift) * ref_delta)
                if a < thr:
                    occupied[cx, cy, cz] = False


def update_occupancy(density_grid: VoxelGrid, mask: OccupancyMask,
                     alpha_threshold: float, shift: float,
                     ref_delta: float) -> None:
    """Free every cell whose covered density nodes all stay below the
    alpha threshold at the reference step. Occupied cells can only turn
    free, never the reverse."""
    if any(m > g for m, g in zip(mask.resolution, density_grid.resolution)):
        raise ValueError(
            f"mask resolution {mask.resolution} exceeds grid "
            f"{density_grid.resolution}")
    _occupancy_kernel(density_grid.data, mask.occupied, alpha_threshold,
                      shift, ref_delta)


# ---------------------------------------------------------------------------
# sampling

@dataclass
class RenderSettings:
    contraction: ContractionConfig
    step_size: float = 0.5          # in marching-space voxel edges
    halt_threshold: float = 1e-3    # 0 disables early termination
    background: np.ndarray = field(default_factory=lambda: np.ones(3))
    alpha_init: float = 1e-4
    alpha_shift_override: float | None = None  # frozen activation shift, if set
    near: float = 0.05
    far: float = 1e6
    ff_world_to_ref: np.ndarray | None = None  # (4, 4), forward-facing frame
    ff_tan: np.ndarray | None = None           # (2,) tan of half fov x/y

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)

    def march_edge(self, resolution) -> float:
        """Voxel edge length in the marching space."""
        res = np.array([int(r) for r in resolution], dtype=np.float64)
        mode = self.contraction.mode
        if mode == "bounded":
            aabb = self.contraction.aabb
            edges = (aabb[1] - aabb[0]) / (res - 1.0)
            return float(np.prod(edges) ** (1.0 / 3.0))
        if mode == "unbounded":
            return 2.0 * self.contraction.grid_halfwidth / (float(res[0]) - 1.0)
        return 1.0 / (self.contraction.num_layers - 1.0)

    def delta(self, resolution) -> float:
        """Marching step: step_size voxel edges."""
        return self.step_size * self.march_edge(resolution)

    def reference_delta(self, resolution) -> float:
        """Half-voxel reference step used to calibrate the density shift."""
        return 0.5 * self.march_edge(resolution)

    def shift(self, resolution) -> float:
        """Activation shift: the frozen override when set (training freezes it
        at the initial resolution), else calibrated for this resolution."""
        if self.alpha_shift_override is not None:
            return self.alpha_shift_override
        return alpha_shift(self.alpha_init, self.reference_delta(resolution))


@dataclass
class RaggedSamples:
    """Per-ray samples in grid-normalized coordinates plus boundary data."""
    offsets: np.ndarray     # (R+1,) int64
    positions: np.ndarray   # (M, 3) normalized [0, 1]^3
    t: np.ndarray           # (M,) world distance along the ray
    s_lo: np.ndarray        # (M,) normalized lower boundary in [0, 1]
    s_hi: np.ndarray        # (M,) normalized upper boundary
    delta: float            # marching-space interval length for activation

    @property
    def n_rays(self) -> int:
        return self.offsets.shape[0] - 1

    @property
    def n_samples(self) -> int:
        return int(self.offsets[-1])

    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def boundaries(self):
        """(ray_offsets, s) over rays that carry samples, for the spread
        penalty batch; sample order is unchanged."""
        counts = self.counts()
        nz = counts > 0
        off = np.zeros(int(nz.sum()) + 1, dtype=np.int64)
        np.cumsum(counts[nz], out=off[1:])
        m = self.n_samples
        ray_of = np.repeat(np.arange(off.shape[0] - 1), counts[nz])
        s = np.empty(m + off.shape[0] - 1, dtype=np.float64)
        s[np.arange(m) + ray_of] = self.s_lo
        s[np.arange(m) + ray_of + 1] = self.s_hi
        return off, s


@njit(cache=True, parallel=True)
def _march_bounded(origins, dirs, aabb, near, far, delta, occ, use_mask,
                   cap, counts, pos, t, s_lo, s_hi, t0_out, t1_out):
    n_rays = origins.shape[0]
    mx, my, mz = occ.shape
    ex = aabb[1, 0] - aabb[0, 0]
    ey = aabb[1, 1] - aabb[0, 1]
    ez = aabb[1, 2] - aabb[0, 2]
    for r in prange(n_rays):
        t0, t1 = _slab(origins[r, 0], origins[r, 1], origins[r, 2],
                       dirs[r, 0], dirs[r, 1], dirs[r, 2],
                       aabb[0, 0], aabb[0, 1], aabb[0, 2],
                       aabb[1, 0], aabb[1, 1], aabb[1, 2], near, far)
        t0_out[r] = t0
        t1_out[r] = t1
        if t0 > t1:
            counts[r] = 0
            continue
        # tolerance so an exact multiple of the step is not lost to round-off
        n_b = int(math.floor((t1 - t0) / delta + 1e-9))
        n_int = n_b - 1
        if n_int < 1:
            counts[r] = 0
            continue
        base = r * cap
        n = 0
        prev_slot = -1
        prev_tq = 0.0
        for k in range(n_int):
            tq = t0 + (k + 0.5) * delta
            px = (origins[r, 0] + tq * dirs[r, 0] - aabb[0, 0]) / ex
            py = (origins[r, 1] + tq * dirs[r, 1] - aabb[0, 1]) / ey
            pz = (origins[r, 2] + tq * dirs[r, 2] - aabb[0, 2]) / ez
            if use_mask:
                ix = int(px * mx)
                iy = int(py * my)
                iz = int(pz * mz)
                if ix < 0:
                    ix = 0
                elif ix >= mx:
                    ix = mx - 1
                if iy < 0:
                    iy = 0
                elif iy >= my:
                    iy = my - 1
                if iz < 0:
                    iz = 0
                elif iz >= mz:
                    iz = mz - 1
                if not occ[ix, iy, iz]:
                    continue
            slot = base + n
            pos[slot, 0] = px
            pos[slot, 1] = py
            pos[slot, 2] = pz
            t[slot] = tq
            if prev_slot < 0:
                s_lo[slot] = t0 + k * delta
            else:
                mid = 0.5 * (prev_tq + tq)
                s_hi[prev_slot] = mid
                s_lo[slot] = mid
            s_hi[slot] = t0 + (k + 1) * delta
            prev_slot = slot
            prev_tq = tq
            n += 1
        counts[r] = n


@njit(cache=True, parallel=True)
def _march_unbounded(origins, dirs, near, far, delta_c, b, p_inf,
                     rot, trans, scale, rho_stop, max_steps, occ, use_mask,
                     cap, counts, pos, t, s_lo, s_hi, arc_tot):
    n_rays = origins.shape[0]
    mx, my, mz = occ.shape
    half = 1.0 + b
    for r in prange(n_rays):
        ox = origins[r, 0]
        oy = origins[r, 1]
        oz = origins[r, 2]
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        base = r * cap
        n = 0
        prev_slot = -1
        prev_arc = 0.0
        t_cur = near
        # aligned coordinates of a world point o + t*d
        wx = ox + t_cur * dx
        wy = oy + t_cur * dy
        wz = oz + t_cur * dz
        cxp, cyp, czp = _contract_one(wx, wy, wz, b, p_inf, rot, trans, scale)
        arc = 0.0
        steps = 0
        while steps < max_steps and t_cur < far:
            # first-order step in world t targeting a contracted-space
            # advance of delta_c, refined once by re-measuring
            h = delta_c
            nx1, ny1, nz1 = _contract_one(ox + (t_cur + h) * dx,
                                          oy + (t_cur + h) * dy,
                                          oz + (t_cur + h) * dz,
                                          b, p_inf, rot, trans, scale)
            d1 = math.sqrt((nx1 - cxp) ** 2 + (ny1 - cyp) ** 2 + (nz1 - czp) ** 2)
            if d1 < 1e-14:
                break
            dt = h * delta_c / d1
            nx1, ny1, nz1 = _contract_one(ox + (t_cur + dt) * dx,
                                          oy + (t_cur + dt) * dy,
                                          oz + (t_cur + dt) * dz,
                                          b, p_inf, rot, trans, scale)
            d2 = math.sqrt((nx1 - cxp) ** 2 + (ny1 - cyp) ** 2 + (nz1 - czp) ** 2)
            if d2 > 1e-14:
                dt = dt * delta_c / d2
                nx1, ny1, nz1 = _contract_one(ox + (t_cur + dt) * dx,
                                              oy + (t_cur + dt) * dy,
                                              oz + (t_cur + dt) * dz,
                                              b, p_inf, rot, trans, scale)
            # query at the arc midpoint via a half step
            tq = t_cur + 0.5 * dt
            qx, qy, qz = _contract_one(ox + tq * dx, oy + tq * dy, oz + tq * dz,
                                       b, p_inf, rot, trans, scale)
            keep = True
            px = (qx + half) / (2.0 * half)
            py = (qy + half) / (2.0 * half)
            pz = (qz + half) / (2.0 * half)
            if use_mask:
                ix = min(max(int(px * mx), 0), mx - 1)
                iy = min(max(int(py * my), 0), my - 1)
                iz = min(max(int(pz * mz), 0), mz - 1)
                keep = occ[ix, iy, iz]
            if keep:
                slot = base + n
                pos[slot, 0] = px
                pos[slot, 1] = py
                pos[slot, 2] = pz
                t[slot] = tq
                arc_q = arc + 0.5 * delta_c
                if prev_slot < 0:
                    s_lo[slot] = arc
                else:
                    mid = 0.5 * (prev_arc + arc_q)
                    s_hi[prev_slot] = mid
                    s_lo[slot] = mid
                s_hi[slot] = arc + delta_c
                prev_slot = slot
                prev_arc = arc_q
                n += 1
            arc += delta_c
            t_cur += dt
            cxp = nx1
            cyp = ny1
            czp = nz1
            steps += 1
            rho = _pnorm(cxp, cyp, czp, p_inf)
            if rho >= rho_stop:
                break
        counts[r] = n
        arc_tot[r] = arc


@njit(cache=True, inline="always")
def _contract_one(x, y, z, b, p_inf, rot, trans, scale):
    xx = x + trans[0]
    yy = y + trans[1]
    zz = z + trans[2]
    ax = scale * (rot[0, 0] * xx + rot[0, 1] * yy + rot[0, 2] * zz)
    ay = scale * (rot[1, 0] * xx + rot[1, 1] * yy + rot[1, 2] * zz)
    az = scale * (rot[2, 0] * xx + rot[2, 1] * yy + rot[2, 2] * zz)
    r = _pnorm(ax, ay, az, p_inf)
    if r > 1.0:
        f = (1.0 + b - b / r) / r
        ax *= f
        ay *= f
        az *= f
    return ax, ay, az


@njit(cache=True, parallel=True)
def _march_forward(origins, dirs, w2r, tanx, tany, near, n_q, step_u,
                   num_layers, occ, use_mask, cap, counts, pos, t, s_lo, s_hi):
    n_rays = origins.shape[0]
    mx, my, mz = occ.shape
    d_span = float(num_layers - 1)
    t_cap = 2.0 * near * d_span
    for r in prange(n_rays):
        ox = w2r[0, 0] * origins[r, 0] + w2r[0, 1] * origins[r, 1] + w2r[0, 2] * origins[r, 2] + w2r[0, 3]
        oy = w2r[1, 0] * origins[r, 0] + w2r[1, 1] * origins[r, 1] + w2r[1, 2] * origins[r, 2] + w2r[1, 3]
        oz = w2r[2, 0] * origins[r, 0] + w2r[2, 1] * origins[r, 1] + w2r[2, 2] * origins[r, 2] + w2r[2, 3]
        dx = w2r[0, 0] * dirs[r, 0] + w2r[0, 1] * dirs[r, 1] + w2r[0, 2] * dirs[r, 2]
        dy = w2r[1, 0] * dirs[r, 0] + w2r[1, 1] * dirs[r, 1] + w2r[1, 2] * dirs[r, 2]
        dz = w2r[2, 0] * dirs[r, 0] + w2r[2, 1] * dirs[r, 1] + w2r[2, 2] * dirs[r, 2]
        base = r * cap
        n = 0
        prev_slot = -1
        prev_u = 0.0
        denom = -dz  # ray must advance into the reference frustum
        if denom < 1e-12:
            counts[r] = 0
            continue
        for k in range(n_q):
            u = k * step_u
            if u > 1.0:
                break
            # layer k is the plane of reference depth t = near / (1 - u);
            # kk * oz + 1 > 0 keeps the plane in front of the ray origin,
            # and the x/depth, y/depth ratios stay finite at u = 1
            kk = (1.0 - u) / near
            ahead = kk * oz + 1.0
            if ahead <= 0.0:
                continue
            px = 0.5 * ((kk * ox + dx * ahead / denom) / tanx + 1.0)
            py = 0.5 * ((kk * oy + dy * ahead / denom) / tany + 1.0)
            if use_mask:
                ix = min(max(int(u * mx), 0), mx - 1)
                iy = min(max(int(px * my), 0), my - 1)
                iz = min(max(int(py * mz), 0), mz - 1)
                if not occ[ix, iy, iz]:
                    continue
            slot = base + n
            pos[slot, 0] = u
            pos[slot, 1] = px
            pos[slot, 2] = py
            # ray distance to the layer plane, capped where u -> 1
            if kk * denom < 1.0 / t_cap:
                t[slot] = t_cap
            else:
                t[slot] = ahead / (kk * denom)
            if prev_slot < 0:
                s_lo[slot] = max(u - 0.5 * step_u, 0.0)
            else:
                mid = 0.5 * (prev_u + u)
                s_hi[prev_slot] = mid
                s_lo[slot] = mid
            s_hi[slot] = min(u + 0.5 * step_u, 1.0)
            prev_slot = slot
            prev_u = u
            n += 1
        counts[r] = n


_EMPTY_MASK = np.ones((1, 1, 1), dtype=np.bool_)


def sample_points(origins: np.ndarray, dirs: np.ndarray,
                  settings: RenderSettings, grid_resolution,
                  mask: OccupancyMask | None = None) -> RaggedSamples:
    """March every ray and return ragged samples plus interval boundaries.

    Rays that miss the scene get zero samples (they composite to pure
    background). Boundaries are normalized per ray: bounded mode by the
    clip range, unbounded by total contracted march length, forward-facing
    by the layer coordinate itself.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    n_rays = origins.shape[0]
    cfg = settings.contraction
    delta = settings.delta(grid_resolution)
    occ = mask.occupied if mask is not None else _EMPTY_MASK
    use_mask = mask is not None
    mode = cfg.mode_id

    if mode == MODE_BOUNDED:
        aabb = cfg.aabb
        diag = float(np.linalg.norm(aabb[1] - aabb[0]))
        cap = max(int(math.floor(diag / delta)), 1)
    elif mode == MODE_UNBOUNDED:
        b = cfg.b
        cap = int((2.0 + b + math.pi * (1.0 + b)) / delta) + 8
    else:
        cap = int(math.floor((cfg.num_layers - 1) / settings.step_size + 1e-9)) + 1

    counts = np.zeros(n_rays, dtype=np.int64)
    pos = np.empty((n_rays * cap, 3), dtype=np.float64)
    t = np.empty(n_rays * cap, dtype=np.float64)
    s_lo = np.empty(n_rays * cap, dtype=np.float64)
    s_hi = np.empty(n_rays * cap, dtype=np.float64)

    if mode == MODE_BOUNDED:
        t0 = np.empty(n_rays)
        t1 = np.empty(n_rays)
        _march_bounded(origins, dirs, cfg.aabb, settings.near, settings.far,
                       delta, occ, use_mask, cap, counts, pos, t, s_lo, s_hi,
                       t0, t1)
        norm_base, norm_span = t0, np.maximum(t1 - t0, 1e-300)
    elif mode == MODE_UNBOUNDED:
        res0 = int(grid_resolution[0])
        edge_c = 2.0 * cfg.grid_halfwidth / (res0 - 1.0)
        rho_stop = cfg.grid_halfwidth - 0.5 * edge_c
        arc_tot = np.empty(n_rays)
        _march_unbounded(origins, dirs, settings.near, settings.far, delta,
                         cfg.b, cfg.p == float("inf"),
                         np.ascontiguousarray(cfg.align.rotation),
                         np.ascontiguousarray(cfg.align.translation),
                         cfg.align.scale, rho_stop, cap, occ, use_mask,
                         cap, counts, pos, t, s_lo, s_hi, arc_tot)
        norm_base, norm_span = np.zeros(n_rays), np.maximum(arc_tot, 1e-300)
    else:
        if settings.ff_world_to_ref is None or settings.ff_tan is None:
            raise ValueError("forward-facing sampling needs ff_world_to_ref and ff_tan")
        step_u = settings.step_size / (cfg.num_layers - 1.0)
        _march_forward(origins, dirs,
                       np.ascontiguousarray(settings.ff_world_to_ref, dtype=np.float64),
                       float(settings.ff_tan[0]), float(settings.ff_tan[1]),
                       cfg.near, cap, step_u, cfg.num_layers, occ, use_mask,
                       cap, counts, pos, t, s_lo, s_hi)
        norm_base, norm_span = np.zeros(n_rays), np.ones(n_rays)

    offsets = np.zeros(n_rays + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    m = int(offsets[-1])
    # compact the padded layout
    slot_idx = (np.arange(m) - np.repeat(offsets[:-1], counts)
                + np.repeat(np.arange(n_rays, dtype=np.int64) * cap, counts))
    ray_of = np.repeat(np.arange(n_rays), counts)
    pos_c = pos[slot_idx]
    t_c = t[slot_idx]
    lo_c = (s_lo[slot_idx] - norm_base[ray_of]) / norm_span[ray_of]
    hi_c = (s_hi[slot_idx] - norm_base[ray_of]) / norm_span[ray_of]
    return RaggedSamples(offsets=offsets, positions=pos_c, t=t_c,
                         s_lo=np.clip(lo_c, 0.0, 1.0),
                         s_hi=np.clip(hi_c, 0.0, 1.0), delta=delta)


# ---------------------------------------------------------------------------
# compositing

@njit(cache=True, parallel=True)
def _composite_kernel(offsets, alphas, colors, bg, halt, rgb, w, t_fin, n_proc):
    n_rays = offsets.shape[0] - 1
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        tr = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        done = 0
        for i in range(lo, hi):
            a = alphas[i]
            wi = tr * a
            w[i] = wi
            c0 += wi * colors[i, 0]
            c1 += wi * colors[i, 1]
            c2 += wi * colors[i, 2]
            tr *= 1.0 - a
            done += 1
            if halt > 0.0 and tr < halt:
                break
        for i in range(lo + done, hi):
            w[i] = 0.0
        rgb[r, 0] = c0 + tr * bg[0]
        rgb[r, 1] = c1 + tr * bg[1]
        rgb[r, 2] = c2 + tr * bg[2]
        t_fin[r] = tr
        n_proc[r] = done


def composite(alphas: np.ndarray, colors: np.ndarray, background,
              offsets: np.ndarray | None = None, halt_threshold: float = 1e-3):
    """Front-to-back alpha compositing with early termination.

    Single ray when offsets is None. Returns (rgb, weights, T_final);
    weights past the halt point are zero and rgb includes the background
    scaled by the final transmittance.
    """
    alphas = np.ascontiguousarray(alphas, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    if np.any(alphas < 0.0) or np.any(alphas >= 1.0):
        raise ValueError("alphas must lie in [0, 1)")
    if offsets is None:
        offsets = np.array([0, alphas.shape[0]], dtype=np.int64)
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    n_rays = offsets.shape[0] - 1
    rgb = np.empty((n_rays, 3))
    w = np.empty(alphas.shape[0])
    t_fin = np.empty(n_rays)
    n_proc = np.empty(n_rays, dtype=np.int64)
    _composite_kernel(offsets, alphas, colors, bg, halt_threshold,
                      rgb, w, t_fin, n_proc)
    return rgb, w, t_fin


# ---------------------------------------------------------------------------
# fused render forward / backward over ragged batches

@dataclass
class RenderForward:
    rgb: np.ndarray      # (R, 3)
    t_final: np.ndarray  # (R,)
    depth: np.ndarray    # (R,) sum of w * t
    raw: np.ndarray      # (M,) pre-activation density
    alpha: np.ndarray    # (M,)
    w: np.ndarray        # (M,)
    t_pre: np.ndarray    # (M,) transmittance before each sample
    color: np.ndarray    # (M, 3) activated sample colors
    n_proc: np.ndarray   # (R,) samples processed before halting


@njit(cache=True, parallel=True)
def _render_fwd_kernel(offsets, pos, tarr, dens, col, shift, delta, halt, bg,
                       raw, alpha, w, t_pre, csamp, rgb, t_fin, depth, n_proc):
    n_rays = offsets.shape[0] - 1
    nx, ny, nz = dens.shape[0], dens.shape[1], dens.shape[2]
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        tr = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        dep = 0.0
        done = 0
        for i in range(lo, hi):
            x = pos[i, 0] * (nx - 1)
            y = pos[i, 1] * (ny - 1)
            z = pos[i, 2] * (nz - 1)
            if x < 0.0:
                x = 0.0
            elif x > nx - 1:
                x = float(nx - 1)
            if y < 0.0:
                y = 0.0
            elif y > ny - 1:
                y = float(ny - 1)
            if z < 0.0:
                z = 0.0
            elif z > nz - 1:
                z = float(nz - 1)
            i0 = min(int(x), nx - 2)
            j0 = min(int(y), ny - 2)
            k0 = min(int(z), nz - 2)
            fx = x - i0
            fy = y - j0
            fz = z - k0
            w000 = (1 - fx) * (1 - fy) * (1 - fz)
            w100 = fx * (1 - fy) * (1 - fz)
            w010 = (1 - fx) * fy * (1 - fz)
            w110 = fx * fy * (1 - fz)
            w001 = (1 - fx) * (1 - fy) * fz
            w101 = fx * (1 - fy) * fz
            w011 = (1 - fx) * fy * fz
            w111 = fx * fy * fz
            rw = (w000 * dens[i0, j0, k0, 0] + w100 * dens[i0 + 1, j0, k0, 0]
                  + w010 * dens[i0, j0 + 1, k0, 0] + w110 * dens[i0 + 1, j0 + 1, k0, 0]
                  + w001 * dens[i0, j0, k0 + 1, 0] + w101 * dens[i0 + 1, j0, k0 + 1, 0]
                  + w011 * dens[i0, j0 + 1, k0 + 1, 0] + w111 * dens[i0 + 1, j0 + 1, k0 + 1, 0])
            raw[i] = rw
            a = 1.0 - math.exp(-_softplus(rw + shift) * delta)
            if a > ALPHA_CAP:
                a = ALPHA_CAP
            alpha[i] = a
            t_pre[i] = tr
            for c in range(3):
                lg = (w000 * col[i0, j0, k0, c] + w100 * col[i0 + 1, j0, k0, c]
                      + w010 * col[i0, j0 + 1, k0, c] + w110 * col[i0 + 1, j0 + 1, k0, c]
                      + w001 * col[i0, j0, k0 + 1, c] + w101 * col[i0 + 1, j0, k0 + 1, c]
                      + w011 * col[i0, j0 + 1, k0 + 1, c] + w111 * col[i0 + 1, j0 + 1, k0 + 1, c])
                csamp[i, c] = _sigmoid(lg)
            wi = tr * a
            w[i] = wi
            c0 += wi * csamp[i, 0]
            c1 += wi * csamp[i, 1]
            c2 += wi * csamp[i, 2]
            dep += wi * tarr[i]
            tr *= 1.0 - a
            done += 1
            if halt > 0.0 and tr < halt:
                break
        for i in range(lo + done, hi):
            raw[i] = 0.0
            alpha[i] = 0.0
            w[i] = 0.0
            t_pre[i] = 0.0
            csamp[i, 0] = 0.0
            csamp[i, 1] = 0.0
            csamp[i, 2] = 0.0
        rgb[r, 0] = c0 + tr * bg[0]
        rgb[r, 1] = c1 + tr * bg[1]
        rgb[r, 2] = c2 + tr * bg[2]
        t_fin[r] = tr
        depth[r] = dep
        n_proc[r] = done


def forward_rays(density: VoxelGrid, color: VoxelGrid, samples: RaggedSamples,
                 settings: RenderSettings, shift: float) -> RenderForward:
    """Interpolate, activate, and composite a ragged sample batch."""
    m = samples.n_samples
    n_rays = samples.n_rays
    out = RenderForward(
        rgb=np.empty((n_rays, 3)), t_final=np.empty(n_rays),
        depth=np.empty(n_rays), raw=np.empty(m), alpha=np.empty(m),
        w=np.empty(m), t_pre=np.empty(m), color=np.empty((m, 3)),
        n_proc=np.empty(n_rays, dtype=np.int64))
    _render_fwd_kernel(samples.offsets, samples.positions, samples.t,
                       density.data, color.data, shift, samples.delta,
                       settings.halt_threshold, settings.background,
                       out.raw, out.alpha, out.w, out.t_pre, out.color,
                       out.rgb, out.t_final, out.depth, out.n_proc)
    return out


@njit(cache=True, parallel=True)
def _render_bwd_sample_grads(offsets, n_proc, alpha, w, t_pre, csamp, raw,
                             shift, delta, d_rgb, dw_extra, use_extra, bg,
                             t_fin, draw, dcol):
    n_rays = offsets.shape[0] - 1
    for r in prange(n_rays):
        lo = offsets[r]
        hi = offsets[r + 1]
        done = n_proc[r]
        g0 = d_rgb[r, 0]
        g1 = d_rgb[r, 1]
        g2 = d_rgb[r, 2]
        # suffix term: sum over later samples of (dL/dw_j) w_j plus the
        # background path through the final transmittance
        suff = (g0 * bg[0] + g1 * bg[1] + g2 * bg[2]) * t_fin[r]
        for i in range(lo + done - 1, lo - 1, -1):
            gw = g0 * csamp[i, 0] + g1 * csamp[i, 1] + g2 * csamp[i, 2]
            if use_extra:
                gw += dw_extra[i]
            a = alpha[i]
            dalpha = gw * t_pre[i] - suff / (1.0 - a)
            sig = _sigmoid(raw[i] + shift)
            draw[i] = dalpha * (1.0 - a) * delta * sig
            wi = w[i]
            dcol[i, 0] = g0 * wi * csamp[i, 0] * (1.0 - csamp[i, 0])
            dcol[i, 1] = g1 * wi * csamp[i, 1] * (1.0 - csamp[i, 1])
            dcol[i, 2] = g2 * wi * csamp[i, 2] * (1.0 - csamp[i, 2])
            suff += gw * wi
        for i in range(lo + done, hi):
            draw[i] = 0.0
            dcol[i, 0] = 0.0
            dcol[i, 1] = 0.0
            dcol[i, 2] = 0.0


@njit(cache=True)
def _scatter_both_kernel(pos, draw, dcol, dgrad, cgrad, touched):
    nx, ny, nz = dgrad.shape[0], dgrad.shape[1], dgrad.shape[2]
    for s in range(pos.shape[0]):
        dr = draw[s]
        d0 = dcol[s, 0]
        d1 = dcol[s, 1]
        d2 = dcol[s, 2]
        if dr == 0.0 and d0 == 0.0 and d1 == 0.0 and d2 == 0.0:
            continue
        x = pos[s, 0] * (nx - 1)
        y = pos[s, 1] * (ny - 1)
        z = pos[s, 2] * (nz - 1)
        if x < 0.0:
            x = 0.0
        elif x > nx - 1:
            x = float(nx - 1)
        if y < 0.0:
            y = 0.0
        elif y > ny - 1:
            y = float(ny - 1)
        if z < 0.0:
            z = 0.0
        elif z > nz - 1:
            z = float(nz - 1)
        i0 = min(int(x), nx - 2)
        j0 = min(int(y), ny - 2)
        k0 = min(int(z), nz - 2)
        fx = x - i0
        fy = y - j0
        fz = z - k0
        for di in range(2):
            wx = fx if di else 1.0 - fx
            for dj in range(2):
                wxy = wx * (fy if dj else 1.0 - fy)
                for dk in range(2):
                    wc = wxy * (fz if dk else 1.0 - fz)
                    ii = i0 + di
                    jj = j0 + dj
                    kk = k0 + dk
                    dgrad[ii, jj, kk, 0] += wc * dr
                    cgrad[ii, jj, kk, 0] += wc * d0
                    cgrad[ii, jj, kk, 1] += wc * d1
                    cgrad[ii, jj, kk, 2] += wc * d2
                    touched[ii, jj, kk] = True


def backward_rays(samples: RaggedSamples, fwd: RenderForward,
                  d_rgb: np.ndarray, settings: RenderSettings, shift: float,
                  density_grad: np.ndarray, color_grad: np.ndarray,
                  touched: np.ndarray, dw_extra: np.ndarray | None = None) -> None:
    """Backpropagate pixel gradients (plus optional per-sample dL/dw terms)
    into the grid gradient buffers; marks touched cells."""
    m = samples.n_samples
    draw = np.empty(m)
    dcol = np.empty((m, 3))
    use_extra = dw_extra is not None
    extra = dw_extra if use_extra else np.empty(0)
    _render_bwd_sample_grads(samples.offsets, fwd.n_proc, fwd.alpha, fwd.w,
                             fwd.t_pre, fwd.color, fwd.raw, shift,
                             samples.delta, d_rgb, extra, use_extra,
                             settings.background, fwd.t_final, draw, dcol)
    _scatter_both_kernel(samples.positions, draw, dcol,
                         density_grad, color_grad, touched)


# ---------------------------------------------------------------------------
# whole-image rendering

def render_image(density: VoxelGrid, color: VoxelGrid, camera: Camera,
                 settings: RenderSettings, mask: OccupancyMask | None = None):
    """Render one camera view. Returns (rgb HxWx3, depth HxW, trans HxW)."""
    camera.validate()
    if settings.contraction.mode == "bounded":
        if np.abs(settings.contraction.aabb - density.aabb).max() > 1e-12:
            raise ValueError("bounded contraction aabb does not match the grid")
    shift = settings.shift(density.resolution)
    origins, dirs = pixel_rays(camera)
    samples = sample_points(origins, dirs, settings, density.resolution, mask)
    fwd = forward_rays(density, color, samples, settings, shift)
    h, w = camera.height, camera.width
    return (fwd.rgb.reshape(h, w, 3), fwd.depth.reshape(h, w),
            fwd.t_final.reshape(h, w))
