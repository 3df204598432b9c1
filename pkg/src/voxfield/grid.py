"""Dense voxel grid storage and the operations that touch raw grid values.

A VoxelGrid is a node-centered (Nx, Ny, Nz, C) float64 array over a world
axis-aligned box. Sample points use grid-normalized coordinates: u in
[0, 1]^3 maps node i to u = i / (N - 1), so interpolation is exact at
nodes. Out-of-range points clamp to the boundary; scene parameterization
guarantees boundedness and the clamp only guards float round-off at the
faces.

The total-variation regularizer is gradient-only: there is no forward
value, the Huber derivative of each axis-neighbor difference is added
straight into the gradient buffer between the photometric backward pass
and the optimizer step. In sparse mode only pairs with at least one
endpoint touched this iteration contribute. The sum is normalized by the
number of contributing (pair, channel) terms so the weight means the same
thing at every resolution.

Gradient buffers are plain arrays shaped like `grid.data`; see
`new_grad_buffer`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange


@dataclass
class VoxelGrid:
    data: np.ndarray  # (Nx, Ny, Nz, C) float64
    aabb: np.ndarray  # (2, 3): world min corner, max corner

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    @property
    def voxel_size(self) -> np.ndarray:
        """World-space node spacing per axis."""
        res = np.array(self.resolution, dtype=np.float64)
        return (self.aabb[1] - self.aabb[0]) / (res - 1.0)

    @property
    def voxel_edge(self) -> float:
        """Scalar node spacing: geometric mean over axes."""
        return float(np.prod(self.voxel_size) ** (1.0 / 3.0))

    def world_to_normalized(self, points: np.ndarray) -> np.ndarray:
        return (points - self.aabb[0]) / (self.aabb[1] - self.aabb[0])


def create_grid(resolution, channels: int, aabb, init_value: float = 0.0) -> VoxelGrid:
    """Allocate a grid filled with init_value."""
    resolution = tuple(int(r) for r in resolution)
    if len(resolution) != 3 or any(r < 2 for r in resolution):
        raise ValueError(f"resolution must be three values >= 2, got {resolution}")
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    if not np.all(aabb[0] < aabb[1]):
        raise ValueError(f"degenerate aabb: {aabb.tolist()}")
    if not np.isfinite(init_value):
        raise ValueError("init_value must be finite")
    data = np.full(resolution + (channels,), float(init_value), dtype=np.float64)
    return VoxelGrid(data=data, aabb=aabb.copy())


def new_grad_buffer(grid: VoxelGrid) -> np.ndarray:
    """Zeroed gradient buffer shaped like the grid's data."""
    return np.zeros_like(grid.data)


@njit(cache=True, parallel=True)
def _sample_kernel(data, pts, out):
    nx, ny, nz, nc = data.shape
    for k in prange(pts.shape[0]):
        x = pts[k, 0] * (nx - 1)
        y = pts[k, 1] * (ny - 1)
        z = pts[k, 2] * (nz - 1)
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
        for c in range(nc):
            c00 = data[i0, j0, k0, c] * (1 - fx) + data[i0 + 1, j0, k0, c] * fx
            c01 = data[i0, j0, k0 + 1, c] * (1 - fx) + data[i0 + 1, j0, k0 + 1, c] * fx
            c10 = data[i0, j0 + 1, k0, c] * (1 - fx) + data[i0 + 1, j0 + 1, k0, c] * fx
            c11 = data[i0, j0 + 1, k0 + 1, c] * (1 - fx) + data[i0 + 1, j0 + 1, k0 + 1, c] * fx
            c0 = c00 * (1 - fy) + c10 * fy
            c1 = c01 * (1 - fy) + c11 * fy
            out[k, c] = c0 * (1 - fz) + c1 * fz


@njit(cache=True)
def _scatter_kernel(gbuf, pts, upstream):
    nx, ny, nz, nc = gbuf.shape
    for k in range(pts.shape[0]):
        x = pts[k, 0] * (nx - 1)
        y = pts[k, 1] * (ny - 1)
        z = pts[k, 2] * (nz - 1)
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
        for c in range(nc):
            u = upstream[k, c]
            gbuf[i0, j0, k0, c] += u * (1 - fx) * (1 - fy) * (1 - fz)
            gbuf[i0 + 1, j0, k0, c] += u * fx * (1 - fy) * (1 - fz)
            gbuf[i0, j0 + 1, k0, c] += u * (1 - fx) * fy * (1 - fz)
            gbuf[i0 + 1, j0 + 1, k0, c] += u * fx * fy * (1 - fz)
            gbuf[i0, j0, k0 + 1, c] += u * (1 - fx) * (1 - fy) * fz
            gbuf[i0 + 1, j0, k0 + 1, c] += u * fx * (1 - fy) * fz
            gbuf[i0, j0 + 1, k0 + 1, c] += u * (1 - fx) * fy * fz
            gbuf[i0 + 1, j0 + 1, k0 + 1, c] += u * fx * fy * fz


def trilinear_sample(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Sample the grid at normalized points, (M, 3) -> (M, C)."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {points.shape}")
    out = np.empty((points.shape[0], grid.channels), dtype=np.float64)
    _sample_kernel(grid.data, points, out)
    return out


def trilinear_scatter_grad(grid_grad: np.ndarray, points: np.ndarray,
                           upstream: np.ndarray) -> None:
    """Adjoint of trilinear_sample: add upstream into the 8 corner slots."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    upstream = np.ascontiguousarray(upstream, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"points must be (M, 3), got {points.shape}")
    if upstream.shape != (points.shape[0], grid_grad.shape[3]):
        raise ValueError(
            f"upstream shape {upstream.shape} does not match points "
            f"{points.shape[0]} x channels {grid_grad.shape[3]}")
    _scatter_kernel(grid_grad, points, upstream)


def upscale(grid: VoxelGrid, new_resolution) -> VoxelGrid:
    """Trilinear resample onto a finer node lattice; aabb is unchanged."""
    new_resolution = tuple(int(r) for r in new_resolution)
    if any(n < o for n, o in zip(new_resolution, grid.resolution)):
        raise ValueError(
            f"cannot downscale {grid.resolution} -> {new_resolution}")
    nx, ny, nz = new_resolution
    ax = np.linspace(0.0, 1.0, nx)
    ay = np.linspace(0.0, 1.0, ny)
    az = np.linspace(0.0, 1.0, nz)
    out = np.empty((nx, ny, nz, grid.channels), dtype=np.float64)
    # one x-plane at a time keeps the point buffer small at high resolution
    plane = np.empty((ny * nz, 3), dtype=np.float64)
    gy, gz = np.meshgrid(ay, az, indexing="ij")
    plane[:, 1] = gy.ravel()
    plane[:, 2] = gz.ravel()
    for i in range(nx):
        plane[:, 0] = ax[i]
        out[i] = trilinear_sample(grid, plane).reshape(ny, nz, grid.channels)
    return VoxelGrid(data=out, aabb=grid.aabb.copy())


@njit(cache=True)
def _huber_deriv(d, delta):
    if d > delta:
        return delta
    if d < -delta:
        return -delta
    return d


@njit(cache=True, parallel=True)
def _tv_kernel(data, gbuf, active, dense, scale, delta):
    nx, ny, nz, nc = data.shape
    for ix in prange(nx):
        for iy in range(ny):
            for iz in range(nz):
                a_here = dense or active[ix, iy, iz]
                for c in range(nc):
                    v = data[ix, iy, iz, c]
                    g = 0.0
                    if ix > 0 and (a_here or active[ix - 1, iy, iz]):
                        g += _huber_deriv(v - data[ix - 1, iy, iz, c], delta)
                    if ix < nx - 1 and (a_here or active[ix + 1, iy, iz]):
                        g += _huber_deriv(v - data[ix + 1, iy, iz, c], delta)
                    if iy > 0 and (a_here or active[ix, iy - 1, iz]):
                        g += _huber_deriv(v - data[ix, iy - 1, iz, c], delta)
                    if iy < ny - 1 and (a_here or active[ix, iy + 1, iz]):
                        g += _huber_deriv(v - data[ix, iy + 1, iz, c], delta)
                    if iz > 0 and (a_here or active[ix, iy, iz - 1]):
                        g += _huber_deriv(v - data[ix, iy, iz - 1, c], delta)
                    if iz < nz - 1 and (a_here or active[ix, iy, iz + 1]):
                        g += _huber_deriv(v - data[ix, iy, iz + 1, c], delta)
                    if g != 0.0:
                        gbuf[ix, iy, iz, c] += scale * g


def tv_pair_count(grid: VoxelGrid, dense_mode: bool,
                  active_set: np.ndarray | None = None) -> int:
    """Number of contributing (axis-neighbor pair, channel) terms."""
    nx, ny, nz = grid.resolution
    c = grid.channels
    if dense_mode:
        pairs = (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)
        return pairs * c
    a = active_set
    pairs = int(np.count_nonzero(a[:-1] | a[1:]))
    pairs += int(np.count_nonzero(a[:, :-1] | a[:, 1:]))
    pairs += int(np.count_nonzero(a[:, :, :-1] | a[:, :, 1:]))
    return pairs * c


def tv_add_grad(grid: VoxelGrid, grid_grad: np.ndarray, weight: float,
                dense_mode: bool, active_set: np.ndarray | None = None,
                huber_delta: float = 1.0) -> int:
    """Add the Huber total-variation gradient into grid_grad.

    No forward value is computed. Returns the number of contributing
    (pair, channel) terms, which is also the normalizer.
    """
    if weight < 0.0:
        raise ValueError(f"tv weight must be >= 0, got {weight}")
    if grid_grad.shape != grid.data.shape:
        raise ValueError(
            f"grad buffer shape {grid_grad.shape} != grid {grid.data.shape}")
    if not dense_mode:
        if active_set is None:
            raise ValueError("sparse mode requires an active_set mask")
        if active_set.shape != grid.resolution:
            raise ValueError(
                f"active_set shape {active_set.shape} != resolution {grid.resolution}")
    n_pairs = tv_pair_count(grid, dense_mode, active_set)
    if weight == 0.0 or n_pairs == 0:
        return n_pairs
    if active_set is None:
        active_set = np.empty((1, 1, 1), dtype=np.bool_)  # untouched in dense mode
    _tv_kernel(grid.data, grid_grad, active_set, dense_mode,
               weight / n_pairs, huber_delta)
    return n_pairs
