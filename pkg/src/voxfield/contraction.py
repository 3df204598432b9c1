"""Scene parameterizations: map world points into the grid's unit cube.

Three capture modes are supported.

bounded        affine map of the scene box onto [0, 1]^3.
forward_facing inverse-depth layering: metric depth t >= near maps to a
               layer coordinate u = 1 - near / t, so u = 0 at the near
               plane and u -> 1 at infinity, reproducing a stack of
               fixed-depth image planes.
unbounded      inward contraction: with r = ||x||_p for p in {2, inf},
               points inside the unit ball stay put and points outside
               are squashed to

                   x' = (1 + b - b / r) * (x / r),

               so all of space lands in the p-ball of radius 1 + b. The
               grid is a cube of side 2 + 2b around the origin; b sets
               the share of grid cells spent on background, and p = inf
               fills the cube's corners that p = 2 leaves unused. A
               rigid alignment (PCA of the camera positions) is applied
               first so the layout is camera-centric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

MODE_BOUNDED = 0
MODE_FORWARD = 1
MODE_UNBOUNDED = 2

_MODE_IDS = {"bounded": MODE_BOUNDED, "forward_facing": MODE_FORWARD,
             "unbounded": MODE_UNBOUNDED}


@dataclass
class RigidTransform:
    """x -> scale * rotation @ (x + translation), with scale > 0."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3), scale=1.0)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * ((points + self.translation) @ self.rotation.T)

    def validate(self) -> None:
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-10:
            raise ValueError(f"rotation is not orthonormal (|R R^T - I| = {err:.2e})")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")


def _unit_aabb() -> np.ndarray:
    return np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])


@dataclass
class ContractionConfig:
    mode: str = "bounded"
    b: float = 1.0                 # background share, unbounded mode
    p: float = 2.0                 # norm order, 2 or inf
    align: RigidTransform = field(default_factory=RigidTransform.identity)
    num_layers: int = 256          # forward-facing depth layers D
    near: float = 1.0              # forward-facing near plane
    aabb: np.ndarray = field(default_factory=_unit_aabb)  # bounded-mode box

    def __post_init__(self):
        if self.mode not in _MODE_IDS:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.b <= 0:
            raise ValueError(f"b must be > 0, got {self.b}")
        if self.p not in (2.0, 2, float("inf")):
            raise ValueError(f"p must be 2 or inf, got {self.p}")
        if self.num_layers < 2:
            raise ValueError("num_layers must be >= 2")
        if self.near <= 0:
            raise ValueError("near must be > 0")
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.align.validate()

    @property
    def mode_id(self) -> int:
        return _MODE_IDS[self.mode]

    @property
    def grid_halfwidth(self) -> float:
        """Half side length of the unbounded-mode cube: 1 + b."""
        return 1.0 + self.b


@njit(cache=True, inline="always")
def _pnorm(x, y, z, p_inf):
    if p_inf:
        return max(abs(x), abs(y), abs(z))
    return math.sqrt(x * x + y * y + z * z)


@njit(cache=True)
def _contract_kernel(pts, out, mode, b, p_inf, rot, trans, scale, aabb):
    for k in range(pts.shape[0]):
        if mode == MODE_BOUNDED:
            for a in range(3):
                out[k, a] = (pts[k, a] - aabb[0, a]) / (aabb[1, a] - aabb[0, a])
        else:
            x = pts[k, 0] + trans[0]
            y = pts[k, 1] + trans[1]
            z = pts[k, 2] + trans[2]
            ax = scale * (rot[0, 0] * x + rot[0, 1] * y + rot[0, 2] * z)
            ay = scale * (rot[1, 0] * x + rot[1, 1] * y + rot[1, 2] * z)
            az = scale * (rot[2, 0] * x + rot[2, 1] * y + rot[2, 2] * z)
            r = _pnorm(ax, ay, az, p_inf)
            if r > 1.0:
                f = (1.0 + b - b / r) / r
                ax *= f
                ay *= f
                az *= f
            half = 1.0 + b
            out[k, 0] = (ax + half) / (2.0 * half)
            out[k, 1] = (ay + half) / (2.0 * half)
            out[k, 2] = (az + half) / (2.0 * half)


def contract(points: np.ndarray, config: ContractionConfig) -> np.ndarray:
    """Map world points (M, 3) into normalized grid coordinates in [0, 1]^3.

    Forward-facing rays are handled by `forward_facing_warp`, not here.
    """
    if config.mode == "forward_facing":
        raise ValueError("forward-facing mode maps rays, use forward_facing_warp")
    points = np.ascontiguousarray(points, dtype=np.float64)
    single = points.ndim == 1
    if single:
        points = points.reshape(1, 3)
    out = np.empty_like(points)
    _contract_kernel(points, out, config.mode_id, config.b,
                     config.p == float("inf"),
                     np.ascontiguousarray(config.align.rotation),
                     np.ascontiguousarray(config.align.translation),
                     config.align.scale, config.aabb)
    return out[0] if single else out


def contract_unbounded_raw(points: np.ndarray, config: ContractionConfig) -> np.ndarray:
    """Unbounded contraction before the cube-to-[0,1] mapping (testing aid)."""
    u = contract(points, config)
    half = config.grid_halfwidth
    return u * (2.0 * half) - half


def compute_alignment(camera_positions: np.ndarray,
                      forward_dirs: np.ndarray | None = None,
                      near: float | np.ndarray = 0.0) -> RigidTransform:
    """Rigid transform sending the cameras' two main PCA axes to world X, Y.

    Translation recenters on the centroid; scale shrinks until every
    camera position, pushed forward by its near distance along its
    optical axis, fits in the unit ball. Axis signs are fixed so each
    chosen axis has a nonnegative dot product with the world axis it
    replaces (ties keep the + direction).
    """
    pos = np.asarray(camera_positions, dtype=np.float64)
    if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 3:
        raise ValueError("need at least 3 camera positions of shape (K, 3)")
    centroid = pos.mean(axis=0)
    centered = pos - centroid
    cov = centered.T @ centered
    eigval, eigvec = np.linalg.eigh(cov)
    if eigval[1] <= 1e-10 * max(eigval[2], 1e-300):
        raise ValueError("camera positions are collinear or degenerate")
    v1 = eigvec[:, 2]
    v2 = eigvec[:, 1]
    if eigval[2] - eigval[1] <= 1e-9 * eigval[2]:
        # the leading pair is degenerate (e.g. a symmetric ring): any basis of
        # the plane is a valid answer, so pick the one nearest the world axes
        basis = np.stack([v1, v2], axis=1)
        u, _, vt = np.linalg.svd(basis.T @ np.eye(3)[:, :2])
        basis = basis @ (u @ vt)
        v1, v2 = basis[:, 0], basis[:, 1]
    if v1[0] < 0.0:
        v1 = -v1
    if v2[1] < 0.0:
        v2 = -v2
    v3 = np.cross(v1, v2)
    rotation = np.stack([v1, v2, v3])

    pushed = pos.copy()
    if forward_dirs is not None:
        fwd = np.asarray(forward_dirs, dtype=np.float64)
        pushed = pushed + np.asarray(near, dtype=np.float64).reshape(-1, 1) * fwd
    radii = np.linalg.norm((pushed - centroid) @ rotation.T, axis=1)
    r_max = float(radii.max())
    scale = 1.0 / r_max if r_max > 0 else 1.0
    return RigidTransform(rotation=rotation, translation=-centroid, scale=scale)


def forward_facing_warp(t_depth, config: ContractionConfig):
    """Metric depth -> layer coordinate u = 1 - near / t in [0, 1)."""
    t = np.asarray(t_depth, dtype=np.float64)
    if np.any(t < config.near):
        raise ValueError(f"depth below the near plane ({config.near})")
    u = 1.0 - config.near / t
    return float(u) if np.isscalar(t_depth) else u


def layer_positions(num_layers: int, step: float) -> np.ndarray:
    """Sample positions in layer units when marching layers 0..D-1 with the
    given step; step 0.5 yields 2D-1 samples, step 1.0 yields D."""
    if step <= 0:
        raise ValueError("step must be > 0")
    n = int(math.floor((num_layers - 1) / step + 1e-9)) + 1
    return np.arange(n, dtype=np.float64) * step
