"""Binary serialization: grids, optimizer state, and image sidecars.

All little-endian. A grid block is

    "VXG2" | u32 version | u32 Nx Ny Nz C | 6 x f64 aabb(min,max) | N x f32 data

with data in x-major order (x slowest, then y, z, channel). A training
checkpoint file concatenates the density block, the color block, the
optimizer block

    "VXOP" | u32 version | u64 step | u32 n_groups |
    per group: u32 count | 4 x f64 (lr, beta1, beta2, eps) |
               count x f32 m | count x f32 v

and a scene block carrying what rendering needs to resume or re-render

    "VXCT" | u32 version | u32 mode | f64 b | f64 p (-1 for inf) |
    9 x f64 rotation | 3 x f64 translation | f64 scale |
    u32 num_layers | f64 near | f64 alpha_init | 3 x f64 background |
    u32 has_ff_frame | [16 x f64 world-to-reference | 2 x f64 tan half fov]

Depth / transmittance maps are stored as f32 sidecars with a 16-byte
header: "VXIM" | u32 H | u32 W | u32 channels.

Grid values and moment buffers are stored in float32; loading restores
float64 arrays, so a save/load round trip quantizes to f32 precision.
"""

from __future__ import annotations

import struct

import numpy as np

from .contraction import ContractionConfig, RigidTransform
from .grid import VoxelGrid
from .optimizer import AdamState

_GRID_MAGIC = b"VXG2"
_OPT_MAGIC = b"VXOP"
_SCENE_MAGIC = b"VXCT"
_IMAGE_MAGIC = b"VXIM"
_VERSION = 1

_MODE_CODES = {"bounded": 0, "forward_facing": 1, "unbounded": 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def write_grid(f, grid: VoxelGrid) -> None:
    nx, ny, nz, c = grid.data.shape
    f.write(_GRID_MAGIC)
    f.write(struct.pack("<5I", _VERSION, nx, ny, nz, c))
    f.write(struct.pack("<6d", *grid.aabb.ravel()))
    f.write(grid.data.astype("<f4").tobytes())


def read_grid(f) -> VoxelGrid:
    magic = f.read(4)
    if magic != _GRID_MAGIC:
        raise ValueError(f"bad grid magic {magic!r}")
    version, nx, ny, nz, c = struct.unpack("<5I", f.read(20))
    if version != _VERSION:
        raise ValueError(f"unsupported grid version {version}")
    aabb = np.array(struct.unpack("<6d", f.read(48))).reshape(2, 3)
    n = nx * ny * nz * c
    data = np.frombuffer(f.read(4 * n), dtype="<f4").astype(np.float64)
    if data.size != n:
        raise ValueError("truncated grid block")
    return VoxelGrid(data=data.reshape(nx, ny, nz, c), aabb=aabb)


def save_grid(path, grid: VoxelGrid) -> None:
    with open(path, "wb") as f:
        write_grid(f, grid)


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as f:
        return read_grid(f)


def write_optimizer(f, states: list[AdamState]) -> None:
    steps = {s.step for s in states}
    if len(steps) > 1:
        raise ValueError(f"optimizer groups disagree on step: {sorted(steps)}")
    f.write(_OPT_MAGIC)
    f.write(struct.pack("<I", _VERSION))
    f.write(struct.pack("<Q", states[0].step if states else 0))
    f.write(struct.pack("<I", len(states)))
    for s in states:
        f.write(struct.pack("<I", s.m.size))
        f.write(struct.pack("<4d", s.lr, s.beta1, s.beta2, s.eps))
        f.write(s.m.astype("<f4").tobytes())
        f.write(s.v.astype("<f4").tobytes())


def read_optimizer(f) -> list[AdamState]:
    magic = f.read(4)
    if magic != _OPT_MAGIC:
        raise ValueError(f"bad optimizer magic {magic!r}")
    (version,) = struct.unpack("<I", f.read(4))
    if version != _VERSION:
        raise ValueError(f"unsupported optimizer version {version}")
    (step,) = struct.unpack("<Q", f.read(8))
    (n_groups,) = struct.unpack("<I", f.read(4))
    states = []
    for _ in range(n_groups):
        (count,) = struct.unpack("<I", f.read(4))
        lr, b1, b2, eps = struct.unpack("<4d", f.read(32))
        m = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
        v = np.frombuffer(f.read(4 * count), dtype="<f4").astype(np.float64)
        states.append(AdamState(m=m, v=v, step=int(step), lr=lr,
                                beta1=b1, beta2=b2, eps=eps))
    return states


def write_scene_info(f, contraction: ContractionConfig, alpha_init: float,
                     background, ff_world_to_ref=None, ff_tan=None) -> None:
    f.write(_SCENE_MAGIC)
    f.write(struct.pack("<2I", _VERSION, _MODE_CODES[contraction.mode]))
    p = -1.0 if contraction.p == float("inf") else float(contraction.p)
    f.write(struct.pack("<2d", contraction.b, p))
    f.write(struct.pack("<9d", *contraction.align.rotation.ravel()))
    f.write(struct.pack("<3d", *contraction.align.translation))
    f.write(struct.pack("<d", contraction.align.scale))
    f.write(struct.pack("<I", contraction.num_layers))
    f.write(struct.pack("<2d", contraction.near, alpha_init))
    f.write(struct.pack("<3d", *np.asarray(background, dtype=np.float64)))
    has_ff = ff_world_to_ref is not None and ff_tan is not None
    f.write(struct.pack("<I", 1 if has_ff else 0))
    if has_ff:
        f.write(struct.pack("<16d",
                            *np.asarray(ff_world_to_ref, dtype=np.float64).ravel()))
        f.write(struct.pack("<2d", *np.asarray(ff_tan, dtype=np.float64)))


def read_scene_info(f, aabb: np.ndarray):
    magic = f.read(4)
    if magic != _SCENE_MAGIC:
        raise ValueError(f"bad scene magic {magic!r}")
    version, mode_code = struct.unpack("<2I", f.read(8))
    if version != _VERSION:
        raise ValueError(f"unsupported scene version {version}")
    b, p = struct.unpack("<2d", f.read(16))
    rotation = np.array(struct.unpack("<9d", f.read(72))).reshape(3, 3)
    translation = np.array(struct.unpack("<3d", f.read(24)))
    (scale,) = struct.unpack("<d", f.read(8))
    (num_layers,) = struct.unpack("<I", f.read(4))
    near, alpha_init = struct.unpack("<2d", f.read(16))
    background = np.array(struct.unpack("<3d", f.read(24)))
    (has_ff,) = struct.unpack("<I", f.read(4))
    ff_world_to_ref = None
    ff_tan = None
    if has_ff:
        ff_world_to_ref = np.array(struct.unpack("<16d", f.read(128))).reshape(4, 4)
        ff_tan = np.array(struct.unpack("<2d", f.read(16)))
    contraction = ContractionConfig(
        mode=_MODE_NAMES[mode_code], b=b,
        p=float("inf") if p < 0 else p,
        align=RigidTransform(rotation=rotation, translation=translation,
                             scale=scale),
        num_layers=int(num_layers), near=near, aabb=aabb)
    return contraction, alpha_init, background, ff_world_to_ref, ff_tan


def save_checkpoint(path, density: VoxelGrid, color: VoxelGrid,
                    states: list[AdamState], contraction: ContractionConfig,
                    alpha_init: float, background, ff_world_to_ref=None,
                    ff_tan=None) -> None:
    with open(path, "wb") as f:
        write_grid(f, density)
        write_grid(f, color)
        write_optimizer(f, states)
        write_scene_info(f, contraction, alpha_init, background,
                         ff_world_to_ref, ff_tan)


def load_checkpoint(path):
    """Returns (density, color, states, contraction, alpha_init, background,
    ff_world_to_ref, ff_tan); the last two are None outside forward-facing
    mode."""
    with open(path, "rb") as f:
        density = read_grid(f)
        color = read_grid(f)
        states = read_optimizer(f)
        (contraction, alpha_init, background,
         ff_world_to_ref, ff_tan) = read_scene_info(f, density.aabb)
    return (density, color, states, contraction, alpha_init, background,
            ff_world_to_ref, ff_tan)


def write_vxim(path, array: np.ndarray) -> None:
    """f32 image sidecar: 16-byte header then row-major values."""
    arr = np.asarray(array, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected HxW or HxWxC, got shape {array.shape}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_IMAGE_MAGIC)
        f.write(struct.pack("<3I", h, w, c))
        f.write(arr.astype("<f4").tobytes())


def read_vxim(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _IMAGE_MAGIC:
            raise ValueError(f"bad image magic {magic!r}")
        h, w, c = struct.unpack("<3I", f.read(12))
        data = np.frombuffer(f.read(4 * h * w * c), dtype="<f4")
    if data.size != h * w * c:
        raise ValueError("truncated image sidecar")
    arr = data.reshape(h, w, c)
    return arr[:, :, 0] if c == 1 else arr
