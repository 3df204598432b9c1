"""Training orchestration: loss composition, schedules, and the main loop.

One iteration: draw a uniform random pixel batch over all training views,
render it (forward pass), compute the photometric MSE and the weighted
spread penalty, backpropagate both into the grid gradient buffers, add
the total-variation gradient (dense over the whole grid until
`tv_dense_until`, afterwards only around cells touched this iteration),
and take one fused Adam step per parameter group. Occupancy updates and
progressive grid upscaling run on their configured schedules.

The metrics log is a CSV with header `step,mse,dist,psnr,lr_mult,seconds`:
`dist` is the weighted spread penalty as it enters the total, `psnr` is
filled at evaluation steps (held-out view) and blank elsewhere, `seconds`
is wall time and is the one column that is not deterministic.

Run configs are INI-style files whose sections/keys mirror TrainConfig
field names exactly; every key can be overridden with dotted
`section.key=value` strings.
"""

from __future__ import annotations

import configparser
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import checkpoint as ckpt
from .contraction import ContractionConfig, compute_alignment
from .datasets import SceneDataset, SceneSpec, gen_synthetic_scene, load_dataset
from .distortion import RaySampleBatch, distloss_backward, distloss_forward
from .grid import VoxelGrid, create_grid, new_grad_buffer, tv_add_grad, upscale
from .optimizer import AdamState, adam_step
from .rendering import (Camera, OccupancyMask, RenderSettings, backward_rays,
                        forward_rays, pixel_rays, render_image, sample_points,
                        update_occupancy)


class ConfigError(ValueError):
    """Bad config file, key, or override."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message names the offending term."""


@dataclass
class TrainConfig:
    # [grid]
    initial_resolution: tuple = (16, 16, 16)
    final_resolution: tuple = (64, 64, 64)
    upscale_steps: tuple | None = None   # None: 1/4 and 1/2 of total steps
    aabb: tuple = (-1.0, -1.0, -1.0, 1.0, 1.0, 1.0)
    # [train]
    iterations: int = 3000
    rays_per_batch: int = 4096
    lr_density: float = 0.1
    lr_color: float = 0.1
    lr_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    tv_weight_density: float = 1e-5
    tv_weight_color: float = 1e-6
    tv_dense_until: int = 10000
    dist_weight: float = 1e-2
    occupancy_every: int = 1000
    occupancy_threshold: float = 1e-3
    alpha_init: float = 1e-4
    step_size: float = 0.5
    halt_threshold: float = 1e-3
    huber_delta: float = 1.0
    seed: int = 0
    eval_every: int = 100
    checkpoint_every: int = 0            # 0: final checkpoint only
    # [contraction]
    mode: str = "bounded"
    b: float = 1.0
    p: float = 2.0
    num_layers: int = 256
    near: float = 0.1
    far: float = 8.0
    # [scene]
    source: str = "synthetic"            # synthetic | directory
    data_path: str = ""
    scene_seed: int = 0
    gt_resolution: int = 32
    n_boxes: int = 3
    n_train: int = 24
    n_test: int = 4
    image_size: int = 64
    background: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        for name in ("lr_density", "lr_color", "tv_weight_density",
                     "tv_weight_color", "dist_weight", "occupancy_threshold",
                     "huber_delta"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.iterations < 1 or self.rays_per_batch < 1:
            raise ConfigError("iterations and rays_per_batch must be >= 1")
        ini = tuple(self.initial_resolution)
        fin = tuple(self.final_resolution)
        if len(ini) != 3 or len(fin) != 3 or min(ini) < 2 or min(fin) < 2:
            raise ConfigError("resolutions must be three values >= 2")
        if any(f < i for f, i in zip(fin, ini)):
            raise ConfigError("final_resolution must be >= initial_resolution")
        steps = self.resolved_upscale_steps()
        if any(s2 <= s1 for s1, s2 in zip(steps, steps[1:])):
            raise ConfigError("upscale_steps must be strictly increasing")
        if self.mode not in ("bounded", "forward_facing", "unbounded"):
            raise ConfigError(f"unknown contraction mode {self.mode!r}")
        if not (0 < self.alpha_init < 1):
            raise ConfigError("alpha_init must be in (0, 1)")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")

    def resolved_upscale_steps(self) -> tuple:
        if self.upscale_steps is not None:
            return tuple(int(s) for s in self.upscale_steps)
        return (self.iterations // 4, self.iterations // 2)

    def aabb_array(self) -> np.ndarray:
        return np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)


# section -> field names; mirrors the config file layout exactly
_SECTIONS = {
    "grid": ("initial_resolution", "final_resolution", "upscale_steps", "aabb"),
    "train": ("iterations", "rays_per_batch", "lr_density", "lr_color",
              "lr_decay", "beta1", "beta2", "eps", "tv_weight_density",
              "tv_weight_color", "tv_dense_until", "dist_weight",
              "occupancy_every", "occupancy_threshold", "alpha_init",
              "step_size", "halt_threshold", "huber_delta", "seed",
              "eval_every", "checkpoint_every"),
    "contraction": ("mode", "b", "p", "num_layers", "near", "far"),
    "scene": ("source", "data_path", "scene_seed", "gt_resolution", "n_boxes",
              "n_train", "n_test", "image_size", "background"),
}

_FIELD_SECTION = {name: sec for sec, names in _SECTIONS.items() for name in names}
_INT_TUPLES = {"initial_resolution", "final_resolution"}
_FLOAT_TUPLES = {"aabb", "background"}
_STR_FIELDS = {"mode", "source", "data_path"}


def _parse_value(name: str, text: str):
    text = text.strip()
    if name == "upscale_steps":
        if text.lower() in ("auto", "none", ""):
            return None
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    if name in _INT_TUPLES:
        return tuple(int(tok) for tok in text.replace(",", " ").split())
    if name in _FLOAT_TUPLES:
        return tuple(float(tok) for tok in text.replace(",", " ").split())
    if name in _STR_FIELDS:
        return text
    default = TrainConfig.__dataclass_fields__[name].default
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    return float(text)  # covers p: float("inf") parses "inf"


def _format_value(name: str, value) -> str:
    if name == "upscale_steps" and value is None:
        return "auto"
    if isinstance(value, (tuple, list)):
        return " ".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def load_config(path) -> TrainConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    cfg = TrainConfig()
    for sec in parser.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, text in parser.items(sec):
            if key not in _SECTIONS[sec]:
                raise ConfigError(f"unknown config key {sec}.{key}")
            setattr(cfg, key, _parse_value(key, text))
    cfg.validate()
    return cfg


def save_config(path, cfg: TrainConfig) -> None:
    parser = configparser.ConfigParser()
    for sec, names in _SECTIONS.items():
        parser[sec] = {name: _format_value(name, getattr(cfg, name))
                       for name in names}
    with open(path, "w") as f:
        parser.write(f)


def apply_overrides(cfg: TrainConfig, overrides) -> TrainConfig:
    """Apply dotted `section.key=value` strings; unknown keys are rejected."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        if "." in key:
            sec, name = key.split(".", 1)
            if _FIELD_SECTION.get(name) != sec:
                raise ConfigError(f"unknown config key {key!r}")
        else:
            name = key
            if name not in _FIELD_SECTION:
                raise ConfigError(f"unknown config key {key!r}")
        cfg = replace(cfg, **{name: _parse_value(name, text)})
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# metrics

class LossParts(NamedTuple):
    total: float
    mse: float
    tv: None          # gradient-only by design: no forward value exists
    dist: float


def compute_losses(render_out, gt_pixels: np.ndarray,
                   batch: RaySampleBatch | None, config: TrainConfig) -> LossParts:
    """Loss values for logging; the TV term is gradient-only (always None).

    The spread penalty enters as a per-ray mean (sum over the batch divided
    by the number of drawn rays) so its gradient scale matches the
    photometric mean regardless of batch size.
    """
    rgb = render_out.rgb if hasattr(render_out, "rgb") else np.asarray(render_out)
    if rgb.shape != gt_pixels.shape:
        raise ValueError(f"render {rgb.shape} vs gt {gt_pixels.shape}")
    mse = float(np.mean((rgb - gt_pixels) ** 2))
    dist = 0.0
    if batch is not None and config.dist_weight != 0.0:
        dist = distloss_forward(batch) / gt_pixels.shape[0]
    return LossParts(total=mse + config.dist_weight * dist, mse=mse,
                     tv=None, dist=dist)


def psnr(img: np.ndarray, ref: np.ndarray) -> float:
    """10 log10(1 / MSE) for unit-range images, capped at 99 dB."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    mse = float(np.mean((img - ref) ** 2))
    if mse <= 1e-12:
        return 99.0
    return min(10.0 * math.log10(1.0 / mse), 99.0)


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Exponential decay multiplier: decay^(step/total)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return config.lr_decay ** (step / config.iterations)


def mean_weight_entropy(density: VoxelGrid, color: VoxelGrid, camera: Camera,
                        settings: RenderSettings, shift: float,
                        mask: OccupancyMask | None = None) -> float:
    """Mean per-ray entropy of the compositing distribution over one view.

    Per ray the sample weights plus the final transmittance form a
    probability vector (they sum to one), so the entropy needs no
    thresholds: an empty ray scores ~0, haze and spread both raise it,
    and compact opaque hits keep it low.
    """
    origins, dirs = pixel_rays(camera)
    samples = sample_points(origins, dirs, settings, density.resolution, mask)
    fwd = forward_rays(density, color, samples, settings, shift)
    counts = samples.counts()
    ray_of = np.repeat(np.arange(samples.n_rays), counts)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(fwd.w > 0, -fwd.w * np.log(fwd.w), 0.0)
    h = np.bincount(ray_of, weights=terms, minlength=samples.n_rays)
    t = fwd.t_final
    h = h + np.where(t > 0, -t * np.log(t), 0.0)
    return float(np.mean(h))


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainResult:
    density: VoxelGrid
    color: VoxelGrid
    states: list
    mask: OccupancyMask
    settings: RenderSettings
    shift: float
    csv_rows: list
    summary: dict
    dataset: SceneDataset
    tv_pairs: np.ndarray


CSV_HEADER = "step,mse,dist,psnr,lr_mult,seconds"


def _resolve_dataset(cfg: TrainConfig) -> tuple:
    if cfg.source == "directory":
        if not cfg.data_path:
            raise ConfigError("scene.source=directory needs scene.data_path")
        return None, load_dataset(cfg.data_path)
    if cfg.source != "synthetic":
        raise ConfigError(f"unknown scene source {cfg.source!r}")
    spec = SceneSpec(grid_resolution=cfg.gt_resolution, n_boxes=cfg.n_boxes,
                     n_train=cfg.n_train, n_test=cfg.n_test,
                     image_size=cfg.image_size, background=cfg.background,
                     mode="unbounded" if cfg.mode == "unbounded" else "bounded",
                     near=cfg.near, far=cfg.far, alpha_init=cfg.alpha_init)
    gt, ds = gen_synthetic_scene(cfg.scene_seed, spec)
    return gt, ds


def _build_contraction(cfg: TrainConfig, dataset: SceneDataset) -> ContractionConfig:
    if cfg.mode == "bounded":
        return ContractionConfig(mode="bounded", aabb=cfg.aabb_array())
    if cfg.mode == "unbounded":
        train_idx = dataset.indices("train")
        positions = dataset.poses[train_idx, :3, 3]
        forwards = -dataset.poses[train_idx, :3, 2]
        align = compute_alignment(positions, forwards, near=dataset.near)
        half = 1.0 + cfg.b
        return ContractionConfig(mode="unbounded", b=cfg.b, p=cfg.p, align=align,
                                 aabb=np.array([[-half] * 3, [half] * 3]))
    return ContractionConfig(mode="forward_facing", num_layers=cfg.num_layers,
                             near=cfg.near,
                             aabb=np.array([[0.0] * 3, [1.0] * 3]))


def _forward_facing_frame(cfg: TrainConfig, dataset: SceneDataset):
    """Reference frustum for the layered parameterization: the mean camera,
    with the field of view padded so side views stay inside the grid."""
    train_idx = dataset.indices("train")
    pos = dataset.poses[train_idx, :3, 3].mean(axis=0)
    fwd = -dataset.poses[train_idx, :3, 2].mean(axis=0)
    fwd /= np.linalg.norm(fwd)
    up = dataset.poses[train_idx, :3, 1].mean(axis=0)
    zc = -fwd
    xc = np.cross(up, zc)
    if np.linalg.norm(xc) < 1e-9:  # mean up parallel to the view axis
        fallback = np.array([1.0, 0.0, 0.0])
        if abs(zc[0]) > 0.9:
            fallback = np.array([0.0, 1.0, 0.0])
        xc = np.cross(fallback, zc)
    xc /= np.linalg.norm(xc)
    yc = np.cross(zc, xc)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = xc, yc, zc, pos
    w2r = np.linalg.inv(c2w)
    pad = 1.3
    tanx = math.tan(0.5 * dataset.camera_angle_x) * pad
    tany = tanx * dataset.height / dataset.width
    return w2r, np.array([tanx, tany])


def _mask_resolution(resolution) -> tuple:
    return tuple(max(r // 2, 1) for r in resolution)


def train(config: TrainConfig, dataset: SceneDataset | None = None,
          out_dir=None, quiet: bool = True) -> TrainResult:
    """Run the optimization loop; optionally write checkpoint + logs."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    gt = None
    if dataset is None:
        gt, dataset = _resolve_dataset(config)
    dataset.validate()

    contraction = _build_contraction(config, dataset)
    settings = RenderSettings(
        contraction=contraction, step_size=config.step_size,
        halt_threshold=config.halt_threshold, background=dataset.background,
        alpha_init=config.alpha_init, near=dataset.near, far=dataset.far)
    if config.mode == "forward_facing":
        settings.ff_world_to_ref, settings.ff_tan = _forward_facing_frame(
            config, dataset)
    if config.mode == "unbounded":
        half = 1.0 + config.b
        grid_aabb = np.array([[-half] * 3, [half] * 3])
    elif config.mode == "forward_facing":
        grid_aabb = np.array([[0.0] * 3, [1.0] * 3])
    else:
        grid_aabb = config.aabb_array()

    res = tuple(config.initial_resolution)
    density = create_grid(res, 1, grid_aabb, 0.0)
    color = create_grid(res, 3, grid_aabb, 0.0)
    shift = settings.shift(res)
    settings.alpha_shift_override = shift  # frozen across upscales
    d_grad = new_grad_buffer(density)
    c_grad = new_grad_buffer(color)
    touched = np.zeros(res, dtype=np.bool_)
    st_density = AdamState.fresh(density.data.size, lr=config.lr_density,
                                 beta1=config.beta1, beta2=config.beta2,
                                 eps=config.eps)
    st_color = AdamState.fresh(color.data.size, lr=config.lr_color,
                               beta1=config.beta1, beta2=config.beta2,
                               eps=config.eps)
    mask = OccupancyMask.all_occupied(_mask_resolution(res))
    mask_initialized = False

    train_idx = dataset.indices("train")
    test_idx = dataset.indices("test")
    held_out = int(test_idx[0])
    n_pix = dataset.width * dataset.height
    train_dirs = np.empty((len(train_idx), n_pix, 3))
    train_origins = np.empty((len(train_idx), 3))
    for j, k in enumerate(train_idx):
        o, d = pixel_rays(dataset.camera(int(k)))
        train_dirs[j] = d
        train_origins[j] = o[0]
    gt_flat = dataset.images[train_idx].reshape(len(train_idx), n_pix, 3)

    upscale_steps = set(config.resolved_upscale_steps())
    csv_rows = [CSV_HEADER]
    tv_pairs_log = np.zeros(config.iterations, dtype=np.int64)
    last_psnr = float("nan")
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        save_config(out_path / "config.cfg", config)

    def eval_psnr() -> float:
        cam = dataset.camera(held_out)
        rgb, _, _ = render_image(density, color, cam, settings, mask)
        return psnr(rgb, dataset.images[held_out])

    t_start = time.perf_counter()
    for step in range(config.iterations):
        t0 = time.perf_counter()
        lr_mult = lr_schedule(step, config)

        flat = rng.integers(0, len(train_idx) * n_pix, size=config.rays_per_batch)
        view = flat // n_pix
        pix = flat % n_pix
        origins = train_origins[view]
        dirs = train_dirs[view, pix]
        gt_px = gt_flat[view, pix]

        samples = sample_points(origins, dirs, settings, density.resolution, mask)
        fwd = forward_rays(density, color, samples, settings, shift)

        batch = None
        if config.dist_weight != 0.0 and samples.n_samples > 0:
            off, s_bounds = samples.boundaries()
            batch = RaySampleBatch.from_boundaries(off, s_bounds, fwd.w)
        parts = compute_losses(fwd, gt_px, batch, config)
        if not math.isfinite(parts.mse):
            raise TrainingDiverged(f"photometric loss is not finite at step {step}")
        if not math.isfinite(parts.dist):
            raise TrainingDiverged(f"spread penalty is not finite at step {step}")

        d_rgb = (2.0 / (gt_px.size)) * (fwd.rgb - gt_px)
        dw_extra = None
        if batch is not None:
            dw_extra = (config.dist_weight / gt_px.shape[0]) * distloss_backward(batch)

        d_grad[:] = 0.0
        c_grad[:] = 0.0
        touched[:] = False
        backward_rays(samples, fwd, d_rgb, settings, shift, d_grad, c_grad,
                      touched, dw_extra)

        dense_tv = step < config.tv_dense_until
        pairs = 0
        if config.tv_weight_density > 0:
            pairs += tv_add_grad(density, d_grad, config.tv_weight_density,
                                 dense_tv, touched, config.huber_delta)
        if config.tv_weight_color > 0:
            pairs += tv_add_grad(color, c_grad, config.tv_weight_color,
                                 dense_tv, touched, config.huber_delta)
        tv_pairs_log[step] = pairs

        adam_step(density.data.ravel(), d_grad.ravel(), st_density, lr_mult)
        adam_step(color.data.ravel(), c_grad.ravel(), st_color, lr_mult)

        done = step + 1
        if config.occupancy_every > 0 and done % config.occupancy_every == 0:
            update_occupancy(density, mask, config.occupancy_threshold, shift,
                             settings.reference_delta(density.resolution))
            mask_initialized = True

        if done in upscale_steps and done < config.iterations:
            new_res = tuple(min(2 * r, f) for r, f in
                            zip(density.resolution, config.final_resolution))
            if new_res != density.resolution:
                density = upscale(density, new_res)
                color = upscale(color, new_res)
                d_grad = new_grad_buffer(density)
                c_grad = new_grad_buffer(color)
                touched = np.zeros(new_res, dtype=np.bool_)
                st_density = AdamState.fresh(density.data.size,
                                             lr=config.lr_density,
                                             beta1=config.beta1,
                                             beta2=config.beta2, eps=config.eps)
                st_color = AdamState.fresh(color.data.size, lr=config.lr_color,
                                           beta1=config.beta1,
                                           beta2=config.beta2, eps=config.eps)
                mask = OccupancyMask.all_occupied(_mask_resolution(new_res))
                if mask_initialized:
                    update_occupancy(density, mask, config.occupancy_threshold,
                                     shift,
                                     settings.reference_delta(new_res))

        psnr_field = ""
        if config.eval_every > 0 and (done % config.eval_every == 0
                                      or done == config.iterations):
            last_psnr = eval_psnr()
            psnr_field = repr(last_psnr)

        if out_path is not None and config.checkpoint_every > 0 \
                and done % config.checkpoint_every == 0 and done != config.iterations:
            ckpt.save_checkpoint(out_path / f"checkpoint_{done:06d}.vxc",
                                 density, color, [st_density, st_color],
                                 contraction, config.alpha_init,
                                 settings.background,
                                 settings.ff_world_to_ref, settings.ff_tan)

        secs = time.perf_counter() - t0
        csv_rows.append(f"{step},{parts.mse!r},"
                        f"{config.dist_weight * parts.dist!r},"
                        f"{psnr_field},{lr_mult!r},{secs!r}")
        if not quiet and (done % 200 == 0 or done == 1):
            print(f"step {done}/{config.iterations} mse={parts.mse:.3e} "
                  f"psnr={last_psnr:.2f}")

    test_psnrs = []
    for k in test_idx:
        cam = dataset.camera(int(k))
        rgb, _, _ = render_image(density, color, cam, settings, mask)
        test_psnrs.append(psnr(rgb, dataset.images[int(k)]))
    entropy = mean_weight_entropy(density, color, dataset.camera(held_out),
                                  settings, shift, mask)
    summary = {
        "final_psnr_mean": float(np.mean(test_psnrs)),
        "final_psnr_per_view": [float(p) for p in test_psnrs],
        "held_out_psnr": float(last_psnr) if math.isfinite(last_psnr)
                         else float(np.mean(test_psnrs)),
        "mean_weight_entropy": entropy,
        "mask_fraction_occupied": mask.fraction_occupied(),
        "iterations": config.iterations,
        "final_resolution": list(density.resolution),
        "wall_seconds": time.perf_counter() - t_start,
    }

    if out_path is not None:
        (out_path / "metrics.csv").write_text("\n".join(csv_rows) + "\n")
        ckpt.save_checkpoint(out_path / "checkpoint.vxc", density, color,
                             [st_density, st_color], contraction,
                             config.alpha_init, settings.background,
                             settings.ff_world_to_ref, settings.ff_tan)
        (out_path / "summary.json").write_text(json.dumps(summary, indent=1))

    return TrainResult(density=density, color=color,
                       states=[st_density, st_color], mask=mask,
                       settings=settings, shift=shift, csv_rows=csv_rows,
                       summary=summary, dataset=dataset,
                       tv_pairs=tv_pairs_log)
