"""Command-line entry point.

    voxfield <verb> --config PATH [--set key=value ...] [--out DIR] [--seed N]

Verbs: train, render, eval, bench, selftest, gen-scene. Exit codes:
0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxfield",
        description="dense voxel radiance field trainer and renderer")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required,
                       help="run config file (INI sections mirroring TrainConfig)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (dotted)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (0 = all cores; env VOXFIELD_THREADS)")

    common(sub.add_parser("train", help="optimize grids against a dataset"),
           config_required=True)

    p_render = sub.add_parser("render", help="render PNGs from a checkpoint")
    common(p_render)
    p_render.add_argument("--checkpoint", required=True)
    p_render.add_argument("--poses", required=True,
                          help="transforms.json supplying cameras")
    p_render.add_argument("--width", type=int, default=None)
    p_render.add_argument("--height", type=int, default=None)

    p_eval = sub.add_parser("eval", help="PSNR table over a dataset's test split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset directory")

    p_bench = sub.add_parser(
        "bench", help="spread-penalty timing: linear path vs quadratic oracle")
    common(p_bench)

    common(sub.add_parser("selftest", help="run built-in oracle suites"))
    common(sub.add_parser("gen-scene", help="write a synthetic dataset"))
    return parser


def _setup_threads(args) -> None:
    n = args.threads
    if n is None:
        env = os.environ.get("VOXFIELD_THREADS", "").strip()
        n = int(env) if env else 0
    if n and n > 0:
        import numba
        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _load_config(args):
    from .trainer import TrainConfig, apply_overrides, load_config

    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _cmd_train(args) -> int:
    from .trainer import train

    cfg = _load_config(args)
    out = Path(args.out) if args.out else Path("voxfield_out")
    result = train(cfg, out_dir=out, quiet=False)
    print(f"finished {cfg.iterations} steps; "
          f"held-out PSNR {result.summary['final_psnr_mean']:.2f} dB; "
          f"outputs in {out}")
    return 0


def _cmd_render(args) -> int:
    from PIL import Image

    from . import checkpoint as ckpt
    from .datasets import load_poses
    from .rendering import Camera, RenderSettings, render_image

    (density, color, _, contraction, alpha_init, background,
     ff_world_to_ref, ff_tan) = ckpt.load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    settings = RenderSettings(contraction=contraction,
                              step_size=cfg.step_size,
                              halt_threshold=cfg.halt_threshold,
                              background=background, alpha_init=alpha_init,
                              near=cfg.near, far=cfg.far,
                              ff_world_to_ref=ff_world_to_ref, ff_tan=ff_tan)
    angle, poses = load_poses(args.poses)
    out = Path(args.out) if args.out else Path("renders")
    out.mkdir(parents=True, exist_ok=True)
    w = args.width or 64
    h = args.height or w
    for k in range(poses.shape[0]):
        cam = Camera.from_angle(w, h, angle, poses[k])
        rgb, depth, trans = render_image(density, color, cam, settings)
        Image.fromarray(
            np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)).save(
                out / f"frame_{k:04d}.png")
        ckpt.write_vxim(out / f"frame_{k:04d}.depth.vxim", depth)
        ckpt.write_vxim(out / f"frame_{k:04d}.trans.vxim", trans)
    print(f"rendered {poses.shape[0]} frames to {out}")
    return 0


def _cmd_eval(args) -> int:
    from . import checkpoint as ckpt
    from .datasets import load_dataset
    from .rendering import RenderSettings, render_image
    from .trainer import psnr

    (density, color, _, contraction, alpha_init, background,
     ff_world_to_ref, ff_tan) = ckpt.load_checkpoint(args.checkpoint)
    cfg = _load_config(args)
    dataset = load_dataset(args.data)
    settings = RenderSettings(contraction=contraction,
                              step_size=cfg.step_size,
                              halt_threshold=cfg.halt_threshold,
                              background=background, alpha_init=alpha_init,
                              near=dataset.near, far=dataset.far,
                              ff_world_to_ref=ff_world_to_ref, ff_tan=ff_tan)
    rows = ["frame,psnr"]
    values = []
    for k in dataset.indices("test"):
        cam = dataset.camera(int(k))
        rgb, _, _ = render_image(density, color, cam, settings)
        val = psnr(rgb, dataset.images[int(k)])
        rows.append(f"{int(k)},{val!r}")
        values.append(val)
    table = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "psnr.csv").write_text(table)
    print(table, end="")
    print(f"mean,{float(np.mean(values))!r}")
    return 0


def _cmd_bench(args) -> int:
    from .distortion import benchmark_scaling

    opts = {"max_n": 1024, "rays": 4096, "repeats": 3}
    for item in args.overrides:
        key, _, value = item.partition("=")
        if key not in opts:
            raise UsageError(f"unknown bench key {key!r} "
                             f"(known: {', '.join(opts)})")
        opts[key] = int(value)
    sizes = []
    n = 128
    while n <= opts["max_n"]:
        sizes.append(n)
        n *= 2
    rows = benchmark_scaling(sizes, n_rays=opts["rays"], repeats=opts["repeats"])
    lines = ["n_samples,t_fast,t_oracle"]
    lines += [f"{n},{tf!r},{to!r}" for n, tf, to in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "bench.csv").write_text(text)
    print(text, end="")
    return 0


def _cmd_selftest(args) -> int:
    from .selfcheck import run_all

    return 0 if run_all(verbose=True) else 1


def _cmd_gen_scene(args) -> int:
    from . import checkpoint as ckpt
    from .datasets import SceneSpec, gen_synthetic_scene, save_dataset
    from .trainer import ConfigError

    spec = SceneSpec()
    for item in args.overrides:
        key, _, value = item.partition("=")
        key = key.split(".")[-1]
        if not hasattr(spec, key) or key == "boxes":
            raise UsageError(f"unknown scene key {key!r}")
        current = getattr(spec, key)
        if isinstance(current, str):
            parsed = value
        elif isinstance(current, int):
            parsed = int(value)
        elif isinstance(current, float):
            parsed = float(value)
        else:
            parsed = tuple(float(tok) for tok in value.replace(",", " ").split())
        setattr(spec, key, parsed)
    seed = args.seed if args.seed is not None else 0
    gt, dataset = gen_synthetic_scene(seed, spec)
    out = Path(args.out) if args.out else Path("scene")
    save_dataset(out, dataset)
    ckpt.save_grid(out / "gt_density.vxg", gt.density)
    ckpt.save_grid(out / "gt_color.vxg", gt.color)
    print(f"wrote {dataset.n_frames} frames "
          f"({dataset.split.count('train')} train) to {out}")
    return 0


class UsageError(ValueError):
    pass


_COMMANDS = {
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "selftest": _cmd_selftest,
    "gen-scene": _cmd_gen_scene,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_threads(args)
    from .trainer import ConfigError

    try:
        return _COMMANDS[args.verb](args)
    except (UsageError, ConfigError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure -> exit 1 with diagnostic
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
