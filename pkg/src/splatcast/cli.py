"""Command line interface: render, edit, export, fit, eval.

Every run resolves its configuration from three layers (defaults, then an
optional --config TOML/JSON file, then explicit flags, flags winning) and
logs the result so runs are reproducible from the log line alone.
Exit codes: 0 success, 1 IO/format/runtime failure, 2 invalid usage.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from .core import ConfidenceLevel
from .errors import SplatError, ValidationError
from .fitting import FitConfig, fit, psnr, ssim
from .fixtures import ground_truth_scene, random_scene
from .gsio import (
    load_cameras,
    load_gs_ply,
    load_image,
    load_solid_mesh,
    save_gs_ply,
    save_image,
    export_splat_mesh,
)
from .meshing import EditSpec, apply_edit
from .render import RenderConfig, render_image
from .scene import Camera, Material, PointLight, Scene, SolidMesh

log = logging.getLogger("splatcast")


class _UsageError(Exception):
    """Bad flag combinations caught after argparse (exit code 2)."""

_RENDER_DEFAULTS = {
    "alpha_level": 0.99,
    "eps1": 1.0 / 255.0,
    "eps2": 1e-4,
    "max_per_ray": 1024,
    "advance_eps": 1e-6,
    "depth": 4,
    "workers": 0,  # 0 = auto (cpu count)
    "background": (0.0, 0.0, 0.0),
    "width": None,
    "height": None,
}

_FIT_DEFAULTS = {
    "iterations": 500,
    "lr_color": 0.025,
    "lr_opacity": 0.05,
    "lr_mean": 0.002,
    "lr_scale": 0.002,
    "lr_quat": 0.002,
}


def _parse_background(text):
    parts = str(text).split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("background must be r,g,b")
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError("background must be r,g,b numbers") from None


def _parse_mesh_spec(text):
    parts = str(text).split(":")
    if len(parts) not in (2, 3):
        raise argparse.ArgumentTypeError("mesh must be path:material[:ior]")
    path, material = parts[0], parts[1]
    if material not in ("diffuse", "mirror", "glass"):
        raise argparse.ArgumentTypeError(f"unknown material {material!r}")
    ior = 1.5
    if len(parts) == 3:
        try:
            ior = float(parts[2])
        except ValueError:
            raise argparse.ArgumentTypeError("mesh ior must be a number") from None
    return path, material, ior


def _parse_light(text):
    parts = str(text).split(":")
    try:
        pos = tuple(float(p) for p in parts[0].split(","))
        intensity = tuple(float(p) for p in parts[1].split(",")) if len(parts) > 1 else (1.0, 1.0, 1.0)
    except ValueError:
        raise argparse.ArgumentTypeError("light must be x,y,z[:r,g,b]") from None
    if len(pos) != 3 or len(intensity) != 3:
        raise argparse.ArgumentTypeError("light must be x,y,z[:r,g,b]")
    return pos, intensity


def _load_config_file(path):
    if path is None:
        return {}
    ext = os.path.splitext(path)[1].lower()
    with open(path, "rb") as f:
        if ext == ".json":
            return json.load(f)
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        return tomllib.load(f)


def _resolve(args, keys_defaults):
    """Merge defaults, config file, and flags (flags win); log the result."""
    file_cfg = _load_config_file(getattr(args, "config", None))
    known = set(keys_defaults)
    for key in file_cfg:
        if key not in known:
            log.warning("config file: ignoring unknown key %r", key)
    resolved = {}
    for key, default in keys_defaults.items():
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            resolved[key] = flag_val
        elif key in file_cfg:
            val = file_cfg[key]
            resolved[key] = tuple(val) if isinstance(val, list) else val
        else:
            resolved[key] = default
    log.info("resolved config: %s", json.dumps(
        {k: (list(v) if isinstance(v, tuple) else v) for k, v in resolved.items()},
        sort_keys=True))
    return resolved


def _render_config(res):
    return RenderConfig(
        level=ConfidenceLevel(res["alpha_level"]),
        eps1=res["eps1"],
        eps2=res["eps2"],
        max_gaussians_per_ray=res["max_per_ray"],
        advance_eps=res["advance_eps"],
        max_bounce_depth=res["depth"],
    )


def _workers(res):
    w = int(res["workers"])
    return w if w > 0 else (os.cpu_count() or 1)


def _load_scene_splats(args):
    if args.synthetic is not None:
        n = int(args.synthetic)
        if n < 0:
            raise _UsageError("--synthetic count must be >= 0")
        scene = ground_truth_scene() if n == 3 else random_scene(n)
        return scene.gaussians
    if args.input is None:
        raise _UsageError("either --input or --synthetic is required")
    return load_gs_ply(args.input)


def _resize_camera(cam, width, height):
    if width is None and height is None:
        return cam
    w = int(width) if width is not None else cam.width
    h = int(height) if height is not None else cam.height
    return Camera(
        rotation=cam.rotation, position=cam.position,
        focal_x=cam.focal_x * (w / cam.width),
        focal_y=cam.focal_y * (h / cam.height),
        width=w, height=h,
    )


def _build_solids(mesh_specs):
    solids = []
    for path, material, ior in mesh_specs or []:
        albedo = (0.8, 0.8, 0.8) if material == "diffuse" else (1.0, 1.0, 1.0)
        solids.append(load_solid_mesh(path, Material(material, albedo, ior=ior)))
    return solids


def cmd_render(args):
    res = _resolve(args, _RENDER_DEFAULTS)
    gaussians = _load_scene_splats(args)
    solids = _build_solids(args.mesh)
    lights = [PointLight(pos, intensity) for pos, intensity in (args.light or [])]
    scene = Scene(gaussians=gaussians, solids=solids, lights=lights,
                  background=list(res["background"]))
    cameras = [_resize_camera(c, res["width"], res["height"])
               for c in load_cameras(args.cameras)]
    config = _render_config(res)
    workers = _workers(res)
    os.makedirs(args.output, exist_ok=True)
    ext = "npy" if args.format == "npy" else "png"
    for i, cam in enumerate(cameras):
        img = render_image(scene, cam, config, workers=workers)
        out_path = os.path.join(args.output, f"{i:04d}.{ext}")
        save_image(out_path, img)
        log.info("wrote %s", out_path)
    print(f"rendered {len(cameras)} images to {args.output}")
    return 0


def cmd_edit(args):
    gaussians = load_gs_ply(args.input)
    with open(args.edit) as f:
        spec = EditSpec.from_json(f.read())
    scene = Scene(gaussians=gaussians, solids=[], lights=[], background=[0, 0, 0])
    level = ConfidenceLevel(args.alpha_level if args.alpha_level is not None else 0.99)
    selected = spec.selected_indices(scene)
    if not selected:
        log.warning("edit selection matched no splats")
    edited = apply_edit(scene, spec, level)
    save_gs_ply(args.output, edited.gaussians)
    print(f"edited {len(selected)} splats -> {args.output}")
    return 0


def cmd_export(args):
    fmt = args.format
    if fmt is None:
        fmt = os.path.splitext(args.output)[1].lstrip(".").lower()
    if fmt not in ("obj", "ply"):
        print(f"error: unknown export format {fmt!r}", file=sys.stderr)
        return 2
    gaussians = _load_scene_splats(args)
    level = ConfidenceLevel(args.alpha_level if args.alpha_level is not None else 0.99)
    export_splat_mesh(args.output, gaussians, level, fmt=fmt)
    n = len(gaussians)
    print(f"exported {8 * n} vertices / {6 * n} triangles for {n} splats -> {args.output}")
    return 0


def _load_targets(targets_dir, cameras):
    if not os.path.isdir(targets_dir):
        raise FileNotFoundError(f"targets directory not found: {targets_dir}")
    names = sorted(
        f for f in os.listdir(targets_dir)
        if os.path.splitext(f)[1].lower() in (".png", ".npy")
    )
    if len(names) != len(cameras):
        raise ValidationError(
            f"targets dir has {len(names)} images but cameras file has {len(cameras)}"
        )
    return [load_image(os.path.join(targets_dir, n)) for n in names]


def cmd_fit(args):
    res = _resolve(args, {**_RENDER_DEFAULTS, **_FIT_DEFAULTS})
    gaussians = _load_scene_splats(args)
    scene = Scene(gaussians=gaussians, solids=[], lights=[],
                  background=list(res["background"]))
    cameras = [_resize_camera(c, res["width"], res["height"])
               for c in load_cameras(args.cameras)]
    targets = _load_targets(args.targets, cameras)
    fit_cfg = FitConfig(
        iterations=int(res["iterations"]),
        lr_color=res["lr_color"], lr_opacity=res["lr_opacity"],
        lr_mean=res["lr_mean"], lr_scale=res["lr_scale"], lr_quat=res["lr_quat"],
    )
    result = fit(scene, targets, cameras, fit_cfg, _render_config(res))
    save_gs_ply(args.output, result.gaussians)
    csv_path = args.loss_csv or (os.path.splitext(args.output)[0] + "_loss.csv")
    with open(csv_path, "w") as f:
        f.write("iteration,loss,psnr\n")
        for i, loss in enumerate(result.loss_history):
            p = 100.0 if loss < 1e-10 else 10.0 * math.log10(1.0 / loss)
            f.write(f"{i},{loss:.12e},{p:.6f}\n")
    print(
        f"fit {len(result.gaussians)} splats over {result.iterations} iterations: "
        f"psnr {result.initial_psnr:.2f} -> {result.final_psnr:.2f} dB; "
        f"wrote {args.output} and {csv_path}"
    )
    return 0


def cmd_eval(args):
    def listing(d):
        if not os.path.isdir(d):
            raise FileNotFoundError(f"directory not found: {d}")
        return sorted(
            f for f in os.listdir(d)
            if os.path.splitext(f)[1].lower() in (".png", ".npy")
        )

    ra, rb = listing(args.renders), listing(args.references)
    if len(ra) != len(rb):
        raise ValidationError(
            f"image count mismatch: {len(ra)} renders vs {len(rb)} references"
        )
    if not ra:
        raise ValidationError("no images to compare")
    print("image,psnr_db,ssim")
    pvals, svals = [], []
    for fa, fb in zip(ra, rb):
        a = load_image(os.path.join(args.renders, fa))
        b = load_image(os.path.join(args.references, fb))
        p = psnr(a, b)
        s = ssim(a, b)
        pvals.append(p)
        svals.append(s)
        print(f"{fa},{p:.6f},{s:.6f}")
    print(f"mean,{np.mean(pvals):.6f},{np.mean(svals):.6f}")
    return 0


def _add_shared_render_flags(p):
    p.add_argument("--config", help="TOML or JSON settings file (flags win)")
    p.add_argument("--alpha-level", dest="alpha_level", type=float,
                   help="confidence level for polygon sizing (default 0.99)")
    p.add_argument("--eps1", type=float, help="first transmittance threshold (default 1/255)")
    p.add_argument("--eps2", type=float, help="second transmittance threshold (default 1e-4)")
    p.add_argument("--max-per-ray", dest="max_per_ray", type=int,
                   help="max splats composited per ray (default 1024)")
    p.add_argument("--advance-eps", dest="advance_eps", type=float,
                   help="ray restart offset relative to scene diagonal (default 1e-6)")
    p.add_argument("--depth", type=int, help="max mirror/glass bounces (default 4)")
    p.add_argument("--workers", type=int, help="render worker threads (default: cpu count)")
    p.add_argument("--background", type=_parse_background, help="background color r,g,b")
    p.add_argument("--width", type=int, help="override image width")
    p.add_argument("--height", type=int, help="override image height")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="splatcast",
        description="Ray-traced rendering and editing of flat Gaussian splat scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render PNG images for every camera")
    p.add_argument("--input", help="splat PLY file")
    p.add_argument("--synthetic", type=int, help="use the seeded synthetic scene with N splats")
    p.add_argument("--cameras", required=True, help="transforms JSON")
    p.add_argument("--output", required=True, help="output directory")
    p.add_argument("--format", choices=("png", "npy"), default="png",
                   help="image format (npy stores exact linear floats)")
    p.add_argument("--mesh", action="append", type=_parse_mesh_spec,
                   metavar="PATH:MATERIAL[:IOR]", help="attach a solid OBJ mesh")
    p.add_argument("--light", action="append", type=_parse_light,
                   metavar="X,Y,Z[:R,G,B]", help="add a point light")
    _add_shared_render_flags(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="apply a JSON edit spec to a splat PLY")
    p.add_argument("--input", required=True, help="splat PLY file")
    p.add_argument("--edit", required=True, help="EditSpec JSON file")
    p.add_argument("--output", required=True, help="output PLY path")
    p.add_argument("--alpha-level", dest="alpha_level", type=float,
                   help="confidence level for the polygon round trip (default 0.99)")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("export", help="export splat octagon meshes")
    p.add_argument("--input", help="splat PLY file")
    p.add_argument("--synthetic", type=int, help="use the seeded synthetic scene with N splats")
    p.add_argument("--output", required=True, help="output mesh path (.obj or .ply)")
    p.add_argument("--format", choices=("obj", "ply"), help="mesh format (default: extension)")
    p.add_argument("--alpha-level", dest="alpha_level", type=float,
                   help="confidence level sizing the polygons (default 0.99)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("fit", help="fit splats to target images")
    p.add_argument("--input", help="initial splat PLY file")
    p.add_argument("--synthetic", type=int, help="start from the seeded synthetic scene with N splats")
    p.add_argument("--targets", required=True, help="directory of target images (png or npy)")
    p.add_argument("--cameras", required=True, help="transforms JSON")
    p.add_argument("--output", required=True, help="fitted splat PLY path")
    p.add_argument("--loss-csv", dest="loss_csv", help="loss history CSV path")
    p.add_argument("--iterations", type=int, help="optimizer iterations (default 500)")
    p.add_argument("--lr-color", dest="lr_color", type=float, help="color learning rate")
    p.add_argument("--lr-opacity", dest="lr_opacity", type=float, help="opacity learning rate")
    p.add_argument("--lr-mean", dest="lr_mean", type=float, help="mean learning rate")
    p.add_argument("--lr-scale", dest="lr_scale", type=float, help="log-scale learning rate")
    p.add_argument("--lr-quat", dest="lr_quat", type=float, help="quaternion learning rate")
    _add_shared_render_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", help="PSNR/SSIM table for two image directories")
    p.add_argument("--renders", required=True, help="directory of rendered images")
    p.add_argument("--references", required=True, help="directory of reference images")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None):
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SplatError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
