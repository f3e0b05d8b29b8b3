"""Command-line pipeline: render, relight, fit, mesh, bake, eval.

Exit codes: 0 success, 1 usage error, 2 data/parse error, 3 numerical
failure. Logs go to stderr, results to the declared output paths. Every
subcommand is deterministic for fixed flags and --seed, independent of
--threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

import numpy as np

from . import deferred, fields, invrender, losses, meshing, metrics, volren
from .scene import (EnvironmentMap, MultiChannelImage, SceneError,
                    load_image, load_scene, save_image)

RENDER_CHANNELS = ("shaded", "albedo", "metalness", "roughness", "normal",
                   "depth", "mask")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(ValueError):
    pass


def _log(msg):
    print(msg, file=sys.stderr)


def _build_parser():
    p = _Parser(prog="sdfshade", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None,
                        help="override the scene's render seed")
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--config", default=None,
                        help="JSON file with flag overrides")

    r = sub.add_parser("render", help="render channels of a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--out", required=True)
    r.add_argument("--channels", default="shaded")
    common(r)

    rl = sub.add_parser("relight", help="relight under an environment map")
    rl.add_argument("--scene", required=True)
    rl.add_argument("--camera", type=int, default=0)
    rl.add_argument("--env", required=True,
                    help="equirectangular PFM/PNG radiance map")
    rl.add_argument("--samples", type=int, default=64)
    rl.add_argument("--out", required=True)
    common(rl)

    f = sub.add_parser("fit", help="fit SDF+PBR grids to rendered targets")
    f.add_argument("--scene", required=True,
                   help="ground-truth scene providing fields, cameras, light")
    f.add_argument("--grid-res", type=int, default=32)
    f.add_argument("--steps", type=int, default=500)
    f.add_argument("--lr", type=float, default=1e-2)
    f.add_argument("--out", required=True, help="checkpoint path")
    f.add_argument("--log", default=None, help="losses JSONL path")
    f.add_argument("--resume", default=None)
    f.add_argument("--checkpoint-interval", type=int, default=0)
    common(f)

    m = sub.add_parser("mesh", help="extract a mesh from a grid field")
    m.add_argument("--grid", required=True,
                   help="checkpoint or grid field file")
    m.add_argument("--res", type=int, default=64)
    m.add_argument("--out", required=True)
    common(m)

    b = sub.add_parser("bake", help="mesh + UV atlas + baked PBR textures")
    b.add_argument("--grid", required=True)
    b.add_argument("--mesh-res", type=int, default=64)
    b.add_argument("--texture", type=int, default=1024)
    b.add_argument("--out", required=True, help="OBJ output path")
    common(b)

    e = sub.add_parser("eval", help="evaluate a fit against its scene")
    e.add_argument("--scene", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mesh-res", type=int, default=64)
    e.add_argument("--chamfer-samples", type=int, default=20000)
    e.add_argument("--out", default=None, help="write the JSON report here")
    common(e)
    return p


def _apply_config(args):
    if getattr(args, "config", None):
        with open(args.config) as f:
            overrides = json.load(f)
        for k, v in overrides.items():
            if not hasattr(args, k):
                raise UsageError(f"unknown config key {k!r}")
            setattr(args, k, v)
    return args


def _scene_cfg(scene, args):
    cfg = scene.render
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _load_fields_arg(path):
    """A --grid argument may be a checkpoint or a raw grid field file."""
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == invrender.CHECKPOINT_MAGIC:
        return invrender.FitState.load(path).fields()
    values = fields.load_grid(path)
    if values.ndim == 3:
        return fields.GridSdf(values), None
    raise SceneError("grid", f"{path} holds a {values.shape[-1]}-channel "
                             "grid, expected an SDF or a checkpoint")


def _cmd_render(args):
    scene = load_scene(args.scene)
    if not 0 <= args.camera < len(scene.cameras):
        raise UsageError(f"--camera {args.camera} out of range "
                         f"(scene has {len(scene.cameras)})")
    cam = scene.cameras[args.camera]
    cfg = _scene_cfg(scene, args)
    wanted = [c.strip() for c in args.channels.split(",") if c.strip()]
    bad = [c for c in wanted if c not in RENDER_CHANNELS]
    if bad:
        raise UsageError(f"unknown channels {bad}; choose from "
                         f"{RENDER_CHANNELS}")
    gb = deferred.build_gbuffer(scene.sdf, scene.pbr, cam, cfg,
                                threads=args.threads)
    img = MultiChannelImage(cam.width, cam.height)
    for name in wanted:
        if name == "shaded":
            img.planes["shaded"] = deferred.shade_deferred(gb, scene.lights)
        elif name == "mask":
            img.planes["alpha"] = np.clip(gb.alpha, 0.0, 1.0)
        elif name == "normal":
            img.planes["normal"] = gb.unit_normals()[0]
        elif name == "depth":
            img.planes["depth"] = gb.depth()
        elif name == "albedo":
            img.planes["albedo"] = gb.base_color
        elif name == "metalness":
            img.planes["metalness"] = gb.metalness
        elif name == "roughness":
            img.planes["roughness"] = gb.roughness
    written = save_image(img, args.out)
    _log(f"wrote {', '.join(written)}")
    return 0


def _cmd_relight(args):
    scene = load_scene(args.scene)
    cam = scene.cameras[args.camera]
    cfg = _scene_cfg(scene, args)
    env_img = load_image(args.env)
    plane = next(iter(env_img.planes.values()))
    if plane.ndim == 2:
        plane = np.repeat(plane[..., None], 3, axis=-1)
    env = EnvironmentMap(plane, args.samples)
    rgb = deferred.relight_fields(scene.sdf, scene.pbr, cam, cfg, env,
                                  seed=cfg.seed, threads=args.threads)
    img = MultiChannelImage(cam.width, cam.height, {"shaded": rgb})
    written = save_image(img, args.out)
    _log(f"wrote {', '.join(written)}")
    return 0


def _fit_light(scene):
    if not scene.lights:
        raise SceneError("lights", "the fit needs one directional light")
    return scene.lights[0]


def _cmd_fit(args):
    scene = load_scene(args.scene)
    cfg = _scene_cfg(scene, args)
    light = _fit_light(scene)
    _log(f"rendering {len(scene.cameras)} target views")
    targets = invrender.make_targets(scene.sdf, scene.pbr, scene.cameras,
                                     light, cfg)
    fit_cfg = invrender.FitConfig(
        grid_resolution=args.grid_res, steps=args.steps, lr=args.lr,
        seed=cfg.seed, threads=args.threads, checkpoint_path=args.out,
        checkpoint_interval=args.checkpoint_interval)
    log_fh = open(args.log, "w") if args.log else None
    try:
        state = invrender.fit(fit_cfg, targets, cfg, light,
                              resume_from=args.resume, log_file=log_fh)
    finally:
        if log_fh:
            log_fh.close()
    last = state.loss_history[-1]["total"] if state.loss_history else None
    _log(f"fit finished at step {state.step}, total loss {last}")
    return 0


def _cmd_mesh(args):
    sdf, _ = _load_fields_arg(args.grid)
    mesh = meshing.marching_tetrahedra(sdf, args.res)
    if mesh.empty:
        _log("warning: field has no zero crossing; wrote an empty mesh")
    meshing.export_obj(args.out, mesh)
    _log(f"wrote {args.out} ({mesh.triangles.shape[0]} triangles)")
    return 0


def _cmd_bake(args):
    sdf, pbr = _load_fields_arg(args.grid)
    if pbr is None:
        raise SceneError("grid", "baking needs a checkpoint with material "
                                 "channels")
    mesh = meshing.marching_tetrahedra(sdf, args.mesh_res)
    if mesh.empty:
        _log("warning: empty mesh; nothing to bake")
        meshing.export_obj(args.out, mesh)
        return 0
    atlas = meshing.build_uv_atlas(mesh, args.texture)
    texture = meshing.bake_pbr_texture(atlas, mesh, pbr)
    meshing.export_obj(args.out, mesh, atlas, texture)
    _log(f"wrote {args.out} (atlas utilization "
         f"{atlas.utilization() * 100:.1f}%)")
    return 0


def _cmd_eval(args):
    scene = load_scene(args.scene)
    cfg = _scene_cfg(scene, args)
    light = _fit_light(scene)
    sdf, pbr = _load_fields_arg(args.ckpt)
    if pbr is None:
        raise SceneError("ckpt", "evaluation needs a fit checkpoint")
    targets = invrender.make_targets(scene.sdf, scene.pbr, scene.cameras,
                                     light, cfg)
    preds = []
    for tgt in targets:
        gb = deferred.build_gbuffer(sdf, pbr, tgt.camera, cfg,
                                    threads=args.threads)
        preds.append({
            "shaded": deferred.shade_deferred(gb, [light]),
            "albedo": gb.base_color, "metalness": gb.metalness,
            "roughness": gb.roughness, "depth": gb.depth(),
            "alpha": gb.alpha,
        })
    report = metrics.evaluate_views(preds, targets)
    gt_mesh = meshing.marching_tetrahedra(scene.sdf, args.mesh_res)
    fit_mesh = meshing.marching_tetrahedra(sdf, args.mesh_res)
    if not gt_mesh.empty and not fit_mesh.empty:
        report.chamfer = metrics.chamfer(fit_mesh, gt_mesh,
                                         n=args.chamfer_samples, seed=cfg.seed)
        report.normal_correctness = metrics.normal_correctness(
            fit_mesh, gt_mesh, n=args.chamfer_samples, seed=cfg.seed)
    report.n_samples = args.chamfer_samples
    report.seed = cfg.seed
    text = report.to_json()
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


_COMMANDS = {
    "render": _cmd_render, "relight": _cmd_relight, "fit": _cmd_fit,
    "mesh": _cmd_mesh, "bake": _cmd_bake, "eval": _cmd_eval,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return 1
    except SystemExit as e:
        # argparse --help path; map its usage failures to our convention
        return 0 if e.code in (0, None) else 1
    except SceneError as e:
        _log(f"data error: {e}")
        return 2
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as e:
        _log(f"data error: {e}")
        return 2
    except invrender.FitDiverged as e:
        _log(f"numerical failure: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
