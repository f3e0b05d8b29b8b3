"""Inverse rendering: fit voxel SDF + material grids to posed target images
by Adam on the weighted total loss.

Targets are rendered from an analytic ground-truth scene (full per-sample
shading for the shaded channel; material/normal/depth/mask renders for the
rest). Every view participates in every step; given a fixed seed the whole
trajectory is bitwise reproducible, including across thread counts and across
checkpoint resume.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import fields, losses, volren
from .scene import Camera, DirectionalLight, RenderConfig, MultiChannelImage
from .volren import ALPHA_FG

CHECKPOINT_MAGIC = b"SDFCKPT1"

TARGET_CHANNELS = ("shaded", "albedo", "metalness", "roughness", "normal",
                   "depth", "mask")


@dataclass
class ViewTarget:
    """One supervised view: camera plus the seven target channel planes."""
    camera: Camera
    planes: dict
    cache: dict = dc_field(default_factory=dict)

    def to_image(self):
        img = MultiChannelImage(self.camera.width, self.camera.height)
        for name in TARGET_CHANNELS:
            img.planes[name] = self.planes[name]
        return img


@dataclass
class FitConfig:
    grid_resolution: int = 32
    steps: int = 500
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: losses.LossWeights = dc_field(default_factory=losses.LossWeights)
    seed: int = 0
    checkpoint_interval: int = 0        # 0 disables periodic checkpoints
    checkpoint_path: str | None = None
    truncation: float = losses.TRUNCATION_DEFAULT
    dielectric_specular_scale: float = 1.0
    threads: int = 1
    init_radius: float = 0.5            # starting sphere for the SDF grid

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")


class FitDiverged(RuntimeError):
    pass


def make_targets(sdf, pbr, cameras, light, cfg: RenderConfig,
                 dielectric_specular_scale=1.0):
    """Render the supervision channels of each view from ground-truth fields.

    The shaded plane uses the full per-sample shading path; the material and
    normal planes are straight field renders; depth carries the background
    sentinel 0 and the mask is the alpha render thresholded at 0.5.
    """
    targets = []
    for cam in cameras:
        out = volren.march_view(sdf, pbr, cam, cfg)
        shaded = volren.render_shaded_full(
            sdf, pbr, [light], cam, cfg,
            dielectric_specular_scale=dielectric_specular_scale)
        nbar = out["nbar"]
        mag = np.linalg.norm(nbar, axis=-1, keepdims=True)
        unit_n = np.where(mag > 1e-6, nbar / np.where(mag > 0, mag, 1.0), 0.0)
        alpha = out["alpha"]
        depth = np.where(alpha > ALPHA_FG,
                         out["wt"] / np.maximum(alpha, volren.DEPTH_EPS), 0.0)
        planes = {
            "shaded": shaded.planes["shaded"],
            "albedo": out["kbar"][..., 0:3],
            "metalness": out["kbar"][..., 3],
            "roughness": out["kbar"][..., 4],
            "normal": unit_n,
            "depth": depth,
            "mask": (alpha > ALPHA_FG).astype(np.float64),
        }
        targets.append(ViewTarget(camera=cam, planes=planes))
    return targets


@dataclass
class FitState:
    params: np.ndarray
    adam_m: np.ndarray
    adam_v: np.ndarray
    step: int
    grid_resolution: int
    loss_history: list

    def fields(self):
        """Materialize the grid fields the parameter vector describes."""
        n = self.grid_resolution
        sdf = fields.GridSdf(self.params[:n ** 3].reshape(n, n, n))
        pbr = fields.GridPbr(self.params[n ** 3:].reshape(n, n, n, 5))
        return sdf, pbr

    def save(self, path):
        header = {
            "step": self.step,
            "grid_resolution": self.grid_resolution,
            "param_count": int(self.params.size),
            "loss_history": self.loss_history,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<I", len(blob)))
            f.write(blob)
            for arr in (self.params, self.adam_m, self.adam_v):
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a fit checkpoint "
                                 f"(bad magic {magic!r})")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            count = header["param_count"]
            buf = np.frombuffer(f.read(), dtype="<f8")
        if buf.size != 3 * count:
            raise ValueError(f"{path}: truncated checkpoint payload")
        return cls(params=buf[:count].copy(),
                   adam_m=buf[count:2 * count].copy(),
                   adam_v=buf[2 * count:].copy(),
                   step=int(header["step"]),
                   grid_resolution=int(header["grid_resolution"]),
                   loss_history=list(header["loss_history"]))


def _init_state(config: FitConfig):
    n = config.grid_resolution
    sdf = fields.GridSdf.sphere_init(n, config.init_radius)
    pbr = fields.GridPbr.neutral_init(n)
    params = fields.flatten(sdf, pbr).as_array()
    return FitState(params=params, adam_m=np.zeros_like(params),
                    adam_v=np.zeros_like(params), step=0,
                    grid_resolution=n, loss_history=[])


def _project_pbr(params, n):
    """Keep material nodes inside their valid ranges so interpolated values
    never hit the clamp (which would zero their gradient)."""
    pbr = params[n ** 3:].reshape(-1, 5)
    np.clip(pbr, fields.PBR_LO, fields.PBR_HI, out=pbr)


def fit(config: FitConfig, targets, render_cfg: RenderConfig, light,
        resume_from=None, log_file=None, on_step=None):
    """Gradient-descent fit of SDF + material grids against the targets.

    Aborts with FitDiverged naming the first non-finite loss term. Returns
    the final FitState; state.fields() yields the fitted grids.
    """
    state = FitState.load(resume_from) if resume_from else _init_state(config)
    if state.grid_resolution != config.grid_resolution:
        raise ValueError("checkpoint resolution does not match the config")
    n = config.grid_resolution
    # the grid fields alias the parameter vector, so in-place Adam updates
    # propagate without copies
    sdf = fields.GridSdf(state.params[:n ** 3].reshape(n, n, n))
    pbr = fields.GridPbr(state.params[n ** 3:].reshape(n, n, n, 5))
    assert sdf.values.base is not None and pbr.values.base is not None

    while state.step < config.steps:
        report, grad = losses.total_loss_and_grad(
            sdf, pbr, targets, light, render_cfg,
            weights=config.weights, trunc=config.truncation,
            dielectric_specular_scale=config.dielectric_specular_scale,
            threads=config.threads)
        bad = report.first_nonfinite()
        if bad is not None:
            raise FitDiverged(f"loss term '{bad}' became non-finite at "
                              f"step {state.step}")
        state.step += 1
        t = state.step
        if config.lr > 0:
            state.adam_m = config.beta1 * state.adam_m \
                + (1 - config.beta1) * grad
            state.adam_v = config.beta2 * state.adam_v \
                + (1 - config.beta2) * grad * grad
            m_hat = state.adam_m / (1 - config.beta1 ** t)
            v_hat = state.adam_v / (1 - config.beta2 ** t)
            state.params -= config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
            _project_pbr(state.params, n)
        entry = {"step": t}
        entry.update(report.to_dict())
        state.loss_history.append(entry)
        if log_file is not None:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
        if on_step is not None:
            on_step(state, report)
        if config.checkpoint_interval and config.checkpoint_path \
                and t % config.checkpoint_interval == 0:
            state.save(config.checkpoint_path)
    if config.checkpoint_path:
        state.save(config.checkpoint_path)
    return state
