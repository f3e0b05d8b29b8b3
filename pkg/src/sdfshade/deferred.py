"""Deferred shading: composite material and normal fields into a per-pixel
G-buffer in one traversal, then evaluate the reflectance once per pixel.

Shading is skipped below the alpha threshold 0.5; partial-coverage pixels are
shaded with their composited attributes as-is. The outgoing direction per
pixel is the negated center ray direction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import brdf, fields, kernels, volren
from .scene import MultiChannelImage
from .volren import ALPHA_FG, DEPTH_EPS

NORMAL_EPS = 1e-6    # composited normals shorter than this are undefined


@dataclass
class GBuffer:
    """Per-pixel rendered material, raw composited normal, alpha, and the
    depth numerator (sum of weight * depth). Positions are recoverable from
    the camera and the normalized depth."""
    camera: object
    base_color: np.ndarray      # (H, W, 3)
    metalness: np.ndarray       # (H, W)
    roughness: np.ndarray       # (H, W)
    normal_raw: np.ndarray      # (H, W, 3) composite before renormalization
    alpha: np.ndarray           # (H, W)
    wt: np.ndarray              # (H, W) sum of weight * depth

    @property
    def kbar(self):
        return np.concatenate([self.base_color, self.metalness[..., None],
                               self.roughness[..., None]], axis=-1)

    def unit_normals(self):
        """(normals, valid): renormalized normals, zero where undefined."""
        mag = np.linalg.norm(self.normal_raw, axis=-1, keepdims=True)
        valid = mag[..., 0] > NORMAL_EPS
        n = np.where(valid[..., None],
                     self.normal_raw / np.where(mag > 0, mag, 1.0), 0.0)
        return n, valid

    def depth(self, gated=True):
        d = self.wt / np.maximum(self.alpha, DEPTH_EPS)
        if gated:
            return np.where(self.alpha > ALPHA_FG, d, 0.0)
        return d

    def positions(self):
        """Composited surface points x = origin + depth * ray direction."""
        dirs = self.camera.ray_directions()
        return self.camera.position + self.depth(gated=False)[..., None] * dirs

    def foreground(self):
        return self.alpha >= ALPHA_FG

    def to_image(self):
        img = MultiChannelImage(self.camera.width, self.camera.height)
        img.planes["albedo"] = self.base_color
        img.planes["metalness"] = self.metalness
        img.planes["roughness"] = self.roughness
        img.planes["normal"] = self.unit_normals()[0]
        img.planes["depth"] = self.depth()
        img.planes["alpha"] = np.clip(self.alpha, 0.0, 1.0)
        return img


def _from_march(cam, out):
    return GBuffer(camera=cam,
                   base_color=out["kbar"][..., 0:3],
                   metalness=out["kbar"][..., 3],
                   roughness=out["kbar"][..., 4],
                   normal_raw=out["nbar"],
                   alpha=out["alpha"],
                   wt=out["wt"])


def build_gbuffer(sdf, pbr, cam, cfg, threads=1):
    """Single shared ray traversal producing every G-buffer plane. Grid
    fields take the fused kernel; anything else the generic numpy path."""
    if isinstance(sdf, fields.GridSdf) and isinstance(pbr, fields.GridPbr):
        out = kernels.view_forward(sdf.values, pbr.values, cam, cfg,
                                   threads=threads)
    else:
        out = volren.march_view(sdf, pbr, cam, cfg)
    return _from_march(cam, out)


def shade_deferred(g: GBuffer, lights, model="ggx",
                   dielectric_specular_scale=1.0):
    """One reflectance evaluation per foreground pixel per light."""
    h, w = g.alpha.shape
    rgb = np.zeros((h, w, 3))
    fg = g.foreground()
    if not np.any(fg):
        return rgb
    nhat, valid = g.unit_normals()
    sel = fg & valid
    wo = -g.camera.ray_directions()[sel]
    params = brdf.BrdfParams(g.base_color[sel], g.metalness[sel],
                             g.roughness[sel], dielectric_specular_scale)
    acc = np.zeros((int(np.count_nonzero(sel)), 3))
    for light in lights:
        acc += brdf.shade_directional(params, nhat[sel], wo, light,
                                      model=model)
    rgb[sel] = acc
    return rgb


def relight(g: GBuffer, env, seed=0, model="ggx",
            dielectric_specular_scale=1.0, chunk=8192, components="full"):
    """Environment-lit render of a G-buffer; deterministic under fixed seed."""
    h, w = g.alpha.shape
    rgb = np.zeros((h, w, 3))
    nhat, valid = g.unit_normals()
    sel = g.foreground() & valid
    idx = np.flatnonzero(sel.reshape(-1))
    if idx.size == 0:
        return rgb
    dirs = g.camera.ray_directions().reshape(-1, 3)
    nf = nhat.reshape(-1, 3)
    kb = g.kbar.reshape(-1, 5)
    out = rgb.reshape(-1, 3)
    for lo in range(0, idx.size, chunk):
        part = idx[lo:lo + chunk]
        params = brdf.BrdfParams(kb[part, 0:3], kb[part, 3], kb[part, 4],
                                 dielectric_specular_scale)
        out[part] = brdf.shade_environment(
            params, nf[part], -dirs[part], env, seed=seed, model=model,
            point_ids=part, components=components)
    return rgb


def relight_fields(sdf, pbr, cam, cfg, env, seed=0, threads=1, **kw):
    return relight(build_gbuffer(sdf, pbr, cam, cfg, threads=threads), env,
                   seed=seed, **kw)
