"""Scene description: cameras, lights, multi-channel images, and file I/O.

Conventions (fixed and tested): scene units normalize the object into
[-1, 1]^3, world up is +z, pixel (0, 0) is the top-left corner, and rays go
through pixel centers. Depth images use 0 as the background sentinel and the
alpha mask is 0 on background.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from PIL import Image as PilImage

from . import fields


class SceneError(ValueError):
    """Raised on malformed scene files; carries the offending key path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"scene field '{key}': {message}")


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray
    vertical_fov: float          # radians
    width: int
    height: int
    near: float = 0.05
    far: float = 10.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if not (0 < self.vertical_fov < np.pi):
            raise ValueError("vertical fov must lie in (0, pi)")
        if self.near <= 0 or self.far <= self.near:
            raise ValueError("need 0 < near < far")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        fwd = self.look_at - self.position
        norm = np.linalg.norm(fwd)
        if norm == 0:
            raise ValueError("camera position and look_at coincide")
        self._forward = fwd / norm
        right = np.cross(self._forward, self.up)
        rnorm = np.linalg.norm(right)
        if rnorm < 1e-12:
            raise ValueError("camera up is parallel to the view direction")
        self._right = right / rnorm
        self._up_img = np.cross(self._right, self._forward)
        self._tan_half = np.tan(self.vertical_fov / 2)

    @property
    def aspect(self):
        return self.width / self.height

    def _dir_from_ndc(self, ndc_x, ndc_y):
        d = (self._forward[..., :]
             + (self._tan_half * self.aspect) * ndc_x[..., None] * self._right
             - self._tan_half * ndc_y[..., None] * self._up_img)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_ray(self, px, py):
        """Ray through the center of pixel (px, py); origin and unit direction."""
        if not (0 <= px < self.width and 0 <= py < self.height):
            raise ValueError(f"pixel ({px}, {py}) outside "
                             f"{self.width}x{self.height} image")
        ndc_x = np.asarray(2.0 * (px + 0.5) / self.width - 1.0)
        ndc_y = np.asarray(2.0 * (py + 0.5) / self.height - 1.0)
        d = self._dir_from_ndc(ndc_x, ndc_y)
        return self.position.copy(), d

    def ray_directions(self):
        """(H, W, 3) unit directions through all pixel centers."""
        px = np.arange(self.width)
        py = np.arange(self.height)
        ndc_x = 2.0 * (px + 0.5) / self.width - 1.0
        ndc_y = 2.0 * (py + 0.5) / self.height - 1.0
        gx, gy = np.meshgrid(ndc_x, ndc_y)
        return self._dir_from_ndc(gx, gy)

    def project(self, pts):
        """Project world points to continuous pixel coordinates.

        Returns (px, py, t) where (px, py) live in [0, W] x [0, H] for visible
        points (pixel centers at integer + 0.5) and t is the distance from the
        camera center. Points behind the camera get t <= 0.
        """
        v = np.asarray(pts, dtype=np.float64) - self.position
        zf = v @ self._forward
        x = v @ self._right
        y = v @ self._up_img
        safe = np.where(zf > 0, zf, 1.0)
        ndc_x = x / (safe * self._tan_half * self.aspect)
        ndc_y = -y / (safe * self._tan_half)
        px = (ndc_x + 1.0) / 2.0 * self.width
        py = (ndc_y + 1.0) / 2.0 * self.height
        t = np.linalg.norm(v, axis=-1)
        t = np.where(zf > 0, t, -t)
        return px, py, t


def canonical_cameras(distance, fov, resolution, near=0.05, far=None,
                      elevation_deg=20.0, azimuths_deg=(0.0, 90.0, 180.0, 270.0)):
    """Four viewpoints at fixed elevation and quarter-turn azimuths, all
    looking at the origin with +z up."""
    if distance <= 0:
        raise ValueError("camera distance must be positive")
    if far is None:
        far = distance + 2.0
    el = np.deg2rad(elevation_deg)
    cams = []
    for az_deg in azimuths_deg:
        az = np.deg2rad(az_deg)
        pos = distance * np.array([np.cos(el) * np.cos(az),
                                   np.cos(el) * np.sin(az),
                                   np.sin(el)])
        cams.append(Camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]),
                           fov, resolution, resolution, near=near, far=far))
    return cams


def offset_cameras(distance, fov, resolution, **kw):
    """Four more viewpoints filling in between the canonical ones (negative
    elevation, 45 degree azimuth offset); used by the 8-view fit protocol."""
    return canonical_cameras(distance, fov, resolution,
                             elevation_deg=-20.0,
                             azimuths_deg=(45.0, 135.0, 225.0, 315.0), **kw)


# ---------------------------------------------------------------------------
# Lights
# ---------------------------------------------------------------------------

@dataclass
class DirectionalLight:
    """Light at infinity. `direction_to_light` points from the surface toward
    the source (the incident direction omega_i)."""
    direction_to_light: np.ndarray
    radiance: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction_to_light, dtype=np.float64)
        n = np.linalg.norm(d)
        if n == 0:
            raise ValueError("light direction cannot be zero")
        self.direction_to_light = d / n
        self.radiance = np.broadcast_to(
            np.asarray(self.radiance, dtype=np.float64), (3,)).copy()
        if np.any(self.radiance < 0):
            raise ValueError("light radiance must be nonnegative")


class EnvironmentMap:
    """Equirectangular radiance map. lookup(w) takes unit directions pointing
    away from the surface toward the sky; bilinear, periodic in azimuth."""

    def __init__(self, pixels, sample_count=64):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError("environment map must be (H, W, 3)")
        if np.any(pixels < 0):
            raise ValueError("environment radiance must be nonnegative")
        if sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        self.pixels = pixels
        self.sample_count = int(sample_count)

    @classmethod
    def constant(cls, radiance, size=8, sample_count=64):
        px = np.empty((size, 2 * size, 3))
        px[:] = np.broadcast_to(np.asarray(radiance, dtype=np.float64), (3,))
        return cls(px, sample_count)

    def lookup(self, dirs):
        d = np.asarray(dirs, dtype=np.float64)
        h, w = self.pixels.shape[:2]
        az = np.arctan2(d[..., 1], d[..., 0])           # [-pi, pi]
        pol = np.arccos(np.clip(d[..., 2], -1.0, 1.0))  # 0 at +z
        u = (az / (2 * np.pi) + 0.5) * w - 0.5
        v = pol / np.pi * h - 0.5
        u0 = np.floor(u).astype(np.int64)
        v0 = np.floor(v).astype(np.int64)
        fu = u - u0
        fv = v - v0
        u0w = np.mod(u0, w)
        u1w = np.mod(u0 + 1, w)
        v0c = np.clip(v0, 0, h - 1)
        v1c = np.clip(v0 + 1, 0, h - 1)
        fu = fu[..., None]
        fv = fv[..., None]
        p = self.pixels
        top = p[v0c, u0w] * (1 - fu) + p[v0c, u1w] * fu
        bot = p[v1c, u0w] * (1 - fu) + p[v1c, u1w] * fu
        return top * (1 - fv) + bot * fv

    def rotated(self, azimuth_rad):
        """New map with the radiance rotated about +z by the given azimuth
        (texel roll): a source at azimuth a moves to azimuth a + angle."""
        w = self.pixels.shape[1]
        shift = int(round(azimuth_rad / (2 * np.pi) * w))
        return EnvironmentMap(np.roll(self.pixels, shift, axis=1),
                              self.sample_count)


# ---------------------------------------------------------------------------
# Multi-channel raster
# ---------------------------------------------------------------------------

CHANNEL_WIDTHS = {
    "shaded": 3, "albedo": 3, "metalness": 1, "roughness": 1,
    "normal": 3, "depth": 1, "alpha": 1,
}


class MultiChannelImage:
    """Named real-valued planes sharing one resolution; values are linear."""

    def __init__(self, width, height, planes=None):
        self.width = int(width)
        self.height = int(height)
        self.planes = {}
        if planes:
            for name, data in planes.items():
                self.set_plane(name, data)

    def set_plane(self, name, data):
        data = np.asarray(data, dtype=np.float64)
        expect2 = (self.height, self.width)
        if data.shape != expect2 and data.shape != expect2 + (3,):
            raise ValueError(f"plane '{name}' has shape {data.shape}, "
                             f"expected {expect2} or {expect2 + (3,)}")
        if name == "alpha" and (data.min() < -1e-9 or data.max() > 1 + 1e-9):
            raise ValueError("alpha plane must lie in [0, 1]")
        if name == "depth" and data.min() < 0:
            raise ValueError("depth plane must be nonnegative")
        self.planes[name] = data

    def __getitem__(self, name):
        return self.planes[name]

    def __contains__(self, name):
        return name in self.planes

    def channel_names(self):
        return list(self.planes)


# ---------------------------------------------------------------------------
# sRGB transfer
# ---------------------------------------------------------------------------

def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x,
                    1.055 * np.power(x, 1 / 2.4, where=x > 0,
                                     out=np.zeros_like(x)) - 0.055)


def srgb_to_linear(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


# ---------------------------------------------------------------------------
# PFM (exact float) and PNG (sRGB preview) I/O
# ---------------------------------------------------------------------------

def write_pfm(path, data):
    """Little-endian float32 PFM, scale -1.0; rows stored bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM stores (H, W) or (H, W, 3) data")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ValueError(f"{path}: malformed PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        payload = np.frombuffer(f.read(4 * count), dtype=dtype)
        if payload.size != count:
            raise ValueError(f"{path}: truncated PFM payload")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return payload.reshape(shape)[::-1].astype(np.float32)


def write_png(path, data):
    """8-bit sRGB preview of linear data in [0, 1]."""
    data = np.asarray(data, dtype=np.float64)
    srgb = linear_to_srgb(data)
    bytes8 = np.rint(srgb * 255.0).astype(np.uint8)
    mode = "L" if bytes8.ndim == 2 else "RGB"
    PilImage.fromarray(bytes8, mode=mode).save(path)


def read_png(path):
    img = np.asarray(PilImage.open(path))
    return srgb_to_linear(img.astype(np.float64) / 255.0)


def save_image(img, path, fmt=None):
    """Write a MultiChannelImage (or bare array). Single-plane images land at
    `path`; multi-plane images write one file per plane as `stem.name.ext`
    and the list of written paths is returned."""
    if isinstance(img, np.ndarray):
        planes = {"rgb" if img.ndim == 3 else "gray": img}
    else:
        planes = img.planes
    path = str(path)
    if fmt is None:
        fmt = "pfm" if path.lower().endswith(".pfm") else \
              "png" if path.lower().endswith(".png") else None
    if fmt not in ("pfm", "png"):
        raise ValueError(f"unsupported image format for '{path}' "
                         "(use .pfm or .png)")
    writer = write_pfm if fmt == "pfm" else write_png
    if len(planes) == 1:
        writer(path, next(iter(planes.values())))
        return [path]
    stem, ext = path.rsplit(".", 1)
    written = []
    for name, data in planes.items():
        p = f"{stem}.{name}.{ext}"
        writer(p, data)
        written.append(p)
    return written


def load_image(path):
    path = str(path)
    if path.lower().endswith(".pfm"):
        data = read_pfm(path).astype(np.float64)
    elif path.lower().endswith(".png"):
        data = read_png(path)
    else:
        raise ValueError(f"unsupported image format for '{path}'")
    h, w = data.shape[:2]
    name = "rgb" if data.ndim == 3 else "gray"
    img = MultiChannelImage(w, h)
    img.planes[name] = data
    return img


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

@dataclass
class RenderConfig:
    """Render-settings block of a scene file (quadrature and opacity knobs)."""
    n_ray: int = 96
    a: float = 100.0       # opacity magnitude, 1/length
    b: float = 0.02        # opacity transition width, scene units
    jitter: bool = True
    seed: int = 0
    tile_size: int = 32
    bound_radius: float = float(np.sqrt(3.0))

    def __post_init__(self):
        if self.n_ray < 2:
            raise ValueError("n_ray must be >= 2")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("opacity parameters a, b must be positive")
        if self.bound_radius <= 0:
            raise ValueError("bound_radius must be positive")


@dataclass
class SceneDescription:
    sdf: object
    pbr: object
    cameras: list
    lights: list
    render: RenderConfig
    env: EnvironmentMap | None = None
    path: str | None = None


def _require(d, key, ctx):
    if key not in d:
        raise SceneError(f"{ctx}.{key}" if ctx else key,
                         "required key is missing")
    return d[key]


def _parse_camera(spec, ctx):
    for k in ("position", "look_at"):
        _require(spec, k, ctx)
    try:
        return Camera(spec["position"], spec["look_at"],
                      spec.get("up", (0, 0, 1)),
                      spec.get("vfov", 0.7),
                      spec.get("width", 128), spec.get("height", 128),
                      near=spec.get("near", 0.05), far=spec.get("far", 10.0))
    except ValueError as e:
        raise SceneError(ctx, str(e)) from e


def load_scene(path):
    """Parse and validate a scene JSON file."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneError("<json>", f"line {e.lineno} col {e.colno}: {e.msg}")
    if not isinstance(raw, dict):
        raise SceneError("<root>", "scene file must contain a JSON object")

    fspec = _require(raw, "fields", "")
    try:
        sdf = fields.sdf_from_spec(_require(fspec, "sdf", "fields"))
    except ValueError as e:
        raise SceneError("fields.sdf", str(e)) from e
    try:
        pbr = fields.pbr_from_spec(_require(fspec, "pbr", "fields"))
    except ValueError as e:
        raise SceneError("fields.pbr", str(e)) from e

    cam_spec = _require(raw, "cameras", "")
    cameras = []
    if isinstance(cam_spec, dict) and "canonical" in cam_spec:
        c = cam_spec["canonical"]
        cameras = canonical_cameras(c.get("distance", 2.7), c.get("vfov", 0.7),
                                    c.get("resolution", 128))
        if c.get("with_offsets", False):
            cameras += offset_cameras(c.get("distance", 2.7),
                                      c.get("vfov", 0.7),
                                      c.get("resolution", 128))
    elif isinstance(cam_spec, list) and cam_spec:
        cameras = [_parse_camera(s, f"cameras[{i}]")
                   for i, s in enumerate(cam_spec)]
    else:
        raise SceneError("cameras", "must be a non-empty list of cameras or "
                                    "an object with a 'canonical' key")

    lights = []
    env = None
    for i, ls in enumerate(raw.get("lights", [])):
        kind = ls.get("type", "directional")
        if kind == "directional":
            try:
                lights.append(DirectionalLight(
                    _require(ls, "direction", f"lights[{i}]"),
                    ls.get("radiance", (1.0, 1.0, 1.0))))
            except ValueError as e:
                raise SceneError(f"lights[{i}]", str(e)) from e
        elif kind == "environment":
            p = _require(ls, "path", f"lights[{i}]")
            data = load_image(p)
            plane = next(iter(data.planes.values()))
            env = EnvironmentMap(plane, ls.get("samples", 64))
        else:
            raise SceneError(f"lights[{i}].type", f"unknown light type {kind!r}")

    rspec = raw.get("render", {})
    try:
        render = RenderConfig(**{k: rspec[k] for k in
                                 ("n_ray", "a", "b", "jitter", "seed",
                                  "tile_size", "bound_radius") if k in rspec})
    except (TypeError, ValueError) as e:
        raise SceneError("render", str(e)) from e
    unknown = set(rspec) - {"n_ray", "a", "b", "jitter", "seed", "tile_size",
                            "bound_radius"}
    if unknown:
        raise SceneError(f"render.{sorted(unknown)[0]}", "unknown key")

    return SceneDescription(sdf=sdf, pbr=pbr, cameras=cameras, lights=lights,
                            render=render, env=env, path=str(path))
