"""Signed-distance and material fields.

Two families of fields live here: analytic primitives (exact, used as ground
truth and test oracles) and trilinear voxel grids (the optimization target).
Sign convention is positive outside, negative inside. All fields evaluate
vectorized over a trailing point axis: input shape (..., 3).
"""

from __future__ import annotations

import struct

import numpy as np

# Domain extent shared by every grid field.
EXTENT_MIN = -1.0
EXTENT_MAX = 1.0

# Per-channel clamp ranges of the material vector (r, g, b, metalness, roughness).
PBR_LO = np.array([0.0, 0.0, 0.0, 0.0, 0.01])
PBR_HI = np.array([1.0, 1.0, 1.0, 1.0, 1.0])

GRAD_EPS = 1e-8  # gradient magnitudes at or below this are flagged degenerate


def _as_points(x):
    pts = np.asarray(x, dtype=np.float64)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected points of shape (..., 3), got {pts.shape}")
    return pts


# ---------------------------------------------------------------------------
# SDF variants
# ---------------------------------------------------------------------------

class SdfField:
    """Base class; subclasses implement eval() and grad()."""

    def eval(self, pts):
        raise NotImplementedError

    def grad(self, pts):
        raise NotImplementedError


class SphereSdf(SdfField):
    def __init__(self, radius, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise ValueError("sphere radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=np.float64)

    def eval(self, pts):
        d = _as_points(pts) - self.center
        return np.linalg.norm(d, axis=-1) - self.radius

    def grad(self, pts):
        d = _as_points(pts) - self.center
        r = np.linalg.norm(d, axis=-1, keepdims=True)
        return np.divide(d, r, out=np.zeros_like(d), where=r > 0)


class BoxSdf(SdfField):
    def __init__(self, half_extents):
        self.half_extents = np.broadcast_to(
            np.asarray(half_extents, dtype=np.float64), (3,)).copy()
        if np.any(self.half_extents <= 0):
            raise ValueError("box half extents must be positive")

    def eval(self, pts):
        q = np.abs(_as_points(pts)) - self.half_extents
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def grad(self, pts):
        p = _as_points(pts)
        q = np.abs(p) - self.half_extents
        qpos = np.maximum(q, 0.0)
        out_norm = np.linalg.norm(qpos, axis=-1, keepdims=True)
        is_out = out_norm[..., 0] > 0
        g_out = np.divide(qpos, out_norm, out=np.zeros_like(qpos),
                          where=out_norm > 0)
        # inside: gradient points along the axis of the largest (least negative) q
        axis = np.argmax(q, axis=-1)
        g_in = np.zeros_like(p)
        idx = np.indices(axis.shape)
        g_in[(*idx, axis)] = 1.0
        g = np.where(is_out[..., None], g_out, g_in)
        return g * np.sign(p, out=np.ones_like(p), where=p != 0)


class TorusSdf(SdfField):
    """Torus around the z axis: ring radius `major`, tube radius `minor`."""

    def __init__(self, major, minor):
        if not (0 < minor < major):
            raise ValueError("torus requires 0 < minor < major")
        self.major = float(major)
        self.minor = float(minor)

    def eval(self, pts):
        p = _as_points(pts)
        ring = np.hypot(p[..., 0], p[..., 1]) - self.major
        return np.hypot(ring, p[..., 2]) - self.minor

    def grad(self, pts):
        p = _as_points(pts)
        rho = np.hypot(p[..., 0], p[..., 1])
        ring = rho - self.major
        denom = np.hypot(ring, p[..., 2])
        g = np.zeros_like(p)
        safe_rho = np.where(rho > 0, rho, 1.0)
        safe_denom = np.where(denom > 0, denom, 1.0)
        g[..., 0] = ring / safe_denom * p[..., 0] / safe_rho
        g[..., 1] = ring / safe_denom * p[..., 1] / safe_rho
        g[..., 2] = p[..., 2] / safe_denom
        return g


class UnionSdf(SdfField):
    def __init__(self, *children):
        if not children:
            raise ValueError("union needs at least one child")
        self.children = list(children)

    def eval(self, pts):
        return np.min([c.eval(pts) for c in self.children], axis=0)

    def grad(self, pts):
        vals = np.stack([c.eval(pts) for c in self.children])
        grads = np.stack([c.grad(pts) for c in self.children])
        pick = np.argmin(vals, axis=0)
        return np.take_along_axis(grads, pick[None, ..., None], axis=0)[0]


class IntersectionSdf(SdfField):
    def __init__(self, *children):
        if not children:
            raise ValueError("intersection needs at least one child")
        self.children = list(children)

    def eval(self, pts):
        return np.max([c.eval(pts) for c in self.children], axis=0)

    def grad(self, pts):
        vals = np.stack([c.eval(pts) for c in self.children])
        grads = np.stack([c.grad(pts) for c in self.children])
        pick = np.argmax(vals, axis=0)
        return np.take_along_axis(grads, pick[None, ..., None], axis=0)[0]


class TranslateSdf(SdfField):
    def __init__(self, child, offset):
        self.child = child
        self.offset = np.asarray(offset, dtype=np.float64)

    def eval(self, pts):
        return self.child.eval(_as_points(pts) - self.offset)

    def grad(self, pts):
        return self.child.grad(_as_points(pts) - self.offset)


class ScaleSdf(SdfField):
    """Uniform scale; distances stay exact because s(x) = k * child(x / k)."""

    def __init__(self, child, factor):
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        self.child = child
        self.factor = float(factor)

    def eval(self, pts):
        return self.child.eval(_as_points(pts) / self.factor) * self.factor

    def grad(self, pts):
        return self.child.grad(_as_points(pts) / self.factor)


def _grid_coords(pts, n):
    """Clamp points to the extent and return integer cell + fractional coords."""
    h = (EXTENT_MAX - EXTENT_MIN) / (n - 1)
    clamped = np.clip(pts, EXTENT_MIN, EXTENT_MAX)
    g = (clamped - EXTENT_MIN) / h
    i0 = np.clip(np.floor(g).astype(np.int64), 0, n - 2)
    frac = g - i0
    return clamped, i0, frac


def _trilinear(values, i0, frac):
    """Gather-free trilinear interpolation; values is (n, n, n) or (n, n, n, C)."""
    ix, iy, iz = i0[..., 0], i0[..., 1], i0[..., 2]
    tx, ty, tz = frac[..., 0], frac[..., 1], frac[..., 2]
    if values.ndim == 4:
        tx = tx[..., None]
        ty = ty[..., None]
        tz = tz[..., None]
    c000 = values[ix, iy, iz]
    c100 = values[ix + 1, iy, iz]
    c010 = values[ix, iy + 1, iz]
    c110 = values[ix + 1, iy + 1, iz]
    c001 = values[ix, iy, iz + 1]
    c101 = values[ix + 1, iy, iz + 1]
    c011 = values[ix, iy + 1, iz + 1]
    c111 = values[ix + 1, iy + 1, iz + 1]
    c00 = c000 * (1 - tx) + c100 * tx
    c10 = c010 * (1 - tx) + c110 * tx
    c01 = c001 * (1 - tx) + c101 * tx
    c11 = c011 * (1 - tx) + c111 * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


class GridSdf(SdfField):
    """Trilinear voxel SDF on the [-1, 1]^3 lattice with n nodes per axis.

    Queries outside the extent return the boundary-clamped interpolant plus
    the euclidean distance to the extent box, so the field keeps growing
    outward instead of flattening.
    """

    def __init__(self, values):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise ValueError("grid SDF values must be (n, n, n)")
        if values.shape[0] < 2:
            raise ValueError("grid resolution must be at least 2")
        self.values = values
        self.resolution = values.shape[0]

    @classmethod
    def from_field(cls, field, resolution):
        axis = np.linspace(EXTENT_MIN, EXTENT_MAX, resolution)
        pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        return cls(field.eval(pts))

    @classmethod
    def sphere_init(cls, resolution, radius=0.5):
        return cls.from_field(SphereSdf(radius), resolution)

    @property
    def cell_size(self):
        return (EXTENT_MAX - EXTENT_MIN) / (self.resolution - 1)

    def eval(self, pts):
        pts = _as_points(pts)
        clamped, i0, frac = _grid_coords(pts, self.resolution)
        base = _trilinear(self.values, i0, frac)
        outside = np.linalg.norm(pts - clamped, axis=-1)
        return base + outside

    def grad(self, pts):
        """Central differences with half-cell step (matches the render kernels)."""
        pts = _as_points(pts)
        h = 0.5 * self.cell_size
        g = np.empty_like(pts)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            g[..., k] = (self.eval(pts + dp) - self.eval(pts - dp)) / (2 * h)
        return g


def normal(field, pts, eps=GRAD_EPS):
    """Unit outward normal and a degeneracy mask.

    Where |grad| <= eps the normal is the (0, 0, 1) fallback and the mask is
    set; callers decide whether that is an error.
    """
    g = field.grad(_as_points(pts))
    mag = np.linalg.norm(g, axis=-1)
    degenerate = mag <= eps
    safe = np.where(degenerate, 1.0, mag)
    n = g / safe[..., None]
    n = np.where(degenerate[..., None], np.array([0.0, 0.0, 1.0]), n)
    return n, degenerate


# ---------------------------------------------------------------------------
# PBR material fields:  k(x) = (base color rgb, metalness, roughness)
# ---------------------------------------------------------------------------

def clamp_pbr(k):
    return np.clip(k, PBR_LO, PBR_HI)


class PbrField:
    def eval(self, pts):
        raise NotImplementedError


class ConstantPbr(PbrField):
    def __init__(self, k):
        k = np.asarray(k, dtype=np.float64)
        if k.shape != (5,):
            raise ValueError("constant material needs 5 channels")
        self.k = clamp_pbr(k)

    def eval(self, pts):
        pts = _as_points(pts)
        return np.broadcast_to(self.k, pts.shape[:-1] + (5,)).copy()


class HemispherePbr(PbrField):
    """Piecewise-constant split: dot(x, axis) >= 0 gets k_pos, else k_neg."""

    def __init__(self, axis, k_pos, k_neg):
        self.axis = np.asarray(axis, dtype=np.float64)
        self.axis = self.axis / np.linalg.norm(self.axis)
        self.k_pos = clamp_pbr(np.asarray(k_pos, dtype=np.float64))
        self.k_neg = clamp_pbr(np.asarray(k_neg, dtype=np.float64))

    def eval(self, pts):
        pts = _as_points(pts)
        side = (pts @ self.axis) >= 0
        return np.where(side[..., None], self.k_pos, self.k_neg)


class GridPbr(PbrField):
    """Trilinear (n, n, n, 5) grid, clamped to the valid channel ranges after
    interpolation. Outside the extent the boundary value extends (no distance
    growth; materials are not distances)."""

    def __init__(self, values):
        values = np.ascontiguousarray(values, dtype=np.float64)
        if values.ndim != 4 or values.shape[-1] != 5 \
                or len(set(values.shape[:3])) != 1:
            raise ValueError("grid PBR values must be (n, n, n, 5)")
        self.values = values
        self.resolution = values.shape[0]

    @classmethod
    def from_field(cls, field, resolution):
        axis = np.linspace(EXTENT_MIN, EXTENT_MAX, resolution)
        pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        return cls(field.eval(pts))

    @classmethod
    def neutral_init(cls, resolution):
        """Gray dielectric: rgb 0.5, metalness 0, roughness 0.5."""
        values = np.empty((resolution, resolution, resolution, 5))
        values[..., 0:3] = 0.5
        values[..., 3] = 0.0
        values[..., 4] = 0.5
        return cls(values)

    def eval_raw(self, pts):
        pts = _as_points(pts)
        _, i0, frac = _grid_coords(pts, self.resolution)
        return _trilinear(self.values, i0, frac)

    def eval(self, pts):
        return clamp_pbr(self.eval_raw(pts))


# ---------------------------------------------------------------------------
# Flat parameter view over one or more grids
# ---------------------------------------------------------------------------

class ParamVector:
    """Write-through flat view over the node values of grid fields.

    Entry i aliases exactly one node scalar; `as_array` copies out and
    `assign` copies back, so an optimizer can treat the whole thing as one
    dense vector while the fields stay live.
    """

    def __init__(self, grids):
        self._grids = list(grids)
        self._views = [g.values.reshape(-1) for g in self._grids]
        self._sizes = [v.size for v in self._views]
        self._offsets = np.concatenate([[0], np.cumsum(self._sizes)])
        self.size = int(self._offsets[-1])

    def __len__(self):
        return self.size

    def _locate(self, i):
        if not 0 <= i < self.size:
            raise IndexError(f"parameter index {i} out of range [0, {self.size})")
        block = int(np.searchsorted(self._offsets, i, side="right")) - 1
        return block, i - int(self._offsets[block])

    def __getitem__(self, i):
        block, j = self._locate(i)
        return self._views[block][j]

    def __setitem__(self, i, value):
        block, j = self._locate(i)
        self._views[block][j] = value

    def as_array(self):
        return np.concatenate(self._views)

    def assign(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"expected vector of length {self.size}")
        for view, lo, size in zip(self._views, self._offsets, self._sizes):
            view[:] = vec[lo:lo + size]

    @property
    def grids(self):
        return list(self._grids)


def flatten(*grids):
    for g in grids:
        if not isinstance(g, (GridSdf, GridPbr)):
            raise TypeError("only grid fields have flat parameters")
    return ParamVector(grids)


def unflatten(params):
    return params.grids


# ---------------------------------------------------------------------------
# Grid file format: magic, resolution, channels, little-endian float64 payload
# ---------------------------------------------------------------------------

GRID_MAGIC = b"VOXFLD1\x00"


def save_grid(path, values):
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim == 3:
        channels = 1
    elif values.ndim == 4:
        channels = values.shape[-1]
    else:
        raise ValueError("grid payload must be (n,n,n) or (n,n,n,c)")
    n = values.shape[0]
    with open(path, "wb") as f:
        f.write(GRID_MAGIC)
        f.write(struct.pack("<II", n, channels))
        f.write(values.astype("<f8").tobytes())


def load_grid(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != GRID_MAGIC:
            raise ValueError(f"{path}: not a grid field file (bad magic {magic!r})")
        n, channels = struct.unpack("<II", f.read(8))
        payload = np.frombuffer(f.read(), dtype="<f8")
    expected = n ** 3 * channels
    if payload.size != expected:
        raise ValueError(f"{path}: payload has {payload.size} floats, "
                         f"expected {expected}")
    if channels == 1:
        return payload.reshape(n, n, n).copy()
    return payload.reshape(n, n, n, channels).copy()


# ---------------------------------------------------------------------------
# Declarative construction (used by the scene loader)
# ---------------------------------------------------------------------------

_SDF_KINDS = ("sphere", "box", "torus", "union", "intersection",
              "translate", "scale", "grid")


def sdf_from_spec(spec):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError("sdf spec must be an object with a 'type' key")
    kind = spec["type"]
    if kind == "sphere":
        return SphereSdf(spec.get("radius", 0.5), spec.get("center", (0, 0, 0)))
    if kind == "box":
        return BoxSdf(spec.get("half_extents", (0.5, 0.5, 0.5)))
    if kind == "torus":
        return TorusSdf(spec.get("major", 0.5), spec.get("minor", 0.2))
    if kind == "union":
        return UnionSdf(*[sdf_from_spec(c) for c in spec["children"]])
    if kind == "intersection":
        return IntersectionSdf(*[sdf_from_spec(c) for c in spec["children"]])
    if kind == "translate":
        return TranslateSdf(sdf_from_spec(spec["child"]), spec["offset"])
    if kind == "scale":
        return ScaleSdf(sdf_from_spec(spec["child"]), spec["factor"])
    if kind == "grid":
        return GridSdf(load_grid(spec["path"]))
    raise ValueError(f"unknown sdf type {kind!r}; expected one of {_SDF_KINDS}")


def pbr_from_spec(spec):
    if not isinstance(spec, dict) or "type" not in spec:
        raise ValueError("pbr spec must be an object with a 'type' key")
    kind = spec["type"]
    if kind == "constant":
        return ConstantPbr(spec["k"])
    if kind == "hemisphere":
        return HemispherePbr(spec.get("axis", (0, 0, 1)),
                             spec["k_pos"], spec["k_neg"])
    if kind == "grid":
        return GridPbr(load_grid(spec["path"]))
    raise ValueError(f"unknown pbr type {kind!r}; "
                     "expected constant, hemisphere, or grid")
