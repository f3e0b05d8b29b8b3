"""Surface extraction and texturing: marching tetrahedra over the SDF, a
deterministic per-chart UV atlas, texture baking from the material field, and
multi-view backprojection with depth-tested visibility.

Each grid cube splits into the six tetrahedra of the Kuhn triangulation
(sorted-coordinate simplices); the pattern is translation invariant, so
shared cube faces carry matching diagonals and the extracted surface is
crack-free. Level-set vertices interpolate linearly along sign-crossing
edges and are welded through global edge keys, which makes the mesh
watertight by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import fields
from .scene import write_png, write_pfm

SNAP_EPS = 1e-7        # edge-parameter snap; collapses degenerate triangles


@dataclass
class TriMesh:
    vertices: np.ndarray           # (V, 3)
    triangles: np.ndarray          # (T, 3) int64
    vertex_normals: np.ndarray     # (V, 3)

    @property
    def empty(self):
        return self.triangles.shape[0] == 0

    def face_areas(self):
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return 0.5 * np.linalg.norm(cr, axis=-1)

    def face_normals(self):
        v = self.vertices
        t = self.triangles
        cr = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        mag = np.linalg.norm(cr, axis=-1, keepdims=True)
        return cr / np.where(mag > 0, mag, 1.0)

    def area(self):
        return float(np.sum(self.face_areas()))

    def euler_characteristic(self):
        v = self.vertices.shape[0]
        f = self.triangles.shape[0]
        e = np.unique(_edge_keys_of_triangles(self.triangles, v)).size
        return v - e + f


def _edge_keys_of_triangles(tris, n_verts):
    pairs = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    lo = np.minimum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
    hi = np.maximum(pairs[:, 0], pairs[:, 1]).astype(np.int64)
    return lo * np.int64(n_verts) + hi


# Kuhn triangulation: six tetrahedra per cube, one per coordinate permutation.
_PERMS = ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))

# tetrahedron edges by corner pair
_TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))

# inside-mask -> triangles as triples of tet-edge indices (orientation fixed
# afterwards against the SDF gradient)
_TET_CASES = {
    1: [(0, 1, 2)],
    2: [(0, 3, 4)],
    3: [(1, 2, 4), (1, 4, 3)],
    4: [(1, 3, 5)],
    5: [(0, 2, 5), (0, 5, 3)],
    6: [(0, 4, 5), (0, 5, 1)],
    7: [(2, 4, 5)],
    8: [(2, 4, 5)],
    9: [(0, 1, 5), (0, 5, 4)],
    10: [(0, 3, 5), (0, 5, 2)],
    11: [(1, 3, 5)],
    12: [(1, 2, 4), (1, 4, 3)],
    13: [(0, 3, 4)],
    14: [(0, 1, 2)],
}


def _tet_corner_offsets():
    """(6, 4, 3) integer corner offsets of the six Kuhn tetrahedra."""
    out = np.zeros((6, 4, 3), dtype=np.int64)
    for p, perm in enumerate(_PERMS):
        corner = np.zeros(3, dtype=np.int64)
        out[p, 0] = corner
        for step, axis in enumerate(perm):
            corner = corner.copy()
            corner[axis] = 1
            out[p, step + 1] = corner
    return out


def marching_tetrahedra(field, resolution):
    """Trace the zero level set of a signed-distance field on a resolution^3
    node lattice over [-1, 1]^3. An all-positive (or all-negative) field
    yields an empty mesh."""
    if resolution < 8:
        raise ValueError("marching tetrahedra needs resolution >= 8")
    n = int(resolution)
    axis = np.linspace(fields.EXTENT_MIN, fields.EXTENT_MAX, n)
    if isinstance(field, fields.GridSdf) and field.resolution == n:
        values = field.values
    else:
        pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1)
        values = field.eval(pts)
    flat = values.reshape(-1)
    inside = flat < 0

    # global node ids of every tet corner, for every cell
    ii, jj, kk = np.meshgrid(np.arange(n - 1), np.arange(n - 1),
                             np.arange(n - 1), indexing="ij")
    base = (ii * n + jj) * n + kk
    base = base.reshape(-1)
    strides = np.array([n * n, n, 1], dtype=np.int64)
    offsets = _tet_corner_offsets() @ strides        # (6, 4)

    corner_a = []
    corner_b = []
    for p in range(6):
        nodes = base[:, None] + offsets[p][None, :]          # (cells, 4)
        mask = inside[nodes]
        case = (mask[:, 0].astype(np.int64) + 2 * mask[:, 1]
                + 4 * mask[:, 2] + 8 * mask[:, 3])
        for c, tris in _TET_CASES.items():
            sel = np.flatnonzero(case == c)
            if sel.size == 0:
                continue
            sub = nodes[sel]
            for tri in tris:
                ea = [_TET_EDGES[e][0] for e in tri]
                eb = [_TET_EDGES[e][1] for e in tri]
                corner_a.append(sub[:, ea])       # (n_sel, 3)
                corner_b.append(sub[:, eb])
    if not corner_a:
        z = np.zeros((0, 3))
        return TriMesh(z, np.zeros((0, 3), dtype=np.int64), z)

    ca = np.concatenate(corner_a, axis=0).reshape(-1)
    cb = np.concatenate(corner_b, axis=0).reshape(-1)

    # interpolate along crossing edges; snap to end nodes so coincident
    # level-set vertices weld exactly
    sa = flat[ca]
    sb = flat[cb]
    t = sa / (sa - sb)
    ca2, cb2 = ca.copy(), cb.copy()
    ca2[t >= 1.0 - SNAP_EPS] = cb[t >= 1.0 - SNAP_EPS]
    cb2[t <= SNAP_EPS] = ca[t <= SNAP_EPS]
    lo = np.minimum(ca2, cb2)
    hi = np.maximum(ca2, cb2)
    keys = lo * np.int64(n ** 3) + hi
    uniq, index = np.unique(keys, return_inverse=True)
    ua = (uniq // (n ** 3)).astype(np.int64)
    ub = (uniq % (n ** 3)).astype(np.int64)

    def node_pos(ids):
        return np.stack([axis[ids // (n * n)], axis[(ids // n) % n],
                         axis[ids % n]], axis=-1)
    pa = node_pos(ua)
    pb = node_pos(ub)
    va = flat[ua]
    vb = flat[ub]
    same = ua == ub
    denom = np.where(same, 1.0, va - vb)
    tt = np.clip(np.where(same, 0.0, va / denom), 0.0, 1.0)
    verts = pa + tt[:, None] * (pb - pa)

    tris = index.reshape(-1, 3)
    tris = tris[(tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2])
                & (tris[:, 0] != tris[:, 2])]

    # orient outward: triangle normal must agree with the SDF gradient
    centroids = verts[tris].mean(axis=1)
    cr = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]],
                  verts[tris[:, 2]] - verts[tris[:, 0]])
    g = field.grad(centroids)
    flip = np.sum(cr * g, axis=-1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    # drop zero-area slivers left by snapping
    areas = 0.5 * np.linalg.norm(np.cross(
        verts[tris[:, 1]] - verts[tris[:, 0]],
        verts[tris[:, 2]] - verts[tris[:, 0]]), axis=-1)
    tris = tris[areas > 1e-14]

    used = np.zeros(verts.shape[0], dtype=bool)
    used[tris.reshape(-1)] = True
    remap = np.cumsum(used) - 1
    verts = verts[used]
    tris = remap[tris]

    normals, _ = fields.normal(field, verts)
    return TriMesh(verts, np.ascontiguousarray(tris, dtype=np.int64), normals)


# ---------------------------------------------------------------------------
# UV atlas: per-triangle charts with shared-edge pairing, shelf packed
# ---------------------------------------------------------------------------

class AtlasCapacityError(ValueError):
    pass


@dataclass
class UvAtlas:
    """Per-corner UV coordinates (texel units in [0, V]) plus the texel
    ownership tables used for baking: which triangle owns each valid texel
    and at which barycentric coordinates."""
    size: int
    uv: np.ndarray             # (T, 3, 2)
    texel_tri: np.ndarray      # (V, V) int32, -1 where invalid
    texel_bary: np.ndarray     # (V, V, 3)
    valid: np.ndarray          # (V, V) bool
    gutter: int
    chart_boxes: np.ndarray    # (C, 4) x0, y0, x1, y1 incl. gutter

    def utilization(self):
        return float(np.count_nonzero(self.valid)) / self.size ** 2

    def texel_points(self, mesh):
        """3D surface point of every valid texel, (V, V, 3) with zeros on
        invalid texels."""
        pts = np.zeros((self.size, self.size, 3))
        sel = self.valid
        tri = self.texel_tri[sel]
        bary = self.texel_bary[sel]
        corners = mesh.vertices[mesh.triangles[tri]]
        pts[sel] = np.einsum("pc,pcd->pd", bary, corners)
        return pts

    def texel_normals(self, mesh):
        out = np.zeros((self.size, self.size, 3))
        sel = self.valid
        tri = self.texel_tri[sel]
        bary = self.texel_bary[sel]
        corners = mesh.vertex_normals[mesh.triangles[tri]]
        nrm = np.einsum("pc,pcd->pd", bary, corners)
        mag = np.linalg.norm(nrm, axis=-1, keepdims=True)
        out[sel] = nrm / np.where(mag > 0, mag, 1.0)
        return out


def _unfold_triangle(p0, p1, p2):
    """Isometric 2D embedding with edge p0-p1 on the x axis."""
    e1 = p1 - p0
    length = np.linalg.norm(e1)
    ex = e1 / length
    e2 = p2 - p0
    x = float(e2 @ ex)
    y = float(np.linalg.norm(e2 - x * ex))
    return np.array([[0.0, 0.0], [length, 0.0], [x, y]])


def _longest_edge_order(tri_verts):
    """Corner order placing the longest edge first (deterministic)."""
    d01 = np.linalg.norm(tri_verts[0] - tri_verts[1])
    d12 = np.linalg.norm(tri_verts[1] - tri_verts[2])
    d20 = np.linalg.norm(tri_verts[2] - tri_verts[0])
    best = int(np.argmax([d01, d12, d20]))
    return ((0, 1, 2), (1, 2, 0), (2, 0, 1))[best]


def _pair_triangles(mesh):
    """Greedy matching of triangles across shared edges; unfolding a pair
    into one chart roughly halves the per-chart gutter overhead."""
    tris = mesh.triangles
    n_tris = tris.shape[0]
    edge_map = {}
    for t in range(n_tris):
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(tris[t, a], tris[t, b]), max(tris[t, a], tris[t, b]))
            edge_map.setdefault(key, []).append(t)
    paired = np.full(n_tris, -1, dtype=np.int64)
    verts = mesh.vertices
    for t in range(n_tris):
        if paired[t] >= 0:
            continue
        edges = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (min(tris[t, a], tris[t, b]), max(tris[t, a], tris[t, b]))
            edges.append((-np.linalg.norm(verts[key[0]] - verts[key[1]]), key))
        for _, key in sorted(edges):
            for u in edge_map[key]:
                if u != t and paired[u] < 0:
                    paired[t] = u
                    paired[u] = t
                    break
            if paired[t] >= 0:
                break
    return paired


def _best_orientation(pts):
    """Rotate a point set so some point pair is axis-aligned and the bounding
    box area is minimal (wide side horizontal); deterministic."""
    best = None
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            d = pts[j] - pts[i]
            length = float(np.hypot(d[0], d[1]))
            if length < 1e-12:
                continue
            c, s = d[0] / length, d[1] / length
            rot = np.stack([pts[:, 0] * c + pts[:, 1] * s,
                            -pts[:, 0] * s + pts[:, 1] * c], axis=-1)
            size = rot.max(axis=0) - rot.min(axis=0)
            if size[0] < size[1]:
                rot = np.stack([rot[:, 1], -rot[:, 0]], axis=-1)
                size = size[::-1]
            area = size[0] * size[1]
            if best is None or area < best[0] - 1e-12:
                best = (area, rot - rot.min(axis=0), size)
    return best[1], best[2]


def _build_charts(mesh, paired):
    """Chart list: (tri ids, local 2D coords per corner, width, height).
    Every chart is rotated into its smallest axis-aligned box."""
    charts = []
    verts = mesh.vertices
    tris = mesh.triangles
    done = np.zeros(tris.shape[0], dtype=bool)
    for t in range(tris.shape[0]):
        if done[t]:
            continue
        u = paired[t]
        if u >= 0 and not done[u]:
            # shared edge as the hinge; mate unfolds mirrored across it, so
            # texels adjacent in UV stay adjacent on the surface
            shared = [v for v in tris[t] if v in set(tris[u])]
            sa, sb = shared[0], shared[1]
            apex_t = [v for v in tris[t] if v not in (sa, sb)][0]
            apex_u = [v for v in tris[u] if v not in (sa, sb)][0]
            base = _unfold_triangle(verts[sa], verts[sb], verts[apex_t])
            mate = _unfold_triangle(verts[sa], verts[sb], verts[apex_u])
            mate[2, 1] = -mate[2, 1]
            local_t = _corner_coords(tris[t], (sa, sb, apex_t), base)
            local_u = _corner_coords(tris[u], (sa, sb, apex_u), mate)
            pts, (w, h) = _best_orientation(np.concatenate([local_t, local_u]))
            charts.append(((t, u), (pts[0:3], pts[3:6]), w, h))
            done[t] = done[u] = True
        else:
            order = _longest_edge_order(verts[tris[t]])
            emb = _unfold_triangle(*(verts[tris[t][i]] for i in order))
            local = np.empty((3, 2))
            for slot, corner in enumerate(order):
                local[corner] = emb[slot]
            pts, (w, h) = _best_orientation(local)
            charts.append(((t,), (pts,), w, h))
            done[t] = True
    return charts


def _corner_coords(tri, order, emb):
    """Map the embedding rows (base0, base1, apex) back to corner slots."""
    local = np.empty((3, 2))
    for slot in range(3):
        v = tri[slot]
        idx = 0 if v == order[0] else 1 if v == order[1] else 2
        local[slot] = emb[idx]
    return local


def _chart_margin(gutter):
    """Per-side box margin; adjacent boxes then keep charts 2*margin >= gutter
    texels apart."""
    return max(1, (gutter + 1) // 2)


def _shelf_pack(sizes, atlas_size, gutter):
    """Deterministic shelf packing; returns (x, y) origins or None."""
    margin = _chart_margin(gutter)
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][1], i))
    pos = [None] * len(sizes)
    x = y = shelf_h = 0.0
    for i in order:
        w = sizes[i][0] + 2 * margin
        h = sizes[i][1] + 2 * margin
        if w > atlas_size or h > atlas_size:
            return None
        if x + w > atlas_size:
            y += shelf_h
            x = 0.0
            shelf_h = 0.0
        if y + h > atlas_size:
            return None
        pos[i] = (x, y)
        x += w
        shelf_h = max(shelf_h, h)
    return pos


def build_uv_atlas(mesh: TriMesh, size=1024, gutter=2):
    """Deterministic per-chart atlas in a size x size texel square."""
    if mesh.empty:
        raise ValueError("cannot build an atlas for an empty mesh")
    paired = _pair_triangles(mesh)
    charts = _build_charts(mesh, paired)
    widths = np.array([c[2] for c in charts])
    heights = np.array([c[3] for c in charts])

    # largest scale that still packs, by bisection
    lo_s = 0.0
    hi_s = (size - 2 * _chart_margin(gutter)) / max(np.max(widths),
                                                    np.max(heights), 1e-12)
    if _shelf_pack([(0.0, 0.0)] * len(charts), size, gutter) is None:
        raise AtlasCapacityError(
            f"{len(charts)} charts cannot fit a {size}x{size} atlas even at "
            f"zero scale; increase the atlas size")
    best = None
    for _ in range(48):
        mid = 0.5 * (lo_s + hi_s)
        pos = _shelf_pack(list(zip(widths * mid, heights * mid)), size, gutter)
        if pos is None:
            hi_s = mid
        else:
            lo_s = mid
            best = (mid, pos)
    if best is None:
        raise AtlasCapacityError("atlas packing failed; increase the size")
    scale, pos = best

    uv = np.zeros((mesh.triangles.shape[0], 3, 2))
    texel_tri = np.full((size, size), -1, dtype=np.int32)
    texel_bary = np.zeros((size, size, 3), dtype=np.float64)
    margin = _chart_margin(gutter)
    boxes = []
    for c, (tri_ids, locals_, w, h) in enumerate(charts):
        ox = pos[c][0] + margin
        oy = pos[c][1] + margin
        boxes.append((pos[c][0], pos[c][1],
                      pos[c][0] + w * scale + 2 * margin,
                      pos[c][1] + h * scale + 2 * margin))
        for tri_id, local in zip(tri_ids, locals_):
            uv[tri_id] = local * scale + np.array([ox, oy])
    _rasterize_ownership(uv, texel_tri, texel_bary)
    valid = texel_tri >= 0
    return UvAtlas(size=size, uv=uv, texel_tri=texel_tri,
                   texel_bary=texel_bary, valid=valid, gutter=gutter,
                   chart_boxes=np.asarray(boxes))


def _rasterize_ownership(uv, texel_tri, texel_bary):
    """Assign texel centers to the triangle containing them (first match in
    triangle order wins; charts are disjoint so ties only occur inside a
    paired chart along the shared edge)."""
    size = texel_tri.shape[0]
    for t in range(uv.shape[0]):
        tri = uv[t]
        x0 = max(int(np.floor(tri[:, 0].min() - 0.5)), 0)
        x1 = min(int(np.ceil(tri[:, 0].max() + 0.5)), size - 1)
        y0 = max(int(np.floor(tri[:, 1].min() - 0.5)), 0)
        y1 = min(int(np.ceil(tri[:, 1].max() + 0.5)), size - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        px = gx + 0.5
        py = gy + 0.5
        b = _bary_2d(tri, px, py)
        inside = np.all(b >= -1e-9, axis=-1) & (texel_tri[gy, gx] < 0)
        if not np.any(inside):
            continue
        texel_tri[gy[inside], gx[inside]] = t
        texel_bary[gy[inside], gx[inside]] = b[inside]


def _bary_2d(tri, px, py):
    x0, y0 = tri[0]
    x1, y1 = tri[1]
    x2, y2 = tri[2]
    det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
    if abs(det) < 1e-30:
        return np.full(px.shape + (3,), -1.0)
    l0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / det
    l1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / det
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=-1)


# ---------------------------------------------------------------------------
# Texture baking
# ---------------------------------------------------------------------------

@dataclass
class TextureAtlas:
    """size x size x 5 material texture; invalid texels are zero unless the
    gutter fill ran."""
    texture: np.ndarray
    valid: np.ndarray


def bake_pbr_texture(atlas: UvAtlas, mesh: TriMesh, pbr_field,
                     gutter_fill=True):
    """Sample the material field at each valid texel's surface point.
    Invalid texels are zero; with gutter_fill the band of `gutter` texels
    around each chart copies its nearest valid texel so bilinear lookups do
    not bleed zeros."""
    v = atlas.size
    tex = np.zeros((v, v, 5))
    pts = atlas.texel_points(mesh)
    tex[atlas.valid] = pbr_field.eval(pts[atlas.valid])
    if gutter_fill and np.any(atlas.valid):
        dist, (iy, ix) = ndimage.distance_transform_edt(
            ~atlas.valid, return_indices=True)
        band = (~atlas.valid) & (dist <= atlas.gutter + 1)
        tex[band] = tex[iy[band], ix[band]]
    return TextureAtlas(texture=tex, valid=atlas.valid.copy())


def build_k0(atlas: UvAtlas, mesh: TriMesh, pbr_field):
    """11-channel texel annotation: material (5), surface normal (3), and
    surface point (3); zero outside the atlas coverage."""
    v = atlas.size
    out = np.zeros((v, v, 11))
    pts = atlas.texel_points(mesh)
    sel = atlas.valid
    out[..., 0:5][sel] = pbr_field.eval(pts[sel])
    out[..., 5:8] = atlas.texel_normals(mesh)
    out[..., 8:11] = pts
    return out


# ---------------------------------------------------------------------------
# Rasterization (depth/attribute z-buffer) and view backprojection
# ---------------------------------------------------------------------------

def rasterize(mesh: TriMesh, cam, eps_area=1e-12):
    """Z-buffer rasterization; depth is the distance from the camera center.
    Returns dict(depth (H,W) with +inf background, tri (H,W) int32 ids,
    bary (H,W,3))."""
    h, w = cam.height, cam.width
    depth = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int32)
    bary_out = np.zeros((h, w, 3))
    if mesh.empty:
        return {"depth": depth, "tri": tri_id, "bary": bary_out}
    px, py, t = cam.project(mesh.vertices)
    for k in range(mesh.triangles.shape[0]):
        idx = mesh.triangles[k]
        tz = t[idx]
        if np.any(tz <= 0):
            continue
        tx = px[idx]
        ty = py[idx]
        x0 = max(int(np.floor(tx.min() - 0.5)), 0)
        x1 = min(int(np.ceil(tx.max() + 0.5)), w - 1)
        y0 = max(int(np.floor(ty.min() - 0.5)), 0)
        y1 = min(int(np.ceil(ty.max() + 0.5)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
        b = _bary_2d(np.stack([tx, ty], axis=-1), gx + 0.5, gy + 0.5)
        inside = np.all(b >= -1e-9, axis=-1)
        if not np.any(inside):
            continue
        z = b @ tz
        closer = inside & (z < depth[gy, gx]) & (z > 0)
        if not np.any(closer):
            continue
        depth[gy[closer], gx[closer]] = z[closer]
        tri_id[gy[closer], gx[closer]] = k
        bary_out[gy[closer], gx[closer]] = b[closer]
    return {"depth": depth, "tri": tri_id, "bary": bary_out}


def _bilinear_image(image, px, py):
    """Sample (H, W, C) at continuous pixel coordinates (centers at +0.5)."""
    h, w = image.shape[:2]
    x = np.clip(px - 0.5, 0.0, w - 1.0)
    y = np.clip(py - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 \
        else np.zeros_like(x, dtype=np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 \
        else np.zeros_like(y, dtype=np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def backproject_views(atlas: UvAtlas, mesh: TriMesh, views, eps_z=1e-3):
    """Per-view partial textures: image color at each visible texel's
    projection plus the view cosine as the last channel; occluded, outside,
    or invalid texels are zero.

    views: iterable of (image (H, W, D), camera). Visibility is a depth test
    against the rasterized mesh with bias eps_z.
    """
    v = atlas.size
    pts = atlas.texel_points(mesh)
    nrm = atlas.texel_normals(mesh)
    sel = atlas.valid
    p = pts[sel]
    npix = nrm[sel]
    out = []
    for image, cam in views:
        image = np.asarray(image, dtype=np.float64)
        if image.ndim == 2:
            image = image[..., None]
        d = image.shape[-1]
        raster = rasterize(mesh, cam)
        px, py, t = cam.project(p)
        inb = (px >= 0) & (px < cam.width) & (py >= 0) & (py < cam.height) \
            & (t > 0)
        ix = np.clip(px.astype(np.int64), 0, cam.width - 1)
        iy = np.clip(py.astype(np.int64), 0, cam.height - 1)
        visible = inb & (t <= raster["depth"][iy, ix] + eps_z)
        to_cam = cam.position - p
        to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
        cosv = np.sum(to_cam * npix, axis=-1)
        tex = np.zeros((v, v, d + 1))
        colors = _bilinear_image(image, px[visible], py[visible])
        flat = np.zeros((p.shape[0], d + 1))
        flat[visible, 0:d] = colors
        flat[visible, d] = cosv[visible]
        tex[sel] = flat
        out.append(tex)
    return out


def fuse_partial_textures(k0, partials, valid=None, albedo_channels=None):
    """Cosine-weighted blend of the visible views into the albedo channels;
    metalness and roughness stay from the field-sampled annotation. Texels no
    view sees fall back to the field-sampled albedo.

    partials are (V, V, D+1) arrays from backproject_views; the blended color
    uses channels `albedo_channels` (default: last 3 color channels, i.e. the
    albedo half of shaded+albedo inputs, or the only 3 of color-only inputs).
    """
    v = k0.shape[0]
    if valid is None:
        # valid texels carry a unit normal in channels 5:8
        valid = np.linalg.norm(k0[..., 5:8], axis=-1) > 0.5
    num = np.zeros((v, v, 3))
    den = np.zeros((v, v))
    for tex in partials:
        d = tex.shape[-1] - 1
        ch = albedo_channels if albedo_channels is not None \
            else slice(d - 3, d)
        cos = tex[..., -1]
        wpos = np.where(cos > 0, np.maximum(cos, 0.0) ** 2, 0.0)
        num += wpos[..., None] * tex[..., ch]
        den += wpos
    fused = np.where(den[..., None] > 0,
                     num / np.maximum(den, 1e-30)[..., None], k0[..., 0:3])
    texture = np.concatenate([fused, k0[..., 3:5]], axis=-1)
    texture = texture * valid[..., None]
    return TextureAtlas(texture=texture, valid=valid)


def render_textured(mesh: TriMesh, atlas: UvAtlas, texture, cam):
    """Rasterize the mesh and look up the texture through the UV map;
    returns (rgb (H, W, 3), mask (H, W))."""
    raster = rasterize(mesh, cam)
    h, w = raster["depth"].shape
    rgb = np.zeros((h, w, 3))
    covered = raster["tri"] >= 0
    if not np.any(covered):
        return rgb, covered
    tri = raster["tri"][covered]
    bary = raster["bary"][covered]
    uvs = np.einsum("pc,pcd->pd", bary, atlas.uv[tri])
    rgb[covered] = _bilinear_image(texture[..., 0:3], uvs[:, 0], uvs[:, 1])
    return rgb, covered


# ---------------------------------------------------------------------------
# OBJ/MTL export with baked textures
# ---------------------------------------------------------------------------

def export_obj(path, mesh: TriMesh, atlas: UvAtlas = None, texture=None):
    """OBJ with normals and (optionally) UVs plus an MTL referencing the
    baked textures. The material map packs roughness into G and metalness
    into B (ORM-style layout); albedo goes to its own map. PNG previews and
    exact PFM copies are written next to the OBJ."""
    path = str(path)
    stem = path[:-4] if path.lower().endswith(".obj") else path
    mtl_path = stem + ".mtl"
    lines = [f"mtllib {mtl_path.rsplit('/', 1)[-1]}", "usemtl baked"]
    for v in mesh.vertices:
        lines.append(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
    for n in mesh.vertex_normals:
        lines.append(f"vn {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
    has_uv = atlas is not None
    if has_uv:
        size = atlas.size
        for t in range(atlas.uv.shape[0]):
            for c in range(3):
                u = atlas.uv[t, c, 0] / size
                w = 1.0 - atlas.uv[t, c, 1] / size
                lines.append(f"vt {u:.9g} {w:.9g}")
        for t, tri in enumerate(mesh.triangles):
            f = " ".join(f"{tri[c] + 1}/{3 * t + c + 1}/{tri[c] + 1}"
                         for c in range(3))
            lines.append("f " + f)
    else:
        for tri in mesh.triangles:
            lines.append("f " + " ".join(f"{i + 1}//{i + 1}" for i in tri))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    mtl = ["newmtl baked", "Kd 0.8 0.8 0.8"]
    if texture is not None:
        albedo = texture.texture[..., 0:3]
        orm = np.stack([np.ones_like(texture.texture[..., 4]),
                        texture.texture[..., 4],     # roughness in G
                        texture.texture[..., 3]],    # metalness in B
                       axis=-1)
        write_png(stem + ".albedo.png", albedo)
        write_pfm(stem + ".albedo.pfm", albedo)
        _write_png_linear(stem + ".orm.png", orm)
        write_pfm(stem + ".orm.pfm", orm)
        mtl += [f"map_Kd {stem.rsplit('/', 1)[-1]}.albedo.png",
                f"map_Pm {stem.rsplit('/', 1)[-1]}.orm.png"]
    with open(mtl_path, "w") as fh:
        fh.write("\n".join(mtl) + "\n")
    return path


def _write_png_linear(path, data):
    """Raw byte quantization without the sRGB transfer (data textures)."""
    from PIL import Image as PilImage
    arr = np.rint(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    PilImage.fromarray(arr, mode="RGB" if arr.ndim == 3 else "L").save(path)
