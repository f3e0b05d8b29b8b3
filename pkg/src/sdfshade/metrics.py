"""Evaluation metrics over renders and meshified outputs: foreground PSNR,
depth L1, silhouette IoU, Chamfer distance, and normal correctness.

PSNR operates in linear radiometric space with peak 1.0 and a 99 dB cap.
Chamfer and normal correctness sample both meshes area-uniformly (20,000
points by default) and query exact nearest neighbors through a k-d tree.
Normal correctness uses |cos| so it is robust to orientation flips.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.spatial import cKDTree

PSNR_CAP = 99.0
MSE_FLOOR = 1e-12


def psnr_foreground(pred, gt, fg_mask):
    """10 log10(1 / MSE) over foreground pixels; 99 dB cap for exact matches."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    fg = np.asarray(fg_mask, dtype=bool)
    diff = (pred - gt)[fg]
    if diff.size == 0:
        return PSNR_CAP
    mse = float(np.mean(diff * diff))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def depth_l1(pred_depth, gt_depth, fg_mask):
    fg = np.asarray(fg_mask, dtype=bool)
    if not np.any(fg):
        return 0.0
    return float(np.mean(np.abs(np.asarray(pred_depth)
                                - np.asarray(gt_depth))[fg]))


def silhouette_iou(pred_mask, gt_mask, threshold=0.5):
    a = np.asarray(pred_mask) > threshold
    b = np.asarray(gt_mask) > threshold
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def sample_surface(mesh, n, seed=0):
    """Area-uniform surface samples with their face normals.

    Triangles are visited in a canonical (sorted-index) order, so the samples
    do not depend on the storage order of the triangle list.
    """
    if mesh.empty:
        raise ValueError("cannot sample an empty mesh")
    tris = mesh.triangles
    canon = np.lexsort(np.sort(tris, axis=1).T[::-1])
    tris = tris[canon]
    corners_all = mesh.vertices[tris]
    areas = 0.5 * np.linalg.norm(
        np.cross(corners_all[:, 1] - corners_all[:, 0],
                 corners_all[:, 2] - corners_all[:, 0]), axis=-1)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    cdf = np.cumsum(areas)
    pick = np.searchsorted(cdf, rng.random(n) * total, side="right")
    pick = np.minimum(pick, areas.size - 1)
    corners = corners_all[pick]
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w0 = 1.0 - r1
    w1 = r1 * (1.0 - r2)
    w2 = r1 * r2
    pts = (w0[:, None] * corners[:, 0] + w1[:, None] * corners[:, 1]
           + w2[:, None] * corners[:, 2])
    cr = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    mag = np.linalg.norm(cr, axis=-1, keepdims=True)
    return pts, cr / np.where(mag > 0, mag, 1.0)


def chamfer(mesh_a, mesh_b, n=20000, seed=0):
    """Symmetric mean nearest-neighbor distance between area-uniform samples
    of the two surfaces (mean of both directions)."""
    pa, _ = sample_surface(mesh_a, n, seed)
    pb, _ = sample_surface(mesh_b, n, seed)
    d_ab = cKDTree(pb).query(pa, k=1)[0]
    d_ba = cKDTree(pa).query(pb, k=1)[0]
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def normal_correctness(mesh_a, mesh_b, n=20000, seed=0):
    """Symmetric mean |cos| between sample normals and their nearest
    neighbor's normals."""
    pa, na = sample_surface(mesh_a, n, seed)
    pb, nb = sample_surface(mesh_b, n, seed)
    ia = cKDTree(pb).query(pa, k=1)[1]
    ib = cKDTree(pa).query(pb, k=1)[1]
    cos_ab = np.abs(np.sum(na * nb[ia], axis=-1))
    cos_ba = np.abs(np.sum(nb * na[ib], axis=-1))
    return 0.5 * (float(np.mean(cos_ab)) + float(np.mean(cos_ba)))


@dataclass
class EvalReport:
    psnr: dict = dc_field(default_factory=dict)     # per channel set, dB
    depth_l1: float | None = None
    iou: float | None = None
    chamfer: float | None = None
    normal_correctness: float | None = None
    n_samples: int = 20000
    seed: int = 0
    lpips: None = None          # perceptual metric not provided

    def to_dict(self):
        return {
            "psnr": {k: float(v) for k, v in self.psnr.items()},
            "depth_l1": self.depth_l1,
            "iou": self.iou,
            "chamfer": self.chamfer,
            "normal_correctness": self.normal_correctness,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "lpips": None,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def evaluate_views(pred_views, gt_targets):
    """Render-space metrics pooled over views.

    pred_views: list of dicts with planes shaded/albedo/metalness/roughness/
    depth/alpha; gt_targets: matching ViewTarget list. Foreground is the
    target mask.
    """
    acc = {k: ([], []) for k in ("shaded", "albedo", "metalness", "roughness")}
    depth_err = []
    iou_inter = 0
    iou_union = 0
    for pred, tgt in zip(pred_views, gt_targets):
        fg = tgt.planes["mask"] > 0.5
        for k in acc:
            if k in pred and k in tgt.planes:
                p = pred[k]
                g = tgt.planes[k]
                if p.ndim == 2:
                    p = p[..., None]
                    g = g[..., None]
                acc[k][0].append(p[fg])
                acc[k][1].append(g[fg])
        if "depth" in pred:
            depth_err.append(np.abs(pred["depth"] - tgt.planes["depth"])[fg])
        pm = pred["alpha"] > 0.5
        iou_inter += np.count_nonzero(pm & fg)
        iou_union += np.count_nonzero(pm | fg)
    report = EvalReport()
    for k, (ps, gs) in acc.items():
        if ps:
            p = np.concatenate(ps)
            g = np.concatenate(gs)
            report.psnr[k] = psnr_foreground(p, g, np.ones(p.shape[0],
                                                           dtype=bool))
    if depth_err:
        report.depth_l1 = float(np.mean(np.concatenate(depth_err)))
    report.iou = float(iou_inter / iou_union) if iou_union else 1.0
    return report
