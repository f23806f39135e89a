"""Overlap and boundary metrics, connected components and ROI boxes."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import UsageError
from .phantom import AA, LA, LAA, LV, PV, ROI_NAMES

FOREGROUND = (LV, LA, LAA, AA, PV)


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise UsageError(f"volume shapes differ: {a.shape} vs {b.shape}")


def dice_score(pred: np.ndarray, truth: np.ndarray, class_id: int) -> float:
    """2|A n B| / (|A| + |B|); 1.0 when both masks are empty."""
    _check_same_shape(pred, truth)
    a = pred == class_id
    b = truth == class_id
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with at least one 6-neighbour outside the mask (or the volume)."""
    mask = mask.astype(bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                    border_value=0)
    return mask & ~eroded


def volume_diagonal_mm(shape: Sequence[int], spacing: Sequence[float]) -> float:
    return float(math.sqrt(sum(((n - 1) * s) ** 2 for n, s in zip(shape, spacing))))


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    ordered = np.sort(values)
    rank = max(int(math.ceil(q / 100.0 * len(ordered))), 1)
    return float(ordered[rank - 1])


def _directed_hd95(src: np.ndarray, dst_tree: cKDTree) -> float:
    d, _ = dst_tree.query(src, k=1)
    return nearest_rank_percentile(d, 95.0)


def hd95(pred: np.ndarray, truth: np.ndarray, class_id: int,
         spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile surface distance in mm.

    If exactly one mask is empty the volume diagonal is returned as a finite
    penalty; two empty masks score 0.
    """
    _check_same_shape(pred, truth)
    spacing = np.asarray(spacing, dtype=np.float64)
    if spacing.shape != (pred.ndim,) or np.any(spacing <= 0):
        raise UsageError(f"spacing {spacing.tolist()} invalid for a {pred.ndim}-D volume")
    a = pred == class_id
    b = truth == class_id
    a_any, b_any = bool(a.any()), bool(b.any())
    if not a_any and not b_any:
        return 0.0
    if not (a_any and b_any):
        return volume_diagonal_mm(pred.shape, spacing)
    pa = np.argwhere(surface_voxels(a)) * spacing
    pb = np.argwhere(surface_voxels(b)) * spacing
    return max(_directed_hd95(pa, cKDTree(pb)), _directed_hd95(pb, cKDTree(pa)))


# -- connected components ----------------------------------------------------------

@dataclass
class Components:
    labels: np.ndarray      # int32; 0 = background, 1..n ordered by decreasing size
    sizes: list

    def __len__(self) -> int:
        return len(self.sizes)


def connected_components(mask: np.ndarray, connectivity: int = 26) -> Components:
    """Label connected foreground regions.

    Components are numbered by decreasing size; equal sizes are ordered by the
    smallest linear voxel index they contain.
    """
    if connectivity not in (6, 26):
        raise UsageError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(mask.ndim, 1 if connectivity == 6 else mask.ndim)
    raw, n = ndimage.label(mask.astype(bool), structure=structure)
    if n == 0:
        return Components(np.zeros(mask.shape, dtype=np.int32), [])
    flat = raw.reshape(-1)
    sizes = np.bincount(flat, minlength=n + 1)[1:]
    first = np.full(n + 1, flat.size, dtype=np.int64)
    nz = np.flatnonzero(flat)
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, n + 1), key=lambda c: (-sizes[c - 1], first[c]))
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old] = new
    return Components(remap[raw], [int(sizes[c - 1]) for c in order])


def retain_clusters(pred: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Drop small clusters: LV/LA/LAA/AA keep their largest component; PV keeps
    every component at least half (rounded up) the size of its largest one."""
    out = pred.copy()
    for roi in FOREGROUND:
        mask = pred == roi
        if not mask.any():
            continue
        comps = connected_components(mask, connectivity)
        if roi == PV:
            threshold = math.ceil(0.5 * comps.sizes[0])
            keep = [i + 1 for i, s in enumerate(comps.sizes) if s >= threshold]
        else:
            keep = [1]
        out[mask & ~np.isin(comps.labels, keep)] = 0
    return out


# -- bounding boxes ------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple  # inclusive

    def contains(self, other: "Box") -> bool:
        return all(a <= b for a, b in zip(self.lo, other.lo)) and all(a >= b for a, b in zip(self.hi, other.hi))

    @property
    def size(self) -> tuple:
        return tuple(h - l + 1 for l, h in zip(self.lo, self.hi))

    def slices(self) -> tuple:
        return tuple(slice(l, h + 1) for l, h in zip(self.lo, self.hi))

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_dict(cls, d) -> "Box":
        return cls(tuple(int(v) for v in d["lo"]), tuple(int(v) for v in d["hi"]))


def tight_box(mask: np.ndarray) -> Optional[Box]:
    idx = np.argwhere(mask)
    if idx.size == 0:
        return None
    return Box(tuple(int(v) for v in idx.min(0)), tuple(int(v) for v in idx.max(0)))


def bounding_box(masks: Sequence[np.ndarray], margin: int, extents: Sequence[int]) -> Box:
    """Union of the masks' extents, grown by ``margin`` and clamped to the volume."""
    boxes = [b for b in (tight_box(m) for m in masks) if b is not None]
    if not boxes:
        raise UsageError("no ROI found: every mask is empty")
    lo = tuple(max(min(b.lo[i] for b in boxes) - margin, 0) for i in range(len(extents)))
    hi = tuple(min(max(b.hi[i] for b in boxes) + margin, extents[i] - 1) for i in range(len(extents)))
    return Box(lo, hi)


# -- reports ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)   # dicts: volume_id, roi, dss, hd95_mm
    cluster_removal: bool = False

    def _values(self, roi: str, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows if r["roi"] == roi], dtype=np.float64)

    def per_roi(self) -> dict:
        out = {}
        for name in ROI_NAMES.values():
            d, h = self._values(name, "dss"), self._values(name, "hd95_mm")
            out[name] = {"dss_mean": float(d.mean()), "dss_sd": float(d.std(ddof=1)) if len(d) > 1 else 0.0,
                         "hd95_mean": float(h.mean()), "hd95_sd": float(h.std(ddof=1)) if len(h) > 1 else 0.0}
        return out

    @property
    def macro_dss(self) -> float:
        return float(np.mean([v["dss_mean"] for v in self.per_roi().values()]))

    @property
    def macro_hd95(self) -> float:
        return float(np.mean([v["hd95_mean"] for v in self.per_roi().values()]))

    def per_volume_macro(self, key: str = "dss") -> dict:
        vols: dict = {}
        for r in self.rows:
            vols.setdefault(r["volume_id"], []).append(r[key])
        return {k: float(np.mean(v)) for k, v in vols.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["volume_id", "roi", "dss", "hd95_mm"])
        for r in self.rows:
            w.writerow([r["volume_id"], r["roi"], f"{r['dss']:.6f}", f"{r['hd95_mm']:.6f}"])
        w.writerow([])
        w.writerow(["summary", *[f"{n}" for n in ROI_NAMES.values()], "Average"])
        roi = self.per_roi()
        for key, label in (("dss", "DSS"), ("hd95", "HD95")):
            w.writerow([f"{label}: Mean", *[f"{roi[n][key + '_mean']:.4f}" for n in roi],
                        f"{self.macro_dss if key == 'dss' else self.macro_hd95:.4f}"])
            w.writerow([f"{label}: SD", *[f"{roi[n][key + '_sd']:.4f}" for n in roi], ""])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"cluster_removal": self.cluster_removal, "per_roi": self.per_roi(),
                           "macro_dss": self.macro_dss, "macro_hd95": self.macro_hd95,
                           "rows": self.rows}, indent=1)


def evaluate(preds: Sequence[np.ndarray], truths: Sequence[np.ndarray],
             spacings: Sequence[Sequence[float]], apply_cluster_removal: bool = False,
             volume_ids: Optional[Sequence] = None, connectivity: int = 26) -> MetricsReport:
    """Per-volume, per-ROI DSS and HD95 with optional small-cluster removal."""
    if not (len(preds) == len(truths) == len(spacings)):
        raise UsageError("preds, truths and spacings must be aligned lists")
    ids = list(volume_ids) if volume_ids is not None else list(range(len(preds)))
    report = MetricsReport(cluster_removal=apply_cluster_removal)
    for vid, pred, truth, spacing in zip(ids, preds, truths, spacings):
        if apply_cluster_removal:
            pred = retain_clusters(pred, connectivity)
        for roi in FOREGROUND:
            report.rows.append({"volume_id": vid, "roi": ROI_NAMES[roi],
                                "dss": dice_score(pred, truth, roi),
                                "hd95_mm": hd95(pred, truth, roi, spacing)})
    return report
