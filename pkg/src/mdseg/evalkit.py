"""3D post-processing, volumetric overlap/surface metrics and the two-sample KS test."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage, special
from scipy.spatial import cKDTree

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)
CONNECTIVITY_6 = ndimage.generate_binary_structure(3, 1)
METRICS = ("dice", "sensitivity", "specificity", "mssd_mm", "assd_mm", "ravd")


def spherical_kernel(radius: int = 2) -> np.ndarray:
    """Offsets within Euclidean distance ``radius`` inside a (2r+1)^3 window."""
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return zz ** 2 + yy ** 2 + xx ** 2 <= radius ** 2


BALL_5 = spherical_kernel(2)


# ----------------------------------------------------------- post-processing

def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep the largest 26-connected component (ties: lowest label index)."""
    lab, n = ndimage.label(mask, structure=CONNECTIVITY_26)
    if n <= 1:
        return mask.astype(bool).copy()
    sizes = np.bincount(lab.ravel())[1:]
    return lab == (int(np.argmax(sizes)) + 1)


def binary_closing(mask: np.ndarray, kernel: np.ndarray = BALL_5) -> np.ndarray:
    """Dilate then erode; the volume is padded so borders do not erode the result."""
    pad = max(kernel.shape) // 2
    padded = np.pad(mask.astype(bool), pad)
    closed = ndimage.binary_erosion(ndimage.binary_dilation(padded, kernel), kernel)
    sl = tuple(slice(pad, pad + n) for n in mask.shape)
    return closed[sl]


@dataclass
class PostprocessResult:
    labels: np.ndarray
    empty_structures: list[int] = field(default_factory=list)


def postprocess(probs: np.ndarray, labels: np.ndarray | None = None,
                kernel: np.ndarray = BALL_5) -> PostprocessResult:
    """Argmax, per-structure largest component, per-structure closing.

    ``probs`` is (Z, C, H, W): one probability stack per slice, in slice
    order. Voxels claimed by several closed structures go to the structure
    with the higher probability. ``labels`` optionally replaces the argmax.
    """
    probs = np.asarray(probs)
    if probs.ndim != 4:
        raise ValueError("expected a (Z, C, H, W) probability stack")
    n_classes = probs.shape[1]
    if labels is None:
        labels = probs.argmax(axis=1)
    elif labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ValueError("labels do not match the probability stack")
    closed = np.zeros((n_classes,) + labels.shape, dtype=bool)
    empty = []
    for c in range(1, n_classes):
        mask = labels == c
        if not mask.any():
            empty.append(c)
            continue
        closed[c] = binary_closing(largest_component(mask), kernel)
    claims = closed.sum(axis=0)
    out = np.zeros(labels.shape, dtype=np.uint8)
    single = claims == 1
    out[single] = closed[:, single].argmax(axis=0)
    multi = claims > 1
    if multi.any():
        p = np.moveaxis(probs, 1, 0)[:, multi]  # (C, n_multi)
        p = np.where(closed[:, multi], p, -np.inf)
        out[multi] = p.argmax(axis=0)
    return PostprocessResult(out, empty)


# ------------------------------------------------------------------ metrics

class UndefinedMetric(ValueError):
    pass


def _pair(gt, p):
    gt = np.asarray(gt, dtype=bool)
    p = np.asarray(p, dtype=bool)
    if gt.shape != p.shape:
        raise ValueError(f"shape mismatch {gt.shape} vs {p.shape}")
    return gt, p


def dice(gt, p) -> float:
    """2|GT & P| / (|GT| + |P|); 1.0 when both are empty (see ``dice_flagged``)."""
    return dice_flagged(gt, p)[0]


def dice_flagged(gt, p) -> tuple[float, bool]:
    gt, p = _pair(gt, p)
    denom = int(gt.sum()) + int(p.sum())
    if denom == 0:
        return 1.0, True
    return 2.0 * int((gt & p).sum()) / denom, False


def sensitivity(gt, p) -> float:
    gt, p = _pair(gt, p)
    n = int(gt.sum())
    if n == 0:
        raise UndefinedMetric("sensitivity undefined for an empty ground truth")
    return int((gt & p).sum()) / n


def specificity(gt, p) -> float:
    gt, p = _pair(gt, p)
    n = int((~gt).sum())
    if n == 0:
        raise UndefinedMetric("specificity undefined for a full ground truth")
    return int((~gt & ~p).sum()) / n


def ravd(gt, p) -> float:
    gt, p = _pair(gt, p)
    n = int(gt.sum())
    if n == 0:
        raise UndefinedMetric("RAVD undefined for an empty ground truth")
    return abs(n - int(p.sum())) / n


def surface_voxels(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the volume counts as background."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, CONNECTIVITY_6, border_value=0)
    return mask & ~interior


def _surface_points(mask, spacing) -> np.ndarray:
    return np.argwhere(surface_voxels(mask)) * np.asarray(spacing, dtype=float)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point of ``a`` to its nearest point in ``b``."""
    d, _ = cKDTree(b).query(a, k=1)
    return np.asarray(d, dtype=float)


def surface_distances(gt, p, spacing=(1.0, 1.0, 1.0)) -> tuple[float, float]:
    """(MSSD, ASSD) in the units of ``spacing``."""
    gt, p = _pair(gt, p)
    sg, sp = _surface_points(gt, spacing), _surface_points(p, spacing)
    if len(sg) == 0 or len(sp) == 0:
        raise UndefinedMetric("surface distance undefined for an empty mask")
    d_gp, d_pg = _directed(sg, sp), _directed(sp, sg)
    mssd_v = max(d_gp.max(), d_pg.max())
    assd_v = (d_gp.sum() + d_pg.sum()) / (len(sg) + len(sp))
    return float(mssd_v), float(assd_v)


def mssd(gt, p, spacing=(1.0, 1.0, 1.0)) -> float:
    return surface_distances(gt, p, spacing)[0]


def assd(gt, p, spacing=(1.0, 1.0, 1.0)) -> float:
    return surface_distances(gt, p, spacing)[1]


@dataclass
class StructureMetrics:
    name: str
    dice: float | None
    sensitivity: float | None
    specificity: float | None
    mssd_mm: float | None
    assd_mm: float | None
    ravd: float | None
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"structure": self.name, **{m: getattr(self, m) for m in METRICS}, "flags": list(self.flags)}


def structure_metrics(gt, p, spacing=(1.0, 1.0, 1.0), name: str = "") -> StructureMetrics:
    """All six metrics for one structure; undefined values are None and flagged."""
    flags = []
    d, degenerate = dice_flagged(gt, p)
    if degenerate:
        flags.append("dice_both_empty")
    values = {}
    for key, fn in (("sensitivity", sensitivity), ("specificity", specificity), ("ravd", ravd)):
        try:
            values[key] = fn(gt, p)
        except UndefinedMetric:
            values[key] = None
            flags.append(f"{key}_undefined")
    try:
        values["mssd_mm"], values["assd_mm"] = surface_distances(gt, p, spacing)
    except UndefinedMetric:
        values["mssd_mm"] = values["assd_mm"] = None
        flags.append("surface_undefined")
    return StructureMetrics(name, d, values["sensitivity"], values["specificity"], values["mssd_mm"],
                            values["assd_mm"], values["ravd"], flags)


@dataclass
class MetricReport:
    structures: list[StructureMetrics]
    volume: str = ""
    domain_id: int = -1
    extra: dict = field(default_factory=dict)

    @property
    def flagged(self) -> bool:
        return any(s.flags for s in self.structures)

    def mean(self) -> dict:
        """Structure mean of each metric; undefined values are excluded."""
        out = {}
        for m in METRICS:
            vals = [getattr(s, m) for s in self.structures if getattr(s, m) is not None]
            out[m] = float(np.mean(vals)) if vals else None
        return out

    def as_dict(self) -> dict:
        return {"volume": self.volume, "domain_id": self.domain_id,
                "structures": [s.as_dict() for s in self.structures], "mean": self.mean(),
                "flagged": self.flagged, **self.extra}


def evaluate_labels(gt_labels: np.ndarray, pred_labels: np.ndarray, spacing, label_names: Sequence[str],
                    volume: str = "", domain_id: int = -1) -> MetricReport:
    if gt_labels.shape != pred_labels.shape:
        raise ValueError("label volumes differ in shape")
    rows = [structure_metrics(gt_labels == c, pred_labels == c, spacing, label_names[c])
            for c in range(1, len(label_names))]
    return MetricReport(rows, volume, domain_id)


# -------------------------------------------------------------------- stats

def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    stat = float(np.max(np.abs(cdf_a - cdf_b)))
    en = a.size * b.size / (a.size + b.size)
    p = float(special.kolmogorov(math.sqrt(en) * stat))
    return stat, min(1.0, max(0.0, p))
