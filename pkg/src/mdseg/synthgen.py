"""Synthetic multi-domain volumes, preprocessing and 2D augmentation.

Each domain has its own procedural "anatomy" (shape family), its own label
set and its own intensity statistics, so that a single network has to learn
several segmentation tasks over several intensity distributions at once.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage


class ShapeFamily(str, enum.Enum):
    ELLIPSOID_CLUSTER = "ellipsoid_cluster"
    PLATE_ROD = "plate_rod"
    THIN_SHELL = "thin_shell"


class BatchMode(str, enum.Enum):
    SHARED_SPLIT = "shared_split"
    SINGLE_DOMAIN = "single_domain"


@dataclass(frozen=True)
class DomainSpec:
    domain_id: int
    label_names: tuple[str, ...]
    structure_means: tuple[float, ...]
    shape_family: ShapeFamily = ShapeFamily.ELLIPSOID_CLUSTER
    contrast: float = 1.0
    noise_std: float = 0.1
    texture_std: float = 0.05
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "structure_means", tuple(float(m) for m in self.structure_means))
        object.__setattr__(self, "shape_family", ShapeFamily(self.shape_family))
        if self.domain_id < 0:
            raise ValueError("domain_id must be non-negative")
        if len(self.label_names) < 2:
            raise ValueError("a domain needs background plus at least one structure")
        if len(self.structure_means) != len(self.label_names):
            raise ValueError("one mean intensity per label (background included) is required")
        if len(set(self.structure_means)) != len(self.structure_means):
            raise ValueError("mean intensities must be distinct within a domain")
        if self.noise_std < 0 or self.texture_std < 0:
            raise ValueError("noise levels must be non-negative")
        if self.contrast <= 0:
            raise ValueError("contrast must be positive")

    @property
    def n_classes(self) -> int:
        return len(self.label_names)

    def to_dict(self) -> dict:
        return {
            "domain_id": self.domain_id,
            "name": self.name,
            "label_names": list(self.label_names),
            "structure_means": list(self.structure_means),
            "shape_family": self.shape_family.value,
            "contrast": self.contrast,
            "noise_std": self.noise_std,
            "texture_std": self.texture_std,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "DomainSpec":
        return cls(**dict(d))


def default_domains() -> list[DomainSpec]:
    """Three joint-like domains: 3, 4 and 2 structures with distinct contrasts."""
    return [
        DomainSpec(0, ("background", "calx", "talx", "tibx"), (0.0, 1.0, 1.8, 2.6),
                   ShapeFamily.ELLIPSOID_CLUSTER, contrast=1.0, noise_std=0.25, name="ankle_like"),
        DomainSpec(1, ("background", "femx", "fibx", "patx", "tibx"), (2.0, 0.4, 0.9, 3.2, 1.4),
                   ShapeFamily.PLATE_ROD, contrast=1.5, noise_std=0.3, name="knee_like"),
        DomainSpec(2, ("background", "humx", "scax"), (1.0, 3.0, -0.5),
                   ShapeFamily.THIN_SHELL, contrast=0.7, noise_std=0.2, name="shoulder_like"),
    ]


@dataclass
class LabeledVolume:
    image: np.ndarray
    labels: np.ndarray
    spacing_mm: tuple[float, float, float]
    domain_id: int
    label_names: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.label_names = tuple(self.label_names)
        if self.image.ndim != 3 or self.image.shape != self.labels.shape:
            raise ValueError("image and labels must be 3D arrays of identical shape")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError("spacing must be three positive values")
        if self.label_names and self.labels.size and int(self.labels.max()) >= len(self.label_names):
            raise ValueError("label value outside the domain's label set")

    @property
    def n_classes(self) -> int:
        return len(self.label_names)


@dataclass
class SlicePair:
    image: np.ndarray  # (H, W)
    target: np.ndarray  # (C, H, W) one-hot
    domain_id: int

    @property
    def labels(self) -> np.ndarray:
        return self.target.argmax(0)


@dataclass
class MultiDomainBatch:
    slices: list[SlicePair]
    per_domain_count: dict[int, int] = field(default_factory=dict)

    def by_domain(self) -> dict[int, list[SlicePair]]:
        out: dict[int, list[SlicePair]] = {}
        for s in self.slices:
            out.setdefault(s.domain_id, []).append(s)
        return out


# ---------------------------------------------------------------- generation

def _rotation(rng: np.random.Generator, max_deg: float) -> np.ndarray:
    a, b, c = np.deg2rad(rng.uniform(-max_deg, max_deg, size=3))
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rz = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _ellipsoid(grid, center, radii, rot, shell: float = 0.0) -> np.ndarray:
    pts = np.stack([g - c for g, c in zip(grid, center)], axis=-1) @ rot
    r = np.sqrt(sum((pts[..., i] / radii[i]) ** 2 for i in range(3)))
    if shell > 0:
        return (r <= 1.0) & (r >= 1.0 - shell)
    return r <= 1.0


def _structure_recipe(family: ShapeFamily, index: int, shape, rng: np.random.Generator):
    """Center, radii, rotation and shell fraction of structure ``index``."""
    z, y, x = shape
    scale = np.array([z, y, x], dtype=float)
    margin = 0.22
    center = rng.uniform(margin, 1 - margin, size=3) * scale
    if family is ShapeFamily.ELLIPSOID_CLUSTER:
        radii = rng.uniform(0.11, 0.17, size=3) * scale
        return center, radii, _rotation(rng, 30), 0.0
    if family is ShapeFamily.PLATE_ROD:
        if index == 0:
            radii = np.array([rng.uniform(0.08, 0.11), rng.uniform(0.2, 0.26), rng.uniform(0.2, 0.26)]) * scale
            return center, radii, _rotation(rng, 15), 0.0
        radii = np.array([rng.uniform(0.22, 0.3), rng.uniform(0.07, 0.1), rng.uniform(0.07, 0.1)]) * scale
        return center, radii, _rotation(rng, 20), 0.0
    # thin shell: first structure is an ellipsoidal shell, the rest are solid blobs
    if index == 0:
        center = rng.uniform(0.45, 0.55, size=3) * scale
        radii = rng.uniform(0.22, 0.27, size=3) * scale
        return center, radii, _rotation(rng, 20), 0.35
    radii = rng.uniform(0.1, 0.14, size=3) * scale
    return center, radii, _rotation(rng, 30), 0.0


def _place_structures(spec: DomainSpec, shape, rng, max_overlap: float, max_attempts: int) -> np.ndarray:
    grid = np.meshgrid(*[np.arange(n, dtype=float) + 0.5 for n in shape], indexing="ij")
    labels = np.zeros(shape, dtype=np.uint8)
    border = np.ones(shape, dtype=bool)
    border[2:-2, 2:-2, 2:-2] = False
    for idx in range(spec.n_classes - 1):
        for _ in range(max_attempts):
            center, radii, rot, shell = _structure_recipe(spec.shape_family, idx, shape, rng)
            mask = _ellipsoid(grid, center, radii, rot, shell)
            size = int(mask.sum())
            if size < 8 or (mask & border).any():
                continue
            taken = mask & (labels > 0)
            if taken.sum() > max_overlap * size:
                continue
            free = mask & ~taken
            _, n_comp = ndimage.label(free, structure=np.ones((3, 3, 3)))
            if n_comp != 1:
                continue
            labels[free] = idx + 1
            break
        else:
            raise ValueError(
                f"could not place structure {idx + 1} of domain {spec.domain_id} in shape {tuple(shape)}; "
                "volume too small for the configured overlap limit"
            )
    return labels


def _render_image(spec: DomainSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    means = np.asarray(spec.structure_means)
    image = means[labels]
    if spec.texture_std > 0:
        texture = ndimage.gaussian_filter(rng.standard_normal(labels.shape), sigma=2.0)
        texture /= texture.std() + 1e-12
        image = image + spec.texture_std * texture
    image = spec.contrast * image
    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=labels.shape)
    return image.astype(np.float32)


def generate_dataset(
    spec: DomainSpec,
    n_volumes: int,
    volume_shape: Sequence[int],
    seed: int,
    spacing_mm: Sequence[float] = (1.0, 1.0, 1.0),
    max_overlap: float = 0.0,
    max_attempts: int = 200,
) -> list[LabeledVolume]:
    """Procedurally generate ``n_volumes`` labelled volumes for one domain.

    Every structure is present and 26-connected in every volume. The output
    is a pure function of ``(spec, n_volumes, volume_shape, seed)``.
    """
    shape = tuple(int(s) for s in volume_shape)
    if n_volumes < 1:
        raise ValueError("n_volumes must be >= 1")
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError("volume_shape needs three components, each >= 16")
    volumes = []
    for i in range(n_volumes):
        rng = np.random.default_rng([seed, spec.domain_id, i])
        labels = _place_structures(spec, shape, rng, max_overlap, max_attempts)
        image = _render_image(spec, labels, rng)
        volumes.append(LabeledVolume(image, labels, tuple(spacing_mm), spec.domain_id,
                                     spec.label_names, name=f"d{spec.domain_id}_v{i:03d}"))
    return volumes


# ------------------------------------------------------------- preprocessing

def normalize_intensity(volume: LabeledVolume) -> LabeledVolume:
    """Zero-mean, unit (population) variance image; labels untouched."""
    img = np.asarray(volume.image, dtype=np.float64)
    if img.size < 2:
        raise ValueError("cannot normalize an image with fewer than 2 voxels")
    mu = img.mean()
    sd = img.std()
    if not sd > 0:
        raise ValueError("cannot normalize a zero-variance image")
    out = (img - mu) / sd
    return LabeledVolume(out, volume.labels.copy(), volume.spacing_mm, volume.domain_id,
                         volume.label_names, volume.name)


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((n_classes,) + labels.shape, dtype=np.float32)
    np.put_along_axis(out, labels[None].astype(np.int64), 1.0, axis=0)
    return out


def resize_image(image: np.ndarray, target_hw: Sequence[int]) -> np.ndarray:
    """Bilinear resize of a stack of 2D images, shape (..., H, W)."""
    h, w = target_hw
    if image.shape[-2:] == (h, w):
        return image.copy()
    t = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float64)
    lead = t.shape[:-2]
    t = t.reshape(-1, 1, *t.shape[-2:])
    t = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
    return t.reshape(*lead, h, w).numpy().astype(image.dtype)


def resize_labels(labels: np.ndarray, target_hw: Sequence[int]) -> np.ndarray:
    """Nearest-neighbour resize of a stack of 2D label maps, shape (..., H, W)."""
    h, w = target_hw
    if labels.shape[-2:] == (h, w):
        return labels.copy()
    hs, ws = labels.shape[-2:]
    rows = np.minimum((np.arange(h) * (hs / h)).astype(np.int64), hs - 1)
    cols = np.minimum((np.arange(w) * (ws / w)).astype(np.int64), ws - 1)
    return labels[..., rows[:, None], cols[None, :]]


def slice_and_resize(volume: LabeledVolume, target_hw: Sequence[int]) -> list[SlicePair]:
    h, w = (int(v) for v in target_hw)
    if min(h, w) < 16:
        raise ValueError("target dims must be >= 16")
    n_classes = volume.n_classes or int(volume.labels.max()) + 1
    images = resize_image(np.asarray(volume.image, dtype=np.float32), (h, w))
    labels = resize_labels(volume.labels, (h, w))
    return [SlicePair(images[z], one_hot(labels[z], n_classes), volume.domain_id)
            for z in range(images.shape[0])]


# -------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentParams:
    angle_deg: float = 0.0
    shift_frac: tuple[float, float] = (0.0, 0.0)
    flip_rows: bool = False
    flip_cols: bool = False

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls()

    @classmethod
    def sample(cls, seed, max_angle: float = 22.5, max_shift: float = 0.1) -> "AugmentParams":
        rng = np.random.default_rng(seed)
        angle = float(rng.uniform(-max_angle, max_angle))
        shift = tuple(float(v) for v in rng.uniform(-max_shift, max_shift, size=2))
        flips = rng.random(2) < 0.5
        return cls(angle, shift, bool(flips[0]), bool(flips[1]))

    @property
    def is_identity(self) -> bool:
        return self.angle_deg == 0 and self.shift_frac == (0.0, 0.0) and not self.flip_rows and not self.flip_cols


def _warp(arr: np.ndarray, p: AugmentParams, order: int, cval: float) -> np.ndarray:
    h, w = arr.shape
    if p.angle_deg != 0 or p.shift_frac != (0.0, 0.0):
        a = math.radians(p.angle_deg)
        rot = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        shift = np.array([p.shift_frac[0] * h, p.shift_frac[1] * w])
        # output coordinate o maps to input rot^T (o - center - shift) + center
        matrix = rot.T
        offset = center - matrix @ (center + shift)
        arr = ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode="constant",
                                       cval=cval, prefilter=False)
    if p.flip_rows:
        arr = arr[::-1, :]
    if p.flip_cols:
        arr = arr[:, ::-1]
    return np.ascontiguousarray(arr)


def apply_augmentation(sl: SlicePair, params: AugmentParams, image_order: int = 1) -> SlicePair:
    """Apply one geometric transform to image and target in lockstep."""
    if params.is_identity:
        return SlicePair(sl.image.copy(), sl.target.copy(), sl.domain_id)
    image = _warp(np.asarray(sl.image, dtype=np.float64), params, image_order, float(sl.image.min()))
    labels = _warp(sl.labels.astype(np.float64), params, 0, 0.0)
    target = one_hot(np.rint(labels).astype(np.int64), sl.target.shape[0])
    return SlicePair(image.astype(sl.image.dtype), target, sl.domain_id)


def augment(sl: SlicePair, seed) -> SlicePair:
    """Random rotation (+-22.5 deg), shift (+-10 %) and flips, each flip with p=0.5."""
    return apply_augmentation(sl, AugmentParams.sample(seed))


# ----------------------------------------------------------------- batching

class BatchSampler:
    """Epoch-wise batch composition over per-domain slice pools.

    In ``shared_split`` mode every batch holds ``batch_size / K`` slices of
    each domain. Pools are visited in a fresh permutation each epoch; a pool
    shorter than the epoch is re-permuted when exhausted.
    """

    def __init__(self, pools: Mapping[int, Sequence[SlicePair]], batch_size: int,
                 mode: BatchMode | str = BatchMode.SHARED_SPLIT, seed: int = 0, domain: int | None = None):
        self.pools = {int(k): list(v) for k, v in pools.items()}
        self.batch_size = int(batch_size)
        self.mode = BatchMode(mode)
        self.seed = seed
        if not self.pools or any(len(v) == 0 for v in self.pools.values()):
            raise ValueError("every domain pool must be non-empty")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode is BatchMode.SHARED_SPLIT:
            if self.batch_size % len(self.pools):
                raise ValueError(f"batch size {batch_size} is not divisible by {len(self.pools)} domains")
            self.per_domain = self.batch_size // len(self.pools)
            self.domain = None
        else:
            if domain is None:
                if len(self.pools) != 1:
                    raise ValueError("single_domain mode needs an explicit domain")
                domain = next(iter(self.pools))
            if domain not in self.pools:
                raise ValueError(f"unknown domain {domain}")
            self.domain = int(domain)
            self.per_domain = self.batch_size

    def __len__(self) -> int:
        if self.mode is BatchMode.SHARED_SPLIT:
            return math.ceil(max(len(v) for v in self.pools.values()) / self.per_domain)
        return math.ceil(len(self.pools[self.domain]) / self.per_domain)

    def _order(self, k: int, n_needed: int, rng: np.random.Generator) -> np.ndarray:
        n = len(self.pools[k])
        reps = [rng.permutation(n) for _ in range(math.ceil(n_needed / n))]
        return np.concatenate(reps)[:n_needed]

    def epoch(self, epoch: int = 0) -> Iterator[MultiDomainBatch]:
        rng = np.random.default_rng([self.seed, epoch])
        n_batches = len(self)
        domains = sorted(self.pools) if self.domain is None else [self.domain]
        if self.mode is BatchMode.SINGLE_DOMAIN:
            order = rng.permutation(len(self.pools[self.domain]))
            for b in range(n_batches):
                idx = order[b * self.per_domain:(b + 1) * self.per_domain]
                slices = [self.pools[self.domain][i] for i in idx]
                yield MultiDomainBatch(slices, {self.domain: len(slices)})
            return
        orders = {k: self._order(k, n_batches * self.per_domain, rng) for k in domains}
        for b in range(n_batches):
            slices = []
            for k in domains:
                idx = orders[k][b * self.per_domain:(b + 1) * self.per_domain]
                slices.extend(self.pools[k][i] for i in idx)
            yield MultiDomainBatch(slices, {k: self.per_domain for k in domains})


def compose_batch(pools: Mapping[int, Sequence[SlicePair]], batch_size: int,
                  mode: BatchMode | str = BatchMode.SHARED_SPLIT, seed: int = 0,
                  domain: int | None = None) -> MultiDomainBatch:
    """One batch sampled without replacement (the first batch of a seeded epoch)."""
    sampler = BatchSampler(pools, batch_size, mode, seed, domain)
    mode = BatchMode(mode)
    if mode is BatchMode.SINGLE_DOMAIN and len(sampler.pools[sampler.domain]) < batch_size:
        raise ValueError("pool smaller than the requested batch")
    if mode is BatchMode.SHARED_SPLIT and min(len(v) for v in sampler.pools.values()) < sampler.per_domain:
        raise ValueError("a pool is smaller than its share of the batch")
    return next(sampler.epoch(0))
