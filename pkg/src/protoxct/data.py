"""Patch datasets: synthetic XCT-like volumes, sampling, labeling, splits, augmentation.

Intensities are stored as 16-bit integers in a :class:`Volume` and handled as
floats in [0, 1] everywhere else (``raw / 65535``). Patches are 64x64 tiles
cut from a single slice.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "PATCH",
    "LOW_INTENSITY",
    "SPLITS",
    "Volume",
    "VolumeSpec",
    "SyntheticTruth",
    "Patch",
    "DatasetManifest",
    "AugmentationPolicy",
    "generate_synthetic_volume",
    "matrix_median",
    "patch_means",
    "sample_patches",
    "uniform_sample_patches",
    "inspect_patches",
    "auto_label_low_intensity",
    "rebalance",
    "split",
    "augment",
    "augment_batch",
    "normalize_patch",
    "normalize_tiles",
    "write_manifest",
    "read_manifest",
    "write_patch_store",
    "read_patch_store",
    "write_volume",
    "read_volume",
]

PATCH = 64
LOW_INTENSITY = 30.0 / 255.0
SPLITS = ("train", "val", "test")
_U16 = 65535.0


@dataclass
class Volume:
    data: np.ndarray  # (depth, height, width) uint16
    volume_id: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint16:
            raise TypeError("volume data must be uint16")
        if self.data.ndim != 3:
            raise ValueError("volume must be (depth, height, width)")
        if self.data.shape[1] < PATCH or self.data.shape[2] < PATCH:
            raise ValueError(f"in-plane dims must be >= {PATCH}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def slice(self, s: int) -> np.ndarray:
        """Slice ``s`` windowed to [0, 1]."""
        return self.data[s].astype(np.float64) / _U16

    @classmethod
    def from_float(cls, arr, volume_id: int = 0) -> "Volume":
        a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
        return cls(np.round(a * _U16).astype(np.uint16), volume_id)


@dataclass
class VolumeSpec:
    """Geometry and defect content of a synthetic specimen.

    Densities count objects per million matrix voxels. ``part_scale`` sets the
    size of the bright part relative to the slice; 0 gives a pure-air volume.
    ``edge_fraction`` of the lines (with their pore clusters) and of the
    isolated pores are placed within ``edge_band`` pixels of the part boundary.
    """

    depth: int = 4
    height: int = 930
    width: int = 1485
    part_scale: float = 0.82
    holes: int = 2
    pore_density: float = 6.0
    line_density: float = 3.0
    cluster_fraction: float = 0.4
    edge_fraction: float = 0.3
    edge_band: int = 24
    air_level: float = 12 / 255
    air_noise: float = 3 / 255
    matrix_level: float = 113 / 255
    texture_std: float = 7 / 255
    matrix_noise: float = 2 / 255
    pore_level: float = 25 / 255
    line_contrast: float = 80 / 255
    line_width: tuple[float, float] = (1.5, 2.5)

    def __post_init__(self):
        if self.height < PATCH or self.width < PATCH or self.depth < 1:
            raise ValueError(f"volume dims too small: need depth >= 1 and in-plane >= {PATCH}")
        if self.pore_density < 0 or self.line_density < 0:
            raise ValueError("defect densities must be non-negative")
        if not 0.0 <= self.edge_fraction <= 1.0:
            raise ValueError("edge_fraction must lie in [0, 1]")


@dataclass
class SyntheticTruth:
    matrix: np.ndarray  # bool, part interior
    pores: np.ndarray  # bool
    lines: np.ndarray  # bool

    @property
    def defect(self) -> np.ndarray:
        return self.pores | self.lines


def _part_mask(spec: VolumeSpec, rng: np.random.Generator) -> np.ndarray:
    d, h, w = spec.depth, spec.height, spec.width
    if spec.part_scale <= 0:
        return np.zeros((d, h, w), dtype=bool)
    rr = (np.arange(h) - (h - 1) / 2) / (h / 2)
    cc = (np.arange(w) - (w - 1) / 2) / (w / 2)
    U, V = np.meshgrid(rr, cc, indexing="ij")
    theta = np.arctan2(U, V)
    radius = (np.abs(U) ** 4 + np.abs(V) ** 4) ** 0.25
    phases = rng.uniform(0, 2 * np.pi, size=3)
    amps = rng.uniform(0.02, 0.05, size=3)
    holes = []
    for _ in range(spec.holes):
        holes.append((rng.uniform(-0.4, 0.4), rng.uniform(-0.5, 0.5), rng.uniform(0.06, 0.12), rng.uniform(0.1, 0.2)))
    out = np.empty((d, h, w), dtype=bool)
    for s in range(d):
        drift = 0.01 * s
        wobble = sum(a * np.sin((i + 3) * theta + p + drift) for i, (a, p) in enumerate(zip(amps, phases)))
        m = radius < spec.part_scale * (1.0 + wobble)
        for cu, cv, ru, rv in holes:
            m &= ((U - cu) / ru) ** 2 + ((V - cv) / rv) ** 2 > 1.0
        out[s] = m
    return out


def _random_matrix_point(matrix: np.ndarray, rng, margin: int = 0):
    d, h, w = matrix.shape
    for _ in range(1000):
        s = int(rng.integers(d))
        r = int(rng.integers(margin, h - margin))
        c = int(rng.integers(margin, w - margin))
        if matrix[s, r, c]:
            return s, r, c
    return None


def _add_pore(img, pores, matrix, center, radii, level, rng):
    s0, r0, c0 = center
    rz, ry, rx = radii
    d, h, w = img.shape
    zs = slice(max(0, int(s0 - rz)), min(d, int(s0 + rz) + 1))
    ys = slice(max(0, int(r0 - ry - 2)), min(h, int(r0 + ry) + 3))
    xs = slice(max(0, int(c0 - rx - 2)), min(w, int(c0 + rx) + 3))
    Z, Y, X = np.meshgrid(np.arange(zs.start, zs.stop), np.arange(ys.start, ys.stop), np.arange(xs.start, xs.stop), indexing="ij")
    q = ((Z - s0) / max(rz, 0.5)) ** 2 + ((Y - r0) / ry) ** 2 + ((X - c0) / rx) ** 2
    # soft edge over ~1 px
    alpha = np.clip(1.5 - q * 1.0, 0.0, 1.0) * matrix[zs, ys, xs]
    img[zs, ys, xs] = img[zs, ys, xs] * (1 - alpha) + level * alpha
    pores[zs, ys, xs] |= (q <= 1.0) & matrix[zs, ys, xs]


def _add_line(img, lines, matrix, center, angle, length, half_width, depth_extent, contrast):
    s0, r0, c0 = center
    d, h, w = img.shape
    half = length / 2 + 3
    ext_r = abs(math.sin(angle)) * half + 4 * half_width + 2
    ext_c = abs(math.cos(angle)) * half + 4 * half_width + 2
    ys = slice(max(0, int(r0 - ext_r)), min(h, int(r0 + ext_r) + 1))
    xs = slice(max(0, int(c0 - ext_c)), min(w, int(c0 + ext_c) + 1))
    Y, X = np.meshgrid(np.arange(ys.start, ys.stop), np.arange(xs.start, xs.stop), indexing="ij")
    along = (X - c0) * math.cos(angle) + (Y - r0) * math.sin(angle)
    across = -(X - c0) * math.sin(angle) + (Y - r0) * math.cos(angle)
    taper = np.clip((length / 2 - np.abs(along)) / 4.0, 0.0, 1.0)
    profile = np.exp(-0.5 * (across / half_width) ** 2) * taper
    for s in range(max(0, s0 - depth_extent), min(d, s0 + depth_extent + 1)):
        m = matrix[s, ys, xs]
        img[s, ys, xs] -= contrast * profile * m
        lines[s, ys, xs] |= (profile > 0.5) & m


def generate_synthetic_volume(spec: VolumeSpec, rng: np.random.Generator, volume_id: int = 0):
    """Bright textured part on dark air with dark pores and faint line defects.

    Returns ``(Volume, SyntheticTruth)``; the truth masks mark matrix voxels
    and the exact pore and line voxels that were inserted.
    """
    d, h, w = spec.depth, spec.height, spec.width
    matrix = _part_mask(spec, rng)
    soft = ndimage.gaussian_filter(matrix.astype(np.float64), sigma=(0, 1.0, 1.0))

    img = spec.air_level + spec.air_noise * rng.standard_normal((d, h, w))
    texture = ndimage.gaussian_filter(rng.standard_normal((d, h, w)), sigma=(1.0, 4.0, 4.0))
    texture *= spec.texture_std / max(texture.std(), 1e-12)
    mat_img = spec.matrix_level + texture + spec.matrix_noise * rng.standard_normal((d, h, w))
    img = img * (1 - soft) + mat_img * soft

    pores = np.zeros_like(matrix)
    lines = np.zeros_like(matrix)
    n_matrix = int(matrix.sum())
    n_pores = int(rng.poisson(spec.pore_density * n_matrix / 1e6)) if n_matrix else 0
    n_lines = int(rng.poisson(spec.line_density * n_matrix / 1e6)) if n_matrix else 0
    band = matrix & (ndimage.distance_transform_edt(matrix, sampling=(1e6, 1.0, 1.0)) <= spec.edge_band)

    for _ in range(n_lines):
        near_edge = rng.uniform() < spec.edge_fraction and band.any()
        pt = _random_matrix_point(band if near_edge else matrix, rng, margin=8)
        if pt is None:
            break
        angle = float(rng.uniform(0, np.pi))
        length = float(rng.uniform(40, 140))
        _add_line(img, lines, matrix, pt, angle, length, float(rng.uniform(*spec.line_width)), int(rng.integers(0, 2)), spec.line_contrast)
        if rng.uniform() < spec.cluster_fraction:
            for _ in range(int(rng.integers(2, 5))):
                t = float(rng.uniform(-length / 2.5, length / 2.5))
                off = float(rng.uniform(-4, 4))
                center = (
                    pt[0],
                    pt[1] + t * math.sin(angle) + off * math.cos(angle),
                    pt[2] + t * math.cos(angle) - off * math.sin(angle),
                )
                r = float(rng.uniform(3.0, 5.0))
                _add_pore(img, pores, matrix, center, (1.0, r, r * rng.uniform(0.8, 1.3)), spec.pore_level, rng)
    for _ in range(n_pores):
        near_edge = rng.uniform() < spec.edge_fraction and band.any()
        pt = _random_matrix_point(band if near_edge else matrix, rng, margin=4)
        if pt is None:
            break
        ry = float(rng.uniform(3.0, 7.0))
        _add_pore(img, pores, matrix, pt, (float(rng.uniform(1.0, 2.5)), ry, ry * rng.uniform(0.7, 1.4)), spec.pore_level, rng)

    return Volume.from_float(img, volume_id), SyntheticTruth(matrix, pores, lines)


@dataclass
class Patch:
    id: int
    volume: int
    slice: int
    row: int
    col: int
    tile: np.ndarray
    label: int | None = None
    semantic_type: str = ""
    edge: bool = False


def matrix_median(volume: Volume) -> float:
    """Median windowed intensity of voxels brighter than the low-intensity cut."""
    v = volume.data.astype(np.float64) / _U16
    bright = v[v >= LOW_INTENSITY]
    return float(np.median(bright if bright.size else v))


def _integral(sl: np.ndarray) -> np.ndarray:
    out = np.zeros((sl.shape[0] + 1, sl.shape[1] + 1))
    out[1:, 1:] = sl.cumsum(0).cumsum(1)
    return out


def patch_means(volume: Volume, slices, rows, cols) -> np.ndarray:
    """Mean windowed intensity of the 64x64 windows at the given origins."""
    slices, rows, cols = (np.asarray(a, dtype=np.int64) for a in (slices, rows, cols))
    out = np.empty(slices.size)
    for s in np.unique(slices):
        ii = _integral(volume.slice(int(s)))
        m = slices == s
        r, c = rows[m], cols[m]
        tot = ii[r + PATCH, c + PATCH] - ii[r, c + PATCH] - ii[r + PATCH, c] + ii[r, c]
        out[m] = tot / (PATCH * PATCH)
    return out


def _cut(volume: Volume, s, r, c) -> np.ndarray:
    return volume.data[s, r:r + PATCH, c:c + PATCH].astype(np.float64) / _U16


def _make_patches(volume, s, r, c, start_id):
    return [
        Patch(start_id + i, volume.volume_id, int(s[i]), int(r[i]), int(c[i]), _cut(volume, s[i], r[i], c[i]))
        for i in range(len(s))
    ]


def sample_patches(
    volume: Volume,
    n: int,
    rng: np.random.Generator,
    scale: float = 0.1,
    median: float | None = None,
    start_id: int = 0,
) -> list[Patch]:
    """Draw ``n`` in-bounds patches, favouring means near the matrix median.

    Origins are proposed uniformly and accepted with probability
    ``exp(-|mean - median| / scale)``, so the sampling density is
    proportional to that weight.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    d, h, w = volume.shape
    med = matrix_median(volume) if median is None else median
    integrals = {}
    got_s, got_r, got_c = [], [], []
    remaining = n
    while remaining > 0:
        m = max(4 * remaining, 64)
        s = rng.integers(0, d, m)
        r = rng.integers(0, h - PATCH + 1, m)
        c = rng.integers(0, w - PATCH + 1, m)
        u = rng.uniform(size=m)
        means = np.empty(m)
        for sl in np.unique(s):
            if sl not in integrals:
                integrals[sl] = _integral(volume.slice(int(sl)))
            ii = integrals[sl]
            k = s == sl
            rr, cc = r[k], c[k]
            means[k] = (ii[rr + PATCH, cc + PATCH] - ii[rr, cc + PATCH] - ii[rr + PATCH, cc] + ii[rr, cc]) / PATCH**2
        keep = np.flatnonzero(u < np.exp(-np.abs(means - med) / scale))[:remaining]
        got_s.append(s[keep])
        got_r.append(r[keep])
        got_c.append(c[keep])
        remaining -= keep.size
    s, r, c = (np.concatenate(a) for a in (got_s, got_r, got_c))
    return _make_patches(volume, s, r, c, start_id)


def uniform_sample_patches(volume: Volume, n: int, rng: np.random.Generator, start_id: int = 0) -> list[Patch]:
    d, h, w = volume.shape
    s = rng.integers(0, d, n)
    r = rng.integers(0, h - PATCH + 1, n)
    c = rng.integers(0, w - PATCH + 1, n)
    return _make_patches(volume, s, r, c, start_id)


def inspect_patches(
    patches: Iterable[Patch],
    truth: SyntheticTruth,
    min_defect_px: int = 20,
    pure_fraction: float = 0.02,
    min_sliver: float = 0.0,
    min_component: int | None = None,
    max_defect_air: float = 1.0,
) -> tuple[list[Patch], list[Patch]]:
    """Label patches from ground-truth masks, standing in for manual inspection.

    A patch is a defect when it holds at least ``min_defect_px`` pore plus
    line voxels, non-defect when it holds none. Anything in between is
    returned in the second list as inconclusive. Without ``min_component`` a
    defect's type lists every component (pores, lines) reaching
    ``min_defect_px`` voxels, falling back to the larger one. With it, each
    component must be absent or hold at least ``min_component`` voxels, and
    patches with a trace of either are inconclusive. Defects in patches with
    more than ``max_defect_air`` air are inconclusive too. Non-defect types
    come from the air fraction.
    Non-defect patches holding a thin sliver of air or of matrix (less than
    ``min_sliver`` of the patch but more than ``pure_fraction``) are also
    inconclusive: after per-patch normalization a sliver can pass for a pore.
    """
    decided, unclear = [], []
    for p in patches:
        sl = (p.slice, slice(p.row, p.row + PATCH), slice(p.col, p.col + PATCH))
        n_pore = int(truth.pores[sl].sum())
        n_line = int(truth.lines[sl].sum())
        air = 1.0 - float(truth.matrix[sl].mean())
        edge = pure_fraction < air < 1.0 - pure_fraction
        if n_pore == 0 and n_line == 0:
            if air >= 1.0 - pure_fraction:
                t = "air"
            elif air <= pure_fraction:
                t = "matrix"
            elif air < min_sliver or air > 1.0 - min_sliver:
                unclear.append(p)
                continue
            else:
                t = "matrix+air"
            decided.append(replace(p, label=0, semantic_type=t, edge=edge))
        elif n_pore + n_line >= min_defect_px:
            if air > max_defect_air:
                unclear.append(p)
                continue
            if min_component is None:
                has_pores, has_lines = n_pore >= min_defect_px, n_line >= min_defect_px
                if not (has_pores or has_lines):
                    has_pores, has_lines = n_pore >= n_line, n_line > n_pore
            else:
                if 0 < n_pore < min_component or 0 < n_line < min_component:
                    unclear.append(p)
                    continue
                has_pores, has_lines = n_pore > 0, n_line > 0
            t = "pores+lines" if has_pores and has_lines else ("pores" if has_pores else "lines")
            decided.append(replace(p, label=1, semantic_type=t, edge=edge))
        else:
            unclear.append(p)
    return decided, unclear


def auto_label_low_intensity(patches: Iterable[Patch], cut: float = LOW_INTENSITY) -> tuple[list[Patch], list[Patch]]:
    """Split off patches whose mean is strictly below ``cut`` and label them 0."""
    auto, rest = [], []
    for p in patches:
        if float(np.mean(p.tile)) < cut:
            auto.append(replace(p, label=0, semantic_type=p.semantic_type or "air"))
        else:
            rest.append(p)
    return auto, rest


@dataclass
class DatasetManifest:
    patches: list[Patch]
    splits: dict[int, str] = field(default_factory=dict)
    seed: int | None = None
    rebalance_ratio: float | None = None

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def ids(self) -> list[int]:
        return [p.id for p in self.patches]

    def labels(self, which: str | None = None) -> np.ndarray:
        return np.array([p.label for p in self.select(which)], dtype=np.int64)

    def tiles(self, which: str | None = None) -> np.ndarray:
        sel = self.select(which)
        if not sel:
            return np.zeros((0, PATCH, PATCH))
        return np.stack([p.tile for p in sel]).astype(np.float64)

    def select(self, which: str | None = None) -> list[Patch]:
        if which is None:
            return list(self.patches)
        return [p for p in self.patches if self.splits.get(p.id) == which]

    def class_counts(self, which: str | None = None) -> tuple[int, int]:
        y = [p.label for p in self.select(which)]
        return sum(1 for v in y if v == 0), sum(1 for v in y if v == 1)

    def ratio(self) -> float:
        n0, n1 = self.class_counts()
        return n0 / n1 if n1 else math.inf


def rebalance(
    manifest: DatasetManifest,
    target_ratio: float,
    rng: np.random.Generator,
    median: float | None = None,
) -> DatasetManifest:
    """Sub-sample non-defect patches down to ``target_ratio`` non-defect per defect.

    Non-defect patches are kept with probability proportional to the distance
    of their mean from the matrix median; every defect patch is kept.
    """
    pos = [p for p in manifest.patches if p.label == 1]
    neg = [p for p in manifest.patches if p.label == 0]
    if not pos:
        raise ValueError("cannot rebalance empty positive class")
    want = int(round(target_ratio * len(pos)))
    if len(neg) <= want:
        out = replace(manifest, patches=list(manifest.patches))
        out.rebalance_ratio = len(neg) / len(pos)
        return out
    means = np.array([float(np.mean(p.tile)) for p in neg])
    if median is None:
        bright = means[means >= LOW_INTENSITY]
        median = float(np.median(bright if bright.size else means))
    w = np.abs(means - median) + 1e-9
    chosen = rng.choice(len(neg), size=want, replace=False, p=w / w.sum())
    keep_ids = {neg[i].id for i in chosen} | {p.id for p in pos}
    kept = [p for p in manifest.patches if p.id in keep_ids]
    return DatasetManifest(kept, {}, manifest.seed, want / len(pos))


def _allocate(n: int, fractions: Sequence[float], totals: np.ndarray, done: np.ndarray) -> np.ndarray:
    exact = n * np.asarray(fractions)
    base = np.floor(exact).astype(np.int64)
    left = n - int(base.sum())
    deficit = totals - done - base
    rem = exact - base
    order = sorted(range(len(fractions)), key=lambda j: (-deficit[j], -rem[j], j))
    for j in order[:left]:
        base[j] += 1
    return base


def split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.1, 0.1),
    rng: np.random.Generator | None = None,
) -> DatasetManifest:
    """Stratified train/val/test assignment.

    Each class gets floor(n_c * f) records per split, with the leftovers sent
    to whichever splits lag furthest behind their overall target, so per-class
    counts are within one record of exact.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError("fractions must be three non-negative values summing to 1")
    if rng is None:
        rng = np.random.default_rng(0)
    n = len(manifest.patches)
    totals = np.floor(n * np.asarray(fractions)).astype(np.int64)
    for j in np.argsort(-(n * np.asarray(fractions) - totals), kind="stable")[: n - int(totals.sum())]:
        totals[j] += 1
    done = np.zeros(3, dtype=np.int64)
    assign: dict[int, str] = {}
    for c in (0, 1):
        ids = np.array([p.id for p in manifest.patches if p.label == c], dtype=np.int64)
        if ids.size == 0:
            continue
        ids = ids[rng.permutation(ids.size)]
        counts = _allocate(ids.size, fractions, totals, done)
        done += counts
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for j, name in enumerate(SPLITS):
            for i in ids[bounds[j]:bounds[j + 1]]:
                assign[int(i)] = name
    unlabeled = [p.id for p in manifest.patches if p.label not in (0, 1)]
    if unlabeled:
        raise ValueError(f"cannot split unlabeled patches: {unlabeled[:5]}")
    return DatasetManifest(list(manifest.patches), assign, manifest.seed, manifest.rebalance_ratio)


@dataclass(frozen=True)
class AugmentationPolicy:
    flip_p: float = 0.5
    rotate_p: float = 0.25
    max_degrees: float = 15.0
    normalize: bool = True

    def __post_init__(self):
        if not (0 <= self.flip_p <= 1 and 0 <= self.rotate_p <= 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if not 0 < self.max_degrees <= 45:
            raise ValueError("rotation bound must lie in (0, 45]")


def normalize_patch(tile) -> np.ndarray:
    """Zero mean, unit population variance; constant tiles map to zeros."""
    t = np.asarray(tile, dtype=np.float64)
    mu = t.mean()
    sd = t.std()
    if sd <= 1e-12 * max(1.0, abs(mu)):
        return np.zeros_like(t)
    return (t - mu) / sd


def normalize_tiles(tiles) -> np.ndarray:
    t = np.asarray(tiles, dtype=np.float64)
    mu = t.mean(axis=(-2, -1), keepdims=True)
    sd = t.std(axis=(-2, -1), keepdims=True)
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    out = (t - mu) / np.where(flat, 1.0, sd)
    return np.where(flat, 0.0, out)


def rotate_tile(tile: np.ndarray, degrees: float) -> np.ndarray:
    if degrees == 0.0:
        return np.array(tile, dtype=np.float64, copy=True)
    return ndimage.rotate(tile, degrees, reshape=False, order=1, mode="nearest")


def _augment_tile(tile: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    t = np.asarray(tile, dtype=np.float64)
    u = rng.uniform(size=4)
    if u[0] < policy.flip_p:
        t = t[:, ::-1]
    if u[1] < policy.flip_p:
        t = t[::-1, :]
    if u[2] < policy.rotate_p:
        t = rotate_tile(t, policy.max_degrees * (2.0 * u[3] - 1.0))
    t = np.ascontiguousarray(t)
    return normalize_patch(t) if policy.normalize else t


def augment(patch: Patch, policy: AugmentationPolicy, rng: np.random.Generator) -> Patch:
    """Random flips, then an occasional small rotation, then optional normalization."""
    return replace(patch, tile=_augment_tile(patch.tile, policy, rng))


def augment_batch(tiles, policy: AugmentationPolicy, seed: int, indices: Sequence[int]) -> np.ndarray:
    """Augment a stack of tiles, each with its own stream derived from ``(seed, index)``."""
    from .numerics import derive_rng

    return np.stack([_augment_tile(t, policy, derive_rng(seed, int(i))) for t, i in zip(tiles, indices)])


# file formats -------------------------------------------------------------------

MANIFEST_HEADER = ["id", "volume", "slice", "row", "col", "label", "split", "semantic_type"]


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        for p in manifest.patches:
            label = "" if p.label is None else p.label
            wr.writerow([p.id, p.volume, p.slice, p.row, p.col, label, manifest.splits.get(p.id, ""), p.semantic_type])


def read_manifest(path) -> DatasetManifest:
    """Read records back; tiles are left empty until a patch store is attached."""
    patches, splits = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in rd:
            pid = int(row[0])
            label = int(row[5]) if row[5] != "" else None
            patches.append(
                Patch(pid, int(row[1]), int(row[2]), int(row[3]), int(row[4]), np.zeros((0, 0)), label, row[7])
            )
            if row[6]:
                splits[pid] = row[6]
    return DatasetManifest(patches, splits)


def write_patch_store(tiles, path) -> None:
    t = np.asarray(tiles, dtype="<f4")
    if t.ndim != 3 or t.shape[1:] != (PATCH, PATCH):
        t = t.reshape(-1, PATCH, PATCH)
    with open(path, "wb") as fh:
        fh.write(b"PPAT")
        fh.write(struct.pack("<III", 1, t.shape[0], PATCH))
        fh.write(t.tobytes())


def read_patch_store(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"PPAT":
        raise ValueError(f"{path}: bad magic {raw[:4]!r}, expected b'PPAT'")
    version, count, side = struct.unpack_from("<III", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    need = 16 + count * side * side * 4
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    return np.frombuffer(raw, "<f4", count * side * side, 16).reshape(count, side, side).astype(np.float64)


def write_volume(volume: Volume, path) -> None:
    path = Path(path)
    path.write_bytes(volume.data.astype("<u2").tobytes())
    d, h, w = volume.shape
    Path(str(path) + ".json").write_text(json.dumps({"depth": d, "height": h, "width": w}) + "\n")


def read_volume(path, volume_id: int = 0) -> Volume:
    path = Path(path)
    meta = json.loads(Path(str(path) + ".json").read_text())
    d, h, w = meta["depth"], meta["height"], meta["width"]
    raw = path.read_bytes()
    if len(raw) != d * h * w * 2:
        raise ValueError(f"{path}: expected {d * h * w * 2} bytes, found {len(raw)}")
    return Volume(np.frombuffer(raw, "<u2").reshape(d, h, w).astype(np.uint16), volume_id)
