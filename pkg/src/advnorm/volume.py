"""Volumes, patch-grid geometry, foreground sampling and overlap-averaged reconstruction.

Conventions used throughout the package:

* image arrays are channel-major ``(C, X, Y, Z)`` float32; single-channel
  data may be passed as a bare 3D array and is promoted to ``C=1``,
* label arrays are ``(X, Y, Z)`` uint8 with classes
  ``0=BG, 1=WM, 2=GM, 3=CSF``,
* spacing is millimetres per voxel along ``(x, y, z)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.ndimage import map_coordinates

N_CLASSES = 4
BG, WM, GM, CSF = 0, 1, 2, 3
CLASS_NAMES = ("BG", "WM", "GM", "CSF")

DEFAULT_PATCH = (32, 32, 32)
DEFAULT_STRIDE = (8, 8, 8)


class VolumeError(ValueError):
    """Raised when a volume, grid or reconstruction contract is violated."""


def _as_triple(v) -> tuple[int, int, int]:
    if np.isscalar(v):
        return (int(v),) * 3
    t = tuple(int(x) for x in v)
    if len(t) != 3:
        raise VolumeError(f"expected a scalar or 3 values, got {v!r}")
    return t


@dataclass
class Volume:
    """A (multi-channel) 3D intensity grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr[None]
        if arr.ndim != 4:
            raise VolumeError(f"expected 3D or 4D (C,X,Y,Z) data, got {arr.ndim}D")
        if min(arr.shape) < 1:
            raise VolumeError(f"all dimensions must be >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise VolumeError("volume contains non-finite values")
        self.data = arr
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise VolumeError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        """Spatial (X, Y, Z) extent, excluding the channel axis."""
        return self.data.shape[1:]

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        """Voxel count along the y axis."""
        return self.data.shape[2]

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.spacing)


@dataclass
class LabeledVolume:
    """A volume together with a per-voxel class map over {BG, WM, GM, CSF}."""

    volume: Volume
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.shape != self.volume.shape:
            raise VolumeError(
                f"label shape {lab.shape} does not match volume shape {self.volume.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= N_CLASSES):
            raise VolumeError(
                f"labels must lie in [0, {N_CLASSES - 1}], got range "
                f"[{lab.min()}, {lab.max()}]")
        self.labels = lab.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.volume.shape

    def copy(self) -> "LabeledVolume":
        return LabeledVolume(self.volume.copy(), self.labels.copy())


@dataclass
class PatchGrid:
    """Regular overlapping patch lattice covering a volume."""

    shape: tuple[int, int, int]
    patch: tuple[int, int, int]
    stride: tuple[int, int, int]
    origins: list[tuple[int, int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.origins)


def axis_offsets(length: int, patch: int, stride: int) -> list[int]:
    """Offsets {0, stride, 2*stride, ...} plus a clamped final origin.

    The final origin ``length - patch`` is appended whenever the regular
    lattice does not land exactly on it, so the axis is always fully covered.
    """
    if patch > length:
        raise VolumeError(f"patch {patch} exceeds axis length {length}")
    if stride < 1:
        raise VolumeError(f"stride must be >= 1, got {stride}")
    if stride > patch:
        # a lattice with stride > patch leaves gaps, breaking full coverage
        raise VolumeError(f"stride {stride} exceeds patch size {patch}")
    offs = list(range(0, length - patch + 1, stride))
    if offs[-1] != length - patch:
        offs.append(length - patch)
    return offs


def patch_grid(shape, patch=DEFAULT_PATCH, stride=DEFAULT_STRIDE) -> PatchGrid:
    """Build the covering patch lattice for a volume shape."""
    shape, patch, stride = _as_triple(shape), _as_triple(patch), _as_triple(stride)
    for ax in range(3):
        if patch[ax] > shape[ax]:
            raise VolumeError(
                f"patch {patch} does not fit into shape {shape} "
                f"(axis {ax}: {patch[ax]} > {shape[ax]})")
    per_axis = [axis_offsets(shape[ax], patch[ax], stride[ax]) for ax in range(3)]
    origins = [tuple(o) for o in product(*per_axis)]
    return PatchGrid(shape=shape, patch=patch, stride=stride, origins=origins)


def extract_patch(v, origin, size):
    """Copy a sub-box out of a Volume or LabeledVolume.

    Returns the same type as the input; mutating the result never touches
    the source.
    """
    origin, size = _as_triple(origin), _as_triple(size)
    if isinstance(v, LabeledVolume):
        vol = extract_patch(v.volume, origin, size)
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        return LabeledVolume(vol, v.labels[sl].copy())
    if not isinstance(v, Volume):
        raise VolumeError(f"expected Volume or LabeledVolume, got {type(v).__name__}")
    for ax in range(3):
        if origin[ax] < 0 or origin[ax] + size[ax] > v.shape[ax]:
            raise VolumeError(
                f"patch at origin {origin} with size {size} leaves volume "
                f"of shape {v.shape} (axis {ax})")
    sl = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(origin, size))
    return Volume(v.data[sl].copy(), v.spacing)


def clamp_origin(center, patch, shape) -> tuple[int, int, int]:
    """Origin of the patch box centered on ``center``, clamped inside the volume."""
    return tuple(
        int(np.clip(center[ax] - patch[ax] // 2, 0, shape[ax] - patch[ax]))
        for ax in range(3))


def sample_foreground_patches(lv: LabeledVolume, n: int, patch=DEFAULT_PATCH, seed=0):
    """Draw ``n`` patches centered (up to boundary clamping) on foreground voxels.

    Returns a list of ``(volume patch, label patch, center)`` tuples.
    Deterministic for a fixed seed; raises if the volume has no foreground.
    """
    patch = _as_triple(patch)
    fg = np.argwhere(lv.labels != BG)
    if fg.size == 0:
        raise VolumeError("no foreground voxels to center patches on")
    for ax in range(3):
        if patch[ax] > lv.shape[ax]:
            raise VolumeError(
                f"patch {patch} does not fit into volume shape {lv.shape}; "
                "pad the volume first")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    picks = rng.integers(0, len(fg), size=int(n))
    out = []
    for i in picks:
        center = tuple(int(c) for c in fg[i])
        origin = clamp_origin(center, patch, lv.shape)
        p = extract_patch(lv, origin, patch)
        out.append((p.volume, p.labels, center))
    return out


class ProbabilityMap:
    """Accumulates per-voxel class probabilities over overlapping patches."""

    def __init__(self, n_classes: int, shape):
        shape = _as_triple(shape)
        self.probs = np.zeros((n_classes,) + shape, dtype=np.float64)
        self.counts = np.zeros(shape, dtype=np.int64)

    def add(self, origin, patch_probs: np.ndarray):
        origin = _as_triple(origin)
        size = patch_probs.shape[1:]
        sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
        self.probs[(slice(None),) + sl] += patch_probs
        self.counts[sl] += 1

    def finalize(self) -> np.ndarray:
        """Mean probability per voxel; raises naming a voxel if any is uncovered."""
        if (self.counts == 0).any():
            voxel = tuple(int(i) for i in np.argwhere(self.counts == 0)[0])
            raise VolumeError(f"voxel {voxel} is not covered by any patch")
        return self.probs / self.counts[None]

    def argmax_labels(self) -> np.ndarray:
        return self.finalize().argmax(axis=0).astype(np.uint8)


def reconstruct(patch_probs, shape, n_classes: int = N_CLASSES) -> ProbabilityMap:
    """Average per-voxel class probabilities of overlapping patches.

    ``patch_probs`` is an iterable of ``(origin, probs)`` with probs shaped
    ``(n_classes, px, py, pz)``. Every voxel of ``shape`` must be covered.
    """
    pm = ProbabilityMap(n_classes, shape)
    for origin, probs in patch_probs:
        pm.add(origin, np.asarray(probs, dtype=np.float64))
    pm.finalize()
    return pm


def reconstruct_mean(patches, shape, channels: int = 1) -> np.ndarray:
    """Overlap-average arbitrary per-patch channel data (e.g. generator output)."""
    pm = ProbabilityMap(channels, shape)
    for origin, data in patches:
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        pm.add(origin, arr)
    return pm.finalize()


def resample_isotropic(v, target: float = 1.0):
    """Resample to an isotropic grid: trilinear for intensities, nearest for labels."""
    if target <= 0:
        raise VolumeError(f"target spacing must be positive, got {target}")
    if isinstance(v, LabeledVolume):
        vol = resample_isotropic(v.volume, target)
        lab = _resample_array(v.labels[None], v.volume.spacing, target, order=0)[0]
        return LabeledVolume(vol, lab.astype(np.uint8))
    new = _resample_array(v.data, v.spacing, target, order=1)
    return Volume(new.astype(np.float32), (target,) * 3)


def _resample_array(data, spacing, target, order):
    shape = data.shape[1:]
    # sample-point aligned grid: index i' samples input coordinate i' * t / s,
    # and the last output sample lands exactly on the last input sample
    new_shape = tuple(
        max(1, int(round((shape[ax] - 1) * spacing[ax] / target)) + 1) for ax in range(3))
    if new_shape == shape and all(abs(s - target) < 1e-12 for s in spacing):
        return data.copy()
    coords = np.meshgrid(
        *[np.arange(new_shape[ax]) * (target / spacing[ax]) for ax in range(3)],
        indexing="ij")
    coords = [np.clip(c, 0, shape[ax] - 1) for ax, c in enumerate(coords)]
    out = np.empty((data.shape[0],) + new_shape, dtype=np.float64)
    for c in range(data.shape[0]):
        out[c] = map_coordinates(data[c].astype(np.float64), coords, order=order, mode="nearest")
    return out


def content_bounding_box(v) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """(lower, upper-exclusive) corners of the nonzero content."""
    if isinstance(v, LabeledVolume):
        mask = (np.abs(v.volume.data).sum(axis=0) != 0) | (v.labels != 0)
    else:
        mask = np.abs(v.data).sum(axis=0) != 0
    if not mask.any():
        return (0, 0, 0), (0, 0, 0)
    idx = np.argwhere(mask)
    return tuple(int(i) for i in idx.min(axis=0)), tuple(int(i) + 1 for i in idx.max(axis=0))


def crop_pad(v, target_shape):
    """Center the nonzero content inside ``target_shape``, padding with zeros/BG."""
    target = _as_triple(target_shape)
    lo, hi = content_bounding_box(v)
    extent = tuple(hi[ax] - lo[ax] for ax in range(3))
    for ax in range(3):
        if extent[ax] > target[ax]:
            raise VolumeError(
                f"target shape {target} is smaller than the content extent {extent} "
                f"(axis {ax})")
    start = tuple((target[ax] - extent[ax]) // 2 for ax in range(3))
    src = tuple(slice(lo[ax], hi[ax]) for ax in range(3))
    dst = tuple(slice(start[ax], start[ax] + extent[ax]) for ax in range(3))
    if isinstance(v, LabeledVolume):
        vol = _crop_pad_volume(v.volume, src, dst, target)
        lab = np.zeros(target, dtype=np.uint8)
        lab[dst] = v.labels[src]
        return LabeledVolume(vol, lab)
    return _crop_pad_volume(v, src, dst, target)


def _crop_pad_volume(v: Volume, src, dst, target) -> Volume:
    out = np.zeros((v.channels,) + tuple(target), dtype=np.float32)
    out[(slice(None),) + dst] = v.data[(slice(None),) + src]
    return Volume(out, v.spacing)


def pad_to_min(v, minimum=DEFAULT_PATCH):
    """Zero-pad a volume up to at least ``minimum`` per axis (no-op if large enough)."""
    minimum = _as_triple(minimum)
    shape = v.shape if not isinstance(v, LabeledVolume) else v.volume.shape
    target = tuple(max(shape[ax], minimum[ax]) for ax in range(3))
    if target == tuple(shape):
        return v
    return crop_pad(v, target)
