"""Linear bias-field degradation and the fixed standardization baseline.

The field scales intensities linearly along one axis (default y):
``B = (y / H) * alpha + (1 - alpha)`` with ``H`` the last voxel index along
that axis, so B spans exactly [1 - alpha, 1]. The degraded image is
``I' = I * B + eta`` with optional additive Gaussian noise eta.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Volume, _as_triple


class AugmentError(ValueError):
    pass


@dataclass
class BiasFieldParams:
    alpha: float = 0.5
    axis: int = 1            # spatial axis the field varies along (0=x, 1=y, 2=z)
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise AugmentError(f"alpha must lie in [0,1], got {self.alpha}")
        if self.axis not in (0, 1, 2):
            raise AugmentError(f"axis must be 0, 1 or 2, got {self.axis}")
        if self.noise_sigma < 0:
            raise AugmentError(f"noise sigma must be >= 0, got {self.noise_sigma}")


def bias_profile(length: int, alpha: float, offset: int = 0, extent: int | None = None):
    """1D field values at voxel indices offset..offset+length-1 of an axis
    with ``extent`` voxels. The normalizing height is the last voxel index,
    so the field reaches 1.0 exactly at the top of the parent volume."""
    extent = length if extent is None else extent
    height = max(extent - 1, 1)
    y = np.arange(offset, offset + length, dtype=np.float64)
    return (y / height) * alpha + (1.0 - alpha)


def bias_field(shape, params: BiasFieldParams) -> Volume:
    """The multiplicative field B as a single-channel volume."""
    shape = _as_triple(shape)
    profile = bias_profile(shape[params.axis], params.alpha)
    view = [1, 1, 1]
    view[params.axis] = shape[params.axis]
    field = np.broadcast_to(profile.reshape(view), shape)
    return Volume(field[None].astype(np.float32))


def apply_bias(v: Volume, params: BiasFieldParams, rng=None) -> Volume:
    """I' = I * B + eta, applied identically to every channel."""
    field = bias_field(v.shape, params).data[0]
    out = v.data * field[None]
    if params.noise_sigma > 0:
        rng = np.random.default_rng(rng)
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return Volume(out.astype(np.float32), v.spacing)


def apply_bias_patch(patch: np.ndarray, offset: int, parent_extent: int,
                     params: BiasFieldParams, rng=None) -> np.ndarray:
    """Degrade a patch using parent-volume coordinates along the field axis.

    A patch must see exactly the field values it would receive inside the
    whole degraded volume, hence the (offset, parent_extent) pair.
    """
    arr = np.asarray(patch, dtype=np.float32)
    spatial = arr.shape[1:] if arr.ndim == 4 else arr.shape
    profile = bias_profile(spatial[params.axis], params.alpha,
                           offset=offset, extent=parent_extent)
    view = [1, 1, 1]
    view[params.axis] = len(profile)
    field = profile.reshape(view).astype(np.float32)
    if arr.ndim == 4:
        field = field[None]
    out = arr * field
    if params.noise_sigma > 0:
        rng = np.random.default_rng(rng)
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape).astype(np.float32)
    return out


def augment_batch(patches, y_offsets, parent_height: int, prob: float = 0.5,
                  seed=0, alpha_range=(0.0, 1.0), axis: int = 1,
                  noise_sigma: float = 0.0):
    """Independently degrade each patch with probability ``prob``.

    ``y_offsets`` are the patch origins along the field axis in parent-volume
    coordinates. Returns ``(patches, applied_mask, alphas)``; alphas are NaN
    where no field was applied. Deterministic for a fixed seed.
    """
    patches = list(patches)
    if y_offsets is None:
        raise AugmentError("patch positions along the field axis are required")
    y_offsets = list(y_offsets)
    if len(y_offsets) != len(patches):
        raise AugmentError(
            f"{len(patches)} patches but {len(y_offsets)} positions")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    out, applied, alphas = [], [], []
    for patch, off in zip(patches, y_offsets):
        hit = rng.uniform() < prob
        alpha = rng.uniform(*alpha_range) if hit else float("nan")
        if hit and alpha > 0:
            params = BiasFieldParams(alpha=alpha, axis=axis, noise_sigma=noise_sigma)
            out.append(apply_bias_patch(patch, int(off), parent_height, params, rng=rng))
        else:
            out.append(np.asarray(patch, dtype=np.float32).copy())
        applied.append(bool(hit))
        alphas.append(alpha)
    return out, np.asarray(applied), np.asarray(alphas)


def standardize(v: Volume) -> Volume:
    """Zero-mean, unit-std per channel; rejects constant input."""
    out = np.empty_like(v.data, dtype=np.float32)
    for c in range(v.channels):
        chan = v.data[c].astype(np.float64)
        std = float(chan.std())
        if std < 1e-12:
            raise AugmentError(
                f"channel {c} has zero variance; standardization is undefined")
        out[c] = ((chan - chan.mean()) / std).astype(np.float32)
    return Volume(out, v.spacing)
