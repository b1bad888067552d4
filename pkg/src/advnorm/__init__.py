"""Task-driven adversarial image normalization for multi-domain volumetric
segmentation, with synthetic multi-site data and a tabular fixed-point lab."""

__version__ = "0.1.0"

from .volume import (LabeledVolume, PatchGrid, ProbabilityMap, Volume,  # noqa: F401
                     extract_patch, patch_grid, reconstruct, resample_isotropic,
                     sample_foreground_patches)
