"""Multi-domain synthetic phantoms: nested deformed tissue shells with
class-conditional intensity rendering.

Each phantom is a set of strictly nested shells (background > CSF > GM > WM)
carved from a deformed anisotropic radius field, so ground-truth labels are
exact by construction. Domain profiles control per-class intensity
statistics and emulate cross-site appearance shifts.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .volume import BG, CSF, GM, N_CLASSES, WM, LabeledVolume, Volume


class SynthError(ValueError):
    pass


@dataclass
class DomainProfile:
    """Per-class intensity statistics of one acquisition domain.

    ``overlap`` scales the separation between the GM and WM means around
    their midpoint: 1.0 keeps the stated means, 0.0 collapses them onto the
    midpoint (the hard isointense case).
    """

    name: str = "domain"
    means: tuple[float, float, float, float] = (0.03, 0.80, 0.55, 0.25)   # BG, WM, GM, CSF
    stds: tuple[float, float, float, float] = (0.02, 0.05, 0.05, 0.05)
    noise_sigma: float = 0.01
    overlap: float = 1.0
    means2: tuple[float, float, float, float] | None = None               # optional 2nd channel
    stds2: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        for m in self.means:
            if not 0.0 <= m <= 1.0:
                raise SynthError(f"class means must lie in [0,1], got {self.means}")
        for s in self.stds:
            if s <= 0:
                raise SynthError(f"class stds must be positive, got {self.stds}")
        if not 0.0 <= self.overlap <= 1.0:
            raise SynthError(f"overlap factor must lie in [0,1], got {self.overlap}")
        if (self.means2 is None) != (self.stds2 is None):
            raise SynthError("second-channel means and stds must be given together")

    @property
    def channels(self) -> int:
        return 2 if self.means2 is not None else 1

    def effective_means(self) -> np.ndarray:
        """Class means with the GM/WM separation scaled by ``overlap``."""
        means = np.asarray(self.means, dtype=np.float64).copy()
        mid = 0.5 * (means[WM] + means[GM])
        means[WM] = mid + self.overlap * (means[WM] - mid)
        means[GM] = mid + self.overlap * (means[GM] - mid)
        return means


@dataclass
class PhantomSpec:
    """Geometry of one synthetic subject."""

    shape: tuple[int, int, int] = (48, 48, 48)
    n_shells: int = 3
    deform_amplitude: float = 2.0
    seed: int = 0
    # shell radii as fractions of the smallest axis, outermost first (CSF, GM, WM)
    radii: tuple[float, float, float] = (0.34, 0.28, 0.19)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if min(self.shape) < 24:
            raise SynthError(f"shape {self.shape} too small to nest shells (minimum 24)")
        if self.n_shells != 3:
            raise SynthError("exactly 3 tissue shells (CSF, GM, WM) are supported")
        if not (self.radii[0] > self.radii[1] > self.radii[2] > 0):
            raise SynthError(f"shell radii must be strictly decreasing, got {self.radii}")


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal(shape), sigma)
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def make_phantom(spec: PhantomSpec) -> LabeledVolume:
    """Generate the label volume of one subject (unit intensities)."""
    rng = np.random.default_rng(spec.seed)
    n = min(spec.shape)
    axes = [np.arange(s, dtype=np.float64) for s in spec.shape]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    center = [s / 2.0 + rng.uniform(-0.04, 0.04) * n for s in spec.shape]
    scale = rng.uniform(0.92, 1.08, size=3)
    radius = np.sqrt(((X - center[0]) * scale[0]) ** 2
                     + ((Y - center[1]) * scale[1]) ** 2
                     + ((Z - center[2]) * scale[2]) ** 2)
    if spec.deform_amplitude > 0:
        radius = radius + spec.deform_amplitude * _smooth_field(rng, spec.shape, sigma=n / 8.0)
    labels = np.zeros(spec.shape, dtype=np.uint8)
    # one shared radius field, so the shells are strictly nested by construction
    labels[radius < spec.radii[0] * n] = CSF
    labels[radius < spec.radii[1] * n] = GM
    labels[radius < spec.radii[2] * n] = WM
    present = set(np.unique(labels))
    if present != {BG, WM, GM, CSF}:
        raise SynthError(
            f"phantom (seed {spec.seed}) lost classes {set(range(N_CLASSES)) - present}; "
            "increase the shape or reduce deformation")
    vol = Volume(np.ones((1,) + spec.shape, dtype=np.float32))
    return LabeledVolume(vol, labels)


def render_intensity(labels: np.ndarray, profile: DomainProfile, seed=0) -> Volume:
    """Render class-conditional intensities: N(mean_c, std_c) clipped to [0,1],
    plus global Gaussian noise."""
    labels = np.asarray(labels)
    if labels.size == 0 or labels.max() >= N_CLASSES:
        raise SynthError("invalid label volume")
    rng = np.random.default_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    chans = []
    specs = [(profile.effective_means(), np.asarray(profile.stds))]
    if profile.channels == 2:
        specs.append((np.asarray(profile.means2, dtype=np.float64),
                      np.asarray(profile.stds2, dtype=np.float64)))
    for means, stds in specs:
        img = np.zeros(labels.shape, dtype=np.float64)
        for c in range(N_CLASSES):
            mask = labels == c
            count = int(mask.sum())
            if count:
                img[mask] = rng.normal(means[c], stds[c], size=count)
        img = np.clip(img, 0.0, 1.0)
        if profile.noise_sigma > 0:
            img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
        chans.append(np.clip(img, 0.0, 1.0))
    return Volume(np.stack(chans).astype(np.float32))


@dataclass
class Subject:
    """One rendered subject of a domain suite."""

    image: LabeledVolume
    domain: int          # 0-based domain index; the generated class is K
    split: str           # train | val | test
    subject_id: str


@dataclass
class DomainSuite:
    profiles: list[DomainProfile]
    subjects: list[Subject]

    @property
    def n_domains(self) -> int:
        return len(self.profiles)

    def split(self, name: str) -> list[Subject]:
        return [s for s in self.subjects if s.split == name]

    def domain_split(self, domain: int, name: str) -> list[Subject]:
        return [s for s in self.subjects if s.split == name and s.domain == domain]


def make_domain_suite(profiles, subjects_per_domain: int = 10,
                      spec_template: PhantomSpec | None = None,
                      seed: int = 0) -> DomainSuite:
    """Render a K-domain dataset with a deterministic train/val/test split.

    Each domain gets ``subjects_per_domain - 2`` training subjects plus one
    validation and one test subject.
    """
    profiles = list(profiles)
    if len(profiles) < 2:
        raise SynthError(f"need at least 2 domains, got {len(profiles)}")
    if subjects_per_domain < 3:
        raise SynthError(
            f"need at least 3 subjects per domain to split train/val/test, "
            f"got {subjects_per_domain}")
    template = spec_template or PhantomSpec()
    subjects = []
    for z, profile in enumerate(profiles):
        order = np.random.default_rng([seed, z, 999]).permutation(subjects_per_domain)
        splits = np.array(["train"] * subjects_per_domain, dtype=object)
        splits[order[0]] = "val"
        splits[order[1]] = "test"
        for i in range(subjects_per_domain):
            phantom_seed = int(np.random.default_rng([seed, z, i, 1]).integers(2 ** 31))
            render_seed = int(np.random.default_rng([seed, z, i, 2]).integers(2 ** 31))
            lv = make_phantom(replace(template, seed=phantom_seed))
            vol = render_intensity(lv.labels, profile, seed=render_seed)
            subjects.append(Subject(
                image=LabeledVolume(vol, lv.labels),
                domain=z,
                split=str(splits[i]),
                subject_id=f"d{z}s{i:02d}",
            ))
    return DomainSuite(profiles=profiles, subjects=subjects)


# ---------------------------------------------------------------------------
# profile presets
# ---------------------------------------------------------------------------

def profile_presets() -> dict[str, list[DomainProfile]]:
    """Named domain-profile sets used by the canned experiments."""
    adult = DomainProfile(
        name="adult_t1",
        means=(0.02, 0.85, 0.55, 0.25), stds=(0.015, 0.05, 0.05, 0.05),
        noise_sigma=0.01)
    dim_shifted = DomainProfile(
        name="dim_shifted",
        means=(0.02, 0.38, 0.22, 0.08), stds=(0.01, 0.03, 0.03, 0.02),
        noise_sigma=0.01)
    infant_like = DomainProfile(
        # isointense phase analogue: GM and WM means within 0.05
        name="infant_like",
        means=(0.02, 0.56, 0.52, 0.30), stds=(0.015, 0.05, 0.05, 0.05),
        noise_sigma=0.02)
    adult_t1t2 = replace(
        adult, name="adult_t1t2",
        means2=(0.02, 0.25, 0.45, 0.85), stds2=(0.015, 0.05, 0.05, 0.05))
    dim_t1t2 = replace(
        dim_shifted, name="dim_t1t2",
        means2=(0.02, 0.10, 0.22, 0.40), stds2=(0.01, 0.02, 0.03, 0.03))
    noise2_a = replace(
        adult, name="adult_noise2",
        means2=(0.5, 0.5, 0.5, 0.5), stds2=(0.2, 0.2, 0.2, 0.2))
    noise2_b = replace(
        dim_shifted, name="dim_noise2",
        means2=(0.5, 0.5, 0.5, 0.5), stds2=(0.2, 0.2, 0.2, 0.2))
    return {
        "severe_shift_k2": [adult, dim_shifted],
        "identical_k2": [adult, replace(adult, name="adult_t1_b")],
        "three_site": [adult, dim_shifted, infant_like],
        "multichannel_k2": [adult_t1t2, dim_t1t2],
        "noise_channel_k2": [noise2_a, noise2_b],
    }
