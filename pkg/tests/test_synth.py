import numpy as np
import pytest
from scipy.stats import ks_2samp

from advnorm.metrics import histogram_jsd
from advnorm.synth import (DomainProfile, PhantomSpec, SynthError,
                           make_domain_suite, make_phantom, profile_presets,
                           render_intensity)
from advnorm.volume import BG, CSF, GM, WM


# ---------------------------------------------------------------------------
# DomainProfile
# ---------------------------------------------------------------------------

def test_profile_validation():
    with pytest.raises(SynthError):
        DomainProfile(means=(0.1, 1.4, 0.5, 0.3))
    with pytest.raises(SynthError):
        DomainProfile(stds=(0.1, 0.0, 0.1, 0.1))
    with pytest.raises(SynthError):
        DomainProfile(overlap=1.5)


def test_overlap_zero_collapses_gm_wm_means():
    p = DomainProfile(means=(0.0, 0.8, 0.4, 0.2), overlap=0.0)
    means = p.effective_means()
    assert means[WM] == pytest.approx(means[GM]) == pytest.approx(0.6)


# ---------------------------------------------------------------------------
# make_phantom
# ---------------------------------------------------------------------------

def neighbors_nested(labels):
    """Shell nesting in adjacency form: a class only borders its shell
    neighbors (BG<->CSF, CSF<->GM, GM<->WM)."""
    allowed = {BG: {BG, CSF}, CSF: {BG, CSF, GM}, GM: {CSF, GM, WM}, WM: {GM, WM}}
    for ax in range(3):
        a = np.moveaxis(labels, ax, 0)[:-1]
        b = np.moveaxis(labels, ax, 0)[1:]
        for x, y in zip(a.ravel(), b.ravel()):
            if y not in allowed[x]:
                return False
    return True


def test_zero_deformation_gives_nested_ellipsoids_with_wm_center():
    spec = PhantomSpec(shape=(32, 32, 32), deform_amplitude=0.0, seed=0)
    lv = make_phantom(spec)
    center = tuple(s // 2 for s in spec.shape)
    assert lv.labels[center] == WM
    assert neighbors_nested(lv.labels)


def test_phantom_deterministic_per_seed():
    a = make_phantom(PhantomSpec(seed=3))
    b = make_phantom(PhantomSpec(seed=3))
    np.testing.assert_array_equal(a.labels, b.labels)


def test_phantom_class_census_over_many_seeds():
    # every class keeps at least 1% of the voxels across random geometry
    shape = (48, 48, 48)
    total = np.prod(shape)
    for seed in range(1000):
        labels = make_phantom(PhantomSpec(shape=shape, seed=seed)).labels
        counts = np.bincount(labels.ravel(), minlength=4)
        assert (counts >= 0.01 * total).all(), f"seed {seed}: {counts / total}"


def test_phantom_rejects_tiny_shape():
    with pytest.raises(SynthError):
        PhantomSpec(shape=(16, 16, 16))


# ---------------------------------------------------------------------------
# render_intensity
# ---------------------------------------------------------------------------

def test_near_zero_stds_yield_piecewise_constant_means():
    lv = make_phantom(PhantomSpec(shape=(32, 32, 32), seed=1))
    profile = DomainProfile(means=(0.1, 0.7, 0.5, 0.3), stds=(1e-12,) * 4,
                            noise_sigma=0.0)
    vol = render_intensity(lv.labels, profile, seed=0)
    for c, mean in zip((BG, WM, GM, CSF), (0.1, 0.7, 0.5, 0.3)):
        np.testing.assert_allclose(vol.data[0][lv.labels == c], mean, atol=1e-6)


def test_empirical_class_means_within_three_standard_errors():
    lv = make_phantom(PhantomSpec(shape=(48, 48, 48), seed=2))
    profile = DomainProfile(means=(0.2, 0.7, 0.5, 0.35), stds=(0.02,) * 4,
                            noise_sigma=0.0)
    vol = render_intensity(lv.labels, profile, seed=5)
    for c, mean in zip((BG, WM, GM, CSF), profile.effective_means()):
        values = vol.data[0][lv.labels == c]
        se = values.std() / np.sqrt(values.size)
        assert abs(values.mean() - mean) < 3 * se + 1e-9


def test_zero_overlap_makes_gm_wm_indistinguishable():
    lv = make_phantom(PhantomSpec(shape=(48, 48, 48), seed=3))
    profile = DomainProfile(means=(0.05, 0.7, 0.4, 0.2), stds=(0.02, 0.05, 0.05, 0.05),
                            noise_sigma=0.0, overlap=0.0)
    vol = render_intensity(lv.labels, profile, seed=6)
    gm = vol.data[0][lv.labels == GM]
    wm = vol.data[0][lv.labels == WM]
    rng = np.random.default_rng(0)
    gm = rng.choice(gm, 800, replace=False)
    wm = rng.choice(wm, 800, replace=False)
    assert ks_2samp(gm, wm).pvalue > 0.05


def test_disjoint_domain_means_raise_cross_domain_jsd():
    lv = make_phantom(PhantomSpec(shape=(48, 48, 48), seed=4))
    prof_a = DomainProfile(means=(0.02, 0.85, 0.55, 0.25), stds=(0.01,) * 4,
                           noise_sigma=0.0)
    prof_b = DomainProfile(means=(0.02, 0.38, 0.22, 0.08), stds=(0.01,) * 4,
                           noise_sigma=0.0)
    vol_a1 = render_intensity(lv.labels, prof_a, seed=1)
    vol_a2 = render_intensity(lv.labels, prof_a, seed=2)
    vol_b = render_intensity(lv.labels, prof_b, seed=3)
    fg = lv.labels != 0
    between = histogram_jsd([vol_a1.data[0][fg], vol_b.data[0][fg]])
    within = histogram_jsd([vol_a1.data[0][fg], vol_a2.data[0][fg]])
    assert between > within


def test_second_channel_rendering():
    lv = make_phantom(PhantomSpec(shape=(32, 32, 32), seed=5))
    profile = profile_presets()["multichannel_k2"][0]
    vol = render_intensity(lv.labels, profile, seed=7)
    assert vol.channels == 2


# ---------------------------------------------------------------------------
# make_domain_suite
# ---------------------------------------------------------------------------

def two_profiles():
    return profile_presets()["severe_shift_k2"]


def test_suite_split_arithmetic():
    suite = make_domain_suite(two_profiles(), subjects_per_domain=10,
                              spec_template=PhantomSpec(shape=(24, 24, 24)), seed=0)
    assert len(suite.split("train")) == 16
    assert len(suite.split("val")) == 2
    assert len(suite.split("test")) == 2


def test_suite_split_deterministic():
    kwargs = dict(subjects_per_domain=4,
                  spec_template=PhantomSpec(shape=(24, 24, 24)), seed=9)
    a = make_domain_suite(two_profiles(), **kwargs)
    b = make_domain_suite(two_profiles(), **kwargs)
    assert [(s.subject_id, s.split) for s in a.subjects] == \
        [(s.subject_id, s.split) for s in b.subjects]
    np.testing.assert_array_equal(a.subjects[0].image.volume.data,
                                  b.subjects[0].image.volume.data)


def test_three_domain_suite_has_all_cells():
    suite = make_domain_suite(profile_presets()["three_site"], subjects_per_domain=3,
                              spec_template=PhantomSpec(shape=(24, 24, 24)), seed=1)
    for split in ("train", "val", "test"):
        for z in range(3):
            assert suite.domain_split(z, split), (split, z)


def test_suite_rejects_too_few_subjects():
    with pytest.raises(SynthError):
        make_domain_suite(two_profiles(), subjects_per_domain=2)
    with pytest.raises(SynthError):
        make_domain_suite(two_profiles()[:1], subjects_per_domain=5)


def test_domain_shift_monotone_in_mean_separation():
    # pushing the class means of the second domain further away strictly
    # raises the inter-domain foreground histogram JSD
    lv = make_phantom(PhantomSpec(shape=(48, 48, 48), seed=6))
    base = DomainProfile(means=(0.02, 0.70, 0.50, 0.30), stds=(0.02,) * 4,
                         noise_sigma=0.0)
    fg = lv.labels != 0
    ref = render_intensity(lv.labels, base, seed=1).data[0][fg]
    jsds = []
    # shifts stay below the inter-class mode spacing, where separation is
    # unambiguous (shifting by a whole mode spacing would alias the modes)
    for shift in (0.0, 0.03, 0.06, 0.09):
        moved = DomainProfile(
            means=(0.02, 0.70 - shift, 0.50 - shift, 0.30 - shift),
            stds=(0.02,) * 4, noise_sigma=0.0)
        other = render_intensity(lv.labels, moved, seed=2).data[0][fg]
        jsds.append(histogram_jsd([ref, other]))
    assert jsds[0] < jsds[1] < jsds[2] < jsds[3]
