import copy

import numpy as np
import pytest
import torch

from advnorm.metrics import segmentation_report
from advnorm.trainer import (TrainerError, TrainingDiverged, build_patch_dataset,
                             d_learning_rate, discriminator_step,
                             generator_segmenter_step, gs_learning_rate,
                             init_state, normalize_and_segment, sample_batch,
                             train, write_history_csv)
from advnorm.volume import patch_grid, reconstruct

from conftest import state_dicts_equal, tiny_bundle, tiny_train_config


@pytest.fixture(scope="module")
def train_set(tiny_suite):
    cfg = tiny_train_config()
    return build_patch_dataset(tiny_suite, "train", 16, cfg, seed=1)


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------

def test_batch_stratified_evenly(train_set, rng):
    batch = sample_batch(train_set, 4, rng)
    domains = [s.domain for s in batch]
    assert domains.count(0) == 2 and domains.count(1) == 2


def test_batch_remainder_assignment(tiny_suite):
    # K=3 with m=4: floor gives one each, the remainder lands on a seeded domain
    from advnorm.synth import PhantomSpec, make_domain_suite, profile_presets

    suite3 = make_domain_suite(profile_presets()["three_site"],
                               subjects_per_domain=3,
                               spec_template=PhantomSpec(shape=(32, 32, 32)),
                               seed=1)
    ds = build_patch_dataset(suite3, "train", 8, tiny_train_config(), seed=2)
    counts = sorted(np.bincount([s.domain for s in
                                 sample_batch(ds, 4, np.random.default_rng(5))],
                                minlength=3).tolist())
    assert counts == [1, 1, 2]


def test_batch_deterministic_at_stream_position(train_set):
    a = sample_batch(train_set, 4, np.random.default_rng(42))
    b = sample_batch(train_set, 4, np.random.default_rng(42))
    for sa, sb in zip(a, b):
        np.testing.assert_array_equal(sa.x, sb.x)
        assert sa.domain == sb.domain


def test_dataset_rejects_empty_domain(tiny_suite):
    from advnorm.trainer import PatchDataset

    with pytest.raises(TrainerError):
        PatchDataset({0: []})


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------

def test_gs_schedule_milestones():
    cfg = tiny_train_config()
    assert gs_learning_rate(1, cfg) == pytest.approx(1e-3)
    assert gs_learning_rate(50, cfg) == pytest.approx(1e-3)
    assert gs_learning_rate(51, cfg) == pytest.approx(1e-4)
    assert gs_learning_rate(75, cfg) == pytest.approx(1e-4)
    assert gs_learning_rate(76, cfg) == pytest.approx(1e-5)


def test_d_plateau_schedule():
    cfg = tiny_train_config(d_plateau_patience=3)
    improving = [1.0, 0.9, 0.8, 0.7]
    assert d_learning_rate(improving, cfg) == pytest.approx(1e-4)
    # best at 0.5, then 4 epochs (> patience 3) without improvement: one decay
    stuck = [0.5, 0.6, 0.6, 0.6, 0.6]
    assert d_learning_rate(stuck, cfg) == pytest.approx(1e-5)
    # improvement resets the streak
    reset = [0.5, 0.6, 0.6, 0.4, 0.6, 0.6, 0.6]
    assert d_learning_rate(reset, cfg) == pytest.approx(1e-4)


# ---------------------------------------------------------------------------
# discriminator step
# ---------------------------------------------------------------------------

def named_params(net):
    return {k: v.detach().clone() for k, v in net.named_parameters()}


def test_discriminator_step_isolates_parameters(tiny_suite, train_set):
    bundle = tiny_bundle(seed=1)
    state = init_state(bundle, tiny_train_config(), domains=2)
    g_before = named_params(bundle.generator)
    s_before = named_params(bundle.segmenter)
    d_before = named_params(bundle.discriminator)
    batch = sample_batch(train_set, 4, state.rngs["d_batch"])
    discriminator_step(state, batch)
    assert all(torch.equal(g_before[k], v)
               for k, v in bundle.generator.named_parameters())
    assert all(torch.equal(s_before[k], v)
               for k, v in bundle.segmenter.named_parameters())
    assert any(not torch.equal(d_before[k], v)
               for k, v in bundle.discriminator.named_parameters())
    assert state.d_updates == 1


def test_discriminator_loss_decreases_over_repeated_steps(train_set):
    bundle = tiny_bundle(seed=2)
    state = init_state(bundle, tiny_train_config(augment_prob=0.0), domains=2)
    batch = sample_batch(train_set, 4, np.random.default_rng(3))
    first = discriminator_step(state, batch)
    for _ in range(9):
        last = discriminator_step(state, batch)
    assert last < first


def test_discriminator_step_zero_rate_is_identity(train_set):
    bundle = tiny_bundle(seed=3)
    state = init_state(bundle, tiny_train_config(), domains=2)
    for group in state.optimizers["discriminator"].param_groups:
        group["lr"] = 0.0
    before = copy.deepcopy(bundle.discriminator.state_dict())
    batch = sample_batch(train_set, 4, state.rngs["d_batch"])
    discriminator_step(state, batch)
    assert all(torch.equal(before[k], bundle.discriminator.state_dict()[k])
               for k in before)


# ---------------------------------------------------------------------------
# generator/segmenter step
# ---------------------------------------------------------------------------

def test_gs_step_keeps_discriminator_frozen(train_set):
    bundle = tiny_bundle(seed=4)
    state = init_state(bundle, tiny_train_config(), domains=2)
    d_before = copy.deepcopy(bundle.discriminator.state_dict())
    batch = sample_batch(train_set, 4, state.rngs["gs_batch"])
    generator_segmenter_step(state, batch)
    assert all(torch.equal(d_before[k], bundle.discriminator.state_dict()[k])
               for k in d_before)
    assert state.gs_updates == 1


def test_lambda_zero_matches_preprocessor_trajectory(train_set):
    # same seeds, same batches: a lam=0 update must equal the run of a bundle
    # that never had a discriminator
    cfg_a = tiny_train_config(lam=0.0)
    cfg_b = tiny_train_config(lam=0.0)
    bundle_a = tiny_bundle(seed=5, with_disc=True)
    bundle_b = tiny_bundle(seed=5, with_disc=False)
    state_a = init_state(bundle_a, cfg_a, domains=2)
    state_b = init_state(bundle_b, cfg_b, domains=2)
    for step in range(3):
        batch = sample_batch(train_set, 4, np.random.default_rng(100 + step))
        generator_segmenter_step(state_a, batch)
        generator_segmenter_step(state_b, batch)
    assert state_dicts_equal(bundle_a.generator, bundle_b.generator)
    assert state_dicts_equal(bundle_a.segmenter, bundle_b.segmenter)


def test_gs_step_zero_rates_keep_parameters(train_set):
    bundle = tiny_bundle(seed=6)
    state = init_state(bundle, tiny_train_config(), domains=2)
    for name in ("generator", "segmenter"):
        for group in state.optimizers[name].param_groups:
            group["lr"] = 0.0
    g_before = copy.deepcopy(bundle.generator.state_dict())
    s_before = copy.deepcopy(bundle.segmenter.state_dict())
    batch = sample_batch(train_set, 4, state.rngs["gs_batch"])
    generator_segmenter_step(state, batch)
    assert all(torch.equal(g_before[k], bundle.generator.state_dict()[k])
               for k in g_before if "running" not in k and "batches" not in k)
    assert all(torch.equal(s_before[k], bundle.segmenter.state_dict()[k])
               for k in s_before if "running" not in k and "batches" not in k)


def test_divergence_guard(train_set):
    bundle = tiny_bundle(seed=7)
    with torch.no_grad():
        bundle.generator.head.weight.fill_(float("nan"))
    state = init_state(bundle, tiny_train_config(), domains=2)
    batch = sample_batch(train_set, 4, state.rngs["gs_batch"])
    with pytest.raises(TrainingDiverged):
        generator_segmenter_step(state, batch)


# ---------------------------------------------------------------------------
# optimizer contract
# ---------------------------------------------------------------------------

def test_zero_gradient_changes_parameters_only_by_weight_decay():
    lin = torch.nn.Linear(4, 4, bias=False)
    with torch.no_grad():
        lin.weight.fill_(2.0)
    opt = torch.optim.AdamW(lin.parameters(), lr=0.1, weight_decay=0.01)
    lin.weight.grad = torch.zeros_like(lin.weight)
    opt.step()
    expected = 2.0 * (1.0 - 0.1 * 0.01)
    torch.testing.assert_close(lin.weight,
                               torch.full_like(lin.weight, expected))


# ---------------------------------------------------------------------------
# full training loop
# ---------------------------------------------------------------------------

def test_loop_arithmetic(tiny_suite, tmp_path):
    bundle = tiny_bundle(seed=8)
    cfg = tiny_train_config(n_epochs=1, n_iter=2, n_steps=3)
    state = train(tiny_suite, cfg, bundle, out_dir=tmp_path)
    assert state.d_updates == 6
    assert state.gs_updates == 2
    assert len(state.history) == 1
    assert (tmp_path / "last.pt").exists()
    assert (tmp_path / "best.pt").exists()
    assert (tmp_path / "history.csv").exists()


def test_training_reproducible_bitwise(tiny_suite):
    results = []
    for _ in range(2):
        bundle = tiny_bundle(seed=9)
        cfg = tiny_train_config(n_epochs=2, n_iter=2)
        state = train(tiny_suite, cfg, bundle)
        results.append((bundle, state.history))
    (b1, h1), (b2, h2) = results
    assert h1 == h2
    for name in ("generator", "segmenter", "discriminator"):
        assert state_dicts_equal(getattr(b1, name), getattr(b2, name)), name


def test_mode_labels():
    assert tiny_train_config(lam=1.5).mode_label == "adversarial"
    assert tiny_train_config(lam=0.0).mode_label == "pre-processor"
    assert tiny_train_config(normalizer="standardize").mode_label == "standardization"
    assert tiny_train_config(normalizer="none").mode_label == "segmenter-only"


def test_history_csv_format(tmp_path):
    rows = [{"epoch": 1, "mode": "adversarial", "lr_gs": 1e-3, "lr_d": 1e-4,
             "train_seg_loss": 0.5, "train_d_loss": 2.0, "train_adv_loss": 1.0,
             "val_seg_loss": 0.6, "val_dsc": 0.4, "val_d_loss": 2.1,
             "val_d_accuracy": 0.5}]
    write_history_csv(tmp_path / "h.csv", rows)
    lines = (tmp_path / "h.csv").read_text().strip().splitlines()
    assert lines[0].startswith("epoch,mode")
    assert len(lines) == 2


# ---------------------------------------------------------------------------
# evaluation path
# ---------------------------------------------------------------------------

def test_ground_truth_through_metric_path_is_perfect(tiny_suite):
    # feed exact one-hot ground-truth probabilities through the stride-lattice
    # reconstruction and score them: DSC 1.0, MHD 0
    subject = tiny_suite.split("test")[0]
    labels = subject.image.labels
    grid = patch_grid(labels.shape, (16, 16, 16), (8, 8, 8))
    patches = []
    for o in grid.origins:
        chunk = labels[o[0]:o[0] + 16, o[1]:o[1] + 16, o[2]:o[2] + 16]
        onehot = np.eye(4)[chunk].transpose(3, 0, 1, 2)
        patches.append((o, onehot))
    pm = reconstruct(patches, labels.shape)
    report = segmentation_report(pm.argmax_labels(), labels)
    assert report.mean_dsc == 1.0
    assert report.mean_mhd == 0.0


def test_untrained_bundle_evaluates_finite(tiny_suite):
    bundle = tiny_bundle(seed=10)
    cfg = tiny_train_config()
    subject = tiny_suite.split("test")[0]
    pred, prob_map, normalized = normalize_and_segment(bundle, subject.image.volume,
                                                       cfg)
    assert pred.shape == subject.image.labels.shape
    final = prob_map.finalize()
    assert np.isfinite(final).all()
    np.testing.assert_allclose(final.sum(axis=0), 1.0, atol=1e-6)
    report = segmentation_report(pred, subject.image.labels)
    assert np.isfinite(report.mean_dsc)


def test_evaluation_deterministic(tiny_suite):
    bundle = tiny_bundle(seed=11)
    cfg = tiny_train_config()
    subject = tiny_suite.split("test")[0]
    a = normalize_and_segment(bundle, subject.image.volume, cfg)
    b = normalize_and_segment(bundle, subject.image.volume, cfg)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[2].data, b[2].data)
