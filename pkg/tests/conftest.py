import numpy as np
import pytest
import torch

from advnorm.nets import DiscriminatorConfig, UNet3DConfig, init_parameters
from advnorm.synth import PhantomSpec, make_domain_suite, profile_presets
from advnorm.trainer import TrainConfig

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def tiny_suite():
    """Two severe-shift domains, 3 subjects each, at the minimum 32^3 size."""
    return make_domain_suite(profile_presets()["severe_shift_k2"],
                             subjects_per_domain=3,
                             spec_template=PhantomSpec(shape=(32, 32, 32)),
                             seed=0)


def tiny_train_config(**overrides):
    base = dict(batch_size=4, n_epochs=1, n_iter=2, n_steps=3, lam=1.5,
                train_patches_per_domain=16, val_patches_per_domain=8,
                patch_size=32, stride=8, seed=0, normalizer="generator")
    base.update(overrides)
    return TrainConfig(**base)


def tiny_bundle(seed=0, with_gen=True, with_disc=True, domains=2, channels=1):
    g = UNet3DConfig(in_channels=channels, base_features=2, depth=2,
                     out_channels=channels)
    s = UNet3DConfig(in_channels=channels, base_features=2, depth=2,
                     out_channels=4, out_activation="softmax")
    d = DiscriminatorConfig(in_channels=channels, domains=domains,
                            widths=(4, 8, 8, 16))
    return init_parameters(s, g if with_gen else None, d if with_disc else None,
                           seed=seed)


def state_dicts_equal(a, b) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    if sa.keys() != sb.keys():
        return False
    return all(torch.equal(sa[k], sb[k]) for k in sa)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
