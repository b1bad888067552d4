"""The three function approximators: generator G, segmenter S, discriminator D.

G and S share a 3D U-Net body (alternating conv + max-pool encoder, nearest
upsampling + skip concatenation decoder, batch norm after every convolution).
G ends in a linear 1x1x1 head, S in a softmax head over the tissue classes.
D is a DCGAN-style stack of strided 3D convolutions with LeakyReLU and
dropout, followed by one linear layer over K+1 classes.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .volume import N_CLASSES

CHECKPOINT_VERSION = 1


class NetConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class UNet3DConfig:
    in_channels: int = 1
    base_features: int = 8        # desk scale; the cited architecture uses 32
    depth: int = 3                # pooling levels
    out_channels: int = 1
    out_activation: str = "linear"  # linear | softmax

    def __post_init__(self):
        if self.base_features < 1:
            raise NetConfigError(f"base_features must be >= 1, got {self.base_features}")
        if self.depth < 1:
            raise NetConfigError(f"depth must be >= 1, got {self.depth}")
        if self.out_activation not in ("linear", "softmax"):
            raise NetConfigError(f"unknown output activation {self.out_activation!r}")


@dataclass
class DiscriminatorConfig:
    in_channels: int = 1
    domains: int = 2              # K; the network outputs K+1 probabilities
    leaky_slope: float = 0.2
    dropout: float = 0.3
    widths: tuple[int, ...] = (16, 32, 64, 128)
    input_size: int = 32

    def __post_init__(self):
        if self.domains < 2:
            raise NetConfigError(f"need at least 2 domains, got {self.domains}")
        if len(self.widths) != 4:
            raise NetConfigError(f"expected 4 conv layers, got {len(self.widths)}")
        if self.input_size % (2 ** len(self.widths)) != 0:
            raise NetConfigError(
                f"input size {self.input_size} must be divisible by "
                f"{2 ** len(self.widths)}")

    @property
    def n_outputs(self) -> int:
        return self.domains + 1


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class UNet3D(nn.Module):
    def __init__(self, config: UNet3DConfig):
        super().__init__()
        self.config = config
        chans = [config.base_features * 2 ** i for i in range(config.depth + 1)]
        self.encoders = nn.ModuleList()
        cin = config.in_channels
        for ch in chans[:-1]:
            self.encoders.append(_conv_block(cin, ch))
            cin = ch
        self.bottom = _conv_block(cin, chans[-1])
        self.decoders = nn.ModuleList()
        upper = chans[-1]
        for ch in reversed(chans[:-1]):
            self.decoders.append(_conv_block(upper + ch, ch))
            upper = ch
        self.pool = nn.MaxPool3d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.head = nn.Conv3d(chans[0], config.out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = x.shape[2:]
        div = 2 ** self.config.depth
        for s in spatial:
            if s % div != 0:
                raise ShapeError(
                    f"spatial size {tuple(spatial)} not divisible by 2^depth={div}")
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottom(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(torch.cat([self.up(x), skip], dim=1))
        x = self.head(x)
        if self.config.out_activation == "softmax":
            x = torch.softmax(x, dim=1)
        return x


class PatchDiscriminator(nn.Module):
    """K+1-way domain classifier over fixed-size patches."""

    def __init__(self, config: DiscriminatorConfig):
        super().__init__()
        self.config = config
        layers = []
        cin = config.in_channels
        for w in config.widths:
            layers += [
                nn.Conv3d(cin, w, 4, stride=2, padding=1),
                nn.LeakyReLU(config.leaky_slope),
                nn.Dropout(config.dropout),
            ]
            cin = w
        self.features = nn.Sequential(*layers)
        final = config.input_size // 2 ** len(config.widths)
        self.fc = nn.Linear(config.widths[-1] * final ** 3, config.n_outputs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        spatial = tuple(x.shape[2:])
        if spatial != (self.config.input_size,) * 3:
            raise ShapeError(
                f"discriminator expects {(self.config.input_size,) * 3} patches, "
                f"got {spatial}")
        h = self.features(x).flatten(1)
        return torch.softmax(self.fc(h), dim=1)


@dataclass
class ModelBundle:
    """The trainable parameter owners; absent networks are None."""

    segmenter: UNet3D
    generator: UNet3D | None = None
    discriminator: PatchDiscriminator | None = None

    def networks(self):
        out = {"segmenter": self.segmenter}
        if self.generator is not None:
            out["generator"] = self.generator
        if self.discriminator is not None:
            out["discriminator"] = self.discriminator
        return out

    def parameter_count(self) -> dict[str, int]:
        return {name: sum(p.numel() for p in net.parameters())
                for name, net in self.networks().items()}

    def train(self):
        for net in self.networks().values():
            net.train()

    def eval(self):
        for net in self.networks().values():
            net.eval()


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    """Fan-in scaled uniform init, deterministic under the given generator."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                int(torch.tensor(m.weight.shape[2:]).prod()) if m.weight.dim() > 2 else 1)
            bound = math.sqrt(1.0 / fan_in)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=gen)
        elif isinstance(m, nn.BatchNorm3d):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)


def init_parameters(segmenter_cfg: UNet3DConfig,
                    generator_cfg: UNet3DConfig | None = None,
                    discriminator_cfg: DiscriminatorConfig | None = None,
                    seed: int = 0) -> ModelBundle:
    """Build and deterministically initialize the requested networks."""
    gen = torch.Generator().manual_seed(int(seed))
    generator = None
    if generator_cfg is not None:
        generator = UNet3D(generator_cfg)
        _init_module(generator, gen)
    segmenter = UNet3D(segmenter_cfg)
    _init_module(segmenter, gen)
    discriminator = None
    if discriminator_cfg is not None:
        discriminator = PatchDiscriminator(discriminator_cfg)
        _init_module(discriminator, gen)
    return ModelBundle(segmenter=segmenter, generator=generator,
                       discriminator=discriminator)


def default_configs(in_channels: int = 1, domains: int = 2, base_features: int = 8):
    g = UNet3DConfig(in_channels=in_channels, base_features=base_features,
                     out_channels=in_channels, out_activation="linear")
    s = UNet3DConfig(in_channels=in_channels, base_features=base_features,
                     out_channels=N_CLASSES, out_activation="softmax")
    d = DiscriminatorConfig(in_channels=in_channels, domains=domains)
    return g, s, d


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, bundle: ModelBundle, optimizers=None, epoch: int = 0,
                    extra: dict | None = None) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "configs": {
            "segmenter": asdict(bundle.segmenter.config),
            "generator": asdict(bundle.generator.config) if bundle.generator else None,
            "discriminator": (asdict(bundle.discriminator.config)
                              if bundle.discriminator else None),
        },
        "state": {name: net.state_dict() for name, net in bundle.networks().items()},
        "optimizers": ({name: opt.state_dict() for name, opt in optimizers.items()}
                       if optimizers else None),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise NetConfigError(f"unsupported checkpoint version {version!r}")
    cfgs = payload["configs"]
    seg_cfg = UNet3DConfig(**cfgs["segmenter"])
    gen_cfg = UNet3DConfig(**cfgs["generator"]) if cfgs["generator"] else None
    dis_cfg = (DiscriminatorConfig(**{**cfgs["discriminator"],
                                      "widths": tuple(cfgs["discriminator"]["widths"])})
               if cfgs["discriminator"] else None)
    bundle = init_parameters(seg_cfg, gen_cfg, dis_cfg, seed=0)
    for name, net in bundle.networks().items():
        net.load_state_dict(payload["state"][name])
    return bundle, payload
