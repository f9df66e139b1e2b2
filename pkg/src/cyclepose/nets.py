"""Generator, flow segmenter and patch discriminators.

G is the residual encoder-decoder of the original CycleGAN, S a Cellpose-style
residual U-Net with a global style vector, and both discriminators are
70x70 PatchGANs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 1
    residual_blocks: int = 9
    base_width: int = 64


@dataclass(frozen=True)
class SegmenterSpec:
    in_channels: int = 1
    out_channels: int = 3
    depth: int = 4
    base_width: int = 32
    style_on: bool = True

    @property
    def widths(self) -> list[int]:
        return [self.in_channels] + [self.base_width * 2 ** i for i in range(self.depth)]


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 1
    base_width: int = 64
    n_layers: int = 3


def _check_divisible(x: torch.Tensor, factor: int, name: str) -> None:
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"{name} needs spatial size divisible by {factor}, got {h}x{w}")


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(spec.in_channels, w, 7),
                  nn.InstanceNorm2d(w), nn.ReLU(inplace=True)]
        for mult in (1, 2):
            layers += [nn.Conv2d(w * mult, w * mult * 2, 3, stride=2, padding=1),
                       nn.InstanceNorm2d(w * mult * 2), nn.ReLU(inplace=True)]
        layers += [ResidualBlock(w * 4) for _ in range(spec.residual_blocks)]
        for mult in (4, 2):
            layers += [nn.ConvTranspose2d(w * mult, w * mult // 2, 3, stride=2, padding=1, output_padding=1),
                       nn.InstanceNorm2d(w * mult // 2), nn.ReLU(inplace=True)]
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(w, spec.out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        _check_divisible(x, 4, "generator")
        return self.model(x)


# ---------------------------------------------------------------------------
# segmenter
# ---------------------------------------------------------------------------

def batchconv(cin, cout, sz):
    return nn.Sequential(nn.BatchNorm2d(cin, eps=1e-5, momentum=0.05), nn.ReLU(inplace=False),
                         nn.Conv2d(cin, cout, sz, padding=sz // 2))


def batchconv0(cin, cout, sz):
    return nn.Sequential(nn.BatchNorm2d(cin, eps=1e-5, momentum=0.05),
                         nn.Conv2d(cin, cout, sz, padding=sz // 2))


class ResDown(nn.Module):
    def __init__(self, cin, cout, sz=3):
        super().__init__()
        self.conv = nn.ModuleList([batchconv(cin, cout, sz)] + [batchconv(cout, cout, sz) for _ in range(3)])
        self.proj = batchconv0(cin, cout, 1)

    def forward(self, x):
        x = self.proj(x) + self.conv[1](self.conv[0](x))
        return x + self.conv[3](self.conv[2](x))


class BatchConvStyle(nn.Module):
    def __init__(self, cin, cout, style_channels, sz):
        super().__init__()
        self.conv = batchconv(cin, cout, sz)
        self.full = nn.Linear(style_channels, cin)

    def forward(self, style, x, y=None):
        if y is not None:
            x = x + y
        feat = self.full(style)
        return self.conv(x + feat[:, :, None, None])


class ResUp(nn.Module):
    def __init__(self, cin, cout, style_channels, sz=3):
        super().__init__()
        self.conv0 = batchconv(cin, cout, sz)
        self.conv1 = BatchConvStyle(cout, cout, style_channels, sz)
        self.conv2 = BatchConvStyle(cout, cout, style_channels, sz)
        self.conv3 = BatchConvStyle(cout, cout, style_channels, sz)
        self.proj = batchconv0(cin, cout, 1)

    def forward(self, x, y, style):
        x = self.proj(x) + self.conv1(style, self.conv0(x), y=y)
        return x + self.conv3(style, self.conv2(style, x))


class Segmenter(nn.Module):
    """Residual U-Net emitting (flow_y, flow_x, prob_logit)."""

    def __init__(self, spec: SegmenterSpec = SegmenterSpec()):
        super().__init__()
        self.spec = spec
        nbase = spec.widths
        self.down = nn.ModuleList([ResDown(nbase[i], nbase[i + 1]) for i in range(len(nbase) - 1)])
        nup = nbase[1:] + [nbase[-1]]
        style_ch = nbase[-1]
        self.up = nn.ModuleList([ResUp(nup[i], nup[i - 1], style_ch) for i in range(1, len(nup))])
        self.output = batchconv(nup[0], spec.out_channels, 1)

    def forward(self, x):
        _check_divisible(x, 2 ** (self.spec.depth - 1), "segmenter")
        feats = []
        for i, block in enumerate(self.down):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = block(x)
            feats.append(x)
        style = feats[-1].mean(dim=(2, 3))
        style = style / torch.sqrt((style ** 2).sum(dim=1, keepdim=True) + 1e-12)
        if not self.spec.style_on:
            style = style * 0
        x = self.up[-1](feats[-1], feats[-1], style)
        for i in range(len(self.up) - 2, -1, -1):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.up[i](x, feats[i], style)
        return self.output(x)


# ---------------------------------------------------------------------------
# discriminator
# ---------------------------------------------------------------------------

class PatchDiscriminator(nn.Module):
    """Three stride-2 convolutions and two stride-1 ones: 70x70 receptive field."""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        w = spec.base_width
        layers = [nn.Conv2d(spec.in_channels, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        mult = 1
        for n in range(1, spec.n_layers):
            prev, mult = mult, min(2 ** n, 8)
            layers += [nn.Conv2d(w * prev, w * mult, 4, stride=2, padding=1),
                       nn.InstanceNorm2d(w * mult), nn.LeakyReLU(0.2, inplace=True)]
        prev, mult = mult, min(2 ** spec.n_layers, 8)
        layers += [nn.Conv2d(w * prev, w * mult, 4, stride=1, padding=1),
                   nn.InstanceNorm2d(w * mult), nn.LeakyReLU(0.2, inplace=True),
                   nn.Conv2d(w * mult, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        return self.model(x)


def init_weights(net: nn.Module, gain: float = 0.02) -> nn.Module:
    """N(0, 0.02) initialisation as in the CycleGAN reference code."""
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, gain)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, gain)
            nn.init.zeros_(m.bias)
    return net


def build_generator(spec: GeneratorSpec = GeneratorSpec()) -> Generator:
    net = init_weights(Generator(spec))
    log.info("generator: %d parameters", count_parameters(net))
    return net


def build_segmenter(spec: SegmenterSpec = SegmenterSpec()) -> Segmenter:
    net = Segmenter(spec)
    log.info("segmenter: %d parameters", count_parameters(net))
    return net


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec()) -> PatchDiscriminator:
    net = init_weights(PatchDiscriminator(spec))
    log.info("discriminator(%d ch): %d parameters", spec.in_channels, count_parameters(net))
    return net
