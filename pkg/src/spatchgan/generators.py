"""Forward generator G and the low-resolution backward generator B."""

import logging
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

LOW_RES_FACTOR = 8
# Input range handling: clamp silently up to RANGE_WARN, clamp with a warning
# up to RANGE_FAIL, raise beyond.
RANGE_WARN = 1e-3
RANGE_FAIL = 0.1


@dataclass
class GeneratorConfig:
    base_channels: int = 64
    channel_cap: int = 256
    num_residual_blocks: int = 6
    downsample_steps: int = 3
    image_channels: int = 3
    backward_norm: str = "instance"  # norm inside B's residual blocks: instance | layer

    def validate(self):
        if self.downsample_steps != 3:
            raise ValueError("downsample_steps must be 3 so residual blocks run at H/8 x W/8")
        if self.num_residual_blocks < 0 or self.base_channels < 1:
            raise ValueError("invalid generator sizes")
        if self.backward_norm not in ("instance", "layer"):
            raise ValueError("backward_norm must be 'instance' or 'layer'")

    @property
    def trunk_channels(self):
        return min(self.base_channels * 2 ** self.downsample_steps, self.channel_cap)


class LayerNorm2d(nn.Module):
    """Normalizes each sample over (C, H, W) with a per-channel affine transform."""

    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        var = x.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
        x = (x - mean) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def _norm(kind, channels):
    if kind == "layer":
        return LayerNorm2d(channels)
    return nn.InstanceNorm2d(channels, affine=True)


def _conv3(c_in, c_out, stride=1):
    return nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, padding_mode="reflect")


class ResidualBlock(nn.Module):

    def __init__(self, channels, norm="instance"):
        super().__init__()
        self.body = nn.Sequential(
            _conv3(channels, channels), _norm(norm, channels), nn.ReLU(),
            _conv3(channels, channels), _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.body(x)


def check_image_range(x):
    """Clamp ``x`` into [-1, 1], warning or failing on larger excursions."""
    excess = (x.detach().abs().max() - 1.0).item() if x.numel() else 0.0
    if excess <= 0:
        return x
    if excess > RANGE_FAIL:
        raise ValueError("input pixel values exceed [-1, 1] by %.4g" % excess)
    if excess > RANGE_WARN:
        log.warning("input pixel values exceed [-1, 1] by %.4g; clamping", excess)
    return x.clamp(-1.0, 1.0)


class ForwardGenerator(nn.Module):
    """Downsampling to H/8, residual trunk, nearest-neighbour upsampling back.

    Instance norm in the encoder and trunk, layer norm in the upsampling
    layers, 3x3 convolutions throughout and a tanh output.
    """

    def __init__(self, cfg, image_size):
        super().__init__()
        cfg.validate()
        h, w = image_size
        if h % LOW_RES_FACTOR or w % LOW_RES_FACTOR:
            raise ValueError("image size %dx%d not divisible by %d" % (h, w, LOW_RES_FACTOR))
        self.cfg = cfg
        self.image_size = (h, w)
        c = cfg.base_channels
        enc = [_conv3(cfg.image_channels, c), _norm("instance", c), nn.ReLU()]
        for _ in range(cfg.downsample_steps):
            c_next = min(c * 2, cfg.channel_cap)
            enc += [_conv3(c, c_next, stride=2), _norm("instance", c_next), nn.ReLU()]
            c = c_next
        self.encoder = nn.Sequential(*enc)
        self.trunk = nn.Sequential(*[ResidualBlock(c) for _ in range(cfg.num_residual_blocks)])
        dec = []
        for _ in range(cfg.downsample_steps):
            c_next = max(c // 2, cfg.base_channels)
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    _conv3(c, c_next), LayerNorm2d(c_next), nn.ReLU()]
            c = c_next
        self.decoder = nn.Sequential(*dec)
        self.to_rgb = _conv3(c, cfg.image_channels)

    @property
    def final(self):
        return self.to_rgb

    def forward(self, x):
        if tuple(x.shape[2:]) != self.image_size:
            raise ValueError("expected images of size %s, received %s"
                             % (self.image_size, tuple(x.shape[2:])))
        x = check_image_range(x)
        return torch.tanh(self.to_rgb(self.decoder(self.trunk(self.encoder(x)))))


class BackwardGenerator(nn.Module):
    """Residual network working entirely at H/8 x W/8."""

    def __init__(self, cfg, image_size):
        super().__init__()
        cfg.validate()
        h, w = image_size
        self.cfg = cfg
        self.low_size = (h // LOW_RES_FACTOR, w // LOW_RES_FACTOR)
        c = cfg.trunk_channels
        self.stem = nn.Sequential(_conv3(cfg.image_channels, c), _norm("instance", c), nn.ReLU())
        self.trunk = nn.Sequential(
            *[ResidualBlock(c, cfg.backward_norm) for _ in range(cfg.num_residual_blocks)])
        self.to_rgb = _conv3(c, cfg.image_channels)

    @property
    def final(self):
        return self.to_rgb

    def forward(self, y_low):
        if tuple(y_low.shape[2:]) != self.low_size:
            raise ValueError("backward generator expects %s inputs, received %s"
                             % (self.low_size, tuple(y_low.shape[2:])))
        return torch.tanh(self.to_rgb(self.trunk(self.stem(y_low))))


def translate(g, x1):
    return g(x1)


def reconstruct_low(b, y_low):
    return b(y_low)


def downscale_u(x):
    """Bilinear 8x reduction per axis with half-pixel centres (no corner alignment).

    Output pixel ``i`` samples the input at ``8 * i + 3.5``, i.e. it averages
    input pixels ``8i+3`` and ``8i+4`` along each axis.
    """
    h, w = x.shape[-2:]
    if h % LOW_RES_FACTOR or w % LOW_RES_FACTOR:
        raise ValueError("image size %dx%d not divisible by %d" % (h, w, LOW_RES_FACTOR))
    return F.interpolate(x, size=(h // LOW_RES_FACTOR, w // LOW_RES_FACTOR),
                         mode="bilinear", align_corners=False, antialias=False)


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
