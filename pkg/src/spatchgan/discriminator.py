"""Statistical-feature multi-scale discriminator and the multi-scale PatchGAN baseline.

The SPatchGAN discriminator shares one downsampling backbone across scales.
Each scale adapts its feature maps with two 1x1 convolutions, reduces them to
channel-wise statistics, and feeds every statistic to a dedicated MLP that
emits one scalar per sample.
"""

from dataclasses import dataclass, field

import torch
from torch import nn
import torch.nn.functional as F

from .feature_stats import STAT_KINDS, compute_stat
from .spectral import SNConv2d, SNLinear

VARIANTS = ("spatchgan", "multiscale_patchgan")


class DiscriminatorConfigError(ValueError):
    pass


@dataclass
class DiscriminatorConfig:
    num_scales: int = 4
    enabled_stats: tuple = STAT_KINDS
    base_channels: int = 64
    channel_cap: int = 512
    mlp_layers: int = 3
    sn: bool = True
    sn_power_iters: int = 1
    variant: str = "spatchgan"
    # multiscale_patchgan only
    patch_layers: int = 4
    patch_num_d: int = 3

    @property
    def num_stats(self):
        return len(self.enabled_stats)

    def validate(self):
        if self.variant not in VARIANTS:
            raise DiscriminatorConfigError(
                "variant must be one of %s, got %r" % (VARIANTS, self.variant))
        if self.num_scales < 1:
            raise DiscriminatorConfigError("num_scales must be >= 1")
        if not self.enabled_stats:
            raise DiscriminatorConfigError("enabled_stats must not be empty")
        bad = [s for s in self.enabled_stats if s not in STAT_KINDS]
        if bad or len(set(self.enabled_stats)) != len(self.enabled_stats):
            raise DiscriminatorConfigError(
                "enabled_stats must be distinct members of %s, got %s"
                % (STAT_KINDS, list(self.enabled_stats)))
        if self.mlp_layers < 1:
            raise DiscriminatorConfigError("mlp_layers must be >= 1")
        if self.base_channels < 1 or self.channel_cap < self.base_channels:
            raise DiscriminatorConfigError("need 1 <= base_channels <= channel_cap")

    def size_multiple(self):
        """Input height and width must be a multiple of this."""
        if self.variant == "spatchgan":
            return 4 * 2 ** self.num_scales
        return 2 ** (self.patch_num_d - 1 + self.patch_layers)

    def check_input_size(self, size):
        h, w = size
        k = self.size_multiple()
        if h % k or w % k or h < k or w < k:
            valid = ", ".join(str(k * i) for i in range(1, 5))
            raise DiscriminatorConfigError(
                "input size %dx%d invalid for %s with num_scales=%d: height and width "
                "must be positive multiples of %d (e.g. %s, ...)"
                % (h, w, self.variant, self.num_scales, k, valid))


@dataclass
class DisOutputGrid:
    """Scalar outputs ``D_{m,n}(x)``: ``values`` has shape ``(B, M*N)``.

    Column ``j`` holds the output labelled ``labels[j] = (scale, stat)``, with
    scales numbered from 1 and ordered scale-major.
    """
    values: torch.Tensor
    labels: list = field(default_factory=list)

    def outputs(self):
        return [self.values[:, j] for j in range(self.values.shape[1])]

    def column(self, scale, stat):
        return self.values[:, self.labels.index((scale, stat))]


@dataclass
class PatchOutputs:
    """Per-patch output maps, one ``(B, 1, h, w)`` tensor per sub-discriminator."""
    maps: list

    def outputs(self):
        return list(self.maps)


def _lrelu():
    return nn.LeakyReLU(0.2)


class StatMLP(nn.Module):
    """``mlp_layers`` fully connected layers of width C; linear final output."""

    def __init__(self, channels, n_layers, sn, power_iters):
        super().__init__()
        layers = []
        for _ in range(n_layers - 1):
            layers += [SNLinear(channels, channels, sn=sn, power_iters=power_iters), _lrelu()]
        layers.append(SNLinear(channels, 1, sn=sn, power_iters=power_iters))
        self.net = nn.Sequential(*layers)

    @property
    def final(self):
        return self.net[-1]

    def forward(self, s):
        return self.net(s).squeeze(1)


class SPatchDiscriminator(nn.Module):

    def __init__(self, cfg, input_size, in_channels=3):
        super().__init__()
        cfg.validate()
        cfg.check_input_size(input_size)
        self.cfg = cfg
        self.input_size = tuple(input_size)
        sn = dict(sn=cfg.sn, power_iters=cfg.sn_power_iters)

        c0 = cfg.base_channels
        self.init_block = nn.Sequential(
            SNConv2d(in_channels, c0, 4, stride=2, padding=1, **sn), _lrelu(),
            SNConv2d(c0, c0, 4, stride=2, padding=1, **sn), _lrelu(),
        )
        self.down = nn.ModuleList()
        self.adapt = nn.ModuleList()
        self.mlps = nn.ModuleDict({k: nn.ModuleList() for k in cfg.enabled_stats})
        self.channels = []
        c_prev = c0
        for m in range(cfg.num_scales):
            c = min(c0 * 2 ** (m + 1), cfg.channel_cap)
            if m == 0:
                # The initial block already reached H/4, the scale-1 resolution.
                conv = SNConv2d(c_prev, c, 3, stride=1, padding=1, **sn)
            else:
                conv = SNConv2d(c_prev, c, 4, stride=2, padding=1, **sn)
            self.down.append(nn.Sequential(conv, _lrelu()))
            self.adapt.append(nn.Sequential(
                SNConv2d(c, c, 1, **sn), _lrelu(),
                SNConv2d(c, c, 1, **sn), _lrelu(),
            ))
            for k in cfg.enabled_stats:
                self.mlps[k].append(StatMLP(c, cfg.mlp_layers, cfg.sn, cfg.sn_power_iters))
            self.channels.append(c)
            c_prev = c
        self.labels = [(m + 1, k) for m in range(cfg.num_scales) for k in cfg.enabled_stats]

    def scale_sizes(self):
        h, w = self.input_size
        return [(h // 4 // 2 ** m, w // 4 // 2 ** m) for m in range(self.cfg.num_scales)]

    def adapted_features(self, x):
        """Return the adapted feature maps ``h_m(x)`` for every scale."""
        if tuple(x.shape[2:]) != self.input_size:
            raise ValueError("expected input of spatial size %s, received %s"
                             % (self.input_size, tuple(x.shape[2:])))
        feats = []
        h = self.init_block(x)
        for down, adapt in zip(self.down, self.adapt):
            h = down(h)
            feats.append(adapt(h))
        return feats

    def heads(self, feats):
        """Map adapted feature maps to the output grid."""
        cols = []
        for m, fm in enumerate(feats):
            for k in self.cfg.enabled_stats:
                s = compute_stat(k, fm, scale=m + 1)
                cols.append(self.mlps[k][m](s))
        return DisOutputGrid(torch.stack(cols, dim=1), list(self.labels))

    def forward(self, x):
        return self.heads(self.adapted_features(x))

    @staticmethod
    def block_name(key):
        """Checkpoint name for a state-dict key, e.g. ``scale2/adapt/0/weight``."""
        parts = key.split(".")
        if parts[0] in ("down", "adapt"):
            return "/".join(["scale%d" % (int(parts[1]) + 1), parts[0]] + parts[2:])
        if parts[0] == "mlps":
            return "/".join(["mlp", parts[1], "scale%d" % (int(parts[2]) + 1)] + parts[3:])
        return "/".join(parts)


class NLayerPatchDiscriminator(nn.Module):
    """Single PatchGAN classifier emitting a map of per-patch scores."""

    def __init__(self, in_channels, base_channels, channel_cap, n_layers, sn, power_iters):
        super().__init__()
        kw = dict(sn=sn, power_iters=power_iters)
        layers = [SNConv2d(in_channels, base_channels, 4, stride=2, padding=1, **kw), _lrelu()]
        c = base_channels
        for i in range(1, n_layers):
            c_next = min(base_channels * 2 ** i, channel_cap)
            layers += [SNConv2d(c, c_next, 4, stride=2, padding=1, **kw), _lrelu()]
            c = c_next
        layers.append(SNConv2d(c, 1, 1, **kw))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class MultiScalePatchDiscriminator(nn.Module):
    """Independent PatchGAN classifiers on the full, 1/4-area and 1/16-area images."""

    def __init__(self, cfg, input_size, in_channels=3):
        super().__init__()
        cfg.validate()
        if cfg.variant != "multiscale_patchgan":
            raise DiscriminatorConfigError(
                "multi-scale PatchGAN requested with variant=%r" % cfg.variant)
        cfg.check_input_size(input_size)
        self.cfg = cfg
        self.input_size = tuple(input_size)
        self.nets = nn.ModuleList(
            NLayerPatchDiscriminator(in_channels, cfg.base_channels, cfg.channel_cap,
                                     cfg.patch_layers, cfg.sn, cfg.sn_power_iters)
            for _ in range(cfg.patch_num_d))

    @staticmethod
    def block_name(key):
        return key.replace(".", "/")

    def forward(self, x):
        if tuple(x.shape[2:]) != self.input_size:
            raise ValueError("expected input of spatial size %s, received %s"
                             % (self.input_size, tuple(x.shape[2:])))
        maps = []
        for i, net in enumerate(self.nets):
            if i:
                x = F.avg_pool2d(x, 2)
            maps.append(net(x))
        return PatchOutputs(maps)


def build_discriminator(cfg, input_size, in_channels=3):
    if cfg.variant == "multiscale_patchgan":
        return build_patchgan_baseline(cfg, input_size, in_channels)
    return SPatchDiscriminator(cfg, input_size, in_channels)


def build_patchgan_baseline(cfg, input_size, in_channels=3):
    return MultiScalePatchDiscriminator(cfg, input_size, in_channels)
