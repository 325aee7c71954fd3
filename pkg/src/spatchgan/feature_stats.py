"""Channel-wise statistical features over spatial positions.

Every statistic maps a feature map of shape ``(B, C, H, W)`` to a ``(B, C)``
tensor, computed independently per sample. Nothing is pooled across the batch.
"""

import torch

STAT_KINDS = ("mean", "max", "stddev")

# Added under the square root in the backward pass only.
_STD_GRAD_EPS = 1e-8


class FeatureStatsError(ValueError):
    """Raised when a feature map cannot be reduced to statistics."""


def _check(fm, scale):
    where = "scale %s" % scale if scale is not None else "feature map"
    if fm.dim() != 4:
        raise FeatureStatsError(
            "%s: expected a (B, C, H, W) tensor, got shape %s" % (where, tuple(fm.shape)))
    if min(fm.shape[1:]) < 1:
        raise FeatureStatsError("%s: empty axis in shape %s" % (where, tuple(fm.shape)))
    if not torch.isfinite(fm).all():
        raise FeatureStatsError("%s: non-finite values in feature map" % where)


def channel_mean(fm, scale=None):
    """Global average pooling: ``out[b, c] = mean_{h,w} fm[b, c, h, w]``."""
    _check(fm, scale)
    return fm.mean(dim=(2, 3))


def channel_max(fm, scale=None):
    """Global max pooling.

    Ties resolve to the first position in row-major order, and the gradient
    is routed to that single position.
    """
    _check(fm, scale)
    flat = fm.flatten(2)
    n = flat.shape[2]
    peak = flat.detach().amax(dim=2, keepdim=True)
    # Rank tied positions so that the earliest one wins the argmax uniquely.
    rank = torch.arange(n, 0, -1, device=fm.device)
    idx = ((flat.detach() == peak) * rank).argmax(dim=2, keepdim=True)
    return flat.gather(2, idx).squeeze(2)


class _UncorrectedStd(torch.autograd.Function):

    @staticmethod
    def forward(ctx, flat):
        centered = flat - flat.mean(dim=2, keepdim=True)
        var = (centered * centered).mean(dim=2)
        ctx.save_for_backward(centered, var)
        return var.sqrt()

    @staticmethod
    def backward(ctx, grad_out):
        centered, var = ctx.saved_tensors
        n = centered.shape[2]
        denom = n * torch.sqrt(var + _STD_GRAD_EPS)
        # centered is identically zero at zero variance, so the gradient is 0 there.
        return grad_out.unsqueeze(2) * centered / denom.unsqueeze(2)


def channel_stddev(fm, scale=None):
    """Uncorrected standard deviation over spatial positions (divisor ``H*W``)."""
    _check(fm, scale)
    return _UncorrectedStd.apply(fm.flatten(2))


_STAT_FNS = {
    "mean": channel_mean,
    "max": channel_max,
    "stddev": channel_stddev,
}


def compute_stat(kind, fm, scale=None):
    try:
        fn = _STAT_FNS[kind]
    except KeyError:
        raise FeatureStatsError(
            "unknown statistic %r, expected one of %s" % (kind, ", ".join(STAT_KINDS))) from None
    return fn(fm, scale=scale)
