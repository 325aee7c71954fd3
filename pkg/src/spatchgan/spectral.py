"""Spectral normalization with a persisted power-iteration vector."""

import torch
from torch import nn
import torch.nn.functional as F

SIGMA_FLOOR = 1e-12


def _l2normalize(v, eps=1e-12):
    return v / (v.norm() + eps)


def power_iteration(w_mat, u, n_iters=1):
    """Run ``n_iters`` power-iteration steps on a 2-D matrix.

    Returns the updated unit vectors ``(u, v)``. No gradient flows through them.
    """
    with torch.no_grad():
        v = _l2normalize(w_mat.t().mv(u))
        for _ in range(n_iters):
            v = _l2normalize(w_mat.t().mv(u))
            u = _l2normalize(w_mat.mv(v))
    return u, v


def spectral_normalize(weight, u, n_iters=1):
    """Divide ``weight`` by its estimated largest singular value.

    ``weight`` is flattened to ``(out_channels, -1)``. Returns
    ``(normalized_weight, new_u, sigma)``; ``sigma`` is ``u^T W v`` and keeps
    the autograd path to ``weight``. A zero matrix yields a zero result.
    """
    w_mat = weight.reshape(weight.shape[0], -1)
    u, v = power_iteration(w_mat, u, n_iters)
    sigma = torch.dot(u, w_mat.mv(v))
    sigma = sigma.clamp_min(SIGMA_FLOOR)
    return weight / sigma, u, sigma


class _SpectralNormMixin:
    """Shared state handling for the normalized layers.

    The left singular vector estimate ``weight_u`` advances by one power
    iteration per forward pass in training mode and is frozen in eval mode.
    """

    def _init_sn(self, enabled, power_iters):
        self.sn_enabled = enabled
        self.power_iters = power_iters
        u = torch.randn(self.weight.shape[0])
        self.register_buffer("weight_u", _l2normalize(u))
        self.register_buffer("sn_iters", torch.zeros((), dtype=torch.long))

    def normalized_weight(self):
        if not self.sn_enabled:
            return self.weight
        u = self.weight_u.to(self.weight.dtype)
        n_iters = self.power_iters if self.training else 0
        w_sn, u_new, _ = spectral_normalize(self.weight, u, n_iters)
        if n_iters:
            with torch.no_grad():
                self.weight_u.copy_(u_new)
                self.sn_iters += n_iters
        return w_sn

    def sigma(self):
        """Current estimate of the top singular value (no state update)."""
        w_mat = self.weight.detach().reshape(self.weight.shape[0], -1)
        u = self.weight_u.to(w_mat.dtype)
        u, v = power_iteration(w_mat, u, 0)
        return torch.dot(u, w_mat.mv(v)).item()


class SNConv2d(_SpectralNormMixin, nn.Conv2d):

    def __init__(self, *args, sn=True, power_iters=1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn(sn, power_iters)

    def forward(self, x):
        return F.conv2d(x, self.normalized_weight(), self.bias,
                        self.stride, self.padding, self.dilation, self.groups)


class SNLinear(_SpectralNormMixin, nn.Linear):

    def __init__(self, *args, sn=True, power_iters=1, **kwargs):
        super().__init__(*args, **kwargs)
        self._init_sn(sn, power_iters)

    def forward(self, x):
        return F.linear(x, self.normalized_weight(), self.bias)
