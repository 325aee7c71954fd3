"""Least-squares adversarial, weak cycle and identity objectives.

L1 terms are means over every element, so loss weights do not depend on
image resolution.
"""

from dataclasses import dataclass, field

import torch

from .generators import downscale_u


@dataclass
class LossWeights:
    lambda_adv: float = 4.0
    lambda_cyc: float = 20.0
    lambda_id: float = 10.0

    def validate(self):
        for name in ("lambda_adv", "lambda_cyc", "lambda_id"):
            if getattr(self, name) < 0:
                raise ValueError("%s must be >= 0" % name)


@dataclass
class LossReport:
    d_adv: float
    g_adv: float
    cyc: float
    id: float
    g_total: float
    g_adv_parts: list = field(default_factory=list)


def _outputs(grid):
    outs = grid.outputs() if hasattr(grid, "outputs") else list(grid)
    if not outs:
        raise ValueError("empty discriminator output")
    return outs


def _check_pair(real, fake):
    if len(real) != len(fake):
        raise ValueError("grid shape mismatch: %d vs %d outputs" % (len(real), len(fake)))
    for r, f in zip(real, fake):
        if r.shape != f.shape:
            raise ValueError("real and fake outputs differ in shape: %s vs %s"
                             % (tuple(r.shape), tuple(f.shape)))


def d_adversarial_loss(real_grid, fake_grid):
    """Discriminator LSGAN loss with targets 1 (real) and 0 (fake), averaged over outputs.

    Patch-map outputs are averaged over batch and patches.
    """
    real, fake = _outputs(real_grid), _outputs(fake_grid)
    _check_pair(real, fake)
    terms = [((r - 1) ** 2).mean() + (f ** 2).mean() for r, f in zip(real, fake)]
    return torch.stack(terms).mean()


def g_adversarial_loss(fake_grid, reduce=True):
    parts = torch.stack([((f - 1) ** 2).mean() for f in _outputs(fake_grid)])
    return parts.mean() if reduce else parts


def weak_cycle_loss(x1, gx1, b):
    """``mean |u(x1) - B(u(G(x1)))|`` at 1/8 resolution."""
    if x1.shape != gx1.shape:
        raise ValueError("source and translated batches differ in shape: %s vs %s"
                         % (tuple(x1.shape), tuple(gx1.shape)))
    return (downscale_u(x1) - b(downscale_u(gx1))).abs().mean()


def identity_loss(x2, gx2):
    if x2.shape != gx2.shape:
        raise ValueError("target and translated batches differ in shape: %s vs %s"
                         % (tuple(x2.shape), tuple(gx2.shape)))
    return (x2 - gx2).abs().mean()


def total_generator_loss(g_adv, cyc, id_, w):
    return w.lambda_adv * g_adv + w.lambda_cyc * cyc + w.lambda_id * id_


def make_report(d_adv, g_adv_parts, cyc, id_, w):
    g_adv = float(g_adv_parts.mean())
    cyc, id_ = float(cyc), float(id_)
    return LossReport(
        d_adv=float(d_adv), g_adv=g_adv, cyc=cyc, id=id_,
        g_total=float(total_generator_loss(g_adv, cyc, id_, w)),
        g_adv_parts=[float(v) for v in g_adv_parts])
