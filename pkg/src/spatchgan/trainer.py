"""Training loop: learning-rate schedule, alternating updates, checkpoints, metrics log."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import checkpoint as ckpt
from .data import BatchIterator
from .discriminator import DisOutputGrid, PatchOutputs, build_discriminator
from .generators import BackwardGenerator, ForwardGenerator
from .losses import (
    LossReport, d_adversarial_loss, g_adversarial_loss, identity_loss, make_report,
    total_generator_loss, weak_cycle_loss,
)

log = logging.getLogger(__name__)

INIT_STD = 0.02


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


def lr_at(iteration, cfg):
    """Constant ``lr_start`` during warm-up, then linear decay to ``lr_end`` at the last iteration."""
    total, warmup = cfg.iters, cfg.warmup
    if not 0 <= iteration <= total:
        raise ValueError("iteration %d outside [0, %d]" % (iteration, total))
    if iteration < warmup or total == warmup:
        return cfg.lr_start
    frac = (iteration - warmup) / (total - warmup)
    return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * frac


def init_weights(module):
    """N(0, 0.02) for conv and linear weights, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, INIT_STD)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif hasattr(m, "weight") and isinstance(getattr(m, "weight"), nn.Parameter):
            nn.init.ones_(m.weight)
            if getattr(m, "bias", None) is not None:
                nn.init.zeros_(m.bias)


def make_optimizer(modules, cfg):
    """AdamW with decoupled decay on conv/linear weights only (not biases or norm params)."""
    decay, no_decay = [], []
    for module in modules:
        for p in module.parameters():
            (decay if p.ndim > 1 else no_decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr_start, betas=(cfg.adam_beta1, cfg.adam_beta2))


class Models:
    """Forward generator, backward generator, discriminator and their optimizers."""

    def __init__(self, cfg, dtype=torch.float32):
        torch.manual_seed(cfg.seed)
        size = (cfg.image_size, cfg.image_size)
        self.cfg = cfg
        self.g = ForwardGenerator(cfg.gen, size)
        self.b = BackwardGenerator(cfg.gen, size)
        self.d = build_discriminator(cfg.disc, size)
        for m in (self.g, self.b, self.d):
            init_weights(m)
            m.to(dtype)
        self.opt_g = make_optimizer([self.g, self.b], cfg)
        self.opt_d = make_optimizer([self.d], cfg)

    def named_modules(self):
        return {"gen_fwd": self.g, "gen_bwd": self.b, "disc": self.d}

    def set_lr(self, lr):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    # checkpoint conversion

    def _param_names(self):
        names = {}
        for prefix, module in self.named_modules().items():
            namer = getattr(module, "block_name", lambda k: k.replace(".", "/"))
            for key, p in module.named_parameters():
                names[p] = "%s/%s" % (prefix, namer(key))
        return names

    def _state_tensors(self):
        out = {}
        for prefix, module in self.named_modules().items():
            namer = getattr(module, "block_name", lambda k: k.replace(".", "/"))
            for key, t in module.state_dict(keep_vars=True).items():
                if t.is_floating_point():
                    out["%s/%s" % (prefix, namer(key))] = t
        names = self._param_names()
        for opt_name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for group in opt.param_groups:
                for p in group["params"]:
                    state = opt.state.get(p)
                    for slot in ("exp_avg", "exp_avg_sq", "step"):
                        key = "%s/%s/%s" % (opt_name, slot, names[p])
                        if state:
                            out[key] = state[slot]
                        else:
                            out[key] = None if slot == "step" else torch.zeros_like(p)
        return out

    def expected_blocks(self):
        return {k: tuple(v.shape) if v is not None else () for k, v in self._state_tensors().items()}

    def to_blocks(self):
        blocks = {}
        for k, v in self._state_tensors().items():
            if v is None:
                blocks[k] = np.zeros((), dtype=np.float32)
            else:
                blocks[k] = v.detach().cpu().to(torch.float32).numpy().copy()
        return blocks

    def sn_counters(self):
        out = {}
        for prefix, module in self.named_modules().items():
            for key, t in module.state_dict().items():
                if not t.is_floating_point():
                    out["%s/%s" % (prefix, key)] = int(t)
        return out

    def load_blocks(self, blocks, counters=None):
        ckpt.match_blocks(self.expected_blocks(), blocks)
        tensors = self._state_tensors()
        names = self._param_names()
        with torch.no_grad():
            for k, t in tensors.items():
                if t is not None and "/step/" not in k and not k.startswith("opt_"):
                    t.copy_(torch.from_numpy(blocks[k]).to(t.dtype))
        for opt_name, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for group in opt.param_groups:
                for p in group["params"]:
                    step = float(blocks["%s/step/%s" % (opt_name, names[p])])
                    if step == 0:
                        opt.state.pop(p, None)
                        continue
                    opt.state[p] = {
                        "step": torch.tensor(step, dtype=torch.float32),
                        "exp_avg": torch.from_numpy(
                            blocks["%s/exp_avg/%s" % (opt_name, names[p])]).to(p.dtype).clone(),
                        "exp_avg_sq": torch.from_numpy(
                            blocks["%s/exp_avg_sq/%s" % (opt_name, names[p])]).to(p.dtype).clone(),
                    }
        if counters:
            for prefix, module in self.named_modules().items():
                sd = module.state_dict()
                for key, t in sd.items():
                    full = "%s/%s" % (prefix, key)
                    if not t.is_floating_point() and full in counters:
                        t.fill_(counters[full])


def output_labels(out):
    if isinstance(out, DisOutputGrid):
        return ["%d_%s" % (m, s) for m, s in out.labels]
    return ["patch%d" % (k + 1) for k in range(len(out.maps))]


def _split(out, n):
    if isinstance(out, DisOutputGrid):
        return (DisOutputGrid(out.values[:n], out.labels),
                DisOutputGrid(out.values[n:], out.labels))
    return PatchOutputs([m[:n] for m in out.maps]), PatchOutputs([m[n:] for m in out.maps])


def output_means(out):
    """Batch (and patch) mean of every discriminator output."""
    return [float(o.detach().mean()) for o in out.outputs()]


def per_image_outputs(out):
    """``(B, K)`` array of every output per image, patch maps averaged."""
    cols = [o.detach().reshape(o.shape[0], -1).mean(1) for o in out.outputs()]
    return torch.stack(cols, 1).double().numpy()


@dataclass
class StepReport:
    iteration: int
    lr: float
    losses: LossReport
    labels: list = field(default_factory=list)
    d_real: list = field(default_factory=list)
    d_fake: list = field(default_factory=list)

    def row(self):
        l = self.losses
        return ([self.iteration, self.lr, l.d_adv, l.g_adv, l.cyc, l.id, l.g_total]
                + list(self.d_real) + list(self.d_fake))

    def header(self):
        return (["iteration", "lr", "d_adv", "g_adv", "cyc", "id", "g_total"]
                + ["d_real_%s" % k for k in self.labels]
                + ["d_fake_%s" % k for k in self.labels])


def _dump_nonfinite(models, tensors, iteration, dump_dir):
    if dump_dir is None:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, "nonfinite_iter%07d.pt" % iteration)
    torch.save({"iteration": iteration,
                "tensors": {k: v.detach().cpu() for k, v in tensors.items()},
                "models": {k: m.state_dict() for k, m in models.named_modules().items()}}, path)
    return path


def _check_finite(models, iteration, dump_dir, **tensors):
    bad = [k for k, v in tensors.items() if v.dim() == 0 and not math.isfinite(float(v.detach()))]
    if bad:
        path = _dump_nonfinite(models, tensors, iteration, dump_dir)
        raise NonFiniteLossError(
            "non-finite %s at iteration %d (diagnostics: %s)" % (", ".join(bad), iteration, path),
            path)


def _set_requires_grad(module, flag):
    for p in module.parameters():
        p.requires_grad_(flag)


def train_step(models, x1, x2, cfg, iteration, dump_dir=None):
    """One discriminator update followed by one joint G + B update.

    ``x1`` is a source-domain batch, ``x2`` a target-domain batch.
    """
    if x1.shape != x2.shape:
        raise ValueError("source and target batches differ in shape: %s vs %s"
                         % (tuple(x1.shape), tuple(x2.shape)))
    g, b, d = models.g, models.b, models.d
    lr = lr_at(iteration, cfg)
    models.set_lr(lr)
    n = x1.shape[0]

    # Discriminator: one power iteration per forward, on real and fake together.
    with torch.no_grad():
        fake = g(x1)
    d.train()
    for _ in range(cfg.d_updates):
        out = d(torch.cat([x2, fake]))
        real_out, fake_out = _split(out, n)
        d_loss = d_adversarial_loss(real_out, fake_out)
        _check_finite(models, iteration, dump_dir, d_adv=d_loss, x1=x1, x2=x2)
        models.opt_d.zero_grad()
        d_loss.backward()
        models.opt_d.step()

    # Generators, against a frozen discriminator (spectral-norm vectors held).
    d.eval()
    _set_requires_grad(d, False)
    try:
        gx = g(torch.cat([x1, x2]))
        gx1, gx2 = gx[:n], gx[n:]
        g_adv_parts = g_adversarial_loss(d(gx1), reduce=False)
        cyc = weak_cycle_loss(x1, gx1, b)
        idt = identity_loss(x2, gx2)
        g_total = total_generator_loss(g_adv_parts.mean(), cyc, idt, cfg.loss)
        _check_finite(models, iteration, dump_dir, g_total=g_total, x1=x1, x2=x2)
        models.opt_g.zero_grad()
        g_total.backward()
        models.opt_g.step()
    finally:
        _set_requires_grad(d, True)
        d.train()

    return StepReport(
        iteration=iteration, lr=lr,
        losses=make_report(d_loss.detach(), g_adv_parts.detach(), cyc.detach(),
                           idt.detach(), cfg.loss),
        labels=output_labels(out), d_real=output_means(real_out), d_fake=output_means(fake_out))


def make_bundle(models, cfg, iteration, data_state=None):
    meta = {"iteration": iteration, "arch_hash": cfg.arch_hash(), "config": cfg.to_dict(),
            "sn_counters": models.sn_counters(), "data_state": data_state}
    return ckpt.CheckpointBundle(models.to_blocks(), meta)


def restore(models, bundle, cfg=None):
    if cfg is not None and bundle.meta.get("arch_hash") not in (None, cfg.arch_hash()):
        log.warning("checkpoint architecture hash %s differs from config %s",
                    bundle.meta.get("arch_hash"), cfg.arch_hash())
    models.load_blocks(bundle.blocks, bundle.meta.get("sn_counters"))
    return bundle.iteration


class MetricsLog:
    """Append-only CSV of step reports."""

    def __init__(self, path):
        self.path = path
        self._header_written = os.path.exists(path) and os.path.getsize(path) > 0

    def truncate_from(self, iteration):
        """Drop rows at or after ``iteration`` (used when resuming)."""
        if not self._header_written:
            return
        with open(self.path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) < iteration]
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerows(keep)

    def append(self, report):
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if not self._header_written:
                w.writerow(report.header())
                self._header_written = True
            w.writerow(report.row())


def to_tensor(batch, dtype=torch.float32):
    return torch.from_numpy(np.asarray(batch)).to(dtype)


def run_training(cfg, source, target, out_dir, resume=None, eval_hook=None,
                 step_hook=None, stop_after=None):
    """Train for ``cfg.iters`` iterations; returns ``(final_bundle, metrics_path)``.

    ``source`` and ``target`` are indexable image domains (see ``data``).
    ``eval_hook(models, iteration)`` runs every ``eval_interval`` iterations;
    ``step_hook(report)`` after every step. ``stop_after`` ends the run early
    after that many steps, with a checkpoint, as an interruption would.
    """
    os.makedirs(out_dir, exist_ok=True)
    models = Models(cfg)
    batches = BatchIterator(source, target, cfg.batch_size, cfg.seed,
                            cfg.data.augmentation, cfg.image_size, cfg.data.workers)
    metrics = MetricsLog(os.path.join(out_dir, "metrics.csv"))
    start = 0
    if resume is not None:
        bundle = ckpt.load_checkpoint(resume) if isinstance(resume, str) else resume
        start = restore(models, bundle, cfg)
        if bundle.meta.get("data_state"):
            batches.load_state_dict(bundle.meta["data_state"])
        metrics.truncate_from(start)
        log.info("resumed from iteration %d", start)

    total = cfg.iters
    ckpt_every = cfg.interval("checkpoint_interval")
    eval_every = cfg.interval("eval_interval")
    log_every = cfg.interval("log_interval")
    last_path = os.path.join(out_dir, "checkpoint_last.ckpt")

    if start == 0:
        ckpt.save_checkpoint(make_bundle(models, cfg, 0, batches.state_dict()),
                             os.path.join(out_dir, "checkpoint_0000000.ckpt"))

    it = start
    try:
        while it < total:
            x1, x2 = next(batches)
            report = train_step(models, to_tensor(x1), to_tensor(x2), cfg, it, dump_dir=out_dir)
            it += 1
            if it % log_every == 0 or it == total:
                metrics.append(report)
            if step_hook:
                step_hook(report)
            if it % ckpt_every == 0:
                ckpt.save_checkpoint(make_bundle(models, cfg, it, batches.state_dict()),
                                     os.path.join(out_dir, "checkpoint_%07d.ckpt" % it))
            if eval_hook and it % eval_every == 0:
                models.g.eval()
                eval_hook(models, it)
                models.g.train()
            if stop_after is not None and it - start >= stop_after:
                break
    finally:
        batches.close()

    bundle = make_bundle(models, cfg, it, batches.state_dict())
    ckpt.save_checkpoint(bundle, last_path)
    return bundle, metrics.path
