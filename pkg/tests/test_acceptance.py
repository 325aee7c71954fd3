"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

Lines are printed as they are produced (visible with ``-s``) and repeated in
the terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np
import pytest
import torch

from spatchgan.checkpoint import load_checkpoint, save_checkpoint
from spatchgan.config import config_from_dict
from spatchgan.data import ArrayDomain, checkers, to_unit_range, toy_domains, write_images
from spatchgan.discriminator import DiscriminatorConfig, DisOutputGrid, build_discriminator
from spatchgan.feature_stats import channel_max, channel_mean, channel_stddev, compute_stat
from spatchgan.generators import BackwardGenerator, ForwardGenerator, GeneratorConfig
from spatchgan.losses import (
    LossWeights, d_adversarial_loss, g_adversarial_loss, identity_loss, make_report,
    total_generator_loss, weak_cycle_loss,
)
from spatchgan.metrics import (
    GaussianStats, ToyConvEmbedder, embed_arrays, evaluate, fid, fit_gaussian, kid,
)
from spatchgan.spectral import SNConv2d, SNLinear, spectral_normalize
from spatchgan.trainer import Models, init_weights, make_bundle, restore, run_training

import conftest
from test_feature_stats import brute_max, brute_mean, brute_std
from test_metrics import brute_mmd2


def record(criterion, ok, detail):
    line = "[%s] %s: %s" % ("PASS" if ok else "FAIL", criterion, detail)
    print(line, flush=True)
    conftest.ACCEPTANCE_LINES.append(line)
    assert ok, line


def _rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def _fd_check(f, params, picks, eps=1e-6):
    """Worst relative error between autograd and central differences at ``picks``."""
    loss = f()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    for pi, idx in picks:
        p = params[pi]
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + eps
            up = f().item()
            p[idx] = old - eps
            down = f().item()
            p[idx] = old
        num = (up - down) / (2 * eps)
        ana = grads[pi][idx].item()
        if max(abs(ana), abs(num)) > 1e-9:
            worst = max(worst, _rel_err(ana, num))
    return worst


# 1 -------------------------------------------------------------------------

def test_c1_statistic_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(200):
        h, w, c = rng.integers(1, 9), rng.integers(1, 9), rng.integers(1, 5)
        fm = rng.standard_normal((1, c, h, w)) * rng.uniform(0.1, 10)
        t = torch.from_numpy(fm)
        for fn, oracle in ((channel_mean, brute_mean), (channel_max, brute_max),
                           (channel_stddev, brute_std)):
            got, ref = fn(t).numpy(), oracle(fm)
            err = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-12)
            worst = max(worst, float(err.max()))
    ex = torch.tensor([[[[1.0, 3.0], [2.0, 2.0]]]], dtype=torch.float64)
    sqrt_half = abs(channel_stddev(ex).item() - math.sqrt(0.5)) < 1e-12
    elapsed = time.perf_counter() - t0
    record("C1 statistic oracles", worst <= 1e-6 and sqrt_half and elapsed < 10,
           "200 maps, max rel err %.2e (tol 1e-6); [[1,3],[2,2]] stddev = sqrt(0.5): %s; %.1fs"
           % (worst, sqrt_half, elapsed))


# 2 -------------------------------------------------------------------------

def test_c2_gradient_suite():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    rng = np.random.default_rng(0)

    # feature statistics
    x = torch.randn(2, 3, 5, 4, dtype=torch.float64, requires_grad=True)
    wts = torch.randn(2, 3, dtype=torch.float64)
    stat_err = 0.0
    for kind in ("mean", "max", "stddev"):
        f = lambda: (compute_stat(kind, x) * wts).sum()
        picks = [(0, (i, c, yy, xx)) for i in range(2) for c in range(3)
                 for yy in range(5) for xx in range(4)]
        stat_err = max(stat_err, _fd_check(f, [x], picks))

    # discriminator end to end, input gradients at 32x32
    cfg = DiscriminatorConfig(num_scales=3, base_channels=4, channel_cap=8)
    d = build_discriminator(cfg, (32, 32))
    init_weights(d)
    d = d.double().eval()
    xin = (torch.rand(1, 3, 32, 32, dtype=torch.float64) * 2 - 1).requires_grad_(True)
    wd = torch.randn(9, dtype=torch.float64)
    f = lambda: (d(xin).values[0] * wd).sum()
    picks = [(0, (0, int(rng.integers(3)), int(rng.integers(32)), int(rng.integers(32))))
             for _ in range(10)]
    disc_err = _fd_check(f, [xin], picks)

    # total generator loss w.r.t. forward-generator parameters
    gcfg = GeneratorConfig(base_channels=4, channel_cap=8, num_residual_blocks=1)
    g, b = ForwardGenerator(gcfg, (32, 32)), BackwardGenerator(gcfg, (32, 32))
    for m in (g, b):
        init_weights(m)
    g, b = g.double(), b.double()
    x1 = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    x2 = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    w = LossWeights()

    def gen_loss():
        gx1 = g(x1)
        return total_generator_loss(g_adversarial_loss(d(gx1)), weak_cycle_loss(x1, gx1, b),
                                    identity_loss(x2, g(x2)), w)

    params = [p for p in g.parameters() if p.ndim > 1]
    picks = []
    for _ in range(10):
        pi = int(rng.integers(len(params)))
        picks.append((pi, tuple(int(rng.integers(s)) for s in params[pi].shape)))
    gen_err = _fd_check(gen_loss, params, picks)

    elapsed = time.perf_counter() - t0
    ok = stat_err <= 1e-4 and disc_err <= 1e-3 and gen_err <= 1e-3 and elapsed < 300
    record("C2 gradient suite", ok,
           "float64 FD rel err: stats %.1e (tol 1e-4), D end-to-end %.1e (tol 1e-3), "
           "total G loss over 10 params %.1e (tol 1e-3); %.1fs"
           % (stat_err, disc_err, gen_err, elapsed))


# 3 -------------------------------------------------------------------------

def test_c3_spectral_norm():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorConfig(), (64, 64))
    init_weights(d)
    d.train()
    layers = [m for m in d.modules() if isinstance(m, (SNConv2d, SNLinear))]
    with torch.no_grad():
        for _ in range(50):
            for m in layers:
                m.normalized_weight()
        tops = []
        for m in layers:
            w_sn = m.normalized_weight()
            tops.append(torch.linalg.matrix_norm(w_sn.reshape(w_sn.shape[0], -1), ord=2).item())

    w = torch.tensor([[3.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    u = torch.tensor([0.6, 0.8], dtype=torch.float64)
    for _ in range(50):
        _, u, sigma = spectral_normalize(w, u)
    diag_err = abs(sigma.item() - 3.0)
    elapsed = time.perf_counter() - t0
    ok = all(0.95 <= t <= 1.05 for t in tops) and diag_err < 1e-3 and elapsed < 30
    record("C3 spectral norm", ok,
           "%d layers after 50 iterations, top singular values in [%.4f, %.4f] (need [0.95, 1.05]);"
           " diag(3,1) sigma err %.1e (tol 1e-3); %.1fs"
           % (len(tops), min(tops), max(tops), diag_err, elapsed))


# 4 -------------------------------------------------------------------------

def test_c4_loss_identities():
    def grid(v):
        return DisOutputGrid(torch.full((3, 12), float(v)), [(1, "mean")] * 12)

    d0 = d_adversarial_loss(grid(1.0), grid(0.0)).item()
    g25 = g_adversarial_loss(grid(0.5)).item()
    total = total_generator_loss(0.25, 0.1, 0.05, LossWeights(4, 20, 10))
    rep = make_report(0.0, torch.tensor([0.25, 0.25]), 0.1, 0.05, LossWeights(4, 20, 10))
    ok = (abs(d0) <= 1e-6 and abs(g25 - 0.25) <= 1e-6 and abs(total - 3.5) <= 1e-6
          and abs(rep.g_total - 3.5) <= 1e-6)
    record("C4 loss identities", ok,
           "d_adv(1,0) = %.2g, g_adv(0.5) = %.6f, recombination = %.6f / report %.6f "
           "(targets 0, 0.25, 3.5; tol 1e-6)" % (d0, g25, total, rep.g_total))


# 5 -------------------------------------------------------------------------

def _stat_vectors(d, images, batch=128):
    """Per-(scale, stat) statistic vectors of a frozen backbone."""
    out = {}
    with torch.no_grad():
        for i in range(0, len(images), batch):
            feats = d.adapted_features(torch.from_numpy(images[i:i + batch]))
            for m, fm in enumerate(feats):
                for k in d.cfg.enabled_stats:
                    out.setdefault((m, k), []).append(compute_stat(k, fm))
    return {key: torch.cat(v) for key, v in out.items()}


def test_c5_matched_feature_diagnostic():
    t0 = time.perf_counter()
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    pool = np.stack([to_unit_range(x) for x in checkers(3072, 64, rng)])
    train_pool, held_out = pool[:2048], pool[2048:]

    d = build_discriminator(DiscriminatorConfig(), (64, 64))
    init_weights(d)
    d.eval()
    train_stats = _stat_vectors(d, train_pool)
    held_stats = _stat_vectors(d, held_out)

    g = torch.Generator().manual_seed(1)
    means, final_losses = [], []
    for m in range(4):
        for k in d.cfg.enabled_stats:
            mlp = d.mlps[k][m]
            mlp.train()
            opt = torch.optim.Adam(mlp.parameters(), lr=1e-4, betas=(0.5, 0.999))
            s = train_stats[(m, k)]
            losses = []
            for step in range(600):
                # real and fake are independent draws from the same distribution
                idx = torch.randint(len(s), (128,), generator=g)
                real, fake = mlp(s[idx[:64]]), mlp(s[idx[64:]])
                loss = ((real - 1) ** 2).mean() + (fake ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(loss.item())
            mlp.eval()
            with torch.no_grad():
                means.append(mlp(held_stats[(m, k)]).mean().item())
            final_losses.append(np.mean(losses[-100:]))
    elapsed = time.perf_counter() - t0
    worst = max(abs(v - 0.5) for v in means)
    ok = len(means) == 12 and worst <= 0.05 and elapsed < 600
    record("C5 matched-feature diagnostic", ok,
           "12 heads, held-out means in [%.4f, %.4f] (need 0.5 +/- 0.05); final LSGAN loss "
           "%.4f-%.4f (optimum 0.5); %.1fs"
           % (min(means), max(means), min(final_losses), max(final_losses), elapsed))


# 6 -------------------------------------------------------------------------

def test_c6_architecture_contracts():
    torch.manual_seed(0)
    d = build_discriminator(DiscriminatorConfig(), (256, 256))
    init_weights(d)
    d.eval()
    sizes = [s[0] for s in d.scale_sizes()]
    x = torch.rand(1, 3, 256, 256) * 2 - 1
    with torch.no_grad():
        before = d(x).values.clone()
        for heads in d.mlps.values():
            for p in heads[3].parameters():
                p.add_(torch.randn_like(p))
        after = d(x).values
    lower_same = torch.equal(before[:, :9], after[:, :9])
    top_changed = not torch.equal(before[:, 9:], after[:, 9:])
    ok = sizes == [64, 32, 16, 8] and before.shape == (1, 12) and lower_same and top_changed
    record("C6 architecture contracts", ok,
           "256 input scale sizes %s, %d outputs; scale-4 MLP perturbation: scales 1-3 "
           "bit-identical %s, scale 4 changed %s"
           % (sizes, before.shape[1], lower_same, top_changed))


# 7 -------------------------------------------------------------------------

def test_c7_metric_oracles(tmp_path):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((8, 8))
    s = GaussianStats(rng.standard_normal(8), a @ a.T + 0.1 * np.eye(8), 10)
    self_fid = fid(s, s)

    diag_err = 0.0
    for dim in (1, 4, 16):
        sa, sb = rng.uniform(0.01, 3, dim), rng.uniform(0.01, 3, dim)
        ma, mb = rng.standard_normal(dim), rng.standard_normal(dim)
        closed = np.sum((ma - mb) ** 2) + np.sum(sa + sb - 2 * np.sqrt(sa * sb))
        got = fid(GaussianStats(ma, np.diag(sa), 10), GaussianStats(mb, np.diag(sb), 10))
        diag_err = max(diag_err, abs(got - closed))

    kid_err = 0.0
    for n in (5, 12, 20):
        x, y = rng.standard_normal((n, 4)), rng.standard_normal((n, 4)) + 0.5
        kid_err = max(kid_err, abs(kid(x, y) - brute_mmd2(x.tolist(), y.tolist())))

    _, tgt = toy_domains(50, 64, seed=0)
    write_images(tgt, str(tmp_path / "same"))
    rep = evaluate(str(tmp_path / "same"), str(tmp_path / "same"), ToyConvEmbedder())
    ok = (abs(self_fid) < 1e-9 and diag_err <= 1e-6 and kid_err <= 1e-10
          and rep.fid < 1e-6 and abs(rep.kid) < 1e-6)
    record("C7 metric oracles", ok,
           "fid(a,a) = %.1e; diagonal closed form err %.1e (tol 1e-6); KID vs brute force err "
           "%.1e on n<=20 (tol 1e-10); identical dirs FID %.1e, KID %.1e (tol 1e-6)"
           % (self_fid, diag_err, kid_err, rep.fid, rep.kid))


# 8 -------------------------------------------------------------------------

TREND_CONFIG = {
    "image_size": 64, "total_iters": 2000, "warmup_iters": 400, "batch_size": 4, "seed": 0,
    "checkpoint_interval": 100000, "eval_interval": 100000,
    "disc": {"variant": "spatchgan", "base_channels": 8, "channel_cap": 32},
    "gen": {"base_channels": 16, "channel_cap": 64, "num_residual_blocks": 4},
    "data": {"augmentation": "none"},
}


def _generated_fid(g, src, tgt_stats, emb):
    with torch.no_grad():
        out = torch.cat([g(torch.from_numpy(src[i:i + 50])) for i in range(0, len(src), 50)])
    return fid(fit_gaussian(embed_arrays(emb, out.numpy())), tgt_stats), out.numpy()


@pytest.mark.slow
def test_c8_toy_training_trend(tmp_path):
    t0 = time.perf_counter()
    cfg = config_from_dict(TREND_CONFIG)
    src, tgt = toy_domains(500, 64, seed=0)
    srcf = np.stack([to_unit_range(x) for x in src])
    tgtf = np.stack([to_unit_range(x) for x in tgt])
    emb = ToyConvEmbedder()
    tgt_stats = fit_gaussian(embed_arrays(emb, tgtf))

    initial = Models(cfg)
    initial.g.eval()
    fid0, _ = _generated_fid(initial.g, srcf, tgt_stats, emb)
    del initial

    reports = []
    bundle, _ = run_training(cfg, ArrayDomain(src), ArrayDomain(tgt), str(tmp_path),
                             step_hook=reports.append)
    models = Models(cfg)
    restore(models, bundle, cfg)
    models.g.eval()
    models.d.eval()
    fid_end, fake = _generated_fid(models.g, srcf, tgt_stats, emb)

    d_fake = np.array([np.mean(r.d_fake) for r in reports])
    first, last = d_fake[:100].mean(), d_fake[-100:].mean()
    finite = all(np.isfinite([r.losses.d_adv, r.losses.g_total, r.losses.cyc, r.losses.id]).all()
                 for r in reports)
    drop = 1 - fid_end / fid0
    elapsed = time.perf_counter() - t0

    # non-gating: lower scales closer to 0.5 than scale 4 on generated images
    with torch.no_grad():
        grid = torch.cat([models.d(torch.from_numpy(fake[i:i + 50])).values
                          for i in range(0, len(fake), 50)]).mean(0).numpy()
    s1, s4 = np.abs(grid[:3] - 0.5).mean(), np.abs(grid[9:] - 0.5).mean()
    note = ("[INFO] C8 scale pattern (non-gating): mean |D - 0.5| on generated images, "
            "scale 1 %.3f vs scale 4 %.3f -> %s"
            % (s1, s4, "lower scale closer to 0.5" if s1 < s4 else "pattern not observed"))
    print(note)
    conftest.ACCEPTANCE_LINES.append(note)

    ok = drop >= 0.5 and last > first and finite and len(reports) == 2000 and elapsed <= 1800
    record("C8 toy training trend", ok,
           "(a) FID %.3f -> %.3f, drop %.0f%% (need >= 50%%); (b) mean D(fake) first window "
           "%.3f, last window %.3f (need increase); (c) all losses finite %s; %d iters in %.0fs"
           % (fid0, fid_end, 100 * drop, first, last, finite, len(reports), elapsed))


# 9 -------------------------------------------------------------------------

def test_c9_checkpoint_round_trip(tmp_path):
    cfg = conftest.toy_config(total_iters=50, warmup_iters=10, checkpoint_interval=1000)
    m = Models(cfg)
    x = torch.rand(2, 3, 64, 64) * 2 - 1
    for mod in (m.g, m.b, m.d):
        mod.eval()
    with torch.no_grad():
        ref = (m.g(x), m.b(x[:, :, :8, :8]), m.d(x).values)
    save_checkpoint(make_bundle(m, cfg, 0), tmp_path / "m.ckpt")
    m2 = Models(conftest.toy_config(seed=7))
    restore(m2, load_checkpoint(tmp_path / "m.ckpt"), cfg)
    for mod in (m2.g, m2.b, m2.d):
        mod.eval()
    with torch.no_grad():
        again = (m2.g(x), m2.b(x[:, :, :8, :8]), m2.d(x).values)
    bit_identical = all(torch.equal(a, b) for a, b in zip(ref, again))

    src, tgt = toy_domains(10, 64, seed=3)
    full, part = [], []
    run_training(cfg, ArrayDomain(src), ArrayDomain(tgt), str(tmp_path / "a"),
                 step_hook=full.append)
    run_training(cfg, ArrayDomain(src), ArrayDomain(tgt), str(tmp_path / "b"),
                 step_hook=part.append, stop_after=23)
    run_training(cfg, ArrayDomain(src), ArrayDomain(tgt), str(tmp_path / "b"),
                 step_hook=part.append, resume=str(tmp_path / "b" / "checkpoint_last.ckpt"))
    same = len(full) == 50 and part == full
    record("C9 checkpoint round trip", bit_identical and same,
           "save/load/forward bit-identical %s; 23 + 27 resumed steps equal 50 uninterrupted "
           "StepReports %s" % (bit_identical, same))
