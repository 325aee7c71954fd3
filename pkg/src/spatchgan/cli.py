"""Command-line entry point: ``spatchgan <command> [flags]``.

Commands: ``train``, ``translate``, ``inspect-disc``, ``evaluate``, ``toy-data``.
Flags override the matching config-file fields. Exit codes are 0 on success,
1 on an internal error and 2 on a usage or input error.
"""

import argparse
import csv
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np
import torch
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, config_from_dict, dump_config, load_config
from .data import (
    DatasetError, DatasetSpec, from_unit_range, list_images, load_image, resize_bilinear,
    to_unit_range, toy_domains, write_images,
)
from .discriminator import DiscriminatorConfigError
from .generators import downscale_u
from .metrics import MetricError, embed_arrays, evaluate, get_embedder, report_from_embeddings
from .trainer import Models, output_labels, per_image_outputs, restore, run_training

log = logging.getLogger("spatchgan")

VARIANTS = {"spatchgan": "spatchgan", "patchgan": "multiscale_patchgan"}
INPUT_ERRORS = (ConfigError, DatasetError, CheckpointError, MetricError,
                DiscriminatorConfigError, FileNotFoundError, NotADirectoryError)
EVAL_SAMPLES = 200
SAMPLE_GRID = 8


class UsageError(Exception):
    pass


# config assembly

def _apply_overrides(cfg, args):
    """Return a validated copy of ``cfg`` with command-line overrides applied."""
    data = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        data["seed"] = args.seed
    if getattr(args, "iters", None) is not None:
        if args.iters < 0:
            raise UsageError("--iters must be >= 0")
        total = args.iters * cfg.scale_down
        old = cfg.total_iters
        data["total_iters"] = total
        data["warmup_iters"] = (cfg.warmup_iters * total // old) if old else 0
    if getattr(args, "variant", None):
        data["disc"]["variant"] = VARIANTS[args.variant]
    if getattr(args, "stats", None):
        data["disc"]["enabled_stats"] = [s.strip() for s in args.stats.split(",") if s.strip()]
    for key in ("source", "target"):
        if getattr(args, key, None):
            data["data"][key + "_dir"] = getattr(args, key)
    return config_from_dict(data)


def _config_for(args, bundle=None):
    if args.config:
        cfg = load_config(args.config)
    elif bundle is not None and "config" in bundle.meta:
        cfg = config_from_dict(bundle.meta["config"])
    else:
        raise UsageError("--config is required")
    return _apply_overrides(cfg, args)


def _load_models(args):
    """Models restored from ``args.checkpoint``, in eval mode."""
    bundle = load_checkpoint(args.checkpoint)
    cfg = _config_for(args, bundle)
    models = Models(cfg)
    restore(models, bundle, cfg)
    for m in (models.g, models.b, models.d):
        m.eval()
    torch.manual_seed(cfg.seed)
    return cfg, models


def _load_dir(directory, size):
    if not os.path.isdir(directory):
        raise DatasetError("input directory not found: %s" % directory)
    paths = list_images(directory)
    if not paths:
        raise DatasetError("no images in %s" % directory)
    images = np.stack([to_unit_range(resize_bilinear(load_image(p), (size, size)))
                       for p in paths])
    return [os.path.basename(p) for p in paths], images


def _batches(images, batch_size):
    for i in range(0, len(images), batch_size):
        yield torch.from_numpy(images[i:i + batch_size])


# train

def _make_run_dir(out, cfg, manifest):
    """Create ``out`` atomically, already holding the config snapshot and manifest."""
    parent = os.path.dirname(os.path.abspath(out)) or "."
    os.makedirs(parent, exist_ok=True)
    tmp = tempfile.mkdtemp(prefix=".%s." % os.path.basename(os.path.abspath(out)), dir=parent)
    try:
        dump_config(cfg, os.path.join(tmp, "config.yaml"))
        with open(os.path.join(tmp, "run.json"), "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        os.rename(tmp, out)
    except OSError as e:
        shutil.rmtree(tmp, ignore_errors=True)
        raise UsageError("cannot create output directory %s: %s" % (out, e)) from e


class _SampleHook:
    """Periodic sample grids and toy-embedder metrics during training."""

    def __init__(self, cfg, source, target, out_dir):
        self.dir = os.path.join(out_dir, "samples")
        self.eval_path = os.path.join(out_dir, "eval.csv")
        size = (cfg.image_size, cfg.image_size)
        n_src = min(len(source), EVAL_SAMPLES)
        n_tgt = min(len(target), EVAL_SAMPLES)
        self.src = np.stack([to_unit_range(resize_bilinear(source[i], size))
                             for i in range(n_src)])
        tgt = np.stack([to_unit_range(resize_bilinear(target[i], size)) for i in range(n_tgt)])
        self.embedder = get_embedder(cfg.embedder)
        self.tgt_emb = embed_arrays(self.embedder, tgt)

    def __call__(self, models, iteration):
        os.makedirs(self.dir, exist_ok=True)
        with torch.no_grad():
            fake = np.concatenate([models.g(x).numpy() for x in _batches(self.src, 16)])
        k = min(SAMPLE_GRID, len(fake))
        top = np.concatenate([from_unit_range(x) for x in self.src[:k]], axis=1)
        bottom = np.concatenate([from_unit_range(x) for x in fake[:k]], axis=1)
        Image.fromarray(np.concatenate([top, bottom], axis=0)).save(
            os.path.join(self.dir, "iter_%07d.png" % iteration))
        if len(fake) < 2 or len(self.tgt_emb) < 2:
            return
        rep = report_from_embeddings(embed_arrays(self.embedder, fake), self.tgt_emb,
                                     self.embedder.tag)
        new = not os.path.exists(self.eval_path)
        with open(self.eval_path, "a", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["iteration", "fid", "kid", "embedder"])
            w.writerow([iteration, "%.6f" % rep.fid, "%.6f" % rep.kid, rep.model_tag])
        log.info("iteration %d: fid %.4f kid %.5f", iteration, rep.fid, rep.kid)


def cmd_train(args):
    bundle = load_checkpoint(args.resume) if args.resume else None
    cfg = _config_for(args, bundle)
    if not cfg.data.source_dir or not cfg.data.target_dir:
        raise UsageError("data.source_dir and data.target_dir must be set (config or flags)")
    spec = DatasetSpec(cfg.data.source_dir, cfg.data.target_dir, cfg.data.augmentation,
                       cfg.image_size, cfg.data.source_manifest, cfg.data.target_manifest)
    source, target = spec.open()
    if bundle is not None and bundle.iteration > cfg.iters:
        raise UsageError("checkpoint is at iteration %d, beyond the configured %d"
                         % (bundle.iteration, cfg.iters))

    out = args.out
    if os.path.exists(out):
        if bundle is None:
            raise UsageError("output directory %s already exists (use --resume to continue)"
                             % out)
        dump_config(cfg, os.path.join(out, "config_resume_%07d.yaml" % bundle.iteration))
    else:
        manifest = {"command": "train", "config": args.config, "seed": cfg.seed,
                    "output": os.path.abspath(out), "resume": args.resume,
                    "dataset": dataclasses.asdict(spec)}
        _make_run_dir(out, cfg, manifest)

    hook = _SampleHook(cfg, source, target, out)
    final, metrics_path = run_training(cfg, source, target, out, resume=bundle, eval_hook=hook)
    print("trained to iteration %d" % final.iteration)
    print("checkpoint: %s" % os.path.join(out, "checkpoint_last.ckpt"))
    print("metrics: %s" % metrics_path)
    return 0


# translate

def cmd_translate(args):
    cfg, models = _load_models(args)
    names, images = _load_dir(args.input, cfg.image_size)
    os.makedirs(args.out, exist_ok=True)
    low_dir = os.path.join(args.out, "low_res_cycle")
    if args.low_res_cycle:
        os.makedirs(low_dir, exist_ok=True)
    k = 0
    with torch.no_grad():
        for x in _batches(images, args.batch_size):
            y = models.g(x)
            low = models.b(downscale_u(y)) if args.low_res_cycle else None
            for j in range(len(x)):
                Image.fromarray(from_unit_range(y[j].numpy())).save(
                    os.path.join(args.out, names[k + j]))
                if low is not None:
                    Image.fromarray(from_unit_range(low[j].numpy())).save(
                        os.path.join(low_dir, names[k + j]))
            k += len(x)
    print("translated %d images into %s" % (k, args.out))
    return 0


# inspect-disc

def _bar_plot(labels, means, path, title):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels)), 3))
    ax.bar(range(len(labels)), means, color="tab:blue")
    ax.axhline(0.5, color="gray", lw=0.8, ls="--")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=8)
    ax.set_ylim(min(0.0, min(means)), max(1.0, max(means)))
    ax.set_ylabel("mean D output")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_inspect_disc(args):
    cfg, models = _load_models(args)
    names, images = _load_dir(args.input, cfg.image_size)
    rows, labels = [], None
    with torch.no_grad():
        for x in _batches(images, args.batch_size):
            out = models.d(x)
            labels = output_labels(out)
            rows.append(per_image_outputs(out))
    values = np.concatenate(rows)
    means = values.mean(0)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["image"] + ["D_%s" % l for l in labels])
        for name, row in zip(names, values):
            w.writerow([name] + ["%.8f" % v for v in row])
        w.writerow(["mean"] + ["%.8f" % v for v in means])
    if args.plot:
        _bar_plot(labels, means, args.plot, os.path.basename(os.path.normpath(args.input)))
    for l, m in zip(labels, means):
        print("%-12s %.6f" % (l, m))
    return 0


# evaluate

def cmd_evaluate(args):
    model = get_embedder(args.embedder)
    rep = evaluate(args.generated, args.reference, model, args.block_size)
    print(rep.table())
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(rep.to_json() + "\n")
    return 0


# toy-data

def cmd_toy_data(args):
    src, tgt = toy_domains(args.n, args.size, args.seed)
    write_images(src, os.path.join(args.out, "source"))
    write_images(tgt, os.path.join(args.out, "target"))
    print("wrote %d stripe and %d checker images under %s" % (len(src), len(tgt), args.out))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="spatchgan", description="Train, apply and inspect statistical-feature GAN models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_flags(sp):
        sp.add_argument("--config", help="YAML config (defaults to the checkpoint's own)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=sorted(VARIANTS))
        sp.add_argument("--stats", help="comma-separated subset of mean,max,stddev")

    t = sub.add_parser("train", help="train G, B and D")
    model_flags(t)
    t.add_argument("--iters", type=int,
                   help="effective iteration count; warmup is rescaled proportionally")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--source", help="source-domain image directory")
    t.add_argument("--target", help="target-domain image directory")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a directory of source images")
    model_flags(tr)
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--batch-size", type=int, default=8)
    tr.add_argument("--low-res-cycle", action="store_true",
                    help="also write the low-resolution reconstructions B(u(G(x)))")
    tr.set_defaults(func=cmd_translate)

    d = sub.add_parser("inspect-disc", help="per-image discriminator outputs as CSV")
    model_flags(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--out", required=True, help="CSV path")
    d.add_argument("--plot", help="optional bar-plot image path")
    d.add_argument("--batch-size", type=int, default=8)
    d.set_defaults(func=cmd_inspect_disc)

    e = sub.add_parser("evaluate", help="FID and KID between two image directories")
    e.add_argument("--generated", required=True)
    e.add_argument("--reference", required=True)
    e.add_argument("--embedder", default="toy-conv64")
    e.add_argument("--block-size", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", help="write the report as JSON")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("toy-data", help="write the synthetic stripes/checkers domains")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=500)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_toy_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except INPUT_ERRORS as e:
        print("error: %s" % e, file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
