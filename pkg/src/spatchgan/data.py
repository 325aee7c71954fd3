"""Image loading, augmentation and unpaired two-domain batching.

Images travel through the pipeline as ``uint8`` arrays of shape ``(H, W, 3)``
and leave it as ``float32`` arrays of shape ``(3, H, W)`` in [-1, 1].
Random augmentation parameters are drawn up front from the seeded schedule,
so worker threads only ever execute deterministic transforms.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

AUGMENTATIONS = ("anime_style", "celeba_style", "none")
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp", ".tif", ".tiff")

ANIME_LOAD, ANIME_CROP = 286, 256
CELEBA_CROP, CELEBA_SIZE, CELEBA_SHIFT = 178, 256, 13


class DatasetError(ValueError):
    pass


class ImageDecodeError(DatasetError):
    pass


def load_image(path):
    """Decode an 8-bit image file to an RGB ``uint8`` array."""
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError, Image.DecompressionBombError) as e:
        raise ImageDecodeError("cannot decode %s: %s" % (path, e)) from e


def as_rgb(img):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return img


def resize_bilinear(img, size):
    """Resize an ``(H, W, 3)`` uint8 image to ``size = (h, w)``."""
    h, w = size
    if img.shape[:2] == (h, w):
        return img
    return np.asarray(Image.fromarray(img).resize((w, h), Image.BILINEAR))


def to_unit_range(img):
    """Map uint8 ``[0, 255]`` to ``[-1, 1]`` and move channels first."""
    x = img.astype(np.float32) / 127.5 - 1.0
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def from_unit_range(x):
    """Inverse of :func:`to_unit_range`: ``(3, H, W)`` in [-1, 1] to ``(H, W, 3)`` uint8."""
    x = np.asarray(x, dtype=np.float64).transpose(1, 2, 0)
    return np.clip(np.rint((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def hflip(img):
    return img[:, ::-1]


def center_crop(img, size):
    h, w = img.shape[:2]
    if h < size or w < size:
        raise DatasetError("image %dx%d smaller than the %d crop" % (h, w, size))
    top, left = (h - size) // 2, (w - size) // 2
    return img[top:top + size, left:left + size]


def shift_edge(img, dy, dx):
    """Translate by ``(dy, dx)`` pixels, filling uncovered pixels by edge replication."""
    h, w = img.shape[:2]
    py, px = abs(dy), abs(dx)
    padded = np.pad(img, ((py, py), (px, px), (0, 0)), mode="edge")
    top, left = py - dy, px - dx
    return padded[top:top + h, left:left + w]


def _scaled(value, output_size):
    return int(round(value * output_size / 256))


@dataclass
class AugmentParams:
    crop: tuple = (0, 0)
    shift: tuple = (0, 0)
    flip: bool = False


def draw_params(kind, rng, output_size):
    flip = bool(rng.random() < 0.5)
    if kind == "anime_style":
        slack = _scaled(ANIME_LOAD, output_size) - output_size
        crop = (int(rng.integers(0, slack + 1)), int(rng.integers(0, slack + 1)))
        return AugmentParams(crop=crop, flip=flip)
    if kind == "celeba_style":
        s = _scaled(CELEBA_SHIFT, output_size)
        shift = (int(rng.integers(-s, s + 1)), int(rng.integers(-s, s + 1)))
        return AugmentParams(shift=shift, flip=flip)
    return AugmentParams()


def augment_anime(img, params, output_size=ANIME_CROP):
    """Resize to 286x286 (scaled with ``output_size``), crop, flip, map to [-1, 1]."""
    load = _scaled(ANIME_LOAD, output_size)
    img = resize_bilinear(as_rgb(img), (load, load))
    top, left = params.crop
    if not (0 <= top <= load - output_size and 0 <= left <= load - output_size):
        raise DatasetError("crop offset %s outside [0, %d]" % (params.crop, load - output_size))
    img = img[top:top + output_size, left:left + output_size]
    if params.flip:
        img = hflip(img)
    return to_unit_range(img)


def augment_celeba(img, params, output_size=CELEBA_SIZE):
    """Center crop 178, resize to ``output_size``, shift with edge fill, flip, map to [-1, 1]."""
    img = center_crop(as_rgb(img), CELEBA_CROP)
    img = resize_bilinear(np.ascontiguousarray(img), (output_size, output_size))
    img = shift_edge(img, *params.shift)
    if params.flip:
        img = hflip(img)
    return to_unit_range(img)


def augment_none(img, params, output_size):
    img = resize_bilinear(np.ascontiguousarray(as_rgb(img)), (output_size, output_size))
    return to_unit_range(img)


AUGMENT_FNS = {
    "anime_style": augment_anime,
    "celeba_style": augment_celeba,
    "none": augment_none,
}


def list_images(directory, manifest=None):
    """Image paths in ``directory``, sorted, or as listed in a manifest file."""
    if not os.path.isdir(directory):
        raise DatasetError("dataset directory not found: %s" % directory)
    if manifest:
        with open(manifest, encoding="utf-8") as f:
            rel = [line.strip() for line in f if line.strip()]
        return [os.path.join(directory, r) for r in rel]
    return sorted(
        os.path.join(directory, n) for n in os.listdir(directory)
        if n.lower().endswith(IMAGE_EXTENSIONS))


class ImageFolder:
    """Lazily decoded images from a directory."""

    def __init__(self, directory, manifest=None):
        self.directory = directory
        self.paths = list_images(directory, manifest)
        if not self.paths:
            raise DatasetError("no images in %s" % directory)
        for p in self.paths:
            try:
                load_image(p)
                break
            except ImageDecodeError as e:
                log.warning("%s", e)
        else:
            raise DatasetError("no decodable images in %s" % directory)

    def __len__(self):
        return len(self.paths)

    def __getitem__(self, i):
        return load_image(self.paths[i])


class ArrayDomain:
    """In-memory images, an ``(N, H, W, 3)`` uint8 array or a list of arrays."""

    def __init__(self, images):
        self.images = images
        if len(images) == 0:
            raise DatasetError("empty image array")

    def __len__(self):
        return len(self.images)

    def __getitem__(self, i):
        return np.asarray(self.images[i])


@dataclass
class DatasetSpec:
    source_dir: str
    target_dir: str
    augmentation: str = "none"
    output_size: int = 256
    source_manifest: str = None
    target_manifest: str = None

    def validate(self):
        if self.augmentation not in AUGMENTATIONS:
            raise DatasetError("augmentation must be one of %s" % (AUGMENTATIONS,))
        for d in (self.source_dir, self.target_dir):
            if not os.path.isdir(d):
                raise DatasetError("dataset directory not found: %s" % d)

    def open(self):
        self.validate()
        return (ImageFolder(self.source_dir, self.source_manifest),
                ImageFolder(self.target_dir, self.target_manifest))


class _DomainStream:
    """Reshuffled epochs over one domain; an epoch's incomplete tail is dropped."""

    def __init__(self, n, batch_size, rng):
        if n < batch_size:
            raise DatasetError("domain has %d images, fewer than batch size %d" % (n, batch_size))
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.perm, self.pos, self.epoch = [], 0, 0
        self.bad = set()

    def _new_epoch(self):
        good = [i for i in range(self.n) if i not in self.bad]
        if len(good) < self.batch_size:
            raise DatasetError("too few decodable images left for a batch")
        self.perm = [int(i) for i in self.rng.permutation(good)]
        self.pos = 0
        self.epoch += 1

    def take(self, k):
        if self.pos + k > len(self.perm):
            self._new_epoch()
        idx = self.perm[self.pos:self.pos + k]
        self.pos += k
        return idx

    def take_one(self):
        return self.take(1)[0]

    def state_dict(self):
        return {"rng": self.rng.bit_generator.state, "perm": list(self.perm),
                "pos": self.pos, "epoch": self.epoch, "bad": sorted(self.bad)}

    def load_state_dict(self, state):
        self.rng.bit_generator.state = state["rng"]
        self.perm = list(state["perm"])
        self.pos, self.epoch = state["pos"], state["epoch"]
        self.bad = set(state["bad"])


class BatchIterator:
    """Endless stream of ``(src_batch, tgt_batch)`` float32 arrays of shape ``(B, 3, S, S)``.

    Each domain is shuffled independently, so domains of unequal size cycle
    at their own pace. Identical seeds give identical streams for any worker count.
    """

    def __init__(self, source, target, batch_size, seed, augmentation="none",
                 output_size=256, workers=0):
        if batch_size < 1:
            raise DatasetError("batch_size must be >= 1")
        if augmentation not in AUGMENTATIONS:
            raise DatasetError("augmentation must be one of %s" % (AUGMENTATIONS,))
        self.domains = [source, target]
        self.batch_size = batch_size
        self.augmentation = augmentation
        self.output_size = output_size
        children = np.random.SeedSequence(seed).spawn(2)
        self.streams = [_DomainStream(len(d), batch_size, np.random.default_rng(c))
                        for d, c in zip(self.domains, children)]
        self._pool = ThreadPoolExecutor(workers) if workers > 0 else None

    def __iter__(self):
        return self

    def __next__(self):
        return tuple(self._batch(d) for d in range(2))

    def _load(self, domain, i, params):
        img = self.domains[domain][i]
        return AUGMENT_FNS[self.augmentation](img, params, self.output_size)

    def _load_safe(self, job):
        try:
            return self._load(*job)
        except ImageDecodeError as e:
            log.warning("skipping undecodable image: %s", e)
            return None

    def _batch(self, domain):
        stream = self.streams[domain]
        idx = stream.take(self.batch_size)
        jobs = [(domain, i, draw_params(self.augmentation, stream.rng, self.output_size))
                for i in idx]
        mapper = self._pool.map if self._pool else map
        out = list(mapper(self._load_safe, jobs))
        for k, item in enumerate(out):
            while item is None:
                stream.bad.add(jobs[k][1])
                i = stream.take_one()
                item = self._load_safe(
                    (domain, i, draw_params(self.augmentation, stream.rng, self.output_size)))
            out[k] = item
        return np.stack(out)

    def state_dict(self):
        return {"streams": [s.state_dict() for s in self.streams]}

    def load_state_dict(self, state):
        for s, st in zip(self.streams, state["streams"]):
            s.load_state_dict(st)

    def close(self):
        if self._pool:
            self._pool.shutdown()


def batch_iterator(spec, batch_size, seed, workers=0):
    src, tgt = spec.open()
    return BatchIterator(src, tgt, batch_size, seed, spec.augmentation,
                         spec.output_size, workers)


def stripes(n, size, rng, period_range=(4, 9)):
    """Oriented stripe textures: random period, angle and phase, random colours."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for k in range(n):
        period = rng.uniform(*period_range)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
        mask = (wave > 0)[..., None]
        c0, c1 = rng.integers(0, 256, size=(2, 3))
        out[k] = np.where(mask, c1, c0)
    return out


def checkers(n, size, rng, cell_range=(4, 12)):
    """Axis-aligned checkerboards with random cell size, offset and colours."""
    yy, xx = np.mgrid[0:size, 0:size]
    out = np.empty((n, size, size, 3), dtype=np.uint8)
    for k in range(n):
        cell = int(rng.integers(*cell_range))
        oy, ox = rng.integers(0, cell, size=2)
        mask = ((((yy + oy) // cell) + ((xx + ox) // cell)) % 2 == 1)[..., None]
        c0, c1 = rng.integers(0, 256, size=(2, 3))
        out[k] = np.where(mask, c1, c0)
    return out


def toy_domains(n=500, size=64, seed=0):
    """Two synthetic texture domains: oriented stripes (source) and checkers (target)."""
    rng = np.random.default_rng(seed)
    return stripes(n, size, rng), checkers(n, size, rng)


def write_images(images, directory, prefix="img"):
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = os.path.join(directory, "%s_%05d.png" % (prefix, i))
        Image.fromarray(np.asarray(img)).save(p)
        paths.append(p)
    return paths
