"""FID and KID between embedded image sets.

FID is the Frechet distance between Gaussians fitted to two embedding sets:
``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``.

KID is the unbiased squared MMD with the cubic polynomial kernel
``k(x, y) = (x.y / d + 1)^3``, averaged over disjoint blocks.

The embedding network is pluggable. The default ``toy-conv64`` embedder is a
small random convolutional network with frozen weights; its numbers are only
comparable with other numbers computed under the same tag.
"""

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import list_images, load_image, resize_bilinear, to_unit_range

log = logging.getLogger(__name__)


class MetricError(ValueError):
    pass


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    @property
    def dim(self):
        return self.mu.shape[0]


def fit_gaussian(embeddings):
    """Sample mean and unbiased (n - 1) covariance of an ``(n, d)`` array."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise MetricError("embeddings must be a 2-D (n, d) array")
    n = x.shape[0]
    if n < 2:
        raise MetricError("need at least 2 embeddings to fit a covariance, got %d" % n)
    mu = x.mean(axis=0)
    c = x - mu
    sigma = c.T @ c / (n - 1)
    return GaussianStats(mu, (sigma + sigma.T) / 2, n)


def _sqrtm_psd(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def fid(a, b):
    """Frechet distance between two Gaussian fits.

    ``tr((S_a S_b)^(1/2))`` is computed as the trace of the symmetric square
    root of ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise MetricError("dimension mismatch: %d vs %d" % (a.dim, b.dim))
    diff = a.mu - b.mu
    root_a = _sqrtm_psd(a.sigma)
    m = root_a @ b.sigma @ root_a
    w = np.linalg.eigvalsh((m + m.T) / 2)
    tr_covmean = np.sqrt(np.clip(w, 0, None)).sum()
    val = diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2 * tr_covmean
    # Rounding can leave a tiny negative value for (near-)identical inputs.
    return float(max(val, 0.0))


def polynomial_kernel(x, y):
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def mmd2_unbiased(x, y):
    """Unbiased squared MMD between two sample sets.

    For equal sizes the cross term also drops its diagonal (the paired
    U-statistic), so identical, identically ordered sets score exactly 0.
    """
    m, n = len(x), len(y)
    kxx, kyy, kxy = polynomial_kernel(x, x), polynomial_kernel(y, y), polynomial_kernel(x, y)
    xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        xy = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        xy = kxy.sum() / (m * n)
    return float(xx + yy - 2 * xy)


def kid(emb_a, emb_b, block_size=None):
    """Kernel inception distance, averaged over ``min(nA, nB) // block_size`` blocks.

    ``block_size`` defaults to ``min(nA, nB, 100)``. When either set is smaller
    than an explicit ``block_size``, all samples form a single block.
    """
    a = np.asarray(emb_a, dtype=np.float64)
    b = np.asarray(emb_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise MetricError("embedding sets must be (n, d) arrays with equal d")
    if len(a) < 2 or len(b) < 2:
        raise MetricError("KID needs at least 2 samples per set")
    n = min(len(a), len(b))
    if block_size is None:
        block_size = min(n, 100)
    if block_size < 2:
        raise MetricError("block_size must be >= 2")
    if n < block_size:
        log.warning("fewer samples (%d, %d) than KID block size %d; using one block",
                    len(a), len(b), block_size)
        return mmd2_unbiased(a, b)
    n_blocks = n // block_size
    vals = [mmd2_unbiased(a[i * block_size:(i + 1) * block_size],
                          b[i * block_size:(i + 1) * block_size]) for i in range(n_blocks)]
    return float(np.mean(vals))


class ToyConvEmbedder:
    """Fixed random-weight conv net mapping images in [-1, 1] to 64-d vectors.

    Three stride-2 3x3 convolutions with ReLU, followed by global mean and
    standard-deviation pooling of the last layer (32 channels each). Weights
    come from a seeded numpy generator and are checked against a frozen hash.
    """

    tag = "toy-conv64"
    dim = 64
    input_size = 64
    seed = 20210801
    weights_sha256 = "0ec69bbcba52ba2d5e47379e630c319082d91945fcc43c6d6d1471e7f175c246"
    _channels = (3, 16, 32, 32)

    def __init__(self, verify=True):
        rng = np.random.default_rng(self.seed)
        self.weights = []
        for c_in, c_out in zip(self._channels[:-1], self._channels[1:]):
            w = rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (c_in * 9))
            b = rng.standard_normal(c_out) * 0.1
            self.weights.append((w.astype(np.float32), b.astype(np.float32)))
        digest = self.weight_hash()
        if verify and digest != self.weights_sha256:
            raise MetricError("%s weight hash mismatch: %s" % (self.tag, digest))
        self._torch = [(torch.from_numpy(w), torch.from_numpy(b)) for w, b in self.weights]

    def weight_hash(self):
        h = hashlib.sha256()
        for w, b in self.weights:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def __call__(self, images):
        """``images``: float array or tensor of shape ``(B, 3, H, W)``."""
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        for w, b in self._torch:
            x = F.relu(F.conv2d(x, w, b, stride=2, padding=1))
        flat = x.flatten(2)
        feats = torch.cat([flat.mean(2), flat.std(2, unbiased=False)], dim=1)
        return feats.double().numpy()


_REGISTRY = {ToyConvEmbedder.tag: ToyConvEmbedder}


def register_embedder(tag, factory):
    """Register an external embedder (e.g. an Inception network) under ``tag``.

    ``factory()`` must return an object with ``tag``, ``dim``, ``input_size``
    and a ``__call__`` mapping ``(B, 3, S, S)`` arrays in [-1, 1] to ``(B, dim)``.
    """
    _REGISTRY[tag] = factory


def registered_embedders():
    return sorted(_REGISTRY)


def get_embedder(tag):
    try:
        return _REGISTRY[tag]()
    except KeyError:
        raise MetricError("unknown embedder %r; registered: %s"
                          % (tag, ", ".join(registered_embedders()))) from None


def embed_arrays(model, images, batch_size=64):
    """Embed ``(N, 3, S, S)`` float images in [-1, 1]."""
    out = [model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(out, axis=0)


def load_dir_for_embedding(directory, size):
    paths = list_images(directory)
    if not paths:
        raise MetricError("no images in %s" % directory)
    return np.stack([to_unit_range(resize_bilinear(load_image(p), (size, size)))
                     for p in paths])


def embed_directory(directory, model, batch_size=64):
    return embed_arrays(model, load_dir_for_embedding(directory, model.input_size), batch_size)


@dataclass
class MetricReport:
    fid: float
    kid: float
    n_a: int
    n_b: int
    model_tag: str
    embedding_dim: int
    kid_block_size: int

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def table(self):
        rows = [("fid", "%.6f" % self.fid), ("kid", "%.6f" % self.kid),
                ("n_generated", str(self.n_a)), ("n_reference", str(self.n_b)),
                ("embedder", self.model_tag), ("embedding_dim", str(self.embedding_dim)),
                ("kid_block_size", str(self.kid_block_size))]
        width = max(len(k) for k, _ in rows)
        return "\n".join("%-*s  %s" % (width, k, v) for k, v in rows)


def report_from_embeddings(emb_a, emb_b, tag, block_size=None):
    if block_size is None:
        block_size = min(len(emb_a), len(emb_b), 100)
    return MetricReport(
        fid=fid(fit_gaussian(emb_a), fit_gaussian(emb_b)),
        kid=kid(emb_a, emb_b, block_size),
        n_a=len(emb_a), n_b=len(emb_b), model_tag=tag,
        embedding_dim=emb_a.shape[1], kid_block_size=block_size)


def evaluate(generated_dir, reference_dir, model, block_size=None):
    """FID and KID between the images in two directories."""
    for d in (generated_dir, reference_dir):
        if not os.path.isdir(d):
            raise MetricError("directory not found: %s" % d)
    emb_a = embed_directory(generated_dir, model)
    emb_b = embed_directory(reference_dir, model)
    return report_from_embeddings(emb_a, emb_b, model.tag, block_size)
