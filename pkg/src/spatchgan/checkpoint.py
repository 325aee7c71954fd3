"""Binary checkpoint container of named float32 blocks.

Layout (little endian)::

    b"SPGANCKP" | u32 format version | u64 header length | JSON header | block data

The header lists every block as ``{"name", "shape", "offset", "nbytes"}`` with
offsets relative to the start of the block data, plus a free-form ``meta``
mapping (iteration, config, data-iterator state, ...).
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SPGANCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointBlockError(CheckpointError):
    """A block is missing, unexpected, or has the wrong shape."""

    def __init__(self, message, block):
        super().__init__(message)
        self.block = block


@dataclass
class CheckpointBundle:
    blocks: dict
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def iteration(self):
        return self.meta.get("iteration", 0)


def save_checkpoint(bundle, path):
    """Write ``bundle`` atomically (temp file + rename)."""
    entries, offset, arrays = [], 0, []
    for name in sorted(bundle.blocks):
        arr = np.array(bundle.blocks[name], dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
        arrays.append(arr)
    header = json.dumps({"meta": bundle.meta, "blocks": entries}, sort_keys=True).encode("utf-8")
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
            f.write(header)
            for arr in arrays:
                f.write(arr.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _PREFIX.size:
        raise CheckpointCorruptError("%s: file too short for a checkpoint header" % path)
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointCorruptError("%s: not a checkpoint file (bad magic)" % path)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            "%s: format version %d, this build reads version %d" % (path, version, FORMAT_VERSION))
    start = _PREFIX.size + header_len
    if len(raw) < start:
        raise CheckpointCorruptError("%s: truncated header" % path)
    try:
        header = json.loads(raw[_PREFIX.size:start].decode("utf-8"))
    except ValueError as e:
        raise CheckpointCorruptError("%s: unreadable header: %s" % (path, e)) from e
    data = memoryview(raw)[start:]
    blocks, expected = {}, 0
    for e in header["blocks"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["nbytes"] != 4 * count:
            raise CheckpointCorruptError("%s: block %s length disagrees with its shape"
                                         % (path, e["name"]))
        end = e["offset"] + e["nbytes"]
        if end > len(data):
            raise CheckpointCorruptError(
                "%s: block %s needs %d bytes of data, file holds %d"
                % (path, e["name"], end, len(data)))
        arr = np.frombuffer(data[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        blocks[e["name"]] = arr.astype(np.float32)
        expected = max(expected, end)
    if len(data) != expected:
        raise CheckpointCorruptError("%s: %d trailing bytes after the last block"
                                     % (path, len(data) - expected))
    return CheckpointBundle(blocks, header.get("meta", {}), version)


def match_blocks(expected, blocks):
    """Check that ``blocks`` holds exactly the names and shapes in ``expected``."""
    for name in sorted(expected):
        if name not in blocks:
            raise CheckpointBlockError("missing block %s" % name, name)
        if tuple(blocks[name].shape) != tuple(expected[name]):
            raise CheckpointBlockError(
                "block %s has shape %s, model expects %s"
                % (name, tuple(blocks[name].shape), tuple(expected[name])), name)
    extra = sorted(set(blocks) - set(expected))
    if extra:
        raise CheckpointBlockError("unexpected block %s" % extra[0], extra[0])
