"""Binary weight checkpoints.

Layout (all integers little-endian uint32)::

    b"TCNNCKPT" | version | sha256(spec) (32 bytes) | array count
    per array, in spec layer order then sorted param/buffer name:
        ndim | dims... | float32 little-endian payload
"""
import struct

import numpy as np

from treecnn.nn.network import Network

MAGIC = b"TCNNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(net):
    arrays = net.state_arrays()
    parts = [MAGIC, struct.pack("<I", VERSION), net.spec.digest(), struct.pack("<I", len(arrays))]
    for _, arr in arrays:
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob, spec):
    """Rebuild a float32 :class:`Network` for ``spec`` from checkpoint bytes."""
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic header")
    (version,) = struct.unpack_from("<I", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = blob[12:44]
    if digest != spec.digest():
        raise CheckpointError("checkpoint was written for a different network spec")
    (count,) = struct.unpack_from("<I", blob, 44)
    net = Network(spec, rng=0)
    targets = net.state_arrays()
    if count != len(targets):
        raise CheckpointError(f"expected {len(targets)} arrays, found {count}")
    off = 48
    for (key, dest) in targets:
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if tuple(shape) != dest.shape:
            raise CheckpointError(f"array {key} has shape {shape}, expected {dest.shape}")
        size = int(np.prod(shape)) * 4
        if off + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        dest[...] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(shape)
        off += size
    if off != len(blob):
        raise CheckpointError("trailing bytes after last array")
    net.trained = True
    return net


def save(net, path):
    with open(path, "wb") as fh:
        fh.write(dumps(net))


def load(path, spec):
    with open(path, "rb") as fh:
        return loads(fh.read(), spec)
