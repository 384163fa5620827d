"""Binary checkpoint format for learned-optimizer parameters.

Layout (all integers little-endian)::

    magic   b"SMAF"
    u32     version
    4s      size tag (ASCII, space padded)
    u32 x6  H, B (outputs per bin), K, G (group size), F (complex inputs per bin), n_blocks
    u32     length of the JSON metadata, then the JSON bytes
    manifest, one entry per block:
        u16 name length, name bytes, u8 ndim, u32 x ndim dims, u8 complex flag,
        u64 byte offset (from the start of the data section), u64 float count
    data section: float32 little-endian; complex values stored as (re, im) pairs

Only float32 is stored, so a complex64 parameter set round-trips bit-exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .neural import GROUP, NetShape, size_tag

MAGIC = b"SMAF"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint or a checkpoint that does not match the requested configuration."""


def save_checkpoint(path, params: dict, shape: NetShape, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(params)
    arrays = {k: np.asarray(params[k].detach().cpu().numpy() if isinstance(params[k], torch.Tensor) else params[k])
              for k in names}
    expected = shape.param_shapes()
    if set(names) != set(expected):
        raise CheckpointError(f"parameter names {names} do not match the network shape")
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()

    head = bytearray(MAGIC)
    head += struct.pack("<I", VERSION)
    head += size_tag(shape.hidden).ljust(4).encode()
    head += struct.pack("<6I", shape.hidden, shape.n_outputs, shape.bins, GROUP, shape.n_inputs, len(names))
    head += struct.pack("<I", len(meta_bytes)) + meta_bytes

    blobs, offset = [], 0
    for k in names:
        a = arrays[k]
        if tuple(a.shape) != tuple(expected[k]):
            raise CheckpointError(f"{k}: shape {a.shape} != {expected[k]}")
        is_complex = np.iscomplexobj(a)
        flat = (np.stack([a.real, a.imag], -1) if is_complex else a).astype("<f4").reshape(-1)
        name = k.encode()
        head += struct.pack("<H", len(name)) + name + struct.pack("<B", a.ndim)
        head += struct.pack(f"<{a.ndim}I", *a.shape)
        head += struct.pack("<BQQ", int(is_complex), offset, flat.size)
        blobs.append(flat.tobytes())
        offset += flat.nbytes
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(head) + b"".join(blobs))
    tmp.replace(path)


def load_checkpoint(path, *, expect: NetShape | None = None):
    """Returns ``(params, shape, meta)``; ``params`` are complex64 tensors."""
    raw = Path(path).read_bytes()
    try:
        return _parse(path, raw, expect)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({err})") from err
    except ValueError as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({err})") from err


def _parse(path, raw: bytes, expect):
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    h, p, k, g, f, n_blocks = struct.unpack_from("<6I", raw, pos)
    pos += 24
    if g != GROUP:
        raise CheckpointError(f"{path}: group size {g} != {GROUP}")
    (n_meta,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    meta = json.loads(raw[pos: pos + n_meta])
    pos += n_meta
    entries = []
    for _ in range(n_blocks):
        (n_name,) = struct.unpack_from("<H", raw, pos)
        name = raw[pos + 2: pos + 2 + n_name].decode()
        pos += 2 + n_name
        (ndim,) = struct.unpack_from("<B", raw, pos)
        dims = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
        pos += 1 + 4 * ndim
        is_complex, offset, count = struct.unpack_from("<BQQ", raw, pos)
        pos += 17
        entries.append((name, dims, bool(is_complex), offset, count))
    shape = NetShape(h, f, p, k)
    if expect is not None and expect != shape:
        raise CheckpointError(f"checkpoint network {shape} does not match the requested {expect}")
    expected = shape.param_shapes()
    params = {}
    for name, dims, is_complex, offset, count in entries:
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos + offset)
        if is_complex:
            arr = data.astype(np.float32).view(np.complex64).reshape(dims)
            t = torch.from_numpy(arr.copy())
        else:
            t = torch.from_numpy(data.reshape(dims).copy())
        if name not in expected or tuple(dims) != tuple(expected[name]):
            raise CheckpointError(f"{path}: unexpected block {name} {dims}")
        params[name] = t
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: missing blocks {sorted(set(expected) - set(params))}")
    return params, shape, meta
