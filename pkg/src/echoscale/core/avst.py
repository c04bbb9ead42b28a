"""AVST binary tensor files and checkpoint directories.

Layout: ``b"AVST"``, u8 dtype code (0 = f32, 1 = f64), u8 rank, rank x u32
little-endian dims, then the little-endian row-major payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVST"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    pass


def encode(arr):
    arr = np.asarray(arr)
    if arr.dtype == np.float64:
        code = 1
    elif arr.dtype.kind in "fiub":
        code = 0
    else:
        raise FormatError(f"cannot encode dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode(buf):
    if buf[:4] != MAGIC:
        raise FormatError("missing AVST magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}I", buf, 6)
    off = 6 + 4 * rank
    dt = _CODES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(buf) - off != count * dt.itemsize:
        raise FormatError(f"payload is {len(buf) - off} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def save(path, arr):
    Path(path).write_bytes(encode(arr))


def load(path):
    return decode(Path(path).read_bytes())


def save_checkpoint(directory, state, hparams):
    """Write each tensor to ``<name>.avst`` plus a key-value ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["[hparams]"]
    lines += [f"{k} = {hparams[k]}" for k in sorted(hparams)]
    lines.append("[tensors]")
    for name in sorted(state):
        arr = np.asarray(state[name])
        save(directory / f"{name}.avst", arr)
        lines.append(f"{name} = {'x'.join(map(str, arr.shape)) or 'scalar'}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return sorted(directory.iterdir())


def load_checkpoint(directory):
    directory = Path(directory)
    hparams, names, section = {}, [], None
    for raw in (directory / "manifest.txt").read_text().splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("["):
            section = line.strip("[]")
            continue
        key, _, val = (s.strip() for s in line.partition("="))
        if section == "hparams":
            hparams[key] = val
        elif section == "tensors":
            names.append(key)
    state = {name: load(directory / f"{name}.avst") for name in names}
    return state, hparams
