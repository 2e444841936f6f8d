"""MMT1 binary tensors and checkpoint directories.

Layout: ``b"MMT1"``, u32 rank, ``rank`` u32 extents, then row-major float32
values, all little-endian. A checkpoint is a directory of ``<name>.mmt``
files plus ``manifest.txt`` (one ``name shape`` line per tensor) and the
model configuration in ``config.txt``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MMT1"
MANIFEST = "manifest.txt"
CONFIG = "config.txt"


class FormatError(ValueError):
    pass


def encode_mmt(array) -> bytes:
    a = np.asarray(array)
    header = MAGIC + struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_mmt(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("missing MMT1 magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated MMT1 header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) != off + 4 * count:
        raise FormatError(f"payload holds {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(shape).astype(np.float32)


def save_mmt(path, array) -> None:
    Path(path).write_bytes(encode_mmt(array))


def load_mmt(path) -> np.ndarray:
    return decode_mmt(Path(path).read_bytes())


def save_checkpoint(directory, params: dict, config_text: str | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(params):
        arr = params[name].data if hasattr(params[name], "data") else np.asarray(params[name])
        save_mmt(d / f"{name}.mmt", arr)
        lines.append(f"{name} {','.join(str(x) for x in arr.shape)}\n")
    (d / MANIFEST).write_text("".join(lines))
    if config_text is not None:
        (d / CONFIG).write_text(config_text)
    return d


def load_checkpoint(directory) -> dict[str, np.ndarray]:
    d = Path(directory)
    manifest = d / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    out: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, shape_s = line.split()
            shape = tuple(int(x) for x in shape_s.split(",") if x)
        except ValueError:
            raise FormatError(f"{manifest}:{lineno}: malformed manifest line {line!r}") from None
        arr = load_mmt(d / f"{name}.mmt")
        if arr.shape != shape:
            raise FormatError(f"{name}: manifest shape {shape} but file holds {arr.shape}")
        out[name] = arr
    return out
