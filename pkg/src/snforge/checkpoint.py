"""SNFW named-tensor archives.

Layout (little-endian)::

    b"SNFW" | u32 version | u32 config_len | config (UTF-8 JSON)
    repeated until EOF:
        u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | payload

dtype 0 is float32 (1 float64 and 2 int64 are accepted for optimizer and
bookkeeping state).
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

from .config import DenseArch, SupernetConfig
from .errors import FormatError

MAGIC = b"SNFW"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


def write_archive(path: str | Path, config: dict[str, Any], tensors: dict[str, np.ndarray]) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg)))
        fh.write(cfg)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            code = _CODES.get(arr.dtype)
            if code is None:
                raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BI", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        fh.flush()
        os.fsync(fh.fileno())
    tmp.replace(path)


def read_archive(path: str | Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not an SNFW archive")
    try:
        version, clen = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        pos = 12
        config = json.loads(raw[pos:pos + clen].decode("utf-8"))
        pos += clen
        tensors: dict[str, np.ndarray] = {}
        while pos < len(raw):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            code, rank = struct.unpack_from("<BI", raw, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"{path}: tensor {name} truncated")
            tensors[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize,
                                          offset=pos).reshape(dims).astype(dt.newbyteorder("="))
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt archive ({exc})") from exc
    return config, tensors


def save_model(path, model, extra: dict[str, Any] | None = None) -> None:
    """Persist a ``Supernet`` or ``DenseModel`` with its architecture."""
    from .model import Supernet

    if isinstance(model, Supernet):
        cfg = {"kind": "supernet", "supernet": model.config.to_dict()}
    else:
        cfg = {"kind": "dense", "arch": model.arch.to_dict()}
    if extra:
        cfg.update(extra)
    write_archive(path, cfg, model.state_dict())


def load_model(path):
    """Returns ``(model, config_dict)``; supernets load as ``Supernet``."""
    from .model import DenseModel, Supernet

    cfg, tensors = read_archive(path)
    kind = cfg.get("kind")
    if kind == "supernet":
        return Supernet(SupernetConfig.from_dict(cfg["supernet"]), tensors), cfg
    if kind == "dense":
        return DenseModel(DenseArch.from_dict(cfg["arch"]), tensors), cfg
    raise FormatError(f"{path}: unknown model kind {kind!r}")


def as_dense(model):
    """Dense view of a loaded model (supernets become their full network)."""
    from .model import Supernet

    return model.model if isinstance(model, Supernet) else model
