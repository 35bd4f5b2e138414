"""SGCK checkpoint container.

Little-endian layout::

    "SGCK"  u32 version
    u32 n + n bytes      model config as UTF-8 ``key=value`` lines
    u32 count            parameters, then per parameter in name order:
        u16 n + name, u8 rank, u32 dims[rank], float32 data
    u32 n + n bytes      optimizer header (JSON: kind, hyper, step,
                         buffer_names, names)
        per name in header order, per buffer name: float32 data
    u32 n + n bytes      progress (JSON)

Writes go to a temporary file that is atomically renamed into place.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
import typing
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .autodiff import Tensor
from .data import FormatError, _atomic_write, _Reader
from .model import ModelConfig, parameter_specs

MAGIC = b"SGCK"
VERSION = 1


class CheckpointMismatch(ValueError):
    """Checkpoint tensors do not match the requested configuration."""


# ---------------------------------------------------------------------------
# config text
# ---------------------------------------------------------------------------


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(text: str, typ, key: str = "value"):
    """Parse ``text`` as ``typ`` (``int``/``float``/``bool``/``str``/Optional)."""
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if text.strip().lower() in ("none", ""):
            return None
        typ = args[0]
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ValueError(f"{key}: cannot parse {text!r} as {getattr(typ, '__name__', typ)}") from None


def field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{k}={_format_value(v)}\n" for k, v in cfg.to_dict().items())


def config_from_text(text: str) -> ModelConfig:
    types = field_types(ModelConfig)
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        if key not in types:
            raise FormatError(f"unknown config key {key!r} in checkpoint")
        values[key] = parse_value(val, types[key], key)
    return ModelConfig(**values)


# ---------------------------------------------------------------------------
# save / load
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, Tensor]
    optimizer: Optional[dict]
    progress: dict


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(cfg: ModelConfig, params: Dict[str, Tensor], optimizer: Optional[dict] = None,
                      progress: Optional[dict] = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(config_to_text(cfg).encode("utf-8"))]
    names = sorted(params)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    opt_names = sorted(optimizer["buffers"]) if optimizer else []
    header = {k: v for k, v in (optimizer or {}).items() if k != "buffers"}
    header["names"] = opt_names
    parts.append(_blob(json.dumps(header, sort_keys=True).encode("utf-8")))
    for name in opt_names:
        for b in optimizer["buffer_names"]:
            parts.append(np.ascontiguousarray(optimizer["buffers"][name][b], dtype="<f4").tobytes())
    parts.append(_blob(json.dumps(progress or {}, sort_keys=True).encode("utf-8")))
    return b"".join(parts)


def save_checkpoint(path, cfg: ModelConfig, params: Dict[str, Tensor], optimizer: Optional[dict] = None,
                    progress: Optional[dict] = None) -> None:
    """Write a checkpoint atomically."""
    _atomic_write(path, encode_checkpoint(cfg, params, optimizer, progress))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, expected SGCK", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    at = r.pos
    (n,) = r.unpack("<I", "config length")
    try:
        cfg = config_from_text(bytes(r.take(n, "config")).decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"invalid config section: {exc}", at) from None
    (count,) = r.unpack("<I", "parameter count")
    params = {}
    for _ in range(count):
        name = r.string("<H", "parameter name")
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}") if rank else ()
        size = math.prod(dims)
        data = r.array("<f4", size, f"data of {name}").astype(np.float32).reshape(dims)
        params[name] = Tensor(data, requires_grad=not name.endswith(("running_mean", "running_var")), name=name)
    at = r.pos
    (n,) = r.unpack("<I", "optimizer header length")
    try:
        header = json.loads(bytes(r.take(n, "optimizer header")).decode("utf-8"))
    except ValueError:
        raise FormatError("optimizer header is not valid JSON", at) from None
    optimizer = None
    if isinstance(header, dict) and header.get("kind"):
        try:
            names, buffer_names = list(header["names"]), list(header["buffer_names"])
        except (KeyError, TypeError):
            raise FormatError("optimizer header lacks names/buffer_names", at) from None
        buffers = {}
        for name in names:
            if name not in params:
                raise FormatError(f"optimizer buffer for unknown parameter {name!r}", r.pos)
            shape = params[name].shape
            buffers[name] = {
                b: r.array("<f4", math.prod(shape), f"{b} buffer of {name}").astype(np.float32).reshape(shape)
                for b in buffer_names
            }
        optimizer = {k: v for k, v in header.items() if k != "names"}
        optimizer["buffers"] = buffers
    at = r.pos
    (n,) = r.unpack("<I", "progress length")
    try:
        progress = json.loads(bytes(r.take(n, "progress")).decode("utf-8"))
    except ValueError:
        raise FormatError("progress section is not valid JSON", at) from None
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes", r.pos)
    return Checkpoint(cfg, params, optimizer, progress)


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Read a checkpoint; with ``expect``, refuse tensors that do not fit it.

    Raises:
        FormatError: malformed file (message carries the byte offset).
        CheckpointMismatch: names or shapes differ from ``expect``; the
            message names the first offending tensor in name order.
    """
    with open(path, "rb") as fh:
        ck = decode_checkpoint(fh.read())
    if expect is not None:
        check_compatible(ck.params, expect)
    return ck


def check_compatible(params: Dict[str, Tensor], cfg: ModelConfig) -> None:
    want = {k: tuple(s.shape) for k, s in parameter_specs(cfg).items()}
    for name in sorted(set(want) | set(params)):
        if name not in params:
            raise CheckpointMismatch(f"tensor {name!r} missing from checkpoint")
        if name not in want:
            raise CheckpointMismatch(f"tensor {name!r} not expected by the configuration")
        if tuple(params[name].shape) != want[name]:
            raise CheckpointMismatch(
                f"tensor {name!r} has shape {tuple(params[name].shape)}, configuration expects {want[name]}"
            )
