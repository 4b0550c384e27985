"""Parameter checkpoint files.

Layout: an ASCII header, one ``key=value`` per line, ending with a line
``end``; then the raw parameter blocks back to back as little-endian float32
in header order::

    skyfuse-checkpoint 1
    config.image_px=32
    ...
    param pe_w 16x32
    ...
    end
"""

from __future__ import annotations

import numpy as np

from .model import ConfigError, NetworkConfig, NetworkParams, param_shapes

MAGIC = "skyfuse-checkpoint 1"
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _shape_text(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "scalar"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "scalar" else tuple(int(s) for s in text.split("x"))


def save_checkpoint(path, params: NetworkParams, cfg: NetworkConfig, extra: dict | None = None) -> None:
    expected = param_shapes(cfg)
    if list(params) != list(expected):
        raise ConfigError("parameter names do not match the network config")
    lines = [MAGIC]
    for key, value in cfg.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"config.{key}={value}")
    for key, value in (extra or {}).items():
        lines.append(f"extra.{key}={value}")
    for name, arr in params.items():
        if tuple(arr.shape) != expected[name]:
            raise ConfigError(f"{name} has shape {arr.shape}, config expects {expected[name]}")
        lines.append(f"param {name} {_shape_text(arr.shape)}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())


def load_checkpoint(path, expect: NetworkConfig | None = None, dtype=np.float32):
    """Return ``(params, cfg, extra)``.

    With ``expect`` given, any config difference is a :class:`ConfigError`.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    header_lines = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = data[pos:nl].decode("ascii", errors="replace")
        pos = nl + 1
        if line == "end":
            break
        header_lines.append(line)
    if not header_lines or header_lines[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")

    conf: dict[str, str] = {}
    extra: dict[str, str] = {}
    blocks: list[tuple[str, tuple[int, ...]]] = []
    for line in header_lines[1:]:
        if line.startswith("param "):
            _, name, shape = line.split(" ")
            blocks.append((name, _parse_shape(shape)))
        elif line.startswith("config."):
            key, _, value = line[len("config.") :].partition("=")
            conf[key] = value
        elif line.startswith("extra."):
            key, _, value = line[len("extra.") :].partition("=")
            extra[key] = value
        else:
            raise CheckpointError(f"{path}: unexpected header line {line!r}")

    cfg = NetworkConfig.from_strings(conf)
    if expect is not None and expect != cfg:
        diff = [
            f"{k}: checkpoint {v!r} vs expected {getattr(expect, k)!r}"
            for k, v in cfg.to_dict().items()
            if getattr(expect, k) != v
        ]
        raise ConfigError("checkpoint config mismatch: " + "; ".join(diff))
    expected = param_shapes(cfg)
    if [b[0] for b in blocks] != list(expected):
        raise CheckpointError(f"{path}: parameter list does not match its config")

    params = NetworkParams()
    for name, shape in blocks:
        if shape != expected[name]:
            raise CheckpointError(f"{path}: {name} shape {shape} != {expected[name]}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * _F32.itemsize
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at {name}")
        arr = np.frombuffer(data, dtype=_F32, count=nbytes // _F32.itemsize, offset=pos)
        params[name] = arr.reshape(shape).astype(dtype)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return params, cfg, extra
