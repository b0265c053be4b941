"""Checkpoint files: a text manifest plus one little-endian float32 payload.

Manifest layout (UTF-8, one record per line)::

    # facornet checkpoint v1
    meta <key> <json value>
    tensor <name> <shape> float32 <offset> <count>

``shape`` is comma separated (``scalar`` for 0-d tensors), ``offset`` is in
bytes into ``<manifest>.bin`` and ``count`` is the element count.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, ParseError

HEADER = "# facornet checkpoint v1"
PAYLOAD_DTYPE = np.dtype("<f4")


def payload_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".bin")


def _fmt_shape(shape) -> str:
    return ",".join(str(s) for s in shape) if len(shape) else "scalar"


def _parse_shape(text: str) -> tuple:
    return () if text == "scalar" else tuple(int(s) for s in text.split(","))


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [HEADER]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    offset = 0
    chunks = []
    for name, t in tensors.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"tensor name may not contain whitespace: {name!r}")
        arr = np.array(t.detach().cpu().numpy() if torch.is_tensor(t) else t, dtype=PAYLOAD_DTYPE, order="C")
        lines.append(f"tensor {name} {_fmt_shape(arr.shape)} float32 {offset} {arr.size}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload_path(path).write_bytes(b"".join(chunks))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; tensors come back as float32 torch tensors."""
    path = Path(path)
    text = path.read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != HEADER:
        raise ParseError(path, 1, "not a facornet checkpoint manifest")
    blob = payload_path(path).read_bytes()
    tensors, meta = {}, {}
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = json.loads(value)
        elif kind == "tensor":
            try:
                name, shape, dtype, offset, count = rest.split()
                shape, offset, count = _parse_shape(shape), int(offset), int(count)
            except ValueError as exc:
                raise ParseError(path, lineno, f"bad tensor record: {exc}") from None
            if dtype != "float32":
                raise ParseError(path, lineno, f"unsupported dtype {dtype}")
            end = offset + count * PAYLOAD_DTYPE.itemsize
            if end > len(blob) or int(np.prod(shape, dtype=np.int64)) != count:
                raise DataError(f"checkpoint tensor {name!r}: payload does not match shape {shape}")
            arr = np.frombuffer(blob, dtype=PAYLOAD_DTYPE, count=count, offset=offset).reshape(shape)
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
        else:
            raise ParseError(path, lineno, f"unknown record type {kind!r}")
    return tensors, meta


def save_model(path, model: torch.nn.Module, meta: dict | None = None, extra: dict | None = None) -> Path:
    tensors = {f"param.{k}": v for k, v in model.state_dict().items()}
    tensors.update(extra or {})
    return save_checkpoint(path, tensors, meta)


def load_model_state(model: torch.nn.Module, tensors: dict):
    state = {k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")}
    model.load_state_dict(state)
