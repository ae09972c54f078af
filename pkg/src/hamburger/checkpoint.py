"""Single-file checkpoints: a JSON header line followed by little-endian float64 blobs.

Layout::

    HAMBURGER-CKPT 1\\n
    {"config": {...}, "tensors": [{"name", "shape", "offset", "nbytes"}, ...]}\\n
    <blob bytes, concatenated in header order>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig
from .errors import DataError
from .hamburger import HamburgerModel

MAGIC = b"HAMBURGER-CKPT 1\n"


def dumps(model: HamburgerModel) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in model.state_dict().items():
        raw = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "tensors": entries}, sort_keys=True)
    return MAGIC + header.encode("utf-8") + b"\n" + b"".join(blobs)


def loads(data: bytes) -> HamburgerModel:
    if not data.startswith(MAGIC):
        raise DataError("not a hamburger checkpoint (bad magic)")
    end = data.index(b"\n", len(MAGIC))
    header = json.loads(data[len(MAGIC):end])
    body = memoryview(data)[end + 1 :]
    model = HamburgerModel(ModelConfig.from_dict(header["config"]))
    state = {}
    for e in header["tensors"]:
        chunk = body[e["offset"] : e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(np.float64, copy=True))
    model.load_state_dict(state, strict=True)
    return model


def save(model: HamburgerModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path: str | Path) -> HamburgerModel:
    return loads(Path(path).read_bytes())
