"""Binary checkpoint format.

Layout (little-endian)::

    b"STRB"  u32 version  u32 len  <config JSON>  u32 n_tensors
    per tensor: u16 name_len  <name utf-8>  u8 rank  u32 dims[rank]  f32 data[prod(dims)]

The config JSON carries the model config, the vocabulary and training metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .matcher import PHI_LAYOUT_VERSION, ModelConfig, StruBERT
from .nn import ParamStore
from .tables import Vocabulary

MAGIC = b"STRB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: StruBERT, meta: dict | None = None) -> None:
    blob = json.dumps({
        "model": model.config.to_dict(),
        "vocab": model.vocab.tokens,
        "phi_layout": PHI_LAYOUT_VERSION,
        "meta": meta or {},
    }, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob,
             struct.pack("<I", len(model.store))]
    for name, p in model.store.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[StruBERT, dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 12
    config = json.loads(buf[off:off + n].decode("utf-8"))
    off += n
    if config.get("phi_layout") != PHI_LAYOUT_VERSION:
        raise CheckpointError(f"{path}: feature layout {config.get('phi_layout')} != {PHI_LAYOUT_VERSION}")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    store = ParamStore(np.float32)
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        store.add(name, data.astype(np.float32))
    if off != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - off} trailing bytes")
    model = StruBERT(ModelConfig.from_dict(config["model"]), Vocabulary(config["vocab"]), store)
    return model, config["meta"]
