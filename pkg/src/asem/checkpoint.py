"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"ASEMCKPT"
    version    u32
    header_len u64, then header_len bytes of UTF-8 JSON (configs, vocab, labels, counters)
    n_tensors  u32
    per tensor: name_len u32, name bytes, rank u32, rank x u32 dims, float32 values (row-major)

Parameters are stored as ``param/<name>``, AdamW moments as ``adam_m/<name>`` and
``adam_v/<name>``.
"""
from __future__ import annotations

import base64
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .corpus import LabelSchema, Vocabulary

MAGIC = b"ASEMCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab: Vocabulary
    schema: LabelSchema
    params: dict[str, torch.Tensor]
    adam_m: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: dict[str, torch.Tensor] = field(default_factory=dict)
    adam_steps: dict[str, float] = field(default_factory=dict)
    step: int = 0
    val_history: list[tuple[int, float]] = field(default_factory=list)
    best_val: Optional[float] = None
    bad_evals: int = 0
    torch_rng_state: Optional[bytes] = None
    format_version: int = FORMAT_VERSION

    def header(self) -> dict:
        return {
            "format_version": self.format_version,
            "model_config": self.model_config.model_dump(mode="json"),
            "train_config": self.train_config.model_dump(mode="json"),
            "vocab": self.vocab.itos,
            "schema": self.schema.to_dict(),
            "step": self.step,
            "val_history": [list(v) for v in self.val_history],
            "best_val": self.best_val,
            "bad_evals": self.bad_evals,
            "adam_steps": self.adam_steps,
            "torch_rng_state": (base64.b64encode(self.torch_rng_state).decode()
                                if self.torch_rng_state is not None else None),
        }


def _write_tensor(buf, name: str, t: torch.Tensor) -> None:
    raw = name.encode()
    arr = t.detach().cpu().numpy().astype("<f4", copy=False)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr).tobytes())


def to_bytes(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    header = json.dumps(ckpt.header(), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    buf.write(struct.pack("<Q", len(header)))
    buf.write(header)
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    tensors += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        _write_tensor(buf, name, t)
    return buf.getvalue()


def from_bytes(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(8)) != MAGIC:
        raise CheckpointError("not an ASEM checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", take(8))
    header = json.loads(bytes(take(hlen)))
    (n,) = struct.unpack("<I", take(4))
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(n):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode()
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        kind, _, key = name.partition("/")
        if kind not in groups:
            raise CheckpointError(f"unknown tensor group in {name!r}")
        groups[kind][key] = torch.from_numpy(arr.copy())
    rng = header.get("torch_rng_state")
    return Checkpoint(
        model_config=ModelConfig.model_validate(header["model_config"]),
        train_config=TrainConfig.model_validate(header["train_config"]),
        vocab=Vocabulary(header["vocab"]),
        schema=LabelSchema.from_dict(header["schema"]),
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_steps=header.get("adam_steps", {}),
        step=header["step"],
        val_history=[tuple(v) for v in header["val_history"]],
        best_val=header["best_val"],
        bad_evals=header["bad_evals"],
        torch_rng_state=base64.b64decode(rng) if rng else None,
        format_version=version,
    )


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return from_bytes(data)
