"""Named-parameter store, Adam update and the CCTG checkpoint format."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
from torch import nn

from .ops import ConfigError

MAGIC = b"CCTG"
FORMAT_VERSION = 1

_DTYPES = {0: np.float32, 1: np.float64, 2: np.int64, 3: np.uint8}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelState:
    params: dict[str, torch.Tensor]
    version: str = "1"
    frozen: frozenset[str] = frozenset()

    @classmethod
    def from_module(cls, module: nn.Module, frozen: Iterable[str] = (), version: str = "1") -> ModelState:
        return cls(dict(module.named_parameters()), version, frozenset(frozen))

    def is_frozen(self, name: str) -> bool:
        return any(name == g or name.startswith(g + ".") for g in self.frozen)

    def freeze(self, *groups: str) -> ModelState:
        return ModelState(self.params, self.version, self.frozen | set(groups))

    def trainable(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.params.items() if not self.is_frozen(k)}

    def numpy(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.params.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].detach().cpu().numpy()).tobytes())
        return h.hexdigest()


@dataclass
class AdamMoments:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


@torch.no_grad()
def adam_step(state: ModelState, grads: Mapping[str, torch.Tensor | None], moments: AdamMoments,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ModelState:
    """One bias-corrected Adam update, in place on the state's tensors.

    Frozen parameters are skipped entirely, so they stay bit-identical.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    unknown = set(grads) - set(state.params)
    if unknown:
        raise ConfigError(f"gradients for unknown parameters: {sorted(unknown)}")
    moments.t += 1
    c1 = 1.0 - beta1 ** moments.t
    c2 = 1.0 - beta2 ** moments.t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None or state.is_frozen(name):
            continue
        m = moments.m.setdefault(name, torch.zeros_like(p))
        v = moments.v.setdefault(name, torch.zeros_like(p))
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# checkpoint: magic, u32 version, u32 count, then per tensor
#   u32 name_len, name utf-8, u8 dtype, u8 rank, u32 dims[rank], raw LE values
# dtype codes: 0 f32, 1 f64, 2 i64, 3 u8


def encode_checkpoint(arrays: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<BB", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(out)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a CCTG checkpoint")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            code, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            dtype = np.dtype(_DTYPES[code]).newbyteorder("<")
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            arrays[name] = np.frombuffer(blob[pos:pos + size], dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
            pos += size
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return arrays


def save_checkpoint(path: str | Path, state: ModelState, architecture: Mapping | None = None) -> None:
    path = Path(path)
    path.write_bytes(encode_checkpoint(state.numpy()))
    sidecar = {
        "format": "CCTG",
        "format_version": FORMAT_VERSION,
        "model_version": state.version,
        "frozen": sorted(state.frozen),
        "architecture": dict(architecture or {}),
        "sha256": state.digest(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> tuple[ModelState, dict]:
    path = Path(path)
    arrays = decode_checkpoint(path.read_bytes())
    sidecar_path = Path(str(path) + ".json")
    meta = json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    params = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    return ModelState(params, meta.get("model_version", "1"), frozenset(meta.get("frozen", ()))), meta


def load_into(module: nn.Module, state: ModelState) -> None:
    own = dict(module.named_parameters())
    missing = set(own) - set(state.params)
    extra = set(state.params) - set(own)
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    with torch.no_grad():
        for name, p in own.items():
            src = state.params[name]
            if tuple(src.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(src.shape)} vs {tuple(p.shape)}")
            p.copy_(src.to(p.dtype))
