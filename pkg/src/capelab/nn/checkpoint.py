"""NNP1 checkpoint files.

Layout (little-endian)::

    magic "NNP1" | config digest (32 bytes, sha256) | n_blocks u32
    block := name_len u16 | utf-8 name | ndim u8 | dims u32[ndim] | f32 data
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np
import torch

from .encoder import CapeNet, EncoderConfig

MAGIC = b"NNP1"


class CheckpointError(ValueError):
    pass


def _tensors(net: torch.nn.Module) -> list[tuple[str, torch.Tensor]]:
    # num_batches_tracked is an integer counter, not part of the model
    items = [(k, v) for k, v in net.state_dict().items() if v.is_floating_point()]
    return sorted(items, key=lambda kv: kv[0])


def save_checkpoint(net: CapeNet, path: str | os.PathLike) -> None:
    parts = [MAGIC, net.cfg.digest()]
    tensors = _tensors(net)
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        raw = name.encode()
        arr = t.detach().cpu().numpy().astype("<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, cfg: EncoderConfig) -> CapeNet:
    """Rebuild a :class:`CapeNet` from ``path``; the stored digest must match ``cfg``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r}")
    if buf[4:36] != cfg.digest():
        raise CheckpointError(f"{path}: config digest mismatch")
    try:
        (count,) = struct.unpack_from("<I", buf, 36)
        pos = 40
        blocks = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            name = buf[pos + 2 : pos + 2 + ln].decode()
            pos += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, pos)
            dims = struct.unpack_from(f"<{ndim}I", buf, pos + 1)
            pos += 1 + 4 * ndim
            n = int(np.prod(dims)) if ndim else 1
            if pos + 4 * n > len(buf):
                raise CheckpointError(f"{path}: block {name!r} truncated")
            blocks[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated checkpoint") from exc

    net = CapeNet(cfg, seed=0)
    state = net.state_dict()
    expected = {k for k, v in state.items() if v.is_floating_point()}
    if set(blocks) != expected:
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    with torch.no_grad():
        for name, arr in blocks.items():
            if tuple(state[name].shape) != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name!r}")
            state[name].copy_(torch.from_numpy(arr.copy()))
    net.eval()
    return net
