"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"MTVSCKPT"
    u32       format version (1)
    u64       header length N
    N bytes   UTF-8 JSON header:
                {"iteration": int, "config": {...}, "meta": {...},
                 "entries": [{"name": str, "shape": [...], "offset": int}, ...]}
    payload   concatenated little-endian float32 arrays; offsets are relative
              to the start of the payload

Model parameters are stored under ``param/<name>``, buffers under
``buffer/<name>`` and Adam state under ``adam/exp_avg/<name>``,
``adam/exp_avg_sq/<name>`` and ``adam/step/<name>``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"MTVSCKPT"
VERSION = 1


class CheckpointError(Exception):
    pass


def write_container(path, arrays: dict[str, np.ndarray], header: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, a in arrays.items():
        a = np.ascontiguousarray(np.asarray(a, dtype="<f4"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps({**header, "entries": entries}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} not found") from None
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + 12
    try:
        header = json.loads(raw[start:start + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    payload = memoryview(raw)[start + n:]
    arrays = {}
    for e in header.pop("entries"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: entry {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"]).copy()
    return arrays, header


def save_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None,
                    iteration: int = 0, config: dict | None = None, meta: dict | None = None) -> None:
    arrays = {}
    for name, p in model.named_parameters():
        arrays[f"param/{name}"] = p.detach().cpu().numpy()
    for name, b in model.named_buffers():
        arrays[f"buffer/{name}"] = b.detach().cpu().numpy()
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                arrays[f"adam/exp_avg/{n}"] = st["exp_avg"].detach().cpu().numpy()
                arrays[f"adam/exp_avg_sq/{n}"] = st["exp_avg_sq"].detach().cpu().numpy()
                arrays[f"adam/step/{n}"] = np.asarray(float(st["step"]))
    write_container(path, arrays, {"iteration": int(iteration), "config": config or {}, "meta": meta or {}})


def load_checkpoint(path, model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Restore parameters (and Adam state when given an optimizer); returns the header."""
    arrays, header = read_container(path)
    params = dict(model.named_parameters())
    missing = [n for n in params if f"param/{n}" not in arrays]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:5]}")
    with torch.no_grad():
        for n, p in params.items():
            a = arrays[f"param/{n}"]
            if tuple(a.shape) != tuple(p.shape):
                raise CheckpointError(f"{path}: {n} has shape {a.shape}, model expects {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a))
        for n, b in model.named_buffers():
            if f"buffer/{n}" in arrays:
                b.copy_(torch.from_numpy(arrays[f"buffer/{n}"]))
    if optimizer is not None:
        for n, p in params.items():
            if f"adam/exp_avg/{n}" not in arrays:
                continue
            optimizer.state[p] = {
                "step": torch.tensor(float(arrays[f"adam/step/{n}"].reshape(-1)[0])),
                "exp_avg": torch.from_numpy(arrays[f"adam/exp_avg/{n}"]).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(arrays[f"adam/exp_avg_sq/{n}"]).to(p.dtype),
            }
    return header
