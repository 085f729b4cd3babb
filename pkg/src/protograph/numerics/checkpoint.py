"""On-disk format for named float64 tensor collections.

Layout: a UTF-8 text header, then raw little-endian IEEE-754 blocks.

    PGCKPT 1
    meta <json-line>
    tensor <name> <ndim> <d0> <d1> ...
    ...
    end
    <block 0 bytes><block 1 bytes>...

Blocks follow header order; each holds the tensor's C-order float64 bytes.
Writes are atomic (temp file in the target directory, then rename) so a
crash never leaves a partial checkpoint behind.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

__all__ = ["save_tensors", "load_tensors", "CheckpointError"]

_MAGIC = "PGCKPT 1"


class CheckpointError(Exception):
    """Raised when a checkpoint file is malformed or truncated."""


def save_tensors(path: str, tensors: dict[str, np.ndarray],
                 meta: dict | None = None) -> None:
    """Write named arrays to ``path``; names are sorted for reproducibility."""
    names = sorted(tensors)
    for name in names:
        if any(ch.isspace() for ch in name) or not name:
            raise ValueError(f"invalid tensor name {name!r}")
    lines = [_MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    blocks = []
    for name in names:
        # np.asarray keeps 0-d shapes; tobytes() always emits C order.
        arr = np.asarray(tensors[name], dtype=np.float64)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"tensor {name} {arr.ndim}" + (f" {dims}" if dims else ""))
        blocks.append(arr.tobytes())
    header = ("\n".join(lines) + "\nend\n").encode("utf-8")
    payload = header + b"".join(blocks)
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_tensors(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; returns (tensors, meta)."""
    with open(path, "rb") as f:
        raw = f.read()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if cut < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = raw[:cut].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: header is not UTF-8") from exc
    body = raw[cut + len(marker):]
    lines = header.split("\n")
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError(f"{path}: bad magic line {lines[0]!r}")
    if len(lines) < 2 or not lines[1].startswith("meta "):
        raise CheckpointError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[1][5:])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: meta line is not JSON") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for line in lines[2:]:
        parts = line.split()
        if not parts or parts[0] != "tensor":
            raise CheckpointError(f"{path}: unexpected header line {line!r}")
        if len(parts) < 3:
            raise CheckpointError(f"{path}: short tensor line {line!r}")
        name = parts[1]
        try:
            ndim = int(parts[2])
            shape = tuple(int(s) for s in parts[3:])
        except ValueError as exc:
            raise CheckpointError(f"{path}: bad dims in {line!r}") from exc
        if len(shape) != ndim:
            raise CheckpointError(f"{path}: dim count mismatch in {line!r}")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated block for tensor {name!r}")
        arr = np.frombuffer(body[offset:offset + nbytes],
                            dtype="<f8").reshape(shape).copy()
        tensors[name] = arr
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return tensors, meta
