"""Named-tensor container files.

Layout: the 4 magic bytes ``HMA1`` and a newline, then one ASCII header line
per entry (``<name> (<d0,d1,...>) f32``), a blank line, and the raw row-major
little-endian float32 payloads concatenated in header order. Scalars use the
empty dimension list ``()``.
"""

from __future__ import annotations

import numpy as np

MAGIC = b"HMA1"


class CheckpointError(ValueError):
    """Malformed or unreadable container file."""


def _dims_token(shape: tuple[int, ...]) -> str:
    return "(" + ",".join(str(d) for d in shape) + ")"


def _parse_dims(token: str) -> tuple[int, ...]:
    if not (token.startswith("(") and token.endswith(")")):
        raise CheckpointError(f"bad dims token {token!r}")
    inner = token[1:-1]
    if not inner:
        return ()
    return tuple(int(d) for d in inner.split(","))


def save_tensors(path, entries: dict[str, np.ndarray]) -> None:
    """Write ``entries`` (name -> float array) as an HMA1 container."""
    header_lines = []
    payloads = []
    for name, arr in entries.items():
        if " " in name or "\n" in name:
            raise CheckpointError(f"entry name {name!r} contains whitespace")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        header_lines.append(f"{name} {_dims_token(arr.shape)} f32")
        payloads.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        fh.write(("\n".join(header_lines) + "\n\n").encode("ascii"))
        for blob in payloads:
            fh.write(blob)


def load_tensors(path) -> dict[str, np.ndarray]:
    """Read an HMA1 container back into name -> float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    try:
        header_end = blob.index(b"\n\n", 4)
    except ValueError as exc:
        raise CheckpointError(f"{path}: missing header terminator") from exc
    header = blob[5:header_end].decode("ascii")
    offset = header_end + 2
    entries: dict[str, np.ndarray] = {}
    for line in header.splitlines():
        parts = line.split()
        if len(parts) != 3 or parts[2] != "f32":
            raise CheckpointError(f"{path}: bad header line {line!r}")
        name, dims = parts[0], _parse_dims(parts[1])
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        entries[name] = arr.reshape(dims).astype(np.float32)
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return entries
