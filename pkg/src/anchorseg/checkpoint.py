"""Checkpoint container: one file holding every parameter tensor in the
binary tensor format, plus a text manifest with (name, shape, offset) rows
and the serialized run configuration.

Layout: 8-byte magic "ACKP0001", little-endian u64 manifest length, the
UTF-8 manifest, then concatenated tensor blobs at the stated offsets
(relative to the payload start). Writing is deterministic: parameters are
sorted by name and nothing time-dependent is recorded.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, deserialize, serialize
from .tensorfile import tensor_from_bytes, tensor_to_bytes

MAGIC = b"ACKP0001"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], cfg: RunConfig) -> None:
    blobs = []
    offset = 0
    rows = []
    for name in sorted(state):
        blob = tensor_to_bytes(state[name])
        shape = ",".join(str(d) for d in state[name].shape)
        rows.append(f"tensor.{name} = {shape};{offset};{len(blob)}")
        blobs.append(blob)
        offset += len(blob)
    config_block = "".join(
        f"config.{line}\n" for line in serialize(cfg).splitlines()
    )
    manifest = (config_block + "\n".join(rows) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], RunConfig]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad checkpoint magic in {path}")
    (mlen,) = struct.unpack_from("<Q", raw, len(MAGIC))
    head = len(MAGIC) + 8
    manifest = raw[head : head + mlen].decode("utf-8")
    payload = raw[head + mlen :]
    config_lines = []
    state: dict[str, np.ndarray] = {}
    for line in manifest.splitlines():
        if not line.strip():
            continue
        if line.startswith("config."):
            config_lines.append(line[len("config."):])
            continue
        if not line.startswith("tensor."):
            raise CheckpointError(f"unrecognized manifest line: {line!r}")
        key, _, spec = line.partition(" = ")
        name = key[len("tensor."):]
        shape_s, off_s, len_s = spec.split(";")
        off, ln = int(off_s), int(len_s)
        arr = tensor_from_bytes(payload[off : off + ln])
        want = tuple(int(d) for d in shape_s.split(",") if d)
        if arr.shape != want:
            raise CheckpointError(f"shape mismatch for {name}: {arr.shape} vs {want}")
        state[name] = arr
    cfg = deserialize("\n".join(config_lines))
    return state, cfg
