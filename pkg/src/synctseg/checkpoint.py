"""Binary checkpoint container: a JSON manifest plus raw float32 blocks.

Layout: 4 magic bytes ``CP01``, a little-endian uint32 manifest length, the
UTF-8 JSON manifest, then the parameter blocks as little-endian float32 in C
order, concatenated in manifest order. The manifest records the format
version, a network-kind tag, the builder configs, free-form metadata, and the
name/shape of every block, so loading can fail loudly on any mismatch.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"CP01"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


class ConfigMismatchError(CheckpointError):
    """Checkpoint was produced under different configs than the caller expects."""


@dataclass
class Checkpoint:
    kind: str
    configs: dict
    meta: dict
    blocks: dict[str, np.ndarray]


def save_checkpoint(path, kind: str, configs: dict, blocks: dict[str, np.ndarray],
                    meta: dict | None = None) -> None:
    entries = []
    payload = []
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        payload.append(arr.tobytes())
    manifest = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "configs": configs,
        "meta": meta or {},
        "blocks": entries,
    }
    doc = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(doc)))
        f.write(doc)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path, expect_kind: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes in {path!s}: expected {MAGIC!r}")
    if len(buf) < 8:
        raise CheckpointError(f"truncated checkpoint {path!s}: no manifest length")
    (doc_len,) = struct.unpack_from("<I", buf, 4)
    if len(buf) < 8 + doc_len:
        raise CheckpointError(
            f"truncated manifest in {path!s}: expected {doc_len} bytes, got {len(buf) - 8}"
        )
    try:
        manifest = json.loads(buf[8 : 8 + doc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest in {path!s}: {exc}") from exc
    if manifest.get("format") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {manifest.get('format')!r} in {path!s}"
        )
    kind = manifest.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ConfigMismatchError(f"expected a {expect_kind!r} checkpoint, found {kind!r}")

    blocks: dict[str, np.ndarray] = {}
    offset = 8 + doc_len
    for entry in manifest["blocks"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))  # 1 for scalar shape ()
        nbytes = count * 4
        if offset + nbytes > len(buf):
            raise CheckpointError(
                f"truncated block {entry['name']!r} in {path!s}: expected {nbytes} "
                f"bytes, got {len(buf) - offset}"
            )
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
        blocks[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(buf):
        raise CheckpointError(
            f"trailing bytes in {path!s}: blocks end at {offset}, file has {len(buf)}"
        )
    return Checkpoint(kind=kind, configs=manifest["configs"], meta=manifest["meta"],
                      blocks=blocks)
