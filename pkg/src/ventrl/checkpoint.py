"""Checkpoint container.

Layout::

    ventrl-checkpoint 1
    seed 7
    step 2000
    config_hash 3f1c...
    <more key value lines>
    critic.w0 26,256 f32 0
    critic.b0 256 f32 26624
    ...
    <blank line>
    <little-endian float32 payloads, row-major, concatenated>

Header lines with two tokens are metadata; four tokens describe an array
(``offset`` is in bytes from the start of the payload). Metadata values
must not contain whitespace.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "ventrl-checkpoint"


@dataclass
class Checkpoint:
    arrays: dict
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return int(self.meta.get("step", 0))

    @property
    def seed(self) -> int:
        return int(self.meta.get("seed", 0))

    def to_bytes(self) -> bytes:
        lines = [f"{MAGIC} 1"]
        for key in ("seed", "step", "config_hash"):
            if key in self.meta:
                lines.append(f"{key} {self.meta[key]}")
        for key, value in self.meta.items():
            if key in ("seed", "step", "config_hash"):
                continue
            text = str(value)
            if not text or any(c.isspace() for c in text) or any(c.isspace() for c in key):
                raise ValueError(f"metadata {key!r}={text!r} must be a single token")
            lines.append(f"{key} {text}")
        payload = []
        offset = 0
        for name, arr in self.arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            shape = ",".join(str(s) for s in data.shape) or "scalar"
            lines.append(f"{name} {shape} f32 {offset}")
            raw = data.tobytes()
            payload.append(raw)
            offset += len(raw)
        header = "\n".join(lines) + "\n\n"
        return header.encode("ascii") + b"".join(payload)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        end = blob.index(b"\n\n")
        header = blob[:end].decode("ascii").split("\n")
        payload = blob[end + 2:]
        if not header or not header[0].startswith(MAGIC):
            raise ValueError("not a checkpoint container")
        meta, arrays = {}, {}
        for line in header[1:]:
            parts = line.split(" ")
            if len(parts) == 2:
                meta[parts[0]] = parts[1]
            elif len(parts) == 4:
                name, shape, dtype, offset = parts
                if dtype != "f32":
                    raise ValueError(f"unsupported dtype {dtype}")
                dims = () if shape == "scalar" else tuple(int(s) for s in shape.split(","))
                count = int(np.prod(dims)) if dims else 1
                start = int(offset)
                arrays[name] = np.frombuffer(payload, dtype="<f4", count=count,
                                             offset=start).reshape(dims).astype(np.float32)
            else:
                raise ValueError(f"malformed header line: {line!r}")
        return cls(arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def config_hash(config) -> str:
    """Short stable hash of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
