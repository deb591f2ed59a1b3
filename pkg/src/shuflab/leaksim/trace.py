"""PowerTrace container and the SHTR on-disk format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"SHTR"
VERSION = 1
FLAG_ANNOTATED = 0x1
HEADER = struct.Struct("<4sHHQ")


@dataclass
class PowerTrace:
    samples: np.ndarray
    annotations: list[dict] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.annotations is not None:
            n = len(self.samples)
            for a in self.annotations:
                if not 0 <= a["cycle"] < n:
                    raise FormatError(f"annotation cycle {a['cycle']} outside trace of {n} samples")

    def __len__(self) -> int:
        return len(self.samples)

    def blind(self) -> "PowerTrace":
        """Copy without ground-truth annotations."""
        return PowerTrace(self.samples, None, {k: v for k, v in self.meta.items() if not k.startswith("truth")})

    def notes(self, kind: str) -> list[dict]:
        if self.annotations is None:
            return []
        return [a for a in self.annotations if a["kind"] == kind]


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_trace(trace: PowerTrace, path: str | Path, annotations: bool = True) -> Path:
    path = Path(path)
    keep = annotations and trace.annotations is not None
    header = HEADER.pack(MAGIC, VERSION, FLAG_ANNOTATED if keep else 0, len(trace.samples))
    path.write_bytes(header + trace.samples.astype("<f4").tobytes())
    side = {"meta": trace.meta}
    if keep:
        side["annotations"] = trace.annotations
    sidecar_path(path).write_text(json.dumps(side, sort_keys=True))
    return path


def read_trace(path: str | Path, annotations: bool = True) -> PowerTrace:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, flags, count = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if len(raw) != HEADER.size + 4 * count:
        raise FormatError(f"{path}: expected {count} samples")
    samples = np.frombuffer(raw, "<f4", count, HEADER.size).astype(np.float32)
    meta, notes = {}, None
    side = sidecar_path(path)
    if side.exists():
        doc = json.loads(side.read_text())
        meta = doc.get("meta", {})
        if annotations and flags & FLAG_ANNOTATED:
            notes = doc.get("annotations")
    return PowerTrace(samples, notes, meta)
