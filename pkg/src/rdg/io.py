"""File formats: PFM for float rasters, PNG for display images, versioned JSON
documents, and the run manifest written by every command."""

from __future__ import annotations

import hashlib
import json
import platform
import re
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1


class IoError(OSError):
    pass


class SchemaError(ValueError):
    def __init__(self, message: str, *, field: str | None = None, line: int | None = None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.field = field
        self.line = line


# PFM


def write_pfm(path, data: np.ndarray) -> None:
    """Little-endian PFM: "Pf" for one channel, "PF" for three; rows stored bottom-up."""
    a = np.asarray(data, dtype="<f4")
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {a.shape}")
    h, w = a.shape[:2]
    header = tag + b"\n%d %d\n-1.0\n" % (w, h)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(a[::-1]).tobytes())
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_pfm(path) -> np.ndarray:
    """Float32 raster, top row first. Accepts either byte order."""
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise IoError(f"{path}: not a PFM file")
    tag, w, h = m.group(1), int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError as e:
        raise IoError(f"{path}: bad PFM scale") from e
    channels = 3 if tag == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end() :]
    if len(body) < 4 * count:
        raise IoError(f"{path}: truncated PFM data")
    a = np.frombuffer(body, dtype=dtype, count=count).astype(np.float32)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return a.reshape(shape)[::-1].copy()


# PNG


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB (or grey); values in [0, 1] are taken as already display-encoded."""
    a = np.asarray(image, dtype=np.float64)
    q = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            a = np.asarray(im.convert("RGB") if im.mode not in ("RGB", "L") else im)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return a.astype(np.float64) / 255.0


# JSON


def dump_json(path, doc: dict) -> None:
    """Write ``doc`` with a ``schema_version`` field, keys sorted, floats in shortest repr."""
    body = {"schema_version": SCHEMA_VERSION, **doc}
    try:
        Path(path).write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e


def parse_json(text: str, required: tuple[str, ...] = (), source: str = "<json>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{source}: {e.msg}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: top level must be an object", line=1)
    if "schema_version" not in doc:
        raise SchemaError(f"{source}: missing field", field="schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaError(f"{source}: unsupported version {doc['schema_version']!r}", field="schema_version")
    for name in required:
        if name not in doc:
            raise SchemaError(f"{source}: missing field", field=name, line=_line_of_end(text))
    return doc


def _line_of_end(text: str) -> int:
    return text.rstrip().count("\n") + 1


def load_json(path, required: tuple[str, ...] = ()) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    return parse_json(text, required, str(path))


# manifest


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "rdg": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "platform": platform.platform(),
    }


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)  # path -> sha256
    outputs: dict[str, str] = field(default_factory=dict)
    versions: dict = field(default_factory=versions)
    seconds: float = 0.0

    def record_inputs(self, *paths) -> None:
        for p in paths:
            self.inputs[str(p)] = file_digest(p)

    def record_outputs(self, *paths) -> None:
        for p in paths:
            self.outputs[str(p)] = file_digest(p)

    def write(self, path) -> None:
        dump_json(path, asdict(self))

    @classmethod
    def read(cls, path) -> "RunManifest":
        doc = load_json(path, ("command", "argv", "config", "seed"))
        doc.pop("schema_version")
        return cls(**doc)
