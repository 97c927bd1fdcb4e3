"""Checkpoint containers, artifact hashing and image dumps.

A container is two files: ``<stem>.json`` (UTF-8 manifest) and ``<stem>.bin``
(concatenated little-endian float64 payloads). The manifest lists every entry as
``{name, shape, dtype: "f64", byte_offset, byte_length}`` plus free-form ``meta``
and the FNV-1a 64 hash of the payload file.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numba
import numpy as np

from .errors import ContractError

FORMAT = "casl-ckpt-v1"

FNV_OFFSET = np.uint64(0xCBF29CE484222325)
FNV_PRIME = np.uint64(0x100000001B3)


@numba.njit(cache=True)
def _fnv1a64(buf, h):
    for b in buf:
        h = (h ^ np.uint64(b)) * FNV_PRIME
    return h


def fnv1a64(data: bytes | np.ndarray, h: int | None = None) -> int:
    """64-bit FNV-1a; pass the previous value as ``h`` to continue a stream."""
    buf = np.frombuffer(data, dtype=np.uint8) if isinstance(data, (bytes, bytearray, memoryview)) else np.ascontiguousarray(data).view(np.uint8).ravel()
    return int(_fnv1a64(buf, FNV_OFFSET if h is None else np.uint64(h)))


def hex64(h: int) -> str:
    return f"{h:016x}"


# ---------------------------------------------------------------- atomic writes


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, fsync, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- containers


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    return stem.with_suffix(".json"), stem.with_suffix(".bin")


def save(stem, arrays: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write a container; returns the payload hash (hex).

    The binary file is renamed into place before the manifest, so a visible
    manifest always describes a complete payload.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f8", order="C")
        if not np.all(np.isfinite(a)):
            raise ContractError(f"refusing to save non-finite values in {name!r}")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": "f64", "byte_offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    digest = hex64(fnv1a64(payload))
    jpath, bpath = _paths(stem)
    manifest = {"format": FORMAT, "entries": entries, "payload": bpath.name, "payload_fnv1a64": digest, "meta": meta or {}}
    atomic_write_bytes(bpath, payload)
    atomic_write_text(jpath, dump_json(manifest))
    return digest


def read_manifest(stem) -> dict:
    jpath, _ = _paths(stem)
    with open(jpath, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{jpath} is not a {FORMAT} manifest")
    return manifest


def load(stem, verify: bool = True) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container back as ``(arrays, meta)``."""
    manifest = read_manifest(stem)
    _, bpath = _paths(stem)
    payload = bpath.read_bytes()
    if verify and hex64(fnv1a64(payload)) != manifest["payload_fnv1a64"]:
        raise ContractError(f"payload hash mismatch for {bpath}")
    arrays = {}
    for e in manifest["entries"]:
        if e["dtype"] != "f64":
            raise ContractError(f"unsupported dtype {e['dtype']!r}")
        raw = payload[e["byte_offset"] : e["byte_offset"] + e["byte_length"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(tuple(e["shape"])).astype(np.float64)
    return arrays, manifest["meta"]


def exists(stem) -> bool:
    jpath, bpath = _paths(stem)
    return jpath.exists() and bpath.exists()


def payload_hash(stem) -> str:
    return read_manifest(stem)["payload_fnv1a64"]


def file_hash(path) -> str:
    return hex64(fnv1a64(Path(path).read_bytes()))


# ---------------------------------------------------------------- images


def to_u8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255], clipped and rounded half to even."""
    x = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((x + 1.0) * 127.5).astype(np.uint8)


def pgm_bytes(image: np.ndarray) -> bytes:
    u8 = to_u8(image)
    if u8.ndim != 2:
        raise ContractError("PGM needs a single 2-D image")
    h, w = u8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    """Binary PGM back to [-1, 1] floats."""
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5" or len(parts) < 5:
        raise ContractError(f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContractError("only 8-bit PGM is supported")
    pix = np.frombuffer(data[len(data) - w * h :], dtype=np.uint8).reshape(h, w)
    return pix.astype(np.float64) / 127.5 - 1.0
