"""Binary tensor format and checkpoint directories.

Tensor files: magic "PSV1", u32 rank, u32 dims..., little-endian f64 payload
(all integers little-endian). Checkpoints are a directory of tensor files
plus a text manifest mapping parameter paths to file names.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"PSV1"


def write_tensor(path: str | Path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r} at byte 0")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated header at byte {len(blob)}")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header_end = 8 + 4 * rank
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated dims at byte {len(blob)}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    expected = header_end + 8 * int(np.prod(dims, dtype=np.int64)) if rank else header_end + 8
    if rank == 0:
        dims = ()
        expected = header_end + 8
    if len(blob) != expected:
        raise FormatError(f"{path}: payload size mismatch at byte {min(len(blob), expected)}")
    data = np.frombuffer(blob, dtype="<f8", offset=header_end)
    return data.reshape(dims).astype(np.float64)


def write_checkpoint(directory: str | Path, tensors: dict[str, np.ndarray],
                     meta: dict[str, str] | None = None) -> None:
    """Write tensors plus a manifest; meta entries become '# key=value' lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"# {key}={value}")
    for index, (path_key, arr) in enumerate(sorted(tensors.items())):
        fname = f"t{index:04d}.psv"
        write_tensor(directory / fname, arr)
        lines.append(f"{path_key} = {fname}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_checkpoint(directory: str | Path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing manifest.txt")
    tensors: dict[str, np.ndarray] = {}
    meta: dict[str, str] = {}
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                key, _, value = body.partition("=")
                meta[key.strip()] = value.strip()
            continue
        if "=" not in line:
            raise FormatError(f"{manifest}:{lineno}: expected 'key = file' entry")
        key, _, fname = line.partition("=")
        tensors[key.strip()] = read_tensor(directory / fname.strip())
    return tensors, meta
