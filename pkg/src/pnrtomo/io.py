"""File formats: binary trace files, deterministic array archives, CSV tables.

Trace file layout (little-endian)::

    magic          8 bytes  b"PNRTRACE"
    version        u16      1
    trial_count    u32
    sample_count   u32
    sample_format  u16      0 = int16, 1 = float64
    probe_count    u32
    probe table    probe_count x (alpha_sq f64, first_trial u32, stop_trial u32)
    payload        trial_count x sample_count samples, row-major
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PNRTRACE"
VERSION = 1
_HEADER = struct.Struct("<8sHIIHI")
_PROBE = struct.Struct("<dII")
FORMATS = {"int16": (0, np.dtype("<i2")), "float64": (1, np.dtype("<f8"))}
_CODES = {code: (name, dt) for name, (code, dt) in FORMATS.items()}


class TraceFileError(ValueError):
    pass


@dataclass
class TraceFile:
    data: np.ndarray  # (trials, samples), as stored
    alpha_sq: np.ndarray
    ranges: np.ndarray  # (probes, 2) trial index ranges [start, stop)
    sample_format: str

    @property
    def labels(self) -> np.ndarray:
        lab = np.empty(self.data.shape[0], dtype=np.int64)
        for k, (a, b) in enumerate(self.ranges):
            lab[a:b] = k
        return lab


def trace_file_size(trials: int, samples: int, probes: int, sample_format: str = "float64") -> int:
    return _HEADER.size + probes * _PROBE.size + trials * samples * FORMATS[sample_format][1].itemsize


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write via a temporary file in the target directory, then rename, so a
    failure never leaves a partial file behind."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_traces(data, alpha_sq, labels, sample_format="float64") -> bytes:
    data = np.asarray(data)
    labels = np.asarray(labels)
    alpha_sq = np.asarray(alpha_sq, dtype=float)
    if sample_format not in FORMATS:
        raise TraceFileError(f"unknown sample format {sample_format!r}")
    code, dt = FORMATS[sample_format]
    if np.any(np.diff(labels) < 0):
        raise TraceFileError("traces must be grouped by probe index")
    if sample_format == "int16":
        payload = np.clip(np.rint(data), -32768, 32767).astype(dt)
    else:
        payload = data.astype(dt)
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, data.shape[0], data.shape[1], code, alpha_sq.size))
    for k, a in enumerate(alpha_sq):
        idx = np.flatnonzero(labels == k)
        start, stop = (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)
        buf.write(_PROBE.pack(float(a), start, stop))
    buf.write(np.ascontiguousarray(payload).tobytes())
    return buf.getvalue()


def write_traces(path, data, alpha_sq, labels, sample_format="float64") -> None:
    atomic_write_bytes(path, encode_traces(data, alpha_sq, labels, sample_format))


def read_traces(path) -> TraceFile:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TraceFileError(f"{path}: truncated header")
    magic, version, trials, samples, code, probes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise TraceFileError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise TraceFileError(f"{path}: unsupported version {version}")
    if code not in _CODES:
        raise TraceFileError(f"{path}: unknown sample format code {code}")
    name, dt = _CODES[code]
    offset = _HEADER.size
    table = [_PROBE.unpack_from(raw, offset + i * _PROBE.size) for i in range(probes)]
    offset += probes * _PROBE.size
    expected = trials * samples * dt.itemsize
    if len(raw) - offset != expected:
        raise TraceFileError(f"{path}: payload is {len(raw) - offset} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dt, count=trials * samples, offset=offset).reshape(trials, samples)
    return TraceFile(
        data,
        np.array([t[0] for t in table]),
        np.array([[t[1], t[2]] for t in table], dtype=np.int64).reshape(-1, 2),
        name,
    )


# -- array archives ---------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_arrays(path, **arrays) -> None:
    """``.npz``-compatible archive with fixed timestamps, so identical arrays
    give byte-identical files."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH), member.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def load_arrays(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return {k: z[k] for k in z.files}


# -- text formats -----------------------------------------------------------------


def fmt(x) -> str:
    """Round-trip float formatting (17 significant digits)."""
    return format(float(x), ".17g")


def write_csv(path, header, rows) -> None:
    """CSV with a one-line header; floats written with 17 significant digits."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    header = lines[0].split(",")
    return header, np.array([[float(v) for v in ln.split(",")] for ln in lines[1:]])


def write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
