"""Persistence formats used by the command-line tools.

ESLT binary tensors: magic "ESLT", version byte 1, dtype byte (1 = IEEE-754
float32 little endian), rank byte, one reserved zero byte, rank little-endian
u32 dimensions, then the row-major payload.  Rotation sets travel as CSV with
canonical-sign quaternions at 17 significant digits, so write/read round-trips
are bitwise exact.
"""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from .esl import LiftedWeights

_MAGIC = b"ESLT"
_DTYPE_F32 = 1

ROTATIONS_HEADER = ["index", "qw", "qx", "qy", "qz"]
WEIGHTS_HEADER = ["image_index", "sample_index", "weight"]
METRICS_HEADER = ["iter", "mean_err_deg", "std_err_deg", "mean_l0",
                  "mean_w2_deg", "mean_gamma", "objective"]


def write_eslt(path, array) -> None:
    """Write a tensor as ESLT (values stored as little-endian float32)."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError("rank must be between 1 and 255")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<BBBB", 1, _DTYPE_F32, arr.ndim, 0))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_eslt(path) -> np.ndarray:
    """Read an ESLT tensor; returns a float32 array."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not an ESLT file (magic {magic!r})")
        version, dtype, rank, reserved = struct.unpack("<BBBB", fh.read(4))
        if version != 1 or dtype != _DTYPE_F32 or reserved != 0:
            raise ValueError(f"{path}: unsupported ESLT header "
                             f"(version {version}, dtype {dtype})")
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def write_rotations_csv(path, quats: np.ndarray) -> None:
    from .manifold import quat_canonical

    q = quat_canonical(np.asarray(quats, dtype=np.float64).reshape(-1, 4))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ROTATIONS_HEADER)
        for i, row in enumerate(q):
            writer.writerow([i] + [f"{x:.17g}" for x in row])


def read_rotations_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ROTATIONS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [[float(x) for x in row[1:5]] for row in reader if row]
    q = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise ValueError(f"{path}: non-unit quaternion (max deviation "
                         f"{np.abs(norms - 1.0).max():.2e})")
    return q


def write_weights_csv(path, weights: list[LiftedWeights]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WEIGHTS_HEADER)
        for i, w in enumerate(weights):
            for idx, val in zip(w.indices, w.values):
                writer.writerow([i, int(idx), f"{val:.17g}"])


def read_weights_csv(path, n_total: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Sparse (indices, values) pairs per image, in image order."""
    per_image: dict[int, list[tuple[int, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != WEIGHTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        for row in reader:
            if not row:
                continue
            per_image.setdefault(int(row[0]), []).append((int(row[1]), float(row[2])))
    out = []
    for i in sorted(per_image):
        pairs = per_image[i]
        idx = np.array([p[0] for p in pairs], dtype=np.int64)
        val = np.array([p[1] for p in pairs])
        out.append((idx, val))
    return out


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in METRICS_HEADER})


def append_metrics_row(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_HEADER)
        if new:
            writer.writeheader()
        writer.writerow({k: _fmt(row.get(k)) for k in METRICS_HEADER})


def _fmt(x):
    if x is None:
        return "nan"
    if isinstance(x, float):
        return f"{x:.17g}"
    return x


def write_params_txt(path, params: dict) -> None:
    with open(path, "w") as fh:
        for k, v in params.items():
            fh.write(f"{k}={v}\n")


def read_config_file(path) -> dict[str, str]:
    """key=value lines; '#' comments and blank lines ignored."""
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}: malformed line {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
