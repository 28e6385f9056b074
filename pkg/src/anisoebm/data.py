"""Synthetic dataset generation, dataset file IO, and PGM grid export."""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError
from .rng import generator

DATASET_MAGIC = b"ANIDS1"


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file and rename, so failures never leave partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-aniso-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass
class Dataset:
    """n x dim sample matrix plus generator provenance."""

    rows: np.ndarray
    name: str = ""
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            rows = rows.reshape(len(rows), -1) if rows.size else rows.reshape(0, 0)
        self.rows = rows

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]


def rings_generator(n: int, radii=(0.5, 1.0, 1.5), width: float = 0.05,
                    seed: int = 0) -> Dataset:
    """2-D concentric rings: uniform ring choice, uniform angle, radius
    drawn from N(ring radius, width)."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    radii = tuple(float(r) for r in radii)
    if any(r <= 0 for r in radii):
        raise ConfigError("radii must be positive")
    if width < 0:
        raise ConfigError("width must be >= 0")
    rng = generator(seed, "data/rings")
    which = rng.integers(0, len(radii), size=n)
    phi = rng.uniform(0.0, 2 * math.pi, size=n)
    r = np.asarray(radii)[which] + width * rng.standard_normal(n)
    rows = np.column_stack([r * np.cos(phi), r * np.sin(phi)])
    return Dataset(rows, name="rings",
                   params={"radii": radii, "width": width}, seed=seed)


def gmm_sampler(n: int, means, sigma: float, weights, seed: int = 0) -> Dataset:
    """Isotropic Gaussian mixture samples."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    weights = np.asarray(weights, dtype=np.float64).ravel()
    if means.shape[0] != weights.size:
        raise ConfigError("one weight per component required")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise ConfigError("weights must form a simplex (sum to 1)")
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    rng = generator(seed, "data/gmm")
    comp = rng.choice(weights.size, size=n, p=weights)
    rows = means[comp] + sigma * rng.standard_normal((n, means.shape[1]))
    return Dataset(rows, name="gmm",
                   params={"sigma": sigma, "components": means.shape[0]},
                   seed=seed)


# ---------------------------------------------------------------------------
# File formats


def write_dataset(ds: Dataset, path):
    """CSV when the path ends in .csv, binary otherwise."""
    path = os.fspath(path)
    if path.endswith(".csv"):
        header = ",".join(f"x{i}" for i in range(ds.dim))
        lines = [header]
        for row in ds.rows:
            lines.append(",".join("%.17g" % v for v in row))
        atomic_write_text(path, "\n".join(lines) + "\n")
    else:
        buf = [DATASET_MAGIC, struct.pack("<II", ds.n, ds.dim),
               np.ascontiguousarray(ds.rows, dtype="<f8").tobytes()]
        atomic_write_bytes(path, b"".join(buf))


def read_dataset(path) -> Dataset:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:6] == DATASET_MAGIC:
        return _read_binary(blob)
    return _read_csv(blob)


def _read_binary(blob: bytes) -> Dataset:
    if len(blob) < 14:
        raise ParseError("truncated dataset header", offset=len(blob))
    n, dim = struct.unpack_from("<II", blob, 6)
    expected = n * dim * 8
    payload = blob[14:]
    if len(payload) < expected:
        raise ParseError(
            f"truncated dataset payload: expected {expected} bytes, got {len(payload)}",
            offset=14 + len(payload))
    rows = np.frombuffer(payload[:expected], dtype="<f8").reshape(n, dim).copy()
    if n and not np.isfinite(rows).all():
        bad = np.argwhere(~np.isfinite(rows))[0]
        raise ParseError(f"non-finite value at row {bad[0]}, column {bad[1]}",
                         offset=14 + int(bad[0] * dim + bad[1]) * 8)
    return Dataset(rows)


def _read_csv(blob: bytes) -> Dataset:
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError("dataset is neither ANIDS1 binary nor utf-8 CSV",
                         offset=exc.start)
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty file", offset=0)
    header = lines[0].strip()
    cols = header.split(",") if header else []
    if not cols or any(c.strip() != f"x{i}" for i, c in enumerate(cols)):
        raise ParseError(f"malformed header {header!r}, expected x0,x1,...",
                         offset=0)
    dim = len(cols)
    rows = np.zeros((0, dim))
    values = []
    for r, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != dim:
            raise ParseError(f"row {r} has {len(cells)} cells, expected {dim}")
        parsed = []
        for c, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"row {r}, column {c}: not a number: {cell!r}")
            if not math.isfinite(v):
                raise ParseError(f"row {r}, column {c}: non-finite value {cell!r}")
            parsed.append(v)
        values.append(parsed)
    if values:
        rows = np.asarray(values, dtype=np.float64)
    else:
        rows = np.zeros((0, dim))
    return Dataset(rows)


def write_sample_grid(samples, bounds, resolution: int, path):
    """Binary PGM (P5) heat map of the 2-D sample histogram.

    ``bounds`` is ((xlo, xhi), (ylo, yhi)). Rows run top to bottom in y,
    counts map linearly onto 0..255 with the fullest bin saturated, so the
    bytes are a pure function of the input.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise ConfigError("sample grid export requires 2-D samples")
    if resolution < 1:
        raise ConfigError("resolution must be >= 1")
    (xlo, xhi), (ylo, yhi) = bounds
    hist, _, _ = np.histogram2d(
        samples[:, 0], samples[:, 1], bins=resolution,
        range=[[xlo, xhi], [ylo, yhi]])
    # hist[i, j]: x-bin i, y-bin j. Image rows top-down in y, columns in x.
    img = hist.T[::-1, :]
    peak = img.max()
    if peak > 0:
        pixels = np.floor(img * (255.0 / peak)).astype(np.uint8)
    else:
        pixels = np.zeros_like(img, dtype=np.uint8)
    header = f"P5\n{resolution} {resolution}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())
