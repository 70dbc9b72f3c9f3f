"""Weighted-logarithmic time-frequency features from Gabor coefficients.

A coefficient vector is standardized, scaled into [-1, 1] by its largest
magnitude, mapped through ``b = -|v| ln|v|`` and reshaped so that each row
holds the atoms sharing one frequency and each column one translation.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .signal_prep import DegenerateInputError

FEATURE_MAGIC = b"GLFEAT01"
TRANSFORMS = ("log", "linear", "squared")
RANGE_SLACK = 1e-12


@dataclass
class FeatureMatrix:
    """``2**(j+1) x 2**(N-j+1)`` matrix; row ``r`` is frequency ``pi r / 2**(j+1)``."""
    values: np.ndarray
    j: int
    N: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != matrix_shape(self.j, self.N):
            raise ValueError(f"feature matrix shape {self.values.shape} != {matrix_shape(self.j, self.N)}")

    @property
    def shape(self):
        return self.values.shape

    def flatten(self) -> np.ndarray:
        return self.values.ravel().copy()

    def save(self, path) -> None:
        """Little-endian float32 row-major payload after a 24-byte header."""
        rows, cols = self.values.shape
        with open(Path(path), "wb") as fh:
            fh.write(FEATURE_MAGIC + struct.pack("<IIII", self.j, self.N, rows, cols))
            fh.write(np.ascontiguousarray(self.values, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        raw = Path(path).read_bytes()
        if raw[:8] != FEATURE_MAGIC or len(raw) < 24:
            raise ValueError(f"{path}: not a feature matrix file")
        j, N, rows, cols = struct.unpack("<IIII", raw[8:24])
        if len(raw) != 24 + 4 * rows * cols:
            raise ValueError(f"{path}: payload size does not match {rows}x{cols}")
        vals = np.frombuffer(raw[24:], dtype="<f4").reshape(rows, cols).astype(np.float64)
        return cls(vals, j, N)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for row in self.values:
                w.writerow([repr(float(v)) for v in row])


def matrix_shape(j: int, N: int) -> tuple[int, int]:
    if not 1 <= j <= N - 1:
        raise ValueError(f"scale exponent j={j} outside 1..{N - 1}")
    return 2 ** (j + 1), 2 ** (N - j + 1)


def standardize_normalize(a) -> np.ndarray:
    """Zero mean, unit population std, then divide by the largest magnitude.

    The all-zero vector maps to itself; any other constant vector is an error.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty coefficient vector")
    if not np.any(a):
        return np.zeros_like(a)
    sd = a.std()
    if sd == 0 or np.ptp(a) == 0:
        raise DegenerateInputError("cannot standardize a constant coefficient vector")
    v = (a - a.mean()) / sd
    return v / np.abs(v).max()


def weighted_log(v, transform: str = "log") -> np.ndarray:
    """``-|v| ln|v|`` (0 at v = 0); ``linear`` and ``squared`` give ``v`` and ``v**2``."""
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(v) > 1 + RANGE_SLACK):
        raise ValueError("weighted_log expects entries in [-1, 1]")
    if transform == "linear":
        return v.copy()
    if transform == "squared":
        return v * v
    if transform != "log":
        raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")
    u = np.minimum(np.abs(v), 1.0)
    out = np.zeros_like(u)
    nz = u > 0
    out[nz] = -u[nz] * np.log(u[nz])
    return out + 0.0  # no negative zeros at |v| = 1


def reshape_to_matrix(b, j: int, N: int) -> FeatureMatrix:
    b = np.asarray(b, dtype=np.float64)
    rows, cols = matrix_shape(j, N)
    if b.shape != (rows * cols,):
        raise ValueError(f"feature vector length {b.size} != {rows * cols}")
    return FeatureMatrix(b.reshape(rows, cols).copy(), j, N)


def featurize(fit, j: int, N: int, transform: str = "log") -> FeatureMatrix:
    """Compose standardize_normalize, weighted_log and reshape_to_matrix.

    ``fit`` is a fit result (anything with ``coeffs``) or a raw coefficient vector.
    """
    a = getattr(fit, "coeffs", fit)
    a = np.asarray(a, dtype=np.float64)
    if a.size != 2 ** (N + 2):
        raise ValueError(f"coefficient length {a.size} != 2**(N+2) = {2 ** (N + 2)}")
    return reshape_to_matrix(weighted_log(standardize_normalize(a), transform), j, N)
