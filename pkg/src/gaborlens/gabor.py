"""Real Gabor dictionaries on a dyadic (scale, shift, frequency) grid.

For a scale exponent ``j`` and signal length ``L = 2**N`` the atoms are

    d[n] = gamma / sqrt(beta) * g((n - tau) / beta) * cos(omega * (n - tau))
    g(u) = 2**(1/4) * exp(-pi * u**2)

with ``beta = 2**j``, ``tau = 2**(j-1) * p`` and ``omega = pi * c / 2**(j+1)``
for ``p < 2**(N-j+1)`` and ``c < 2**(j+1)``; ``gamma`` makes each column
unit-norm. Columns are stored frequency-major: ``m = c * n_shifts + p``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

# envelope is dropped where exp(-pi u^2) < 1e-12
ENVELOPE_FLOOR = 1e-12
DEGENERATE_NORM = 1e-12
DICT_MAGIC = b"GLDICT01"


@dataclass(frozen=True)
class AtomIndex:
    j: int
    p: int
    c: int
    theta: float = 0.0  # phase is fixed at zero everywhere

    @property
    def beta(self) -> float:
        return 2.0 ** self.j

    @property
    def tau(self) -> float:
        return 2.0 ** (self.j - 1) * self.p

    @property
    def omega(self) -> float:
        return np.pi * self.c / 2.0 ** (self.j + 1)

    def column(self, N: int) -> int:
        return self.c * 2 ** (N - self.j + 1) + self.p


def _check_range(j: int, N: int) -> None:
    if not (1 <= j <= N - 1):
        raise ValueError(f"scale exponent j={j} outside 1..{N - 1} for N={N}")


def _gauss(u):
    return 2.0 ** 0.25 * np.exp(-np.pi * u * u)


def atom(idx: AtomIndex, N: int) -> np.ndarray:
    """Full-support unit-norm atom (zero vector if numerically degenerate)."""
    _check_range(idx.j, N)
    if not (0 <= idx.p < 2 ** (N - idx.j + 1)) or not (0 <= idx.c < 2 ** (idx.j + 1)):
        raise ValueError(f"atom index {idx} outside the grid for N={N}")
    n = np.arange(2 ** N, dtype=np.float64)
    k = n - idx.tau
    raw = _gauss(k / idx.beta) / np.sqrt(idx.beta) * np.cos(idx.omega * k + idx.theta)
    nrm = np.linalg.norm(raw)
    if nrm < DEGENERATE_NORM:
        return np.zeros_like(raw)
    return raw / nrm


class Dictionary:
    """Explicit ``L x M`` dictionary; base class for structured ones.

    Provides the dense matrix, products with it and its transpose, and a
    cached eigendecomposition of the row Gram matrix ``D @ D.T``.
    """

    def __init__(self, matrix=None):
        if matrix is not None:
            m = np.array(matrix, dtype=np.float64)
            if m.ndim != 2:
                raise ValueError("dictionary matrix must be 2-D")
            self._dense = m
            self.L, self.M = m.shape
        self._eigen = None
        self.cache = {}

    def dense(self) -> np.ndarray:
        return self._dense

    @property
    def materialized(self) -> bool:
        return getattr(self, "_dense", None) is not None

    def apply(self, a):
        a = np.asarray(a, dtype=np.float64)
        if a.shape[0] != self.M:
            raise ValueError(f"coefficient length {a.shape[0]} != M={self.M}")
        return self.dense() @ a

    def apply_adjoint(self, r):
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.L:
            raise ValueError(f"signal length {r.shape[0]} != L={self.L}")
        return self.dense().T @ r

    def rowspace_eigen(self):
        """``(eigenvalues, eigenvectors)`` of ``D @ D.T``, ascending, cached."""
        if self._eigen is None:
            D = self.dense()
            w, Q = np.linalg.eigh(D @ D.T)
            w.flags.writeable = False
            Q.flags.writeable = False
            self._eigen = (w, Q)
        return self._eigen


class GaborDictionary(Dictionary):
    """The ``j``-th Gabor dictionary for signals of length ``2**N``.

    Products are computed from a single shift-invariant template restricted
    to the envelope support unless ``materialize`` is set, in which case the
    full-support dense matrix is built once and used instead.
    """

    def __init__(self, j: int, N: int, materialize: bool = False):
        _check_range(j, N)
        super().__init__()
        self.j, self.N = int(j), int(N)
        self.L = 2 ** N
        self.n_freqs = 2 ** (j + 1)
        self.n_shifts = 2 ** (N - j + 1)
        self.M = self.n_freqs * self.n_shifts
        self.beta = 2.0 ** j
        self.taus = 2.0 ** (j - 1) * np.arange(self.n_shifts)
        self.omegas = np.pi * np.arange(self.n_freqs) / 2.0 ** (j + 1)
        self._dense = None
        self.materialize = bool(materialize)
        if materialize:
            self._dense = self._build_dense()

    def __repr__(self):
        return f"GaborDictionary(j={self.j}, N={self.N}, M={self.M})"

    def atom_index(self, m: int) -> AtomIndex:
        c, p = divmod(int(m), self.n_shifts)
        return AtomIndex(self.j, p, c)

    # -- dense ---------------------------------------------------------------
    def _build_dense(self) -> np.ndarray:
        n = np.arange(self.L, dtype=np.float64)
        k = n[:, None] - self.taus[None, :]                       # L x P
        env = _gauss(k / self.beta) / np.sqrt(self.beta)
        D = env[:, None, :] * np.cos(self.omegas[None, :, None] * k[:, None, :])
        D = D.reshape(self.L, self.M)
        norms = np.linalg.norm(D, axis=0)
        scale = np.where(norms < DEGENERATE_NORM, 0.0, 1.0 / np.where(norms == 0, 1, norms))
        D *= scale
        return D

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self._build_dense()
        return self._dense

    # -- template (truncated support) --------------------------------------------
    @cached_property
    def _template(self):
        half = int(np.floor(self.beta * np.sqrt(-np.log(ENVELOPE_FLOOR) / np.pi)))
        half = min(half, self.L - 1)
        k = np.arange(-half, half + 1, dtype=np.float64)
        T = (_gauss(k / self.beta) / np.sqrt(self.beta))[:, None] * np.cos(np.outer(k, self.omegas))
        rows = (k[:, None] + self.taus[None, :]).astype(np.int64)          # K x P
        valid = (rows >= 0) & (rows < self.L)
        norm2 = (T * T).T @ valid.astype(np.float64)                        # C x P
        norms = np.sqrt(norm2)
        gamma = np.where(norms < DEGENERATE_NORM, 0.0, 1.0 / np.where(norms == 0, 1, norms))
        return T, rows, valid, gamma

    @property
    def degenerate(self) -> np.ndarray:
        """Boolean mask of columns that are identically zero."""
        return (self._template[3] == 0).ravel()

    @property
    def materialized(self) -> bool:
        return self.materialize

    def apply(self, a):
        if self.materialize:
            return super().apply(a)
        a = np.asarray(a, dtype=np.float64)
        if a.shape[0] != self.M:
            raise ValueError(f"coefficient length {a.shape[0]} != M={self.M}")
        if a.ndim == 2:
            return np.column_stack([self.apply(a[:, b]) for b in range(a.shape[1])])
        T, rows, valid, gamma = self._template
        A = a.reshape(self.n_freqs, self.n_shifts) * gamma
        Y = T @ A                                                            # K x P
        return np.bincount(rows[valid], weights=Y[valid], minlength=self.L)

    def apply_adjoint(self, r):
        if self.materialize:
            return super().apply_adjoint(r)
        r = np.asarray(r, dtype=np.float64)
        if r.shape[0] != self.L:
            raise ValueError(f"signal length {r.shape[0]} != L={self.L}")
        if r.ndim == 2:
            return np.column_stack([self.apply_adjoint(r[:, b]) for b in range(r.shape[1])])
        T, rows, valid, gamma = self._template
        R = np.where(valid, r[np.clip(rows, 0, self.L - 1)], 0.0)
        return ((T.T @ R) * gamma).ravel()

    # -- export ---------------------------------------------------------------
    def export(self, path) -> None:
        """Little-endian float64 row-major matrix after a 16-byte header."""
        with open(Path(path), "wb") as fh:
            fh.write(DICT_MAGIC + struct.pack("<II", self.N, self.j))
            fh.write(np.ascontiguousarray(self.dense(), dtype="<f8").tobytes())


def load_dictionary_matrix(path):
    """Read an exported dictionary; returns ``(N, j, matrix)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != DICT_MAGIC:
        raise ValueError(f"{path}: not a dictionary export")
    N, j = struct.unpack("<II", raw[8:16])
    mat = np.frombuffer(raw[16:], dtype="<f8").reshape(2 ** N, 2 ** (N + 2))
    return N, j, mat.copy()


def build_dictionary(j: int, N: int, materialize: bool = False) -> GaborDictionary:
    return GaborDictionary(j, N, materialize=materialize)


def apply(D: Dictionary, a):
    return D.apply(a)


def apply_adjoint(D: Dictionary, r):
    return D.apply_adjoint(r)


def rowspace_eigen(D: Dictionary):
    return D.rowspace_eigen()
