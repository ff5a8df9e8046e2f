"""Dense linear algebra, deterministic random streams and gradient checks."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import _kernels
from .errors import InvalidInputError

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 100


class SvdResult(NamedTuple):
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray


def _complete_orthonormal(U, keep):
    """Replace columns of ``U`` not flagged in ``keep`` with an orthonormal completion."""
    m, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    candidates = iter(range(m))
    for j in range(k):
        if keep[j]:
            continue
        while True:
            e = np.zeros(m)
            e[next(candidates)] = 1.0
            # two passes of Gram-Schmidt for numerical orthogonality
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                break
        basis.append(e)
        out[:, j] = e
    return out


def svd(m) -> SvdResult:
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``U`` (m x k), ``S`` (k,) sorted non-increasing and ``V`` (n x k)
    with ``k = min(m, n)`` so that ``U @ diag(S) @ V.T`` reconstructs the input.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise InvalidInputError(f"svd expects a non-empty matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("svd input contains non-finite entries")

    transposed = a.shape[0] < a.shape[1]
    G = np.ascontiguousarray(a.T if transposed else a)
    rows, cols = G.shape
    V = np.eye(cols)
    _kernels.jacobi_sweeps(G, V, SVD_TOL, SVD_MAX_SWEEPS)

    S = np.sqrt(np.einsum("ij,ij->j", G, G))
    order = np.argsort(-S, kind="stable")
    S = S[order]
    G = G[:, order]
    V = V[:, order]

    smax = S[0] if S.size else 0.0
    keep = S > max(rows, cols) * np.finfo(float).eps * smax
    if smax == 0.0:
        keep[:] = False
    U = np.zeros_like(G)
    U[:, keep] = G[:, keep] / S[keep]
    if not keep.all():
        U = _complete_orthonormal(U, keep)

    if transposed:
        U, V = V, U
    return SvdResult(U, S, V)


# --------------------------------------------------------------------------
# Random streams
# --------------------------------------------------------------------------


def _encode_label(label) -> bytes:
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("boolean stream labels are ambiguous")
    if isinstance(label, (int, np.integer)):
        return b"i" + struct.pack("<q", int(label))
    if isinstance(label, str):
        raw = label.encode("utf-8")
        return b"s" + struct.pack("<I", len(raw)) + raw
    raise TypeError(f"stream labels must be int or str, got {type(label).__name__}")


@dataclass(frozen=True)
class RngStream:
    """A named position in a tree of independent random streams.

    Draws come from numpy's counter-based Philox generator keyed by a hash
    of ``(seed, path)``; equal keys give equal draws regardless of which
    process or thread asks.
    """

    seed: int
    path: tuple = ()

    def derive(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(labels))

    def key(self) -> int:
        h = hashlib.blake2b(digest_size=16, person=b"lorafl-rng")
        h.update(struct.pack("<q", int(self.seed)))
        h.update(struct.pack("<I", len(self.path)))
        for label in self.path:
            h.update(_encode_label(label))
        return int.from_bytes(h.digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))


def derive_stream(root: RngStream, *labels) -> RngStream:
    return root.derive(*labels)


# --------------------------------------------------------------------------
# Gradient oracle
# --------------------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise InvalidInputError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)
