"""Orthonormal DCT-II basis and the motion <-> frequency transforms."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation, ParameterError


@dataclass(frozen=True)
class DctBasis:
    M: int
    T: int
    matrix: np.ndarray  # (M, T), rows are basis vectors


def build_dct_basis(M: int, T_len: int) -> DctBasis:
    if not (1 <= M <= T_len):
        raise ParameterError(f"DCT basis needs 1 <= M <= T, got M={M}, T={T_len}")
    m = np.arange(M)[:, None]
    t = np.arange(T_len)[None, :]
    mat = np.sqrt(2.0 / T_len) * np.cos(np.pi * (2 * t + 1) * m / (2 * T_len))
    mat[0] *= 1.0 / np.sqrt(2.0)
    return DctBasis(M, T_len, mat)


def pad_history(X: np.ndarray, T_p: int) -> np.ndarray:
    """Append ``T_p`` copies of the last pose; works on (..., T_h, V, 3)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 3 or X.shape[-3] == 0:
        raise ParameterError("pad_history needs at least one history frame")
    if T_p < 0:
        raise ParameterError(f"T_p must be >= 0, got {T_p}")
    last = X[..., -1:, :, :]
    reps = np.repeat(last, T_p, axis=-3)
    return np.concatenate([X, reps], axis=-3)


def to_frequency(basis: DctBasis, padded):
    """Project (..., T, V, 3) onto the basis -> (..., M, V, 3).

    Accepts numpy arrays or Tensors; Tensors stay on the tape.
    """
    if padded.shape[-3] != basis.T:
        raise ContractViolation(f"to_frequency: sequence length {padded.shape[-3]} vs basis T={basis.T}")
    if isinstance(padded, T.Tensor):
        shp = padded.shape
        flat = T.reshape(padded, shp[:-2] + (shp[-2] * shp[-1],))
        out = T.matmul(basis.matrix, flat)
        return T.reshape(out, shp[:-3] + (basis.M,) + shp[-2:])
    return np.einsum("mt,...tvc->...mvc", basis.matrix, np.asarray(padded, dtype=np.float64))


def to_time(basis: DctBasis, coeffs, T_h: int, T_p: int):
    """Invert (..., M, V, 3) coefficients and split at frame ``T_h``.

    Returns ``(recovered_history, future)``.
    """
    if T_h < 0 or T_p < 0 or T_h + T_p != basis.T:
        raise ParameterError(f"split T_h={T_h}, T_p={T_p} does not match basis T={basis.T}")
    if coeffs.shape[-3] != basis.M:
        raise ContractViolation(f"to_time: {coeffs.shape[-3]} coefficients vs basis M={basis.M}")
    inv = basis.matrix.T  # (T, M)
    if isinstance(coeffs, T.Tensor):
        shp = coeffs.shape
        flat = T.reshape(coeffs, shp[:-2] + (shp[-2] * shp[-1],))
        hist = T.reshape(T.matmul(inv[:T_h], flat), shp[:-3] + (T_h,) + shp[-2:])
        fut = T.reshape(T.matmul(inv[T_h:], flat), shp[:-3] + (T_p,) + shp[-2:])
        return hist, fut
    full = np.einsum("tm,...mvc->...tvc", inv, np.asarray(coeffs, dtype=np.float64))
    return full[..., :T_h, :, :], full[..., T_h:, :, :]
