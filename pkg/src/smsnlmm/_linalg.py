"""Small dense linear-algebra helpers used across modules."""

from __future__ import annotations

import numpy as np

from .exceptions import SingularDispersion

EIG_RTOL = 1e-12


def sym_sqrt(M, inverse=False, rtol=EIG_RTOL):
    """Symmetric square root (or inverse square root) of an SPD matrix.

    Works on a single matrix or a stack ``(..., k, k)``. Eigenvalues below
    ``rtol * max eigenvalue`` raise :class:`SingularDispersion`.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 0:
        return M.copy()
    M = 0.5 * (M + np.swapaxes(M, -1, -2))
    w, V = np.linalg.eigh(M)
    top = w.max(axis=-1, keepdims=True)
    if np.any(top <= 0) or np.any(w <= rtol * top):
        raise SingularDispersion("matrix is not positive definite")
    p = -0.5 if inverse else 0.5
    return (V * w[..., None, :] ** p) @ np.swapaxes(V, -1, -2)


def chol_logdet_inv(M):
    """Return ``(log|M|, M^{-1})`` from a Cholesky factorization.

    Accepts stacks. Raises :class:`SingularDispersion` if any factorization fails.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 0:
        return np.zeros(M.shape[:-2]), M.copy()
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise SingularDispersion("Cholesky factorization failed") from exc
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    eye = np.broadcast_to(np.eye(M.shape[-1]), M.shape)
    Linv = np.linalg.solve(L, eye)
    return logdet, np.swapaxes(Linv, -1, -2) @ Linv


def vech_index(q):
    """Row-major upper-triangle index pairs ``(i, j)`` with ``i <= j``."""
    return [(i, j) for i in range(q) for j in range(i, q)]


def vech(F):
    """Distinct elements of a symmetric matrix, row-major upper triangle."""
    F = np.asarray(F, dtype=float)
    return np.array([F[i, j] for i, j in vech_index(F.shape[0])])


def unvech(alpha, q):
    """Inverse of :func:`vech`."""
    F = np.zeros((q, q))
    for k, (i, j) in enumerate(vech_index(q)):
        F[i, j] = F[j, i] = alpha[k]
    return F


def vech_basis(q):
    """Symmetric 0/1 indicator matrices, one per element of :func:`vech`."""
    out = []
    for i, j in vech_index(q):
        E = np.zeros((q, q))
        E[i, j] = E[j, i] = 1.0
        out.append(E)
    return out
