"""Batched factorizations of symmetric positive definite matrices."""
from __future__ import annotations

import numpy as np

from .core import BlockStructure


def _chol_one(A, tries):
    scale = max(float(np.max(np.abs(np.diag(A)))), 1e-300)
    try:
        return np.linalg.cholesky(A), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-8 * scale
    for _ in range(tries):
        try:
            return np.linalg.cholesky(A + jitter * np.eye(A.shape[-1])), jitter
        except np.linalg.LinAlgError:
            jitter *= 10
    return np.eye(A.shape[-1]), np.nan


def cholesky_jitter(A, tries: int = 3):
    """Cholesky factors of a batch, adding diagonal jitter where needed.

    Failing matrices get ``1e-8 * max(diag)`` added, escalated tenfold up to
    ``tries`` times. Returns the factors and the jitter used per matrix
    (``nan``, with an identity placeholder factor, when every attempt failed).
    """
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    batch = A.shape[:-2]
    try:
        L = np.linalg.cholesky(A)
        if np.all(np.isfinite(L)):
            return L, np.zeros(batch)
    except np.linalg.LinAlgError:
        pass
    flat = A.reshape((-1,) + A.shape[-2:])
    L = np.empty_like(flat)
    jit = np.empty(flat.shape[0])
    for i, a in enumerate(flat):
        if not np.all(np.isfinite(a)):
            L[i], jit[i] = np.eye(a.shape[-1]), np.nan
            continue
        L[i], jit[i] = _chol_one(a, tries)
    return L.reshape(A.shape), jit.reshape(batch)


def chol_solve(L, b):
    y = np.linalg.solve(L, b[..., None])
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)[..., 0]


def chol_inverse(L):
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def chol_logdet(L):
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


class DenseFactor:
    """Cholesky factorization of a batch of dense SPD matrices."""

    def __init__(self, H, tries: int = 3):
        H = np.asarray(H, dtype=float)
        self.L, self.jitter = cholesky_jitter(H, tries)
        p = H.shape[-1]
        jit = np.where(np.isnan(self.jitter), 0.0, self.jitter)
        self._A = np.where(
            np.isnan(self.jitter)[..., None, None], np.eye(p), H + jit[..., None, None] * np.eye(p)
        )

    def solve(self, f):
        # one LU solve of the (jittered) matrix is cheaper than two triangular ones
        return np.linalg.solve(self._A, np.asarray(f, dtype=float)[..., None])[..., 0]

    def logdet(self):
        return chol_logdet(self.L)

    def inverse(self):
        return chol_inverse(self.L)


class ArrowheadFactor:
    """Factorization of a block-arrowhead SPD matrix.

    The matrix has a dense ``global`` block, dense ``global``/group couplings,
    and block-diagonal group blocks (groups do not interact). Each group block
    is factorized separately and the global block through its Schur
    complement, so the cost grows linearly with the number of groups.
    """

    def __init__(self, H, structure: BlockStructure, tries: int = 3):
        H = np.asarray(H, dtype=float)
        H = 0.5 * (H + np.swapaxes(H, -1, -2))
        g, G, s = structure.n_global, structure.n_groups, structure.group_size
        if H.shape[-1] != g + G * s:
            raise ValueError("matrix size does not match the block structure")
        self.g, self.G, self.s = g, G, s
        batch = H.shape[:-2]
        A = H[..., :g, :g]
        Bc = np.stack([H[..., :g, g + i * s : g + (i + 1) * s] for i in range(G)], axis=-3)
        D = np.stack(
            [H[..., g + i * s : g + (i + 1) * s, g + i * s : g + (i + 1) * s] for i in range(G)],
            axis=-3,
        )
        self.LD, jd = cholesky_jitter(D, tries)  # (..., G, s, s)
        # C_i = D_i^-1 B_i^T, shape (..., G, s, g)
        self.C = np.stack(
            [chol_solve_mat(self.LD[..., i, :, :], np.swapaxes(Bc[..., i, :, :], -1, -2)) for i in range(G)],
            axis=-3,
        )
        S = A - np.einsum("...kgs,...ksh->...gh", Bc, self.C)
        self.LS, js = cholesky_jitter(S, tries)
        self.Bc = Bc
        self.jitter = js + np.sum(jd, axis=-1)  # nan if any factorization failed
        self._batch = batch

    def solve(self, f):
        f = np.asarray(f, dtype=float)
        g, G, s = self.g, self.G, self.s
        fg = f[..., :g]
        fi = f[..., g:].reshape(f.shape[:-1] + (G, s))
        t = chol_solve(self.LD, fi)  # (..., G, s)
        rhs = fg - np.einsum("...kgs,...ks->...g", self.Bc, t)
        xg = chol_solve(self.LS, rhs)
        xi = t - np.einsum("...ksg,...g->...ks", self.C, xg)
        return np.concatenate([xg, xi.reshape(xi.shape[:-2] + (G * s,))], axis=-1)

    def logdet(self):
        return chol_logdet(self.LS) + np.sum(chol_logdet(self.LD), axis=-1)

    def inverse(self):
        g, G, s = self.g, self.G, self.s
        Sinv = chol_inverse(self.LS)
        Dinv = chol_inverse(self.LD)
        p = g + G * s
        out = np.zeros(self._batch + (p, p))
        out[..., :g, :g] = Sinv
        CS = self.C @ Sinv[..., None, :, :]  # (..., G, s, g)
        for i in range(G):
            si = slice(g + i * s, g + (i + 1) * s)
            out[..., si, :g] = -CS[..., i, :, :]
            out[..., :g, si] = -np.swapaxes(CS[..., i, :, :], -1, -2)
            for j in range(G):
                sj = slice(g + j * s, g + (j + 1) * s)
                block = CS[..., i, :, :] @ np.swapaxes(self.C[..., j, :, :], -1, -2)
                if i == j:
                    block = block + Dinv[..., i, :, :]
                out[..., si, sj] = block
        return out


def chol_solve_mat(L, B):
    y = np.linalg.solve(L, B)
    return np.linalg.solve(np.swapaxes(L, -1, -2), y)


def factorize(H, structure: BlockStructure | None = None, tries: int = 3):
    if structure is None:
        return DenseFactor(H, tries)
    return ArrowheadFactor(H, structure, tries)
