"""Cyclic Jacobi eigensolver for stacks of small symmetric matrices."""

from __future__ import annotations

import numpy as np


def jacobi_eigh(s: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decompose symmetric ``s`` of shape ``(d, d)`` or ``(K, d, d)``.

    Every matrix in the stack goes through the same cyclic (p, q) rotation
    order, so the stack is processed in lockstep. Sweeps stop once every
    off-diagonal Frobenius norm drops below ``tol`` (relative to the matrix
    norm when that exceeds 1).

    Returns ``(eigenvalues, eigenvectors)`` with eigenvalues ascending and
    eigenvectors in the columns.
    """
    s = np.asarray(s, dtype=float)
    single = s.ndim == 2
    a = np.array(s[None] if single else s, dtype=float)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got {a.shape}")
    k, d, _ = a.shape
    a = 0.5 * (a + np.swapaxes(a, 1, 2))
    v = np.broadcast_to(np.eye(d), (k, d, d)).copy()
    scale = np.maximum(np.sqrt(np.sum(a * a, axis=(1, 2))), 1.0)
    offmask = ~np.eye(d, dtype=bool)

    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(a[:, offmask] ** 2, axis=1))
        if np.all(off < tol * scale):
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[:, p, q]
                active = np.abs(apq) > 1e-300
                if not active.any():
                    continue
                safe = np.where(active, apq, 1.0)
                theta = (a[:, q, q] - a[:, p, p]) / (2.0 * safe)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c
                c2, s2 = c[:, None], sn[:, None]

                cp, cq = a[:, :, p].copy(), a[:, :, q].copy()
                a[:, :, p] = c2 * cp - s2 * cq
                a[:, :, q] = s2 * cp + c2 * cq
                rp, rq = a[:, p, :].copy(), a[:, q, :].copy()
                a[:, p, :] = c2 * rp - s2 * rq
                a[:, q, :] = s2 * rp + c2 * rq
                vp, vq = v[:, :, p].copy(), v[:, :, q].copy()
                v[:, :, p] = c2 * vp - s2 * vq
                v[:, :, q] = s2 * vp + c2 * vq

    w = np.diagonal(a, axis1=1, axis2=2).copy()
    order = np.argsort(w, axis=1, kind="stable")
    w = np.take_along_axis(w, order, axis=1)
    v = np.take_along_axis(v, order[:, None, :], axis=2)
    if single:
        return w[0], v[0]
    return w, v


def min_eigenvalue(s: np.ndarray) -> np.ndarray:
    return jacobi_eigh(s)[0][..., 0]
