"""Structure coordinates of a game and per-step optimisation diagnostics."""

from __future__ import annotations

from dataclasses import astuple, dataclass

import numpy as np

from .game import PayoffGame, exploitability_batch
from .linalg import min_eigenvalue

EPS = 1e-8
DIAGNOSTIC_NAMES = ("z_pot", "z_harm", "z_zs", "z_sym", "a_mono")
OPT_DIAGNOSTIC_NAMES = ("gap", "grad_norm", "rot", "align", "step_norm", "sym_loc", "skew_loc", "phase")


@dataclass(frozen=True)
class StructureDiagnostics:
    z_pot: float
    z_harm: float
    z_zs: float
    z_sym: float
    a_mono: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


@dataclass(frozen=True)
class OptDiagnostics:
    gap: float
    grad_norm: float
    rot: float
    align: float
    step_norm: float
    sym_loc: float
    skew_loc: float
    phase: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def _frob(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x * x, axis=(-2, -1)))


def _mixed_differences(a: np.ndarray) -> np.ndarray:
    # d[k, i, i', j, j'] = a(i,j) - a(i',j) - a(i,j') + a(i',j')
    ai_j = a[:, :, None, :, None]
    aip_j = a[:, None, :, :, None]
    ai_jp = a[:, :, None, None, :]
    aip_jp = a[:, None, :, None, :]
    return ai_j - aip_j - ai_jp + aip_jp


def game_jacobian(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stacked ``[[0, -A], [-B^T, 0]]`` for ``a, b: (K, n, m)``."""
    k, n, m = a.shape
    j = np.zeros((k, n + m, n + m))
    j[:, :n, n:] = -a
    j[:, n:, :n] = -np.swapaxes(b, 1, 2)
    return j


def structure_diagnostics_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return a ``(K, 5)`` array of (z_pot, z_harm, z_zs, z_sym, a_mono)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("payoffs must be finite")
    k, n, m = a.shape
    da = _mixed_differences(a)
    db = _mixed_differences(b)
    num = np.sqrt(np.sum((da - db) ** 2, axis=(1, 2, 3, 4)))
    den = np.sqrt(np.sum(da**2 + db**2, axis=(1, 2, 3, 4))) + EPS
    z_pot = np.maximum(0.0, 1.0 - num / den)

    scale = _frob(a) + _frob(b) + EPS
    z_zs = np.maximum(0.0, 1.0 - _frob(a + b) / scale)
    if n == m:
        zero_sum = 0.5 * (a - b)
        harm = 0.5 * (zero_sum - np.swapaxes(zero_sum, 1, 2))
        z_harm = np.minimum(1.0, 2.0 * _frob(harm) / scale)
        z_sym = np.maximum(0.0, 1.0 - _frob(a - np.swapaxes(b, 1, 2)) / scale)
    else:
        # Skew parts and transposed comparisons need square games.
        z_harm = np.zeros(k)
        z_sym = np.zeros(k)

    jac = game_jacobian(a, b)
    sym = 0.5 * (jac + np.swapaxes(jac, 1, 2))
    a_mono = min_eigenvalue(sym)
    return np.stack([z_pot, z_harm, z_zs, z_sym, a_mono], axis=1)


def structure_diagnostics(g: PayoffGame) -> StructureDiagnostics:
    return StructureDiagnostics(*map(float, structure_diagnostics_batch(g.a, g.b)[0]))


def jacobian_norms(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(rot, sym_loc, skew_loc) per stacked game; constant for bilinear games."""
    jac = game_jacobian(a, b)
    sym = _frob(0.5 * (jac + np.swapaxes(jac, 1, 2)))
    skew = _frob(0.5 * (jac - np.swapaxes(jac, 1, 2)))
    rot = skew / (_frob(jac) + EPS)
    return np.stack([rot, sym, skew], axis=1)


def opt_diagnostics_batch(a, b, x, y, prev_update, cur_update, t: int, horizon: int, jac_norms=None) -> np.ndarray:
    """Stacked optimisation diagnostics, shape ``(K, 8)`` in ``OPT_DIAGNOSTIC_NAMES`` order."""
    gap = exploitability_batch(a, b, x, y)
    gx = np.einsum("knm,km->kn", a, y)
    gy = np.einsum("knm,kn->km", b, x)
    grad_norm = np.sqrt(np.sum(gx * gx, axis=1) + np.sum(gy * gy, axis=1))
    if jac_norms is None:
        jac_norms = jacobian_norms(a, b)
    pn = np.linalg.norm(prev_update, axis=1)
    cn = np.linalg.norm(cur_update, axis=1)
    denom = pn * cn
    ok = denom > 0
    align = np.where(ok, np.sum(prev_update * cur_update, axis=1) / np.where(ok, denom, 1.0), 0.0)
    align = np.clip(align, -1.0, 1.0)
    phase = np.full(len(gap), t / horizon)
    return np.stack(
        [gap, grad_norm, jac_norms[:, 0], align, cn, jac_norms[:, 1], jac_norms[:, 2], phase], axis=1
    )


def opt_diagnostics(g: PayoffGame, s, prev_update, cur_update, t: int, T: int) -> OptDiagnostics:
    if not 1 <= t <= T:
        raise ValueError(f"t must lie in [1, T], got t={t}, T={T}")
    prev_update = np.asarray(prev_update, dtype=float)
    cur_update = np.asarray(cur_update, dtype=float)
    n, m = g.shape
    if prev_update.shape != (n + m,) or cur_update.shape != (n + m,):
        raise ValueError("updates must have length n + m")
    row = opt_diagnostics_batch(
        g.a[None], g.b[None], np.asarray(s.x, float)[None], np.asarray(s.y, float)[None],
        prev_update[None], cur_update[None], t, T,
    )[0]
    return OptDiagnostics(*map(float, row))
