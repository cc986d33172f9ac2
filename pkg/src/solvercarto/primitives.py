"""Primitive equilibrium-seeking dynamics and the batched rollout engine.

Every primitive is expressed as a pre-projection displacement
``(x_rule - x_t, y_rule - y_t)`` so that any convex mixture of primitives is
again a displacement. The engine advances a stack of ``K`` rollouts in
lockstep: ``theta_{t+1} = proj(theta_t + sum_i w_i d_i + correction)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .game import (
    DIVERGED_AUC,
    MixedStrategyPair,
    PayoffGame,
    RolloutTrace,
    exploitability_batch,
    project_simplex_batch,
    stack_games,
)


class Primitive(enum.IntEnum):
    GDA = 0
    MIRROR = 1
    PROXIMAL = 2
    AVERAGING = 3
    EXTRAGRADIENT = 4
    OPTIMISTIC = 5
    FICTITIOUS_PLAY = 6
    BEST_RESPONSE = 7

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def from_label(cls, label: str) -> "Primitive":
        return cls[label.upper()]


DEFAULT_LIBRARY: tuple[Primitive, ...] = tuple(Primitive)[:7]
DESCENT_FAMILY = frozenset({Primitive.GDA, Primitive.MIRROR, Primitive.PROXIMAL})
ANTI_CYCLING_FAMILY = frozenset(
    {Primitive.EXTRAGRADIENT, Primitive.OPTIMISTIC, Primitive.AVERAGING, Primitive.FICTITIOUS_PLAY}
)


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 60
    eta: float = 0.05
    tau: float = 0.05
    rho: float = 0.5
    gamma: float = 0.1
    entropy_floor: float = 1e-12

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.eta < 0 or self.tau < 0 or self.gamma < 0:
            raise ValueError("eta, tau and gamma must be non-negative")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.entropy_floor <= 0:
            raise ValueError("entropy_floor must be positive")

    def with_(self, **kw) -> "RolloutConfig":
        return replace(self, **kw)


@dataclass
class SolverState:
    """Stacked solver state for ``K`` concurrent rollouts at iteration ``t``."""

    x: np.ndarray
    y: np.ndarray
    prev_gx: np.ndarray
    prev_gy: np.ndarray
    avg_x: np.ndarray
    avg_y: np.ndarray
    t: int = 0
    diverged: np.ndarray = field(default=None)

    @classmethod
    def initial(cls, k: int, n: int, m: int) -> "SolverState":
        ux = np.full((k, n), 1.0 / n)
        uy = np.full((k, m), 1.0 / m)
        return cls(
            x=ux.copy(), y=uy.copy(),
            prev_gx=np.zeros((k, n)), prev_gy=np.zeros((k, m)),
            avg_x=ux.copy(), avg_y=uy.copy(), t=0,
            diverged=np.zeros(k, dtype=bool),
        )

    def copy(self) -> "SolverState":
        return SolverState(
            self.x.copy(), self.y.copy(), self.prev_gx.copy(), self.prev_gy.copy(),
            self.avg_x.copy(), self.avg_y.copy(), self.t, self.diverged.copy(),
        )

    def strategies(self, row: int = 0) -> MixedStrategyPair:
        return MixedStrategyPair(self.x[row].copy(), self.y[row].copy())


def _best_response(payoff: np.ndarray) -> np.ndarray:
    # argmax returns the lowest index among exact ties.
    out = np.zeros_like(payoff)
    out[np.arange(len(payoff)), np.argmax(payoff, axis=1)] = 1.0
    return out


def _mirror_step(p: np.ndarray, g: np.ndarray, cfg: RolloutConfig) -> np.ndarray:
    ent = g - cfg.tau * (np.log(np.maximum(p, cfg.entropy_floor)) + 1.0)
    z = cfg.eta * ent
    w = p * np.exp(z - z.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def gradients(a: np.ndarray, b: np.ndarray, st: SolverState) -> tuple[np.ndarray, np.ndarray]:
    gx = np.einsum("knm,km->kn", a, st.y)
    gy = np.einsum("knm,kn->km", b, st.x)
    return gx, gy


def primitive_displacement(kind: Primitive, a, b, st: SolverState, cfg: RolloutConfig, grads=None):
    """Displacement proposed by ``kind`` at the current stacked state.

    ``grads`` optionally supplies the precomputed ``(A y, B^T x)``.
    """
    x, y, eta = st.x, st.y, cfg.eta
    gx, gy = grads if grads is not None else gradients(a, b, st)
    if kind is Primitive.GDA:
        return eta * gx, eta * gy
    if kind is Primitive.MIRROR:
        return _mirror_step(x, gx, cfg) - x, _mirror_step(y, gy, cfg) - y
    if kind is Primitive.PROXIMAL:
        xt = project_simplex_batch(x + eta * gx)
        yt = project_simplex_batch(y + eta * gy)
        rho = cfg.rho
        return ((1 - rho) * x + rho * xt) - x, ((1 - rho) * y + rho * yt) - y
    if kind is Primitive.AVERAGING:
        return eta * gx + cfg.gamma * (st.avg_x - x), eta * gy + cfg.gamma * (st.avg_y - y)
    if kind is Primitive.EXTRAGRADIENT:
        xh = project_simplex_batch(x + eta * gx)
        yh = project_simplex_batch(y + eta * gy)
        return eta * np.einsum("knm,km->kn", a, yh), eta * np.einsum("knm,kn->km", b, xh)
    if kind is Primitive.OPTIMISTIC:
        return eta * (2 * gx - st.prev_gx), eta * (2 * gy - st.prev_gy)
    if kind is Primitive.FICTITIOUS_PLAY:
        t = st.t
        nx = (t / (t + 1)) * x + (1 / (t + 1)) * _best_response(gx)
        ny = (t / (t + 1)) * y + (1 / (t + 1)) * _best_response(gy)
        return nx - x, ny - y
    if kind is Primitive.BEST_RESPONSE:
        return _best_response(gx) - x, _best_response(gy) - y
    raise ValueError(f"unknown primitive {kind!r}")


def primitive_update(kind: Primitive, g: PayoffGame, st: SolverState, cfg: RolloutConfig):
    """Single-game convenience wrapper: returns ``(dx, dy, next_aux_state)``.

    The auxiliary state advanced assuming the rule's own next iterate is taken.
    """
    a, b = g.a[None], g.b[None]
    grads = gradients(a, b, st)
    dx, dy = primitive_displacement(kind, a, b, st, cfg, grads)
    nxt = st.copy()
    advance_state(nxt, project_simplex_batch(st.x + dx), project_simplex_batch(st.y + dy), grads)
    return dx[0], dy[0], nxt


def advance_state(st: SolverState, x_new, y_new, grads) -> None:
    """Move ``st`` to ``t + 1`` in place: store gradients and update anchors."""
    t = st.t
    st.prev_gx, st.prev_gy = grads
    st.avg_x = (t / (t + 1)) * st.avg_x + (1 / (t + 1)) * x_new
    st.avg_y = (t / (t + 1)) * st.avg_y + (1 / (t + 1)) * y_new
    st.x, st.y = x_new, y_new
    st.t = t + 1


@dataclass
class StepInfo:
    """What a correction hook sees at step ``t`` (before the update)."""

    t: int
    state: SolverState
    grads: tuple
    proposals: list
    prior: tuple


def run_dynamics(a, b, weights, cfg: RolloutConfig, library=DEFAULT_LIBRARY,
                 correction=None, state: SolverState | None = None, steps: int | None = None,
                 record=None):
    """Advance ``K`` mixture rollouts; returns ``(exploitability (K, steps), final_state)``.

    ``weights`` is ``(K, M)`` aligned with ``library``. ``correction`` is an
    optional callable ``StepInfo -> (cx, cy)`` added to the prior displacement.
    ``record`` is an optional callable ``(StepInfo, x_new, y_new)`` for tracing.
    Diverged rows are frozen and record NaN from the divergence onwards.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k, n, m = a.shape
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (k, len(library)):
        raise ValueError(f"weights shape {weights.shape} != {(k, len(library))}")
    st = SolverState.initial(k, n, m) if state is None else state.copy()
    steps = cfg.horizon - st.t if steps is None else steps
    active = [i for i in range(len(library)) if np.any(weights[:, i] != 0.0)]
    needed = range(len(library)) if getattr(correction, "needs_all_proposals", False) else active
    out = np.empty((k, steps))
    for s in range(steps):
        grads = gradients(a, b, st)
        props = [None] * len(library)
        px = np.zeros((k, n))
        py = np.zeros((k, m))
        for i in needed:
            props[i] = primitive_displacement(library[i], a, b, st, cfg, grads)
        for i in active:
            px += weights[:, i:i + 1] * props[i][0]
            py += weights[:, i:i + 1] * props[i][1]
        info = StepInfo(st.t, st, grads, props, (px, py))
        if correction is not None:
            cx, cy = correction(info)
            px, py = px + cx, py + cy
        x_new = project_simplex_batch(st.x + px)
        y_new = project_simplex_batch(st.y + py)
        bad = ~(np.all(np.isfinite(x_new), axis=1) & np.all(np.isfinite(y_new), axis=1))
        if bad.any():
            st.diverged = st.diverged | bad
            x_new[bad], y_new[bad] = st.x[bad], st.y[bad]
        if record is not None:
            record(info, x_new, y_new)
        advance_state(st, x_new, y_new, grads)
        ex = exploitability_batch(a, b, st.x, st.y)
        ex[st.diverged] = np.nan
        out[:, s] = ex
    return out, st


def trace_auc(traces: np.ndarray, diverged: np.ndarray | None = None) -> np.ndarray:
    """Mean exploitability per row, with diverged rows pinned to the worst-case bound."""
    auc = np.nanmean(traces, axis=1) if traces.shape[1] else np.zeros(len(traces))
    bad = np.isnan(traces).any(axis=1)
    if diverged is not None:
        bad |= diverged
    return np.where(bad, DIVERGED_AUC, auc)


def trace_terminal(traces: np.ndarray) -> np.ndarray:
    term = traces[:, -1].copy()
    return np.where(np.isnan(term), DIVERGED_AUC, term)


def one_hot(k: int, index: int, size: int) -> np.ndarray:
    w = np.zeros((k, size))
    w[:, index] = 1.0
    return w


def rollout(solver, g: PayoffGame, cfg: RolloutConfig, library=DEFAULT_LIBRARY) -> RolloutTrace:
    """Roll out one game from uniform strategies.

    ``solver`` is either a ``Primitive`` or a weight vector over ``library``.
    """
    if isinstance(solver, Primitive):
        if solver not in library:
            library = tuple(library) + (solver,)
        w = one_hot(1, list(library).index(solver), len(library))
    else:
        w = np.asarray(solver, dtype=float)[None, :]
    traces, st = run_dynamics(g.a[None], g.b[None], w, cfg, library)
    return RolloutTrace(traces[0], diverged=bool(st.diverged[0]))


@dataclass(frozen=True)
class PrimitiveScorecard:
    game_id: str
    library: tuple
    auc: np.ndarray
    terminal: np.ndarray

    @property
    def per_primitive(self) -> dict:
        return {k: {"auc": float(a), "terminal": float(t)} for k, a, t in zip(self.library, self.auc, self.terminal)}

    @property
    def oracle_index(self) -> int:
        return int(np.argmin(self.auc))

    @property
    def oracle_kind(self) -> Primitive:
        return self.library[self.oracle_index]

    @property
    def oracle_auc(self) -> float:
        return float(self.auc[self.oracle_index])

    @property
    def margin(self) -> float:
        s = np.sort(self.auc)
        return float(s[1] - s[0]) if len(s) > 1 else 0.0


def pure_traces(a, b, cfg: RolloutConfig, library=DEFAULT_LIBRARY) -> np.ndarray:
    """Exploitability traces of every pure primitive, shape ``(K, M, T)``."""
    k = a.shape[0]
    out = np.empty((k, len(library), cfg.horizon))
    for i in range(len(library)):
        traces, _ = run_dynamics(a, b, one_hot(k, i, len(library)), cfg, library)
        out[:, i, :] = traces
    return out


def score_batch(games, cfg: RolloutConfig, library=DEFAULT_LIBRARY) -> list[PrimitiveScorecard]:
    games = list(games)
    if not games:
        return []
    a, b = stack_games(games)
    tr = pure_traces(a, b, cfg, library)
    cards = []
    for k, g in enumerate(games):
        cards.append(
            PrimitiveScorecard(
                g.id, tuple(library), trace_auc(tr[k]), trace_terminal(tr[k])
            )
        )
    return cards


def score_primitives(g: PayoffGame, cfg: RolloutConfig, library=DEFAULT_LIBRARY) -> PrimitiveScorecard:
    return score_batch([g], cfg, library)[0]
