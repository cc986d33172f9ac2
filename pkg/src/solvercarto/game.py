"""Payoff games, simplex geometry and exploitability."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

NORM_FLOOR = 1e-8


@dataclass(frozen=True)
class PayoffGame:
    """A bimatrix game ``(a, b)``; ``a`` pays the row player, ``b`` the column player."""

    a: np.ndarray
    b: np.ndarray
    id: str = ""
    family: str = ""
    gen_params: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        if a.ndim != 2 or a.shape != b.shape:
            raise ValueError(f"payoff matrices must share a 2-D shape, got {a.shape} and {b.shape}")
        if a.shape[0] < 2 or a.shape[1] < 2:
            raise ValueError(f"games need at least 2 actions per player, got {a.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("payoff matrices must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape

    def to_json(self) -> str:
        n, m = self.shape
        return json.dumps(
            {
                "id": self.id,
                "family": self.family,
                "gen_params": self.gen_params,
                "a": [float(v) for v in self.a.ravel()],
                "b": [float(v) for v in self.b.ravel()],
                "n": n,
                "m": m,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "PayoffGame":
        d = json.loads(line)
        n, m = int(d["n"]), int(d["m"])
        return cls(
            a=np.array(d["a"], dtype=float).reshape(n, m),
            b=np.array(d["b"], dtype=float).reshape(n, m),
            id=d.get("id", ""),
            family=d.get("family", ""),
            gen_params=dict(d.get("gen_params", {})),
        )


@dataclass(frozen=True)
class MixedStrategyPair:
    x: np.ndarray
    y: np.ndarray

    @classmethod
    def uniform(cls, n: int, m: int) -> "MixedStrategyPair":
        return cls(np.full(n, 1.0 / n), np.full(m, 1.0 / m))


@dataclass(frozen=True)
class RolloutTrace:
    """Exploitability after each of the ``T`` recorded steps (step 0 excluded)."""

    exploitability: np.ndarray
    diverged: bool = False

    @property
    def terminal(self) -> float:
        return float(self.exploitability[-1])

    @property
    def auc(self) -> float:
        if self.diverged:
            return DIVERGED_AUC
        return float(np.mean(self.exploitability))


# Worst exploitability is 4 * max|payoff|, i.e. 4 for normalised games.
DIVERGED_AUC = 4.0


def center_normalize(raw_a, raw_b, **meta) -> PayoffGame:
    """Center each player's payoffs and divide both by one shared max-entry scale."""
    raw_a = np.asarray(raw_a, dtype=float)
    raw_b = np.asarray(raw_b, dtype=float)
    if raw_a.shape != raw_b.shape:
        raise ValueError(f"shape mismatch: {raw_a.shape} vs {raw_b.shape}")
    if not (np.all(np.isfinite(raw_a)) and np.all(np.isfinite(raw_b))):
        raise ValueError("payoffs must be finite")
    a0 = raw_a - raw_a.mean()
    b0 = raw_b - raw_b.mean()
    s = max(np.abs(a0).max(), np.abs(b0).max(), NORM_FLOOR)
    return PayoffGame(a0 / s, b0 / s, **meta)


def project_simplex_batch(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every row of ``v`` onto the probability simplex.

    Sort-and-threshold: find the largest ``k`` with ``u_k > (sum_{i<=k} u_i - 1) / k``
    on the descending sort ``u``, then clip ``v - theta`` at zero.
    """
    v = np.asarray(v, dtype=float)
    if v.shape[-1] == 0:
        raise ValueError("cannot project an empty vector")
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    k = np.arange(1, v.shape[-1] + 1)
    cond = u - css / k > 0
    rho = v.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def project_simplex(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("project_simplex expects a 1-D vector")
    return project_simplex_batch(v[None, :])[0]


def exploitability_batch(a: np.ndarray, b: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Vectorised exploitability for stacked games ``a, b: (K, n, m)`` and strategies ``(K, n), (K, m)``."""
    ay = np.einsum("knm,km->kn", a, y)
    xb = np.einsum("knm,kn->km", b, x)
    row = ay.max(axis=1) - np.einsum("kn,kn->k", x, ay)
    col = xb.max(axis=1) - np.einsum("km,km->k", y, xb)
    return np.maximum(row + col, 0.0)


def exploitability(g: PayoffGame, s: MixedStrategyPair) -> float:
    """Sum of both players' best-response gains; pure best responses are exact."""
    x = np.asarray(s.x, dtype=float)
    y = np.asarray(s.y, dtype=float)
    n, m = g.shape
    if x.shape != (n,) or y.shape != (m,):
        raise ValueError(f"strategy shapes {x.shape}, {y.shape} do not match game {g.shape}")
    return float(exploitability_batch(g.a[None], g.b[None], x[None], y[None])[0])


def negative_entropy_grad(p, floor: float = 1e-12) -> np.ndarray:
    """Gradient of ``sum p log p``, with ``p`` floored inside the log."""
    p = np.asarray(p, dtype=float)
    return np.log(np.maximum(p, floor)) + 1.0


def stack_games(games) -> tuple[np.ndarray, np.ndarray]:
    games = list(games)
    if not games:
        raise ValueError("no games to stack")
    shapes = {g.shape for g in games}
    if len(shapes) != 1:
        raise ValueError(f"games have mixed shapes {sorted(shapes)}")
    return np.stack([g.a for g in games]), np.stack([g.b for g in games])


RPS = np.array([[0.0, -1.0, 1.0], [1.0, 0.0, -1.0], [-1.0, 1.0, 0.0]])
