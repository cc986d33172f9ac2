"""Evaluation summaries and the geometry of solver performance over game space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .linalg import jacobi_eigh
from .network import RoutingNet, softmax
from .primitives import DEFAULT_LIBRARY, RolloutConfig
from .synthesis import ResidualModule, synth_solve_batch

GAP_FLOOR = 1e-12
RETENTION_EPS = 1e-6
TIE_TOL = 1e-4


# ---------------------------------------------------------------- summaries

def gap_closure(auc_method: float, auc_best_fixed: float, auc_oracle: float) -> float | None:
    """Fraction of the best-fixed-to-oracle AUC gap recovered; ``None`` when the gap vanishes."""
    den = auc_best_fixed - auc_oracle
    if abs(den) < GAP_FLOOR:
        return None
    return float((auc_best_fixed - auc_method) / den)


def retention_scores(auc: np.ndarray) -> np.ndarray:
    """``(best + eps) / (auc + eps)`` per game and primitive; 1 marks the oracle."""
    auc = np.asarray(auc, dtype=float)
    best = auc.min(axis=1, keepdims=True)
    return (best + RETENTION_EPS) / (auc + RETENTION_EPS)


def bin_edges(values: np.ndarray, bins: int = 10) -> np.ndarray:
    """Quantile edges (deciles by default) of an empirical distribution."""
    return np.quantile(np.asarray(values, dtype=float), np.linspace(0, 1, bins + 1))


def _assign(values: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # right-closed last bin so the maximum lands inside
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def failure_threshold(auc: np.ndarray) -> float:
    return float(np.percentile(np.asarray(auc, dtype=float), 75))


def failure_fraction(auc: np.ndarray, values: np.ndarray, edges: np.ndarray | None = None):
    """Share of games per (primitive, bin) whose AUC strictly exceeds the pooled 75th percentile.

    Returns ``(fractions (M, bins), edges, threshold)``; empty bins are NaN.
    """
    auc = np.asarray(auc, dtype=float)
    if auc.size == 0:
        raise ValueError("empty scorecard set")
    values = np.asarray(values, dtype=float)
    edges = bin_edges(values) if edges is None else np.asarray(edges, dtype=float)
    thr = failure_threshold(auc)
    fail = auc > thr
    idx = _assign(values, edges)
    nb = len(edges) - 1
    out = np.full((auc.shape[1], nb), np.nan)
    for j in range(nb):
        sel = idx == j
        if sel.any():
            out[:, j] = fail[sel].mean(axis=0)
    return out, edges, thr


@dataclass
class WinnerCell:
    n: int
    winner: int | None = None
    runner_up: int | None = None
    tie: bool = False
    ci: tuple | None = None

    @property
    def status(self) -> str:
        if self.winner is None:
            return "insufficient"
        return "tie" if self.tie else "winner"


def bootstrap_ci(diff: np.ndarray, n_boot: int, rng: np.random.Generator, level: float = 0.95):
    """Percentile bootstrap interval of the mean of ``diff``."""
    diff = np.asarray(diff, dtype=float)
    idx = rng.integers(0, len(diff), size=(n_boot, len(diff)))
    means = diff[idx].mean(axis=1)
    lo, hi = np.percentile(means, [50 * (1 - level), 50 * (1 + level)])
    return float(lo), float(hi)


def winner_cell(auc: np.ndarray, n_boot: int, rng: np.random.Generator) -> WinnerCell:
    n = len(auc)
    if n < 2:
        return WinnerCell(n)
    order = np.argsort(auc.mean(axis=0), kind="stable")
    best, second = int(order[0]), int(order[1])
    lo, hi = bootstrap_ci(auc[:, best] - auc[:, second], n_boot, rng)
    return WinnerCell(n, best, second, bool(lo <= 0.0 <= hi), (lo, hi))


def winner_map(auc: np.ndarray, coords: np.ndarray, edges_x: np.ndarray, edges_y: np.ndarray,
               n_boot: int = 1000, seed: int = 0) -> list[list[WinnerCell]]:
    """Per-bin winning primitive over a 2-D projection, with a paired-bootstrap tie test."""
    auc = np.asarray(auc, dtype=float)
    coords = np.asarray(coords, dtype=float)
    ix = _assign(coords[:, 0], np.asarray(edges_x, dtype=float))
    iy = _assign(coords[:, 1], np.asarray(edges_y, dtype=float))
    rng = np.random.default_rng(seed)
    grid = []
    for i in range(len(edges_x) - 1):
        row = []
        for j in range(len(edges_y) - 1):
            row.append(winner_cell(auc[(ix == i) & (iy == j)], n_boot, rng))
        grid.append(row)
    return grid


# ---------------------------------------------------------------- geometry

@dataclass
class PCAResult:
    coords: np.ndarray
    explained: np.ndarray
    components: np.ndarray  # (d, 2), columns are unit loadings
    mean: np.ndarray

    def transform(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.mean) @ self.components


def pca2(points: np.ndarray) -> PCAResult:
    x = np.asarray(points, dtype=float)
    if x.ndim != 2 or x.shape[0] <= 2 or x.shape[1] < 2:
        raise ValueError("pca2 needs an (N > 2, d >= 2) array")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    vals, vecs = jacobi_eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = np.maximum(vals[order], 0.0)
    vecs = vecs[:, order]
    comps = vecs[:, :2].copy()
    for c in range(2):
        k = int(np.argmax(np.abs(comps[:, c])))
        if comps[k, c] < 0:
            comps[:, c] = -comps[:, c]
    total = vals.sum()
    explained = vals[:2] / total if total > 0 else np.zeros(2)
    return PCAResult(xc @ comps, explained, comps, mean)


def knn_graph(points: np.ndarray, k: int = 10) -> np.ndarray:
    """Indices of the ``k`` nearest other points, ties broken by index."""
    p = np.asarray(points, dtype=float)
    n = len(p)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * p @ p.T
    np.fill_diagonal(d2, np.inf)
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


@dataclass
class SpatialField:
    points: np.ndarray
    values: np.ndarray
    neighbors: np.ndarray = field(default=None)

    @classmethod
    def build(cls, points, values, k: int = 10) -> "SpatialField":
        return cls(np.asarray(points, dtype=float), np.asarray(values, dtype=float), knn_graph(points, k))


def morans_i(f: SpatialField) -> float:
    """Moran's I with row-normalised binary neighbour weights."""
    v = np.asarray(f.values, dtype=float)
    nb = f.neighbors
    n, k = nb.shape
    z = v - v.mean()
    den = float(np.sum(z * z))
    if den == 0.0:
        return 0.0
    # rows carry weights 1/k, so the weight total equals n and the N/W prefactor is 1
    num = float(np.sum(z[:, None] * z[nb]) / k)
    return num / den


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Mann-Whitney rank statistic; tied scores count one half."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=float)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs both classes")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def logistic_fit(x: np.ndarray, y: np.ndarray, iters: int = 500, lr: float = 0.1, l2: float = 1e-4):
    """Full-batch gradient descent on the L2-regularised mean log-loss; returns ``(w, b)``."""
    w = np.zeros(x.shape[1])
    b = 0.0
    y = y.astype(float)
    for _ in range(iters):
        p = 0.5 * (1.0 + np.tanh(0.5 * (x @ w + b)))
        r = p - y
        w -= lr * (x.T @ r / len(y) + l2 * w)
        b -= lr * float(r.mean())
    return w, b


def stratified_folds(labels: np.ndarray, folds: int, seed: int = 0) -> np.ndarray:
    y = np.asarray(labels).astype(int)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=int)
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        if len(idx) < folds:
            raise ValueError(f"class {c} has {len(idx)} samples, fewer than {folds} folds")
        fold[rng.permutation(idx)] = np.arange(len(idx)) % folds
    return fold


def linear_probe(features: np.ndarray, labels: np.ndarray, folds: int = 5, seed: int = 0,
                 iters: int = 500, lr: float = 0.1, l2: float = 1e-4) -> float:
    """Mean held-out ROC-AUC of a stratified k-fold logistic probe."""
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    if len(np.unique(y)) < 2:
        raise ValueError("linear probe needs both classes")
    fold = stratified_folds(y, folds, seed)
    aucs = []
    for f in range(folds):
        tr, te = fold != f, fold == f
        # standardise with training-fold statistics
        mu = x[tr].mean(axis=0)
        sd = x[tr].std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        w, b = logistic_fit((x[tr] - mu) / sd, y[tr], iters, lr, l2)
        aucs.append(roc_auc(y[te], ((x[te] - mu) / sd) @ w + b))
    return float(np.mean(aucs))


def probe_labels(auc_method: np.ndarray, auc_oracle: np.ndarray, tol: float = TIE_TOL):
    """``(labels, keep)``: 1 where the method beats the oracle by more than ``tol``; ties dropped."""
    d = np.asarray(auc_method, dtype=float) - np.asarray(auc_oracle, dtype=float)
    keep = np.abs(d) > tol
    return (d < 0).astype(int), keep


# -------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    rows: list
    per_game: list
    best_fixed: str
    soft_auc: np.ndarray = field(repr=False, default=None)
    z_hat: np.ndarray = field(repr=False, default=None)

    def row(self, method: str) -> dict:
        for r in self.rows:
            if r["method"] == method:
                return r
        raise KeyError(method)


def evaluate(net: RoutingNet, data, rcfg: RolloutConfig, rm: ResidualModule | None = None,
             library=DEFAULT_LIBRARY) -> EvalReport:
    """Summary of oracle, soft, hard top-1, every fixed primitive and equal weight on ``data``.

    ``data`` is a ``TrainingSet`` carrying the games' primitive scorecards.
    """
    k, m = data.auc.shape
    z, logits, _ = net.forward(data.features)
    w = softmax(logits, net.beta)
    soft = synth_solve_batch(data.a, data.b, w, rcfg, library=library)
    eq = synth_solve_batch(data.a, data.b, np.full((k, m), 1.0 / m), rcfg, library=library)
    hard = np.argmax(logits, axis=1)
    ora = data.oracle
    rows_ = np.arange(k)
    fixed_means = data.auc.mean(axis=0)
    bf = int(np.argmin(fixed_means))
    a_or = float(data.auc_best.mean())
    a_bf = float(fixed_means[bf])

    def summary(name, auc, term):
        return {"method": name, "val_auc": float(np.mean(auc)), "val_terminal": float(np.mean(term)),
                "gap_closure": gap_closure(float(np.mean(auc)), a_bf, a_or)}

    table = [
        summary("oracle", data.auc_best, data.terminal[rows_, ora]),
        summary("soft", soft.auc, soft.terminal),
        summary("top1", data.auc[rows_, hard], data.terminal[rows_, hard]),
    ]
    if rm is not None:
        syn = synth_solve_batch(data.a, data.b, w, rcfg, rm, z_hat=z, diag=data.diag, hardness=data.hardness,
                                library=library)
        table.append(summary("soft+residual", syn.auc, syn.terminal))
    for i, kind in enumerate(library):
        table.append(summary(kind.label, data.auc[:, i], data.terminal[:, i]))
    table.append(summary("equal_weight", eq.auc, eq.terminal))

    margin = np.sort(data.auc, axis=1)
    per_game = [
        {"game_id": data.ids[i], "oracle_kind": library[ora[i]].label, "top1_kind": library[hard[i]].label,
         "margin": float(margin[i, 1] - margin[i, 0]), "oracle_auc": float(data.auc_best[i]),
         "soft_auc": float(soft.auc[i]), "top1_auc": float(data.auc[i, hard[i]]),
         **{f"w_{kind.label}": float(w[i, j]) for j, kind in enumerate(library)}}
        for i in range(k)
    ]
    return EvalReport(table, per_game, library[bf].label, soft.auc, z)
