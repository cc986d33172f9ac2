"""Mixture solvers with an optional gated, bounded residual correction."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import jacobian_norms, opt_diagnostics_batch, structure_diagnostics_batch
from .game import PayoffGame, RolloutTrace
from .network import MLP, write_json
from .primitives import DEFAULT_LIBRARY, RolloutConfig, SolverState, run_dynamics, trace_auc, trace_terminal

TRUST_EPS = 1e-8
N_HARDNESS = 2


@dataclass
class MixtureSolver:
    weights: np.ndarray
    library: tuple = DEFAULT_LIBRARY

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.library),):
            raise ValueError(f"need {len(self.library)} weights, got {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must lie on the simplex")
        self.weights = w


def prior_update(ms: MixtureSolver, proposals) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of per-primitive ``(dx, dy)`` displacements, blockwise."""
    proposals = list(proposals)
    if len(proposals) != len(ms.library):
        raise ValueError(f"expected {len(ms.library)} proposals, got {len(proposals)}")
    dx = np.zeros_like(np.asarray(proposals[0][0], dtype=float))
    dy = np.zeros_like(np.asarray(proposals[0][1], dtype=float))
    for w, (px, py) in zip(ms.weights, proposals):
        if w != 0.0:
            dx = dx + w * np.asarray(px, dtype=float)
            dy = dy + w * np.asarray(py, dtype=float)
    return dx, dy


def residual_feature_size(n_primitives: int) -> int:
    return 20 + 2 * n_primitives


@dataclass
class ResidualModule:
    """Residual net ``S_t -> lambda_max * tanh(.)`` plus a per-game sigmoid gate."""

    net: MLP
    gate_net: MLP
    lambda_max: float = 0.05

    @classmethod
    def create(cls, n: int = 3, m: int = 3, n_primitives: int = 7, hidden: int = 32,
               lambda_max: float = 0.05, seed: int = 0) -> "ResidualModule":
        rng = np.random.default_rng(seed)
        net = MLP([residual_feature_size(n_primitives), hidden, n + m], "linear", rng, zero_last=True)
        gate = MLP([5 + N_HARDNESS, 16, 1], "linear", rng, zero_last=True)
        return cls(net, gate, lambda_max)

    @classmethod
    def zeros(cls, n=3, m=3, n_primitives=7, hidden=32, lambda_max=0.05) -> "ResidualModule":
        return cls(
            MLP.zeros([residual_feature_size(n_primitives), hidden, n + m]),
            MLP.zeros([5 + N_HARDNESS, 16, 1]),
            lambda_max,
        )

    def delta(self, feats: np.ndarray) -> np.ndarray:
        return self.lambda_max * np.tanh(self.net(feats))

    def gate(self, z_hat: np.ndarray, hardness: np.ndarray) -> np.ndarray:
        z = self.gate_net(np.concatenate([z_hat, hardness], axis=1))[:, 0]
        return 0.5 * (1.0 + np.tanh(0.5 * z))

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.net.get_flat(), self.gate_net.get_flat()])

    def set_flat(self, theta) -> None:
        k = self.net.n_params
        self.net.set_flat(theta[:k])
        self.gate_net.set_flat(theta[k:])

    def copy(self) -> "ResidualModule":
        return ResidualModule(self.net.copy(), self.gate_net.copy(), self.lambda_max)

    def to_dict(self) -> dict:
        return {"kind": "residual", "lambda_max": self.lambda_max,
                "net": self.net.to_dict(), "gate_net": self.gate_net.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "ResidualModule":
        if d.get("kind") != "residual":
            raise ValueError("not a residual checkpoint")
        return cls(MLP.from_dict(d["net"]), MLP.from_dict(d["gate_net"]), float(d["lambda_max"]))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ResidualModule":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def residual_step(rm: ResidualModule, feats, z_hat, hardness):
    """Single-game residual: ``(delta (n+m,), gate)``."""
    feats = np.atleast_2d(np.asarray(feats, dtype=float))
    if not np.all(np.isfinite(feats)):
        raise ValueError("residual features must be finite")
    delta = rm.delta(feats)[0]
    gate = float(rm.gate(np.atleast_2d(z_hat), np.atleast_2d(hardness))[0])
    return delta, gate


def trust_penalty(residual_norms, prior_norms, lambda_trust: float) -> float:
    residual_norms = np.asarray(residual_norms, dtype=float)
    prior_norms = np.asarray(prior_norms, dtype=float)
    if residual_norms.shape != prior_norms.shape:
        raise ValueError("residual and prior norm sequences differ in length")
    return float(lambda_trust * np.sum(residual_norms**2 / (prior_norms**2 + TRUST_EPS)))


class ResidualCorrection:
    """Run-dynamics hook adding ``gate * delta_t`` and recording norms per step."""

    def __init__(self, rm: ResidualModule, a, b, weights, z_hat, diag, hardness, horizon: int,
                 gate_override=None):
        self.rm = rm
        self.a, self.b = a, b
        self.weights = weights
        self.z_hat = z_hat
        self.diag = diag
        self.horizon = horizon
        self.jac = jacobian_norms(a, b)
        k, n, m = a.shape
        self.n = n
        self.gate = rm.gate(z_hat, hardness) if gate_override is None else np.broadcast_to(
            np.asarray(gate_override, dtype=float), (k,)).copy()
        self.prev_update = np.zeros((k, n + m))
        self.res_inf, self.res_l2, self.prior_l2 = [], [], []

    def features(self, info) -> np.ndarray:
        px, py = info.prior
        cur = np.concatenate([px, py], axis=1)
        opt = opt_diagnostics_batch(self.a, self.b, info.state.x, info.state.y, self.prev_update, cur,
                                    info.t + 1, self.horizon, self.jac)
        norms = np.stack(
            [np.sqrt(np.sum(dx * dx, axis=1) + np.sum(dy * dy, axis=1)) for dx, dy in info.proposals], axis=1
        )
        phase = np.full((len(cur), 1), (info.t + 1) / self.horizon)
        return np.concatenate(
            [self.z_hat, self.diag, opt, self.weights, norms, np.linalg.norm(cur, axis=1, keepdims=True), phase],
            axis=1,
        )

    def __call__(self, info):
        feats = self.features(info)
        delta = self.rm.delta(feats)
        self.res_inf.append(np.abs(delta).max(axis=1))
        self.res_l2.append(np.linalg.norm(delta, axis=1))
        cur = np.concatenate(info.prior, axis=1)
        self.prior_l2.append(np.linalg.norm(cur, axis=1))
        corr = self.gate[:, None] * delta
        self.prev_update = cur + corr
        return corr[:, :self.n], corr[:, self.n:]


@dataclass
class SynthResult:
    traces: np.ndarray
    auc: np.ndarray
    terminal: np.ndarray
    gate: np.ndarray
    residual_inf: np.ndarray = field(default=None)
    residual_l2: np.ndarray = field(default=None)
    prior_l2: np.ndarray = field(default=None)
    state: SolverState = field(default=None, repr=False)


def synth_solve_batch(a, b, weights, cfg: RolloutConfig, rm: ResidualModule | None = None,
                      z_hat=None, diag=None, hardness=None, library=DEFAULT_LIBRARY,
                      state: SolverState | None = None, steps: int | None = None,
                      gate_override=None) -> SynthResult:
    """Static-mixture rollouts for ``K`` games, optionally residual-corrected."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = a.shape[0]
    weights = np.asarray(weights, dtype=float)
    if rm is None:
        traces, st = run_dynamics(a, b, weights, cfg, library, state=state, steps=steps)
        return SynthResult(traces, trace_auc(traces, st.diverged), trace_terminal(traces),
                           np.zeros(k), state=st)
    if diag is None:
        diag = structure_diagnostics_batch(a, b)
    z_hat = np.zeros((k, 5)) if z_hat is None else np.asarray(z_hat, dtype=float)
    hardness = np.zeros((k, N_HARDNESS)) if hardness is None else np.asarray(hardness, dtype=float)
    hook = ResidualCorrection(rm, a, b, weights, z_hat, diag, hardness, cfg.horizon, gate_override)
    traces, st = run_dynamics(a, b, weights, cfg, library, correction=_AllProposals(hook),
                              state=state, steps=steps)
    as_arr = (lambda xs: np.stack(xs, axis=1) if xs else np.zeros((k, 0)))
    return SynthResult(
        traces, trace_auc(traces, st.diverged), trace_terminal(traces), hook.gate,
        as_arr(hook.res_inf), as_arr(hook.res_l2), as_arr(hook.prior_l2), st,
    )


class _AllProposals:
    """Marks a correction hook as needing every primitive's proposal each step."""

    needs_all_proposals = True

    def __init__(self, hook):
        self.hook = hook

    def __call__(self, info):
        return self.hook(info)


def synth_solve(g: PayoffGame, routing, cfg: RolloutConfig, rm: ResidualModule | None = None,
                hardness=None, use_hard: bool = False, library=DEFAULT_LIBRARY):
    """Solve one game from a ``RoutingDecision``; returns ``(trace, residual norms per step)``."""
    m = len(library)
    if use_hard:
        w = np.zeros(m)
        w[routing.hard_index] = 1.0
    else:
        w = routing.w_soft
    hard = None if hardness is None else np.asarray(hardness, dtype=float)[None]
    res = synth_solve_batch(g.a[None], g.b[None], w[None], cfg, rm, z_hat=routing.z_hat[None],
                            hardness=hard, library=library)
    norms = res.residual_l2[0] if res.residual_l2 is not None else np.zeros(cfg.horizon)
    return RolloutTrace(res.traces[0], diverged=bool(res.state.diverged[0])), norms
