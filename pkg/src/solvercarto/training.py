"""Routing-network training (one-hot supervision, then rollout optimisation) and residual fitting."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diagnostics import structure_diagnostics_batch
from .game import stack_games
from .network import RoutingNet, featurize_batch, softmax
from .primitives import DEFAULT_LIBRARY, RolloutConfig, run_dynamics, trace_auc
from .synthesis import ResidualModule, synth_solve_batch

# Floor for the oracle-relative rollout loss; games whose oracle AUC is 0
# would otherwise dominate every batch.
LOSS_EPS = 1e-2
PRIORITY_FLOOR = 1e-6
LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class TrainConfig:
    epochs_p1: int = 15
    temp_start: float = 0.5
    temp_end: float = 0.13
    lr: float = 0.1
    epochs_p2: int = 6
    tau_beh: float = 0.1
    lambda_behav: float = 0.1
    lambda_ent: float = 0.01
    lambda_trust: float = 0.1
    ema_decay: float = 0.9
    warmup_frac: float = 0.1
    fd_step: float = 1e-3
    batch: int = 64
    seed: int = 0
    clip: float = 5.0
    lr_p2: float | None = 0.01
    anchor: str = "terminal"
    loss_eps: float = LOSS_EPS
    # residual fitting
    res_iters: int = 200
    res_batch: int = 32
    res_window: int = 5
    spsa_c: float = 0.01
    spsa_pairs: int = 8
    spsa_scope: str = "output"
    spsa_backtrack: int = 20
    lr_res: float = 0.05

    def __post_init__(self):
        if min(self.epochs_p1, self.epochs_p2, self.res_iters, self.spsa_backtrack) < 0:
            raise ValueError("epoch and iteration counts must be non-negative")
        if self.temp_start <= 0 or self.temp_end <= 0:
            raise ValueError("temperatures must be positive")
        if self.lr <= 0 or self.tau_beh <= 0 or self.fd_step <= 0 or self.loss_eps <= 0:
            raise ValueError("lr, tau_beh, fd_step and loss_eps must be positive")
        if min(self.lambda_behav, self.lambda_ent, self.lambda_trust) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if not 0 <= self.warmup_frac <= 1:
            raise ValueError("warmup_frac must lie in [0, 1]")
        if self.batch < 1 or self.res_batch < 1 or self.res_window < 1 or self.spsa_pairs < 1:
            raise ValueError("batch sizes and window must be positive")
        if self.spsa_scope not in ("all", "output"):
            raise ValueError("spsa_scope must be 'all' or 'output'")
        if self.anchor not in ("terminal", "auc"):
            raise ValueError("anchor must be 'terminal' or 'auc'")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @property
    def phase2_lr(self) -> float:
        return self.lr if self.lr_p2 is None else self.lr_p2


@dataclass
class TrainingSet:
    """Games stacked with their features and primitive scorecards."""

    a: np.ndarray
    b: np.ndarray
    features: np.ndarray
    diag: np.ndarray
    auc: np.ndarray  # (K, M)
    terminal: np.ndarray  # (K, M)
    ids: list

    @classmethod
    def build(cls, games, cards, ablate=None) -> "TrainingSet":
        games = list(games)
        cards = list(cards)
        if not games:
            raise ValueError("empty training set")
        by_id = {c.game_id: c for c in cards}
        missing = [g.id for g in games if g.id not in by_id]
        if missing:
            raise ValueError(f"missing scorecards for {len(missing)} games (first: {missing[0]})")
        a, b = stack_games(games)
        diag = structure_diagnostics_batch(a, b)
        auc = np.stack([by_id[g.id].auc for g in games])
        term = np.stack([by_id[g.id].terminal for g in games])
        return cls(a, b, featurize_batch(a, b, diag, ablate), diag, auc, term, [g.id for g in games])

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def oracle(self) -> np.ndarray:
        return np.argmin(self.auc, axis=1)

    @property
    def auc_best(self) -> np.ndarray:
        return self.auc.min(axis=1)

    @property
    def hardness(self) -> np.ndarray:
        """Gate inputs: (margin between the two best primitives, oracle AUC)."""
        s = np.sort(self.auc, axis=1)
        return np.stack([s[:, 1] - s[:, 0], s[:, 0]], axis=1)

    def anchor(self, tau: float, kind: str = "terminal") -> np.ndarray:
        loss = self.terminal if kind == "terminal" else self.auc
        return softmax(-loss / tau)

    def subset(self, idx) -> "TrainingSet":
        idx = np.asarray(idx)
        return TrainingSet(self.a[idx], self.b[idx], self.features[idx], self.diag[idx], self.auc[idx],
                           self.terminal[idx], [self.ids[i] for i in idx])


# ---------------------------------------------------------------- loss pieces

def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise KL(p || q); terms with p = 0 contribute nothing."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(p > 0, p * (np.log(np.maximum(p, LOG_FLOOR)) - np.log(np.maximum(q, LOG_FLOOR))), 0.0)
    return t.sum(axis=-1)


def neg_entropy(w: np.ndarray) -> np.ndarray:
    return np.sum(w * np.log(np.maximum(w, LOG_FLOOR)), axis=-1)


def neg_entropy_logit_grad(w: np.ndarray, beta: float) -> np.ndarray:
    lw = np.log(np.maximum(w, LOG_FLOOR))
    return beta * w * (lw - np.sum(w * lw, axis=-1, keepdims=True))


def temperature_schedule(cfg: TrainConfig) -> np.ndarray:
    """Linear temperature anneal over the Phase I epochs."""
    if cfg.epochs_p1 == 0:
        return np.zeros(0)
    if cfg.epochs_p1 == 1:
        return np.array([cfg.temp_end])
    return np.linspace(cfg.temp_start, cfg.temp_end, cfg.epochs_p1)


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    n = np.linalg.norm(g)
    return g * (limit / n) if n > limit else g


def _minibatches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


# -------------------------------------------------------------------- phase I

@dataclass
class PhaseResult:
    best: RoutingNet
    final: RoutingNet
    metrics: list = field(default_factory=list)


def phase1_eval(net: RoutingNet, data: TrainingSet, beta: float, cfg: TrainConfig) -> dict:
    _, logits, _ = net.forward(data.features)
    w = softmax(logits, beta)
    ora = data.oracle
    return {
        "loss": float(np.mean(-np.log(np.maximum(w[np.arange(len(ora)), ora], LOG_FLOOR)))),
        "accuracy": float(np.mean(np.argmax(logits, axis=1) == ora)),
        "behav_kl": float(np.mean(kl_divergence(data.anchor(cfg.tau_beh, cfg.anchor), w))),
    }


def phase1_train(net: RoutingNet, train: TrainingSet, cfg: TrainConfig, val: TrainingSet | None = None) -> PhaseResult:
    """Cross-entropy to the one-hot oracle under an annealed softmax temperature.

    The final temperature's inverse is stored on the returned nets as their
    routing ``beta``. With zero epochs the input net is returned unchanged.
    """
    net = net.copy()
    rng = np.random.default_rng([cfg.seed, 1])
    temps = temperature_schedule(cfg)
    if len(temps) == 0:
        return PhaseResult(net, net.copy(), [])
    ora = train.oracle
    m = net.n_primitives
    best, best_loss, metrics = net.copy(), np.inf, []
    for epoch, temp in enumerate(temps):
        beta = 1.0 / temp
        losses = []
        for idx in _minibatches(len(train), cfg.batch, rng):
            _, logits, cache = net.forward(train.features[idx])
            w = softmax(logits, beta)
            target = np.eye(m)[ora[idx]]
            losses.append(-np.log(np.maximum(w[np.arange(len(idx)), ora[idx]], LOG_FLOOR)))
            d_logits = beta * (w - target) / len(idx)
            g = _clip(net.backward(cache, d_logits), cfg.clip)
            net.set_flat(net.get_flat() - cfg.lr * g)
        net.beta = beta
        row = {"epoch": epoch + 1, "temperature": float(temp), "train_loss": float(np.mean(np.concatenate(losses)))}
        tr = phase1_eval(net, train, beta, cfg)
        row.update({"train_accuracy": tr["accuracy"], "behav_kl": tr["behav_kl"]})
        score = tr["loss"]
        if val is not None:
            ev = phase1_eval(net, val, beta, cfg)
            row.update({"val_loss": ev["loss"], "val_accuracy": ev["accuracy"]})
            score = ev["loss"]
        metrics.append(row)
        if score < best_loss:
            best_loss, best = score, net.copy()
    return PhaseResult(best, net, metrics)


# ----------------------------------------------------------------- sampling

@dataclass
class SamplerState:
    ema_loss: np.ndarray
    step: int = 0
    warmup_steps: int = 0
    decay: float = 0.9
    _warm_order: np.ndarray | None = field(default=None, repr=False)
    _warm_pos: int = field(default=0, repr=False)

    @classmethod
    def create(cls, n: int, warmup_steps: int = 0, decay: float = 0.9, init: float = 1.0) -> "SamplerState":
        return cls(np.full(n, float(init)), 0, int(warmup_steps), float(decay))

    @property
    def in_warmup(self) -> bool:
        return self.step < self.warmup_steps

    def update(self, idx, losses) -> None:
        """EMA update of the sampled games' losses; advances the step counter."""
        idx = np.asarray(idx)
        losses = np.asarray(losses, dtype=float)
        # repeated indices fold in sequentially, matching one update per draw
        for i, l in zip(idx, losses):
            self.ema_loss[i] = self.decay * self.ema_loss[i] + (1.0 - self.decay) * max(l, 0.0)
        self.step += 1


def prioritized_sample(sampler: SamplerState, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform without replacement during warmup, else proportional to ``ema + 1e-6``."""
    size = len(sampler.ema_loss)
    if n > size:
        raise ValueError(f"cannot draw {n} from {size} games")
    if sampler.in_warmup:
        # walk a shuffled deck so warmup coverage is uniform across steps too
        out = []
        while len(out) < n:
            if sampler._warm_order is None or sampler._warm_pos >= size:
                sampler._warm_order = rng.permutation(size)
                sampler._warm_pos = 0
            take = min(n - len(out), size - sampler._warm_pos)
            chunk = sampler._warm_order[sampler._warm_pos:sampler._warm_pos + take]
            chunk = [c for c in chunk if c not in out]
            out.extend(chunk)
            sampler._warm_pos += take
        return np.array(out[:n], dtype=int)
    p = sampler.ema_loss + PRIORITY_FLOOR
    return rng.choice(size, size=n, replace=True, p=p / p.sum())


# ------------------------------------------------------------------- phase II

def mixture_auc(a, b, weights, cfg: RolloutConfig, library=DEFAULT_LIBRARY) -> np.ndarray:
    traces, st = run_dynamics(a, b, weights, cfg, library)
    return trace_auc(traces, st.diverged)


def phase2_loss_grad(net: RoutingNet, data: TrainingSet, idx, cfg: TrainConfig, rcfg: RolloutConfig,
                     library=DEFAULT_LIBRARY, beta: float | None = None):
    """Per-game Phase II loss terms and the flat parameter gradient of their batch mean.

    The rollout term's logit gradient is a central finite difference over each
    logit coordinate (``2M + 1`` rollouts per game, run as one stacked batch).
    """
    beta = net.beta if beta is None else beta
    idx = np.asarray(idx)
    k = len(idx)
    _, logits, cache = net.forward(data.features[idx])
    m = logits.shape[1]
    h = cfg.fd_step
    shifts = np.concatenate([np.zeros((1, m)), h * np.eye(m), -h * np.eye(m)])  # (2M+1, M)
    all_logits = (logits[:, None, :] + shifts[None]).reshape(-1, m)
    all_w = softmax(all_logits, beta)
    a = np.repeat(data.a[idx], len(shifts), axis=0)
    b = np.repeat(data.b[idx], len(shifts), axis=0)
    auc = mixture_auc(a, b, all_w, rcfg, library).reshape(k, len(shifts))
    denom = data.auc_best[idx] + cfg.loss_eps
    roll = auc[:, 0] / denom
    d_roll = (auc[:, 1:m + 1] - auc[:, m + 1:]) / (2 * h) / denom[:, None]

    w = softmax(logits, beta)
    anchor = data.anchor(cfg.tau_beh, cfg.anchor)[idx]
    behav = kl_divergence(anchor, w)
    ent = neg_entropy(w)
    d_logits = d_roll + cfg.lambda_behav * beta * (w - anchor) + cfg.lambda_ent * neg_entropy_logit_grad(w, beta)
    grad = net.backward(cache, d_logits / k)
    terms = {"rollout": roll, "behav": behav, "entropy": ent, "auc": auc[:, 0],
             "total": roll + cfg.lambda_behav * behav + cfg.lambda_ent * ent}
    return terms, grad


def phase2_objective(weights, data: TrainingSet, idx, cfg: TrainConfig, rcfg: RolloutConfig,
                     library=DEFAULT_LIBRARY) -> np.ndarray:
    """Per-game Phase II objective for explicit mixture weights ``(len(idx), M)``."""
    idx = np.asarray(idx)
    w = np.asarray(weights, dtype=float)
    auc = mixture_auc(data.a[idx], data.b[idx], w, rcfg, library)
    anchor = data.anchor(cfg.tau_beh, cfg.anchor)[idx]
    return auc / (data.auc_best[idx] + cfg.loss_eps) + cfg.lambda_behav * kl_divergence(anchor, w) \
        + cfg.lambda_ent * neg_entropy(w)


def phase2_loss(net: RoutingNet, data: TrainingSet, idx, cfg: TrainConfig, rcfg: RolloutConfig,
                library=DEFAULT_LIBRARY, beta: float | None = None) -> float:
    """Batch-mean Phase II objective of a routing net (no gradient)."""
    beta = net.beta if beta is None else beta
    idx = np.asarray(idx)
    _, logits, _ = net.forward(data.features[idx])
    return float(np.mean(phase2_objective(softmax(logits, beta), data, idx, cfg, rcfg, library)))


def soft_auc(net: RoutingNet, data: TrainingSet, rcfg: RolloutConfig, library=DEFAULT_LIBRARY,
             beta: float | None = None) -> np.ndarray:
    _, logits, _ = net.forward(data.features)
    return mixture_auc(data.a, data.b, softmax(logits, net.beta if beta is None else beta), rcfg, library)


def phase2_train(net: RoutingNet, train: TrainingSet, cfg: TrainConfig, rcfg: RolloutConfig,
                 val: TrainingSet | None = None, library=DEFAULT_LIBRARY) -> PhaseResult:
    """Rollout-loss optimisation with behavioural anchor, entropy term and prioritised sampling."""
    net = net.copy()
    if cfg.epochs_p2 == 0:
        return PhaseResult(net, net.copy(), [])
    rng = np.random.default_rng([cfg.seed, 2])
    batch = min(cfg.batch, len(train))
    steps_per_epoch = max(1, len(train) // batch)
    total = steps_per_epoch * cfg.epochs_p2
    sampler = SamplerState.create(len(train), int(round(cfg.warmup_frac * total)), cfg.ema_decay)
    lr = cfg.phase2_lr
    # the incoming model competes for the best-val checkpoint as epoch 0
    best, metrics = net.copy(), []
    best_score = np.inf if val is None else float(np.mean(soft_auc(net, val, rcfg, library)))
    for epoch in range(cfg.epochs_p2):
        sums = {"total": 0.0, "rollout": 0.0, "behav": 0.0, "entropy": 0.0}
        for _ in range(steps_per_epoch):
            idx = prioritized_sample(sampler, batch, rng)
            terms, grad = phase2_loss_grad(net, train, idx, cfg, rcfg, library)
            net.set_flat(net.get_flat() - lr * _clip(grad, cfg.clip))
            sampler.update(idx, terms["rollout"])
            for key in sums:
                sums[key] += float(np.mean(terms[key])) / steps_per_epoch
        row = {"epoch": epoch + 1, **{f"loss_{k}": v for k, v in sums.items()}}
        score = sums["total"]
        if val is not None:
            vauc = float(np.mean(soft_auc(net, val, rcfg, library)))
            row["val_auc"] = vauc
            score = vauc
        metrics.append(row)
        if score < best_score:
            best_score, best = score, net.copy()
    return PhaseResult(best, net, metrics)


# ------------------------------------------------------------------ residual

@dataclass
class ResidualResult:
    module: ResidualModule
    metrics: list
    delta_auc: np.ndarray | None = None


def routing_inputs(net: RoutingNet, data: TrainingSet):
    """Static soft weights and recognised structure for every game in ``data``."""
    z, logits, _ = net.forward(data.features)
    return softmax(logits, net.beta), z


def residual_objective(rm: ResidualModule, a, b, w, z, diag, hard, rcfg: RolloutConfig, lambda_trust: float,
                       state=None, steps=None, library=DEFAULT_LIBRARY) -> float:
    """Mean exploitability plus the relative trust penalty on the applied (gated) residual."""
    res = synth_solve_batch(a, b, w, rcfg, rm, z_hat=z, diag=diag, hardness=hard, library=library,
                            state=state, steps=steps)
    ex = np.where(np.isnan(res.traces), 4.0, res.traces).mean(axis=1)
    applied = res.gate[:, None] * res.residual_l2
    trust = lambda_trust * np.sum(applied**2 / (res.prior_l2**2 + 1e-8), axis=1)
    return float(np.mean(ex + trust))


def residual_delta_auc(net: RoutingNet, rm: ResidualModule, data: TrainingSet, rcfg: RolloutConfig,
                       library=DEFAULT_LIBRARY) -> np.ndarray:
    """Per-game AUC change from switching the residual on (negative is better)."""
    w, z = routing_inputs(net, data)
    base = synth_solve_batch(data.a, data.b, w, rcfg, library=library)
    on = synth_solve_batch(data.a, data.b, w, rcfg, rm, z_hat=z, diag=data.diag, hardness=data.hardness,
                           library=library)
    return on.auc - base.auc


def spsa_mask(rm: ResidualModule, scope: str) -> np.ndarray:
    """0/1 mask over the flat residual parameters that SPSA perturbs."""
    if scope == "all":
        return np.ones(rm.get_flat().size)
    parts = []
    for net in (rm.net, rm.gate_net):
        for i, (w, b) in enumerate(net.layers):
            on = 1.0 if i == len(net.layers) - 1 else 0.0
            parts.append(np.full(w.size + b.size, on))
    return np.concatenate(parts)


def train_residual(net: RoutingNet, rm: ResidualModule, train: TrainingSet, cfg: TrainConfig,
                   rcfg: RolloutConfig, val: TrainingSet | None = None, library=DEFAULT_LIBRARY) -> ResidualResult:
    """SPSA over residual and gate parameters on short windows of the synthesised trajectory.

    Each iteration rolls a sampled batch forward with the current residual to a
    random window start, then compares the windowed objective at two
    symmetric parameter perturbations. The step is halved until it lowers
    that window's objective, and dropped if it never does.
    """
    rm = rm.copy()
    rng = np.random.default_rng([cfg.seed, 3])
    w_all, z_all = routing_inputs(net, train)
    hard_all = train.hardness
    window = min(cfg.res_window, rcfg.horizon)
    metrics = []
    theta = rm.get_flat()
    mask = spsa_mask(rm, cfg.spsa_scope)
    for it in range(cfg.res_iters):
        idx = rng.choice(len(train), size=min(cfg.res_batch, len(train)), replace=False)
        t0 = int(rng.integers(0, rcfg.horizon - window + 1))
        args = (train.a[idx], train.b[idx], w_all[idx], z_all[idx], train.diag[idx], hard_all[idx])
        state = None
        if t0 > 0:
            state = synth_solve_batch(*args[:3], rcfg, rm, z_hat=args[3], diag=args[4], hardness=args[5],
                                      library=library, steps=t0).state
        # standard SPSA gain decay
        ck = cfg.spsa_c / (it + 1) ** 0.101
        ak = cfg.lr_res / (it + 1 + 0.1 * cfg.res_iters) ** 0.602
        before = residual_objective(rm, *args, rcfg, cfg.lambda_trust, state=state, steps=window, library=library)
        g = np.zeros_like(theta)
        for _ in range(cfg.spsa_pairs):
            pert = rng.choice([-1.0, 1.0], size=theta.size) * mask
            vals = []
            for sign in (1.0, -1.0):
                probe = rm.copy()
                probe.set_flat(theta + sign * ck * pert)
                vals.append(residual_objective(probe, *args, rcfg, cfg.lambda_trust, state=state, steps=window,
                                               library=library))
            g += (vals[0] - vals[1]) / (2 * ck) * pert / cfg.spsa_pairs
        # blocking with backtracking: halve the step until this window's objective drops
        step, accepted, obj = ak * _clip(g, cfg.clip), False, before
        for _ in range(cfg.spsa_backtrack + 1):
            cand = rm.copy()
            cand.set_flat(theta - step)
            trial = residual_objective(cand, *args, rcfg, cfg.lambda_trust, state=state, steps=window,
                                       library=library)
            if trial < before:
                rm, theta, obj, accepted = cand, cand.get_flat(), trial, True
                break
            step = 0.5 * step
        metrics.append({"iter": it + 1, "window_start": t0, "objective": obj, "accepted": int(accepted)})
    delta = None if val is None else residual_delta_auc(net, rm, val, rcfg, library)
    return ResidualResult(rm, metrics, delta)
