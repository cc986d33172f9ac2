"""Structure recogniser, routing policy head and their manual backpropagation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .diagnostics import StructureDiagnostics
from .game import PayoffGame

FEATURE_VERSION = "payoff-rowmajor-a-b+diag5/1"
ABLATIONS = (None, "zero-diag", "zero-payoff", "direct-diag")


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLP:
    """Fully connected net with tanh hidden layers and a chosen output squashing.

    Weights are stored ``(out, in)``; inputs are batched row-wise ``(N, in)``.
    """

    def __init__(self, sizes, out_act: str = "linear", rng=None, zero_last: bool = False):
        if out_act not in ("linear", "sigmoid", "tanh"):
            raise ValueError(f"unknown output activation {out_act!r}")
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least an input and an output size")
        self.sizes = [int(s) for s in sizes]
        self.out_act = out_act
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
            if zero_last and i == len(self.sizes) - 2:
                w = np.zeros_like(w)
            self.layers.append((w, np.zeros(fan_out)))

    @classmethod
    def zeros(cls, sizes, out_act="linear") -> "MLP":
        net = cls(sizes, out_act)
        net.layers = [(np.zeros_like(w), np.zeros_like(b)) for w, b in net.layers]
        return net

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise ValueError(f"expected input (N, {self.sizes[0]}), got {x.shape}")
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for i, (w, b) in enumerate(self.layers):
            z = h @ w.T + b
            if i < last:
                h = np.tanh(z)
            elif self.out_act == "sigmoid":
                h = _sigmoid(z)
            elif self.out_act == "tanh":
                h = np.tanh(z)
            else:
                h = z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, d_out: np.ndarray):
        """Reverse pass; returns ``([(dW, db), ...], d_input)`` summed over the batch."""
        d_out = np.asarray(d_out, dtype=float)
        if d_out.shape != acts[-1].shape:
            raise ValueError(f"upstream shape {d_out.shape} != output shape {acts[-1].shape}")
        out = acts[-1]
        if self.out_act == "sigmoid":
            dz = d_out * out * (1.0 - out)
        elif self.out_act == "tanh":
            dz = d_out * (1.0 - out * out)
        else:
            dz = d_out
        grads = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            w, _ = self.layers[i]
            h_in = acts[i]
            grads[i] = (dz.T @ h_in, dz.sum(axis=0))
            dh = dz @ w
            if i > 0:
                dz = dh * (1.0 - h_in * h_in)
        return grads, dh

    # flat parameter views, used by optimisers, SPSA and finite-difference checks
    def get_flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def set_flat(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=float)
        if theta.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {theta.size}")
        off = 0
        layers = []
        for w, b in self.layers:
            nw = w.size
            layers.append((theta[off:off + nw].reshape(w.shape).copy(), theta[off + nw:off + nw + b.size].copy()))
            off += nw + b.size
        self.layers = layers

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([np.concatenate([dw.ravel(), db]) for dw, db in grads])

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def copy(self) -> "MLP":
        new = MLP.__new__(MLP)
        new.sizes = list(self.sizes)
        new.out_act = self.out_act
        new.layers = [(w.copy(), b.copy()) for w, b in self.layers]
        return new

    def to_dict(self) -> dict:
        return {
            "sizes": self.sizes,
            "out_act": self.out_act,
            "layers": [{"shape": list(w.shape), "w": w.ravel().tolist(), "b": b.tolist()} for w, b in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls.__new__(cls)
        net.sizes = [int(s) for s in d["sizes"]]
        net.out_act = d["out_act"]
        net.layers = [
            (np.array(layer["w"], dtype=float).reshape(layer["shape"]), np.array(layer["b"], dtype=float))
            for layer in d["layers"]
        ]
        for (w, b), fan_in, fan_out in zip(net.layers, net.sizes[:-1], net.sizes[1:]):
            if w.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ValueError("layer shapes do not chain")
        return net


def featurize(g: PayoffGame, d: StructureDiagnostics, ablate: str | None = None) -> np.ndarray:
    """Payoff entries (row-major A then B) followed by the five diagnostics."""
    if ablate not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablate!r}")
    return featurize_batch(g.a[None], g.b[None], d.as_array()[None], ablate)[0]


def featurize_batch(a, b, diag, ablate: str | None = None) -> np.ndarray:
    k = a.shape[0]
    f = np.concatenate([a.reshape(k, -1), b.reshape(k, -1), np.asarray(diag, dtype=float)], axis=1)
    npay = f.shape[1] - 5
    if ablate == "zero-diag":
        f[:, npay:] = 0.0
    elif ablate == "zero-payoff":
        f[:, :npay] = 0.0
    return f


@dataclass
class RoutingDecision:
    z_hat: np.ndarray
    logits: np.ndarray
    w_soft: np.ndarray
    hard_index: int
    beta: float


def softmax(logits: np.ndarray, beta: float = 1.0) -> np.ndarray:
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class RoutingNet:
    """Recogniser ``features -> z_hat in [0,1]^5`` composed with a policy head ``z_hat -> logits``.

    With ``ablate == "direct-diag"`` the recogniser is bypassed and the policy
    reads the five raw diagnostics.
    """

    def __init__(self, n_features: int = 23, n_primitives: int = 7, hidden: int = 32, seed: int = 0,
                 ablate: str | None = None, beta: float = 1.0):
        if ablate not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablate!r}")
        rng = np.random.default_rng(seed)
        self.n_features = n_features
        self.ablate = ablate
        self.beta = float(beta)
        self.seed = seed
        self.recogniser = None if ablate == "direct-diag" else MLP([n_features, hidden, hidden, 5], "sigmoid", rng)
        self.policy = MLP([5, hidden, n_primitives], "linear", rng)

    @property
    def n_primitives(self) -> int:
        return self.policy.sizes[-1]

    @property
    def nets(self) -> list[MLP]:
        return [n for n in (self.recogniser, self.policy) if n is not None]

    def forward(self, f: np.ndarray):
        f = np.asarray(f, dtype=float)
        if self.recogniser is None:
            z, rcache = f[:, -5:], None
        else:
            z, rcache = self.recogniser.forward(f)
        logits, pcache = self.policy.forward(z)
        return z, logits, (rcache, pcache)

    def backward(self, cache, d_logits, d_zhat=None) -> np.ndarray:
        """Flat gradient over all parameters for upstream gradients on logits (and z_hat)."""
        rcache, pcache = cache
        pgrads, dz = self.policy.backward(pcache, d_logits)
        flat = [MLP.flatten_grads(pgrads)]
        if self.recogniser is not None:
            if d_zhat is not None:
                dz = dz + d_zhat
            rgrads, _ = self.recogniser.backward(rcache, dz)
            flat.insert(0, MLP.flatten_grads(rgrads))
        return np.concatenate(flat)

    def recognise(self, f: np.ndarray) -> np.ndarray:
        return self.forward(np.atleast_2d(f))[0]

    def decide(self, f: np.ndarray, beta: float | None = None) -> RoutingDecision | list:
        f2 = np.atleast_2d(f)
        z, logits, _ = self.forward(f2)
        beta = self.beta if beta is None else beta
        out = [route_logits(zi, li, beta) for zi, li in zip(z, logits)]
        return out[0] if np.ndim(f) == 1 else out

    def get_flat(self) -> np.ndarray:
        return np.concatenate([n.get_flat() for n in self.nets])

    def set_flat(self, theta: np.ndarray) -> None:
        off = 0
        for n in self.nets:
            n.set_flat(theta[off:off + n.n_params])
            off += n.n_params
        if off != len(theta):
            raise ValueError("parameter vector length mismatch")

    @property
    def n_params(self) -> int:
        return sum(n.n_params for n in self.nets)

    def copy(self) -> "RoutingNet":
        new = RoutingNet.__new__(RoutingNet)
        new.__dict__.update(self.__dict__)
        new.recogniser = None if self.recogniser is None else self.recogniser.copy()
        new.policy = self.policy.copy()
        return new

    def to_dict(self) -> dict:
        return {
            "kind": "routing-net",
            "feature_version": FEATURE_VERSION,
            "n_features": self.n_features,
            "ablate": self.ablate,
            "beta": self.beta,
            "seed": self.seed,
            "recogniser": None if self.recogniser is None else self.recogniser.to_dict(),
            "policy": self.policy.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoutingNet":
        if d.get("kind") != "routing-net":
            raise ValueError("not a routing-net checkpoint")
        net = cls.__new__(cls)
        net.n_features = int(d["n_features"])
        net.ablate = d["ablate"]
        net.beta = float(d["beta"])
        net.seed = d["seed"]
        net.recogniser = None if d["recogniser"] is None else MLP.from_dict(d["recogniser"])
        net.policy = MLP.from_dict(d["policy"])
        return net

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "RoutingNet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def route_logits(z_hat, logits, beta: float) -> RoutingDecision:
    logits = np.asarray(logits, dtype=float)
    return RoutingDecision(
        z_hat=np.asarray(z_hat, dtype=float),
        logits=logits,
        w_soft=softmax(logits, beta),
        hard_index=int(np.argmax(logits)),
        beta=float(beta),
    )


def route(policy: MLP, z_hat, beta: float) -> RoutingDecision:
    z_hat = np.asarray(z_hat, dtype=float)
    return route_logits(z_hat, policy(z_hat[None])[0], beta)


def recognise(recogniser: MLP, f) -> np.ndarray:
    return recogniser(np.atleast_2d(f))[0]


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True)
        fh.write("\n")
