"""Coverage-oriented corpus generation, deduplication and the train/val split."""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .diagnostics import DIAGNOSTIC_NAMES, structure_diagnostics_batch
from .game import RPS, PayoffGame, center_normalize

A_POT = np.diag([1.0, 0.6, 0.2])
# a_mono is <= 0 always; normalised 3x3 games stay above about -2.3.
A_MONO_RANGE = (-2.5, 0.0)
DEDUP_QUANTUM = 1e-6


class Family(enum.Enum):
    ZERO_SUM = "zs"
    POTENTIAL = "pot"
    HARMONIC = "harm"
    SYMMETRIC = "sym"
    INTERPOLATED_RPS_POT = "interp"
    PERTURBED = "pert"

    @classmethod
    def parse(cls, text: str) -> list["Family"]:
        out = []
        for tok in text.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                out.append(cls(tok))
            except ValueError:
                out.append(cls[tok.upper()])
        return out


FAMILY_ORDER = list(Family)
BASE_FAMILIES = FAMILY_ORDER[:5]


@dataclass(frozen=True)
class GeneratorSpec:
    family: Family
    seed: int = 0
    count: int = 100
    noise: float = 0.2
    n: int = 3

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")
        if not 0 <= self.noise <= 1:
            raise ValueError("noise must lie in [0, 1]")


@dataclass(frozen=True)
class CoverageConfig:
    bins_per_axis: int = 10
    target_per_bin: int = 50
    max_rejects: int = 200_000
    upsample_frac: float = 0.1
    redraw_attempts: int = 200
    # a family is retired from the main pass after this many rejects in a row
    exhaust_after: int = 2000

    def __post_init__(self):
        if self.bins_per_axis < 2:
            raise ValueError("bins_per_axis must be at least 2")
        if self.target_per_bin < 1:
            raise ValueError("target_per_bin must be positive")

    @property
    def axis_pairs(self) -> list[tuple[int, int]]:
        return list(combinations(range(5), 2))


def interpolated_game(lam: float, **meta) -> PayoffGame:
    """RPS blended into the fixed coordination game at weight ``lam``."""
    a = (1 - lam) * RPS + lam * A_POT
    b = -(1 - lam) * RPS + lam * A_POT
    return center_normalize(a, b, **meta)


def _raw_draw(family: Family, rng: np.random.Generator, n: int, noise: float):
    if family is Family.ZERO_SUM:
        a = rng.normal(size=(n, n))
        return a, -a, {}
    if family is Family.POTENTIAL:
        a = rng.normal(size=(n, n))
        return a, a.copy(), {}
    if family is Family.HARMONIC:
        r = rng.normal(size=(n, n))
        a = r - r.T
        return a, -a, {}
    if family is Family.SYMMETRIC:
        a = rng.normal(size=(n, n))
        return a, a.T.copy(), {}
    if family is Family.INTERPOLATED_RPS_POT:
        lam = float(rng.uniform())
        return (1 - lam) * RPS + lam * A_POT, -(1 - lam) * RPS + lam * A_POT, {"lambda": lam}
    if family is Family.PERTURBED:
        base_idx = int(rng.integers(len(BASE_FAMILIES)))
        a, b, params = _raw_draw(BASE_FAMILIES[base_idx], rng, n, noise)
        # Perturb the normalised payoffs so noise is relative to a unit scale.
        g = center_normalize(a, b)
        a = g.a + noise * rng.normal(size=g.a.shape)
        b = g.b + noise * rng.normal(size=g.b.shape)
        return a, b, {**params, "base_index": float(base_idx), "noise": noise}
    raise ValueError(f"unknown family {family!r}")


def generate_family(spec: GeneratorSpec):
    """Yield ``spec.count`` normalised games of one family from a seeded stream."""
    rng = np.random.default_rng([spec.seed, FAMILY_ORDER.index(spec.family)])
    for i in range(spec.count):
        a, b, params = _raw_draw(spec.family, rng, spec.n, spec.noise)
        yield center_normalize(a, b, id=f"{spec.family.value}-{i:06d}", family=spec.family.value,
                               gen_params=params)


def _family_stream(spec: GeneratorSpec, chunk: int = 128):
    """Endless ``(game, diagnostics)`` stream; diagnostics are computed in chunks."""
    rng = np.random.default_rng([spec.seed, FAMILY_ORDER.index(spec.family)])
    i = 0
    while True:
        buf = []
        for _ in range(chunk):
            a, b, params = _raw_draw(spec.family, rng, spec.n, spec.noise)
            buf.append(center_normalize(a, b, id=f"{spec.family.value}-{i:06d}", family=spec.family.value,
                                        gen_params=params))
            i += 1
        diag = structure_diagnostics_batch(np.stack([g.a for g in buf]), np.stack([g.b for g in buf]))
        yield from zip(buf, diag)


def bin_indices(diag: np.ndarray, bins: int) -> np.ndarray:
    """Per-axis bin index of each diagnostic row, shape ``(K, 5)``."""
    diag = np.atleast_2d(diag)
    lo = np.array([0, 0, 0, 0, A_MONO_RANGE[0]], dtype=float)
    hi = np.array([1, 1, 1, 1, A_MONO_RANGE[1]], dtype=float)
    u = (diag - lo) / (hi - lo)
    return np.clip(np.floor(u * bins).astype(int), 0, bins - 1)


@dataclass
class CoverageResult:
    games: list
    counts: np.ndarray  # (n_pairs, bins, bins)
    rejects: int
    pairs: list

    def fill_rows(self):
        for p, (i, j) in enumerate(self.pairs):
            name = f"{DIAGNOSTIC_NAMES[i]}|{DIAGNOSTIC_NAMES[j]}"
            for bi in range(self.counts.shape[1]):
                for bj in range(self.counts.shape[2]):
                    c = int(self.counts[p, bi, bj])
                    if c:
                        yield name, bi, bj, c

    @property
    def occupied_cv(self) -> float:
        return occupied_cv(self.counts)


def occupied_cv(counts: np.ndarray) -> float:
    occ = counts[counts > 0].astype(float)
    return float(occ.std() / occ.mean()) if occ.size else 0.0


def pair_counts(diag: np.ndarray, bins: int, pairs) -> np.ndarray:
    idx = bin_indices(diag, bins)
    counts = np.zeros((len(pairs), bins, bins), dtype=int)
    for p, (i, j) in enumerate(pairs):
        np.add.at(counts[p], (idx[:, i], idx[:, j]), 1)
    return counts


def coverage_sample(specs, cov: CoverageConfig = CoverageConfig(), filtered: bool = True) -> CoverageResult:
    """Round-robin rejection sampling toward evenly filled pairwise diagnostic bins.

    A candidate is kept when at least one of its ten pairwise bins is still
    below ``target_per_bin``. The main pass fills ``1 - upsample_frac`` of the
    requested total; the remainder goes to targeted redraws for occupied but
    under-filled bins, drawn from the family that has hit each bin most often.
    A family that keeps landing in full bins (``exhaust_after`` rejects in a
    row) is retired and its remaining quota is spread over the others.
    ``filtered=False`` accepts every draw (used as a control).
    """
    specs = list(specs)
    if not specs:
        raise ValueError("need at least one generator spec")
    pairs = cov.axis_pairs
    bins = cov.bins_per_axis
    streams = [_family_stream(s) for s in specs]
    total = sum(s.count for s in specs)
    counts = np.zeros((len(pairs), bins, bins), dtype=int)
    hits = np.zeros((len(specs), len(pairs), bins, bins), dtype=int)
    pi = np.array([p[0] for p in pairs])
    pj = np.array([p[1] for p in pairs])
    rows = np.arange(len(pairs))
    games: list[PayoffGame] = []
    rejects = 0

    def place(d):
        idx = bin_indices(d, bins)[0]
        return idx[pi], idx[pj]

    def accept(f, g, bi, bj):
        counts[rows, bi, bj] += 1
        hits[f, rows, bi, bj] += 1
        games.append(g)

    if not filtered:
        quota = [s.count for s in specs]
    else:
        quota = [int(round(s.count * (1 - cov.upsample_frac))) for s in specs]
    taken = [0] * len(specs)
    streak = [0] * len(specs)
    live = [True] * len(specs)
    while rejects < cov.max_rejects and any(lv and t < q for lv, t, q in zip(live, taken, quota)):
        for f, spec in enumerate(specs):
            if not live[f] or taken[f] >= quota[f] or rejects >= cov.max_rejects:
                continue
            g, d = next(streams[f])
            bi, bj = place(d)
            if not filtered or np.any(counts[rows, bi, bj] < cov.target_per_bin):
                accept(f, g, bi, bj)
                taken[f] += 1
                streak[f] = 0
                continue
            rejects += 1
            streak[f] += 1
            if streak[f] >= cov.exhaust_after:
                # hand the unfilled quota to the remaining live families, in order
                live[f] = False
                spare = quota[f] - taken[f]
                quota[f] = taken[f]
                others = [k for k in range(len(specs)) if live[k]]
                for r in range(spare if others else 0):
                    quota[others[r % len(others)]] += 1

    if filtered:
        for p in range(len(pairs)):
            for b0 in range(bins):
                for b1 in range(bins):
                    c = counts[p, b0, b1]
                    if c == 0 or c >= cov.target_per_bin:
                        continue
                    # ties resolve to the earliest family in `specs`
                    f = int(np.argmax(hits[:, p, b0, b1]))
                    for _ in range(cov.redraw_attempts):
                        if len(games) >= total or rejects >= cov.max_rejects:
                            break
                        if counts[p, b0, b1] >= cov.target_per_bin:
                            break
                        g, d = next(streams[f])
                        bi, bj = place(d)
                        if bi[p] == b0 and bj[p] == b1:
                            accept(f, g, bi, bj)
                        else:
                            rejects += 1
    return CoverageResult(games, counts, rejects, pairs)


def payoff_hash(g: PayoffGame) -> str:
    q = np.round(np.concatenate([g.a.ravel(), g.b.ravel()]) / DEDUP_QUANTUM).astype(np.int64)
    h = hashlib.sha1(np.array(g.shape, dtype=np.int64).tobytes())
    h.update(q.tobytes())
    return h.hexdigest()


def dedup(games) -> list[PayoffGame]:
    seen = set()
    out = []
    for g in games:
        h = payoff_hash(g)
        if h not in seen:
            seen.add(h)
            out.append(g)
    return out


def dedup_and_split(corpus, train_frac: float = 0.8, seed: int = 0):
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie in (0, 1)")
    games = dedup(corpus)
    if not games:
        raise ValueError("empty corpus")
    order = np.random.default_rng(seed).permutation(len(games))
    n_train = int(np.floor(train_frac * len(games)))
    shuffled = [games[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def write_corpus(path, games) -> None:
    with open(path, "w") as fh:
        for g in games:
            fh.write(g.to_json())
            fh.write("\n")


class CorpusError(ValueError):
    pass


def read_corpus(path) -> list[PayoffGame]:
    games = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                games.append(PayoffGame.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed game record ({exc})") from exc
    return games


def write_fill_report(path, result: CoverageResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis_pair", "bin_i", "bin_j", "count"])
        for row in result.fill_rows():
            w.writerow(row)


def family_specs(families, total: int, seed: int, noise: float = 0.2) -> list[GeneratorSpec]:
    """Split ``total`` games evenly over ``families`` (remainder to the first ones)."""
    families = list(families)
    base, extra = divmod(total, len(families))
    return [
        GeneratorSpec(f, seed=seed, count=base + (1 if i < extra else 0), noise=noise)
        for i, f in enumerate(families)
        if base + (1 if i < extra else 0) > 0
    ]
