"""End-to-end acceptance gate: one PASS/FAIL line per criterion."""

import csv
import json
import os
import time

import numpy as np
import pytest

from solvercarto.cartography import SpatialField, gap_closure, linear_probe, morans_i, pca2
from solvercarto.cli import main
from solvercarto.dataset import Family, GeneratorSpec, generate_family, interpolated_game, read_corpus
from solvercarto.diagnostics import structure_diagnostics, structure_diagnostics_batch
from solvercarto.game import RPS, MixedStrategyPair, PayoffGame, exploitability, stack_games
from solvercarto.network import RoutingNet
from solvercarto.primitives import (
    DEFAULT_LIBRARY,
    DESCENT_FAMILY,
    Primitive,
    RolloutConfig,
    one_hot,
    pure_traces,
    score_batch,
)
from solvercarto.records import read_scores
from solvercarto.synthesis import ResidualModule, synth_solve_batch
from solvercarto.training import TrainingSet, routing_inputs

from test_network import fd_check

M = len(DEFAULT_LIBRARY)


@pytest.fixture
def verdict(capsys):
    def report(number, ok, detail, elapsed=None):
        took = "" if elapsed is None else f" [{elapsed:.1f}s]"
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}{took}")
        assert ok, detail
    return report


def pipeline(root):
    """Default-schedule gen -> score -> train -> eval through the CLI."""
    d = {k: os.path.join(root, k) for k in ("gen", "score", "p1", "p2", "res", "eval")}
    corpus = os.path.join(d["gen"], "corpus.jsonl")
    common = ["--corpus", corpus, "--scores", os.path.join(d["score"], "scores.csv")]
    steps = [
        ["gen", "--out", d["gen"], "--count", "4000"],
        ["score", "--out", d["score"], "--corpus", corpus],
        ["train", "--out", d["p1"], *common, "--phase", "phase1"],
        ["train", "--out", d["p2"], *common, "--phase", "phase2", "--checkpoint", os.path.join(d["p1"], "phase1_best.json")],
        ["train", "--out", d["res"], *common, "--phase", "residual", "--checkpoint", os.path.join(d["p2"], "phase2_best.json")],
        ["eval", "--out", d["eval"], *common, "--checkpoint", os.path.join(d["p2"], "phase2_best.json"),
         "--residual", os.path.join(d["res"], "residual.json")],
    ]
    for argv in steps:
        assert main(argv) == 0, argv
    return d


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    t0 = time.perf_counter()
    first = pipeline(str(tmp_path_factory.mktemp("pipeline_a")))
    elapsed = time.perf_counter() - t0
    second = pipeline(str(tmp_path_factory.mktemp("pipeline_b")))
    return first, second, elapsed


def summary(run):
    with open(os.path.join(run["eval"], "summary.csv")) as fh:
        return {r["method"]: r for r in csv.DictReader(fh)}


def test_criterion_01_nash_sanity(verdict):
    t0 = time.perf_counter()
    u = np.full(3, 1 / 3)
    rps = exploitability(PayoffGame(RPS, -RPS), MixedStrategyPair(u, u))
    coord = PayoffGame(np.diag([3.0, 2.0, 1.0]), np.diag([3.0, 2.0, 1.0]))
    pure = exploitability(coord, MixedStrategyPair(np.eye(3)[0], np.eye(3)[0]))
    elapsed = time.perf_counter() - t0
    ok = abs(rps) < 1e-9 and abs(pure) < 1e-9 and elapsed < 1
    verdict(1, ok, f"uniform RPS {rps:.1e}, pure coordination Nash {pure:.1e}", elapsed)


def test_criterion_02_diagnostic_exactness(verdict):
    t0 = time.perf_counter()
    errs, in_range = {}, True
    for fam, col in ((Family.ZERO_SUM, 2), (Family.SYMMETRIC, 3), (Family.POTENTIAL, 0)):
        a, b = stack_games(list(generate_family(GeneratorSpec(fam, seed=11, count=1000))))
        d = structure_diagnostics_batch(a, b)
        errs[fam.value] = float(np.abs(d[:, col] - 1).max())
        in_range &= bool(np.all((d[:, :4] >= 0) & (d[:, :4] <= 1)))
    amono = structure_diagnostics(PayoffGame(RPS, -RPS)).a_mono
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) < 1e-9 and in_range and abs(amono) < 1e-9 and elapsed < 10
    verdict(2, ok, f"max |z-1| {errs}, z in [0,1]: {in_range}, a_mono(RPS) {amono:.1e}", elapsed)


def test_criterion_03_primitive_separation(verdict):
    t0 = time.perf_counter()
    cfg = RolloutConfig(horizon=200, eta=0.05)
    lib = list(DEFAULT_LIBRARY)
    a, b = stack_games(list(generate_family(GeneratorSpec(Family.ZERO_SUM, seed=3, count=50))))
    term = pure_traces(a, b, cfg)[:, :, -1].mean(axis=0)
    eg, gda = term[lib.index(Primitive.EXTRAGRADIENT)], term[lib.index(Primitive.GDA)]
    cards = score_batch(generate_family(GeneratorSpec(Family.POTENTIAL, seed=3, count=50)), cfg)
    descent = [lib.index(p) for p in DESCENT_FAMILY]
    hits = sum(c.auc[descent].min() <= c.auc.min() for c in cards)
    winners = {}
    for c in cards:
        winners[c.oracle_kind.label] = winners.get(c.oracle_kind.label, 0) + 1
    elapsed = time.perf_counter() - t0
    ok = eg < gda and hits >= 40 and elapsed < 120
    verdict(3, ok, f"zero-sum terminal EG {eg:.4f} vs GDA {gda:.4f}; identical-interest descent oracle "
                   f"{hits}/50 (oracle counts {winners})", elapsed)


def test_criterion_04_interpolation_path(verdict):
    t0 = time.perf_counter()
    games = [interpolated_game(lam, id=f"lam{lam:.1f}") for lam in np.linspace(0, 1, 11)]
    d = np.array([structure_diagnostics(g).as_array() for g in games])
    zs_ok = bool(np.all(np.diff(d[:, 2]) <= 1e-12))
    pot_ok = bool(np.all(np.diff(d[:, 0]) >= -1e-12))
    oracles = [c.oracle_kind.label for c in score_batch(games, RolloutConfig())]
    changes = sum(x != y for x, y in zip(oracles, oracles[1:]))
    elapsed = time.perf_counter() - t0
    ok = zs_ok and pot_ok and changes >= 1 and elapsed < 30
    verdict(4, ok, f"z_zs non-increasing {zs_ok}, z_pot non-decreasing {pot_ok}, oracle path {oracles}",
            elapsed)


def test_criterion_05_gradient_correctness(verdict):
    t0 = time.perf_counter()
    net = RoutingNet(seed=0)
    err = fd_check(net, np.random.default_rng(5).normal(size=(4, 23)), 50, seed=6).max()
    elapsed = time.perf_counter() - t0
    verdict(5, err < 1e-4 and elapsed < 10, f"max relative error {err:.2e} over 50 parameters", elapsed)


def test_criterion_06_vertex_reduction(verdict):
    games = list(generate_family(GeneratorSpec(Family.PERTURBED, seed=6, count=20)))
    a, b = stack_games(games)
    cfg = RolloutConfig()
    pure = pure_traces(a, b, cfg)
    exact = [synth_solve_batch(a, b, one_hot(len(games), k, M), cfg).traces.tobytes() == pure[:, k].tobytes()
             for k in range(M)]
    verdict(6, all(exact), f"bit-exact primitives {sum(exact)}/{M} on 20 games")


def test_criterion_07_training_hierarchy(verdict, full_runs):
    s = summary(full_runs[0])
    fixed = [p.label for p in DEFAULT_LIBRARY]
    best = min(fixed, key=lambda k: float(s[k]["val_auc"]))
    chain = [("oracle", "oracle"), ("soft", "soft"), ("top1", "top1"), (f"best fixed ({best})", best),
             ("equal weight", "equal_weight")]
    vals = [float(s[key]["val_auc"]) for _, key in chain]
    ordered = all(x <= y for x, y in zip(vals, vals[1:]))
    gc = float(s["soft"]["gap_closure"])
    text = " <= ".join(f"{name} {v:.4f}" for (name, _), v in zip(chain, vals))
    ok = ordered and gc > 0.30 and full_runs[2] < 7200
    verdict(7, ok, f"{text}; soft gap closure {100 * gc:.1f}%", full_runs[2])


def test_criterion_08_gap_closure_arithmetic(verdict):
    gc = gap_closure(0.0291, 0.0360, 0.0273)
    verdict(8, abs(100 * gc - 79.3) <= 0.1, f"(0.0360, 0.0291, 0.0273) -> {100 * gc:.2f}%")


def test_criterion_09_residual_bound_and_benefit(verdict, full_runs):
    run = full_runs[0]
    corpus = read_corpus(os.path.join(run["gen"], "corpus.jsonl"))
    split = json.load(open(os.path.join(run["gen"], "split.json")))
    by_id = {g.id: g for g in corpus}
    val = TrainingSet.build([by_id[i] for i in split["val"]], read_scores(os.path.join(run["score"], "scores.csv")))
    net = RoutingNet.load(os.path.join(run["p2"], "phase2_best.json"))
    rm = ResidualModule.load(os.path.join(run["res"], "residual.json"))
    w, z = routing_inputs(net, val)
    trained = synth_solve_batch(val.a, val.b, w, RolloutConfig(), rm, z_hat=z, diag=val.diag, hardness=val.hardness)
    # a saturated random module probes the bound where it is tight
    noisy = ResidualModule.create(lambda_max=rm.lambda_max, seed=1)
    noisy.set_flat(noisy.get_flat() + np.random.default_rng(2).normal(scale=5.0, size=noisy.get_flat().shape))
    loud = synth_solve_batch(val.a, val.b, w, RolloutConfig(), noisy, z_hat=z, diag=val.diag, hardness=val.hardness)
    peak = max(trained.residual_inf.max(), loud.residual_inf.max())
    with open(os.path.join(run["res"], "delta_auc.csv")) as fh:
        delta = np.array([float(r["delta_auc"]) for r in csv.DictReader(fh)])
    frac = float(np.mean(delta < -0.005))
    ok = peak <= rm.lambda_max and frac > 0
    verdict(9, ok, f"max |delta|_inf {peak:.4g} <= lambda_max {rm.lambda_max}; improved fraction "
                   f"{frac:.4f} ({int(np.sum(delta < -0.005))}/{len(delta)}), harmed {np.mean(delta > 0.005):.4f}")


def test_criterion_10_cartography_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    i, j = np.meshgrid(np.arange(40), np.arange(40), indexing="ij")
    grid = np.stack([i.ravel(), j.ravel()], axis=1).astype(float)
    checker = morans_i(SpatialField.build(grid, np.where((grid.sum(axis=1)) % 2 == 0, 1.0, -1.0), k=4))
    smooth = morans_i(SpatialField.build(grid, grid[:, 0] + 0.5 * grid[:, 1]))
    p = rng.uniform(size=(2000, 2))
    perm = morans_i(SpatialField.build(p, rng.permutation(p[:, 0] + p[:, 1])))
    line = rng.normal(size=(300, 1)) * np.array([[1.0, 2.0, -1.0, 0.5, 3.0]])
    explained = pca2(line).explained
    feats = rng.uniform(size=(2000, 5))
    null = linear_probe(feats, rng.integers(0, 2, size=2000))
    sep = linear_probe(feats, (feats[:, 0] > 0.5).astype(int))
    elapsed = time.perf_counter() - t0
    ok = (checker < 0 and smooth > 0.5 and abs(perm) < 0.05 and np.allclose(explained, [1, 0], atol=1e-9)
          and abs(null - 0.5) <= 0.05 and sep > 0.99 and elapsed < 60)
    verdict(10, ok, f"Moran checkerboard {checker:.3f}, smooth {smooth:.3f}, permuted {perm:.4f}; PCA "
                    f"{explained[0]:.12f},{explained[1]:.1e}; probe null {null:.3f}, separable {sep:.4f}", elapsed)


def test_criterion_11_determinism(verdict, full_runs):
    a, b, _ = full_runs
    compared, differ = 0, []
    for step in a:
        for name in json.load(open(os.path.join(a[step], "manifest.json")))["artifacts"]:
            if name.endswith(".svg"):
                continue
            compared += 1
            with open(os.path.join(a[step], name), "rb") as fa, open(os.path.join(b[step], name), "rb") as fb:
                if fa.read() != fb.read():
                    differ.append(f"{step}/{name}")
    verdict(11, not differ, f"{compared - len(differ)}/{compared} corpus, checkpoint and report files identical"
                            + (f"; differing: {differ}" if differ else ""))
