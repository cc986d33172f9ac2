"""Command-line entry points: gen, score, train and eval."""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .cartography import (
    SpatialField,
    evaluate,
    failure_fraction,
    linear_probe,
    morans_i,
    pca2,
    probe_labels,
    retention_scores,
    winner_map,
)
from .dataset import CorpusError, CoverageConfig, Family, coverage_sample, dedup, dedup_and_split, family_specs, \
    read_corpus, write_corpus, write_fill_report
from .diagnostics import DIAGNOSTIC_NAMES, structure_diagnostics_batch
from .game import stack_games
from .network import ABLATIONS, RoutingNet, softmax, write_json
from .primitives import DEFAULT_LIBRARY, RolloutConfig, score_batch
from .records import num, open_score_csv, read_scores, score_row, write_rows
from .svg import heatmap, scatter
from .synthesis import ResidualModule, synth_solve_batch
from .training import TrainConfig, TrainingSet, phase1_train, phase2_train, residual_delta_auc, train_residual

EXIT_OK, EXIT_DOMAIN, EXIT_ENV = 0, 1, 2
THREADS_ENV = "SOLVERCARTO_THREADS"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ENV):
        super().__init__(message)
        self.code = code


def thread_cap() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise CliError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror or exc}") from exc
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")
    return path


def write_manifest(out: str, args: argparse.Namespace, artifacts: list[str]) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    write_json(os.path.join(out, "manifest.json"), {
        "command": args.command,
        "config": config,
        "seed": args.seed,
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
    })


def rollout_config(args) -> RolloutConfig:
    return RolloutConfig(horizon=args.horizon, eta=args.eta)


def require_file(path: str | None, what: str, hint: str) -> str:
    if not path:
        raise CliError(f"missing {what}: {hint}")
    if not os.path.isfile(path):
        raise CliError(f"missing {what}: {path} does not exist ({hint})")
    return path


# ------------------------------------------------------------------ commands

def cmd_gen(args) -> int:
    out = ensure_dir(args.out)
    try:
        families = list(dict.fromkeys(Family.parse(args.families)))
    except KeyError as exc:
        raise CliError(f"unknown family {exc.args[0]!r}", EXIT_DOMAIN) from exc
    if not families:
        raise CliError("no families selected", EXIT_DOMAIN)
    cov = CoverageConfig(bins_per_axis=args.bins, target_per_bin=args.target, max_rejects=args.max_rejects)
    res = coverage_sample(family_specs(families, args.count, args.seed, args.noise), cov,
                          filtered=not args.unfiltered)
    games = dedup(res.games)
    train, val = dedup_and_split(games, args.train_frac, args.seed)
    write_corpus(os.path.join(out, "corpus.jsonl"), games)
    write_json(os.path.join(out, "split.json"), {"train": [g.id for g in train], "val": [g.id for g in val]})
    write_fill_report(os.path.join(out, "fill_report.csv"), res)
    write_manifest(out, args, ["corpus.jsonl", "split.json", "fill_report.csv"])
    print(f"wrote {len(games)} games ({len(train)} train / {len(val)} val), "
          f"{res.rejects} rejects, occupied-bin CV {res.occupied_cv:.3f}")
    return EXIT_OK


def cmd_score(args) -> int:
    out = ensure_dir(args.out)
    games = read_corpus(require_file(args.corpus, "corpus", "run `gen` first or pass --corpus"))
    rcfg = rollout_config(args)
    path = os.path.join(out, "scores.csv")
    fh, writer, done = open_score_csv(path)
    todo = [g for g in games if g.id not in done]
    chunks = [todo[i:i + args.chunk] for i in range(0, len(todo), args.chunk)]

    def work(chunk):
        a, b = stack_games(chunk)
        return score_batch(chunk, rcfg), structure_diagnostics_batch(a, b)

    try:
        with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
            # map preserves corpus order; rows go through this single writer
            for cards, diag in pool.map(work, chunks):
                for card, d in zip(cards, diag):
                    writer.writerow(score_row(card, d))
                fh.flush()
    finally:
        fh.close()
    write_manifest(out, args, ["scores.csv"])
    print(f"scored {len(todo)} games ({len(done)} already present) -> {path}")
    return EXIT_OK


def load_sets(args, ablate):
    corpus = require_file(args.corpus, "corpus", "pass --corpus")
    split_path = args.split or os.path.join(os.path.dirname(os.path.abspath(corpus)), "split.json")
    require_file(split_path, "split file", "`gen` writes split.json beside the corpus; or pass --split")
    scores = require_file(args.scores, "scorecards", "run `score` first and pass --scores")
    games = {g.id: g for g in read_corpus(corpus)}
    with open(split_path) as fh:
        split = json.load(fh)
    cards = read_scores(scores)
    try:
        train = TrainingSet.build([games[i] for i in split["train"]], cards, ablate)
        val = TrainingSet.build([games[i] for i in split["val"]], cards, ablate)
    except KeyError as exc:
        raise CliError(f"split lists game {exc.args[0]!r} that is not in {corpus}", EXIT_DOMAIN) from exc
    return train, val


def _train_config(args) -> TrainConfig:
    kw = {"seed": args.seed}
    if args.epochs is not None:
        kw[{"phase1": "epochs_p1", "phase2": "epochs_p2", "residual": "res_iters"}[args.phase]] = args.epochs
    if args.lr is not None:
        kw["lr" if args.phase == "phase1" else "lr_p2" if args.phase == "phase2" else "lr_res"] = args.lr
    return TrainConfig(**kw)


def cmd_train(args) -> int:
    out = ensure_dir(args.out)
    rcfg = rollout_config(args)
    cfg = _train_config(args)
    if args.phase == "phase1":
        train, val = load_sets(args, args.ablate)
        net = RoutingNet(n_features=train.features.shape[1], n_primitives=len(DEFAULT_LIBRARY), seed=args.seed,
                         ablate=args.ablate)
        res = phase1_train(net, train, cfg, val)
        res.best.save(os.path.join(out, "phase1_best.json"))
        res.final.save(os.path.join(out, "phase1_final.json"))
        write_rows(os.path.join(out, "metrics_phase1.csv"), res.metrics, _metric_columns(res.metrics, "phase1"))
        arts = ["phase1_best.json", "phase1_final.json", "metrics_phase1.csv"]
        _report(res.metrics, "phase1")
    elif args.phase == "phase2":
        ckpt = require_file(args.checkpoint, "Phase I checkpoint", "phase2 needs --checkpoint <dir>/phase1_best.json")
        net = RoutingNet.load(ckpt)
        arts = ["phase2_best.json", "phase2_final.json", "metrics_phase2.csv"]
        if cfg.epochs_p2 == 0:
            for name in arts[:2]:
                shutil.copyfile(ckpt, os.path.join(out, name))
            write_rows(os.path.join(out, "metrics_phase2.csv"), [], _metric_columns([], "phase2"))
        else:
            train, val = load_sets(args, net.ablate)
            res = phase2_train(net, train, cfg, rcfg, val)
            res.best.save(os.path.join(out, "phase2_best.json"))
            res.final.save(os.path.join(out, "phase2_final.json"))
            write_rows(os.path.join(out, "metrics_phase2.csv"), res.metrics, _metric_columns(res.metrics, "phase2"))
            _report(res.metrics, "phase2")
    else:
        ckpt = require_file(args.checkpoint, "routing checkpoint", "residual training needs --checkpoint of a trained "
                            "routing net (e.g. <dir>/phase2_best.json)")
        net = RoutingNet.load(ckpt)
        arts = ["residual.json", "metrics_residual.csv"]
        if args.residual:
            rm = ResidualModule.load(require_file(args.residual, "residual checkpoint", "check --residual"))
        else:
            rm = ResidualModule.create(n_primitives=net.n_primitives, lambda_max=args.lambda_max, seed=args.seed)
        if cfg.res_iters == 0:
            if args.residual:
                shutil.copyfile(args.residual, os.path.join(out, "residual.json"))
            else:
                rm.save(os.path.join(out, "residual.json"))
            write_rows(os.path.join(out, "metrics_residual.csv"), [], _metric_columns([], "residual"))
        else:
            train, val = load_sets(args, net.ablate)
            res = train_residual(net, rm, train, cfg, rcfg, val)
            res.module.save(os.path.join(out, "residual.json"))
            write_rows(os.path.join(out, "metrics_residual.csv"), res.metrics, _metric_columns(res.metrics, "residual"))
            write_rows(os.path.join(out, "delta_auc.csv"),
                       [{"game_id": i, "delta_auc": float(d)} for i, d in zip(val.ids, res.delta_auc)],
                       ["game_id", "delta_auc"])
            arts.append("delta_auc.csv")
            frac = float(np.mean(res.delta_auc < -0.005))
            print(f"residual: {frac:.3%} of validation games improve by more than 0.005 AUC")
    write_manifest(out, args, arts)
    return EXIT_OK


_DEFAULT_COLUMNS = {
    "phase1": ["epoch", "temperature", "train_loss", "train_accuracy", "behav_kl", "val_loss", "val_accuracy"],
    "phase2": ["epoch", "loss_total", "loss_rollout", "loss_behav", "loss_entropy", "val_auc"],
    "residual": ["iter", "window_start", "objective", "accepted"],
}


def _metric_columns(metrics, phase):
    return list(metrics[0].keys()) if metrics else _DEFAULT_COLUMNS[phase]


def _report(metrics, phase):
    if metrics:
        last = metrics[-1]
        print(f"{phase}: " + ", ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in last.items()))


def cmd_eval(args) -> int:
    out = ensure_dir(args.out)
    rcfg = rollout_config(args)
    net = RoutingNet.load(require_file(args.checkpoint, "routing checkpoint", "pass --checkpoint"))
    rm = None
    if args.residual:
        rm = ResidualModule.load(require_file(args.residual, "residual checkpoint", "check --residual"))
    _, val = load_sets(args, net.ablate)
    report = evaluate(net, val, rcfg, rm)
    lib = DEFAULT_LIBRARY
    labels = [k.label for k in lib]
    arts = ["summary.csv", "per_game.csv", "pca.csv", "pca_zhat.svg", "winner_map.csv", "winner_map.svg",
            "failure_fraction.csv", "failure_fraction.svg", "retention.csv", "stats.json"]

    write_rows(os.path.join(out, "summary.csv"), report.rows, ["method", "val_auc", "val_terminal", "gap_closure"])
    write_rows(os.path.join(out, "per_game.csv"), report.per_game)

    pca = pca2(report.z_hat)
    ora = val.oracle
    write_rows(os.path.join(out, "pca.csv"), [
        {"game_id": gid, "pc1": float(c[0]), "pc2": float(c[1]), "oracle_kind": lib[o].label,
         "soft_auc": float(s)} for gid, c, o, s in zip(val.ids, pca.coords, ora, report.soft_auc)])
    ev = pca.explained * 100
    scatter(pca.coords, os.path.join(out, "pca_zhat.svg"), categories=ora, category_names=labels,
            title="recognised structure coloured by oracle primitive",
            xlabel=f"PC1 ({ev[0]:.1f}%)", ylabel=f"PC2 ({ev[1]:.1f}%)")

    edges = [np.linspace(pca.coords[:, c].min(), pca.coords[:, c].max(), args.bins + 1) for c in range(2)]
    grid = winner_map(val.auc, pca.coords, edges[0], edges[1], n_boot=args.n_boot, seed=args.seed)
    wrows, wval, wlab = [], np.full((args.bins, args.bins), np.nan), [["" for _ in range(args.bins)]
                                                                       for _ in range(args.bins)]
    for i, row in enumerate(grid):
        for j, cell in enumerate(row):
            wrows.append({"bin_i": i, "bin_j": j, "n": cell.n, "status": cell.status,
                          "winner": "" if cell.winner is None else lib[cell.winner].label,
                          "runner_up": "" if cell.runner_up is None else lib[cell.runner_up].label,
                          "ci_lo": None if cell.ci is None else cell.ci[0],
                          "ci_hi": None if cell.ci is None else cell.ci[1]})
            if cell.winner is not None:
                wval[args.bins - 1 - j, i] = cell.winner
                wlab[args.bins - 1 - j][i] = "tie" if cell.tie else lib[cell.winner].label[:4]
    write_rows(os.path.join(out, "winner_map.csv"), wrows,
               ["bin_i", "bin_j", "n", "status", "winner", "runner_up", "ci_lo", "ci_hi"])
    heatmap(wval, os.path.join(out, "winner_map.svg"), labels=wlab, vmin=0, vmax=len(lib) - 1,
            title="winning primitive per PCA cell", xlabel="PC1", ylabel="PC2")

    frac, fedges, thr = failure_fraction(val.auc, val.diag[:, DIAGNOSTIC_NAMES.index("a_mono")])
    write_rows(os.path.join(out, "failure_fraction.csv"), [
        {"primitive": labels[p], "bin": j, "lo": float(fedges[j]), "hi": float(fedges[j + 1]),
         "fraction": float(frac[p, j])} for p in range(len(lib)) for j in range(frac.shape[1])],
        ["primitive", "bin", "lo", "hi", "fraction"])
    heatmap(frac, os.path.join(out, "failure_fraction.svg"), row_names=labels,
            col_names=[f"{e:.2f}" for e in fedges[:-1]], vmin=0, vmax=1,
            title=f"failure fraction (AUC > {thr:.3g}) by a_mono decile", xlabel="a_mono bin start")

    ret = retention_scores(val.auc)
    write_rows(os.path.join(out, "retention.csv"), [
        {"game_id": gid, **{f"r_{labels[p]}": float(r[p]) for p in range(len(lib))}} for gid, r in zip(val.ids, ret)])

    stats = {"pca_explained": [float(v) for v in pca.explained], "n_val": len(val)}
    k = min(args.k, len(val) - 1)
    if k >= 1:
        nb = SpatialField.build(pca.coords, report.soft_auc, k).neighbors
        stats["morans_i_soft_auc"] = morans_i(SpatialField(pca.coords, report.soft_auc, nb))
        stats["morans_i_oracle_auc"] = morans_i(SpatialField(pca.coords, val.auc_best, nb))
        if rm is not None:
            w = softmax(net.forward(val.features)[1], net.beta)
            syn = synth_solve_batch(val.a, val.b, w, rcfg, rm, z_hat=report.z_hat, diag=val.diag,
                                    hardness=val.hardness)
            act = syn.gate * syn.residual_l2.mean(axis=1)
            stats["morans_i_residual_activation"] = morans_i(SpatialField(pca.coords, act, nb))
            d = syn.auc - report.soft_auc
            stats["residual_improved_fraction"] = float(np.mean(d < -0.005))
            stats["residual_max_inf_norm"] = float(syn.residual_inf.max()) if syn.residual_inf.size else 0.0
    lab, keep = probe_labels(report.soft_auc, val.auc_best)
    stats["probe_n_ours_better"] = int(lab[keep].sum())
    stats["probe_n_oracle_better"] = int((1 - lab[keep]).sum())
    if min(stats["probe_n_ours_better"], stats["probe_n_oracle_better"]) >= 5:
        stats["probe_roc_auc"] = linear_probe(report.z_hat[keep], lab[keep], seed=args.seed)
    write_json(os.path.join(out, "stats.json"), stats)
    write_manifest(out, args, arts)
    for r in report.rows:
        gc = "" if r["gap_closure"] is None else f"  gap closure {100 * r['gap_closure']:.1f}%"
        print(f"{r['method']:>16}  auc {r['val_auc']:.4f}  terminal {r['val_terminal']:.4f}{gc}")
    return EXIT_OK


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="solvercarto", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=0)

    def rollout_flags(sp):
        sp.add_argument("--horizon", type=int, default=60)
        sp.add_argument("--eta", type=float, default=0.05)

    def data_flags(sp):
        sp.add_argument("--corpus", required=True, help="corpus JSONL written by gen")
        sp.add_argument("--scores", required=True, help="scores.csv written by score")
        sp.add_argument("--split", help="split JSON (default: split.json beside the corpus)")

    g = sub.add_parser("gen", help="generate a coverage-sampled corpus")
    common(g)
    g.add_argument("--families", default=",".join(f.value for f in Family))
    g.add_argument("--count", type=int, default=4000)
    g.add_argument("--bins", type=int, default=10)
    g.add_argument("--target", type=int, default=50, help="target games per pairwise bin")
    g.add_argument("--max-rejects", type=int, default=200_000)
    g.add_argument("--noise", type=float, default=0.2)
    g.add_argument("--train-frac", type=float, default=0.8)
    g.add_argument("--unfiltered", action="store_true", help="accept every draw (coverage control)")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("score", help="score every primitive on every game (resumable)")
    common(s)
    rollout_flags(s)
    s.add_argument("--corpus", required=True)
    s.add_argument("--chunk", type=int, default=256)
    s.set_defaults(func=cmd_score)

    t = sub.add_parser("train", help="train the routing net or the residual corrector")
    common(t)
    rollout_flags(t)
    data_flags(t)
    t.add_argument("--phase", required=True, choices=["phase1", "phase2", "residual"])
    t.add_argument("--epochs", type=int, help="epochs (SPSA iterations for the residual phase)")
    t.add_argument("--lr", type=float)
    t.add_argument("--checkpoint", help="input routing checkpoint (phase2, residual)")
    t.add_argument("--residual", help="input residual checkpoint to continue from")
    t.add_argument("--lambda-max", type=float, default=0.05)
    t.add_argument("--ablate", choices=[a for a in ABLATIONS if a], default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate routing against oracle and fixed primitives; emit maps")
    common(e)
    rollout_flags(e)
    data_flags(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--residual")
    e.add_argument("--bins", type=int, default=10)
    e.add_argument("--n-boot", type=int, default=1000)
    e.add_argument("--k", type=int, default=10, help="neighbours for Moran's I")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except CorpusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ENV
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
