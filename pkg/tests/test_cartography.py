import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from solvercarto.cartography import (
    SpatialField,
    evaluate,
    failure_fraction,
    failure_threshold,
    gap_closure,
    knn_graph,
    linear_probe,
    morans_i,
    pca2,
    probe_labels,
    retention_scores,
    roc_auc,
    winner_cell,
    winner_map,
)
from solvercarto.dataset import Family, GeneratorSpec, generate_family
from solvercarto.network import RoutingNet
from solvercarto.primitives import RolloutConfig, score_batch
from solvercarto.training import TrainingSet

reals = st.floats(-10, 10, allow_nan=False)


def trapezoid_roc(labels, scores):
    """ROC area by sweeping every distinct threshold and integrating with trapezoids."""
    y = np.asarray(labels).astype(bool)
    thr = np.unique(scores)[::-1]
    tpr = [0.0] + [np.mean(scores[y] >= t) for t in thr]
    fpr = [0.0] + [np.mean(scores[~y] >= t) for t in thr]
    return float(np.sum(np.diff(fpr) * (np.array(tpr[1:]) + np.array(tpr[:-1])) / 2))


def grid(side):
    i, j = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return np.stack([i.ravel(), j.ravel()], axis=1).astype(float)


class TestGapClosure:
    def test_reference_ratio(self):
        assert gap_closure(0.0291, 0.0360, 0.0273) == pytest.approx(0.793, abs=1e-3)

    def test_endpoints(self):
        assert gap_closure(0.02, 0.05, 0.02) == 1.0
        assert gap_closure(0.05, 0.05, 0.02) == 0.0

    def test_degenerate(self):
        assert gap_closure(0.1, 0.3, 0.3) is None

    @given(reals, reals, reals, reals)
    def test_shift_invariance(self, m, bf, o, c):
        g = gap_closure(m, bf, o)
        if g is not None and abs(bf - o) > 1e-3:
            assert gap_closure(m + c, bf + c, o + c) == pytest.approx(g, rel=1e-9, abs=1e-9)


class TestRetention:
    def test_examples(self):
        r = retention_scores(np.array([[0.1, 0.2, 0.1], [0.3, 0.3, 0.3]]))
        assert r[0, 0] == 1.0 and r[0, 2] == 1.0
        assert r[0, 1] == pytest.approx(0.5, abs=1e-5)
        assert np.all(r[1] == 1.0)

    @given(st.lists(st.floats(0, 4), min_size=2, max_size=8))
    def test_range(self, auc):
        r = retention_scores(np.array([auc]))
        assert np.all(r > 0) and np.all(r <= 1) and r.max() == 1.0


class TestFailureFraction:
    def test_percentile_convention(self):
        assert failure_threshold(np.array([[1.0, 2.0], [3.0, 4.0]])) == 3.25

    def test_constant_scores_never_fail(self):
        frac, _, thr = failure_fraction(np.full((40, 1), 0.3), np.arange(40.0))
        assert thr == 0.3 and np.all(frac == 0)

    def test_one_bad_primitive(self, rng):
        auc = np.full((500, 8), 0.1)
        auc[:, 5] = 1.0
        frac, edges, _ = failure_fraction(auc, rng.normal(size=500))
        assert len(edges) == 11
        np.testing.assert_array_equal(frac[5], 1.0)
        assert np.all(np.delete(frac, 5, axis=0) == 0)

    def test_empty_bins_are_missing(self):
        frac, _, _ = failure_fraction(np.array([[0.1, 0.2], [0.3, 0.4]]), np.array([0.0, 3.0]),
                                      edges=np.array([0.0, 1.0, 2.0, 3.0]))
        assert np.all(np.isnan(frac[:, 1])) and not np.any(np.isnan(frac[:, [0, 2]]))

    def test_empty(self):
        with pytest.raises(ValueError):
            failure_fraction(np.zeros((0, 3)), np.zeros(0))


class TestWinnerMap:
    def test_strict_winner(self, rng):
        auc = rng.uniform(0.5, 1.0, size=(30, 7))
        auc[:, 2] = auc.min(axis=1) - 0.1
        cell = winner_cell(auc, 1000, rng)
        assert cell.status == "winner" and cell.winner == 2

    def test_duplicate_primitives_tie(self, rng):
        auc = rng.uniform(0.5, 1.0, size=(30, 7))
        auc[:, 1] = 0.1
        auc[:, 4] = 0.1
        assert winner_cell(auc, 1000, rng).tie

    def test_alternating_differences_tie(self, rng):
        auc = np.full((40, 3), 0.9)
        auc[:, 0] = 0.3
        auc[:, 1] = 0.3 + np.where(np.arange(40) % 2 == 0, 0.05, -0.05)
        assert winner_cell(auc, 1000, rng).tie

    def test_small_bins_are_insufficient(self, rng):
        assert winner_cell(rng.uniform(size=(1, 7)), 100, rng).status == "insufficient"

    def test_winner_matches_brute_force(self, rng):
        coords = rng.uniform(size=(600, 2))
        auc = rng.uniform(size=(600, 5)) + coords[:, :1] * np.arange(5)
        edges = np.linspace(0, 1, 5)
        cells = winner_map(auc, coords, edges, edges, n_boot=50)
        for i in range(4):
            for j in range(4):
                sel = [(edges[i] <= x < edges[i + 1] or (i == 3 and x == 1)) and
                       (edges[j] <= y < edges[j + 1] or (j == 3 and y == 1)) for x, y in coords]
                sub = auc[np.array(sel)]
                assert cells[i][j].n == len(sub)
                if len(sub) >= 2:
                    assert cells[i][j].winner == int(np.argmin(sub.mean(axis=0)))


class TestPCA:
    def test_collinear(self, rng):
        t = rng.normal(size=(200, 1))
        res = pca2(t * np.array([[1.0, -2.0, 0.5, 3.0, 1.0]]) + 4.0)
        np.testing.assert_allclose(res.explained, [1.0, 0.0], atol=1e-9)

    def test_isotropic(self, rng):
        res = pca2(rng.normal(size=(10_000, 2)))
        np.testing.assert_allclose(res.explained, [0.5, 0.5], atol=0.03)

    def test_duplicates_share_coordinates(self, rng):
        x = rng.normal(size=(50, 4))
        c = pca2(np.concatenate([x, x])).coords
        np.testing.assert_array_equal(c[:50], c[50:])

    def test_components_and_signs(self, rng):
        x = rng.normal(size=(300, 5)) @ rng.normal(size=(5, 5))
        res = pca2(x)
        np.testing.assert_allclose(res.components.T @ res.components, np.eye(2), atol=1e-9)
        assert np.all((0 <= res.explained) & (res.explained <= 1)) and res.explained.sum() <= 1 + 1e-12
        for c in range(2):
            col = res.components[:, c]
            assert col[np.argmax(np.abs(col))] > 0
        ref = np.sort(np.linalg.eigvalsh(np.cov(x.T)))[::-1]
        np.testing.assert_allclose(res.explained, ref[:2] / ref.sum(), atol=1e-9)
        np.testing.assert_allclose(res.transform(x), res.coords, atol=1e-9)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            pca2(np.zeros((2, 3)))


class TestMorans:
    def test_smooth_field(self):
        p = grid(40)
        assert morans_i(SpatialField.build(p, p[:, 0] + 0.5 * p[:, 1])) > 0.5

    def test_checkerboard(self):
        p = grid(40)
        v = np.where((p[:, 0] + p[:, 1]) % 2 == 0, 1.0, -1.0)
        assert morans_i(SpatialField.build(p, v, k=4)) < 0

    def test_permutation_null(self, rng):
        p = rng.uniform(size=(2000, 2))
        v = rng.permutation(p[:, 0] + p[:, 1])
        assert abs(morans_i(SpatialField.build(p, v))) < 0.05

    def test_constant_field(self, rng):
        assert morans_i(SpatialField.build(rng.uniform(size=(30, 2)), np.ones(30))) == 0.0

    def test_too_few_points(self, rng):
        with pytest.raises(ValueError):
            knn_graph(rng.uniform(size=(10, 2)), 10)

    def test_neighbours_exclude_self(self, rng):
        nb = knn_graph(rng.uniform(size=(50, 2)), 10)
        assert not np.any(nb == np.arange(50)[:, None])

    @pytest.mark.parametrize("seed", range(5))
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.uniform(size=(300, 2))
        for v in (rng.normal(size=300), p[:, 0] ** 2, np.sign(np.sin(8 * p[:, 0]))):
            assert -1.1 <= morans_i(SpatialField.build(p, v)) <= 1.1


class TestProbe:
    def test_rank_statistic_matches_trapezoids(self, rng):
        for _ in range(100):
            n = int(rng.integers(4, 60))
            y = rng.integers(0, 2, size=n)
            y[:2] = [0, 1]
            s = np.round(rng.normal(size=n), 1)
            assert roc_auc(y, s) == pytest.approx(trapezoid_roc(y, s), abs=1e-9)

    def test_separable(self, rng):
        z = rng.uniform(size=(2000, 5))
        assert linear_probe(z, (z[:, 0] > 0.5).astype(int)) > 0.99

    def test_null(self, rng):
        z = rng.uniform(size=(2000, 5))
        assert abs(linear_probe(z, rng.integers(0, 2, size=2000)) - 0.5) < 0.05

    def test_noisy_threshold(self, rng):
        z = rng.uniform(size=(2000, 5))
        y = (z[:, 0] > 0.5).astype(int)
        flip = rng.uniform(size=2000) < 0.1
        y[flip] = 1 - y[flip]
        assert abs(linear_probe(z, y) - 0.9) < 0.05

    def test_single_class(self, rng):
        with pytest.raises(ValueError):
            linear_probe(rng.uniform(size=(20, 5)), np.ones(20))

    def test_labels_drop_ties(self):
        labels, keep = probe_labels(np.array([0.1, 0.2, 0.30005]), np.array([0.2, 0.1, 0.3]))
        assert list(labels[keep]) == [1, 0] and not keep[2]


class TestEvaluate:
    def test_report_rows(self):
        games = []
        for fam in (Family.ZERO_SUM, Family.POTENTIAL, Family.PERTURBED):
            games += list(generate_family(GeneratorSpec(fam, seed=2, count=10)))
        rcfg = RolloutConfig(horizon=20)
        data = TrainingSet.build(games, score_batch(games, rcfg))
        rep = evaluate(RoutingNet(seed=0), data, rcfg)
        methods = [r["method"] for r in rep.rows]
        assert methods[:3] == ["oracle", "soft", "top1"] and methods[-1] == "equal_weight"
        assert rep.row("oracle")["gap_closure"] == 1.0
        assert rep.row(rep.best_fixed)["gap_closure"] == 0.0
        assert rep.row("oracle")["val_auc"] <= min(r["val_auc"] for r in rep.rows)
        assert len(rep.per_game) == len(games)
