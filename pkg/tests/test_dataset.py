import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solvercarto.dataset import (
    FAMILY_ORDER,
    CorpusError,
    CoverageConfig,
    Family,
    GeneratorSpec,
    coverage_sample,
    dedup,
    dedup_and_split,
    family_specs,
    generate_family,
    interpolated_game,
    payoff_hash,
    read_corpus,
    write_corpus,
    write_fill_report,
)
from solvercarto.diagnostics import DIAGNOSTIC_NAMES, structure_diagnostics, structure_diagnostics_batch
from solvercarto.game import PayoffGame, center_normalize

ZS = DIAGNOSTIC_NAMES.index("z_zs")


def take(family, count, seed=0, noise=0.2):
    return list(generate_family(GeneratorSpec(family, seed=seed, count=count, noise=noise)))


class TestGenerators:
    @pytest.mark.parametrize("kw", [{"count": 0}, {"noise": -0.1}, {"noise": 1.5}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            GeneratorSpec(Family.ZERO_SUM, **kw)

    def test_bins_validation(self):
        with pytest.raises(ValueError):
            CoverageConfig(bins_per_axis=1)

    def test_interpolation_endpoints(self):
        d0 = structure_diagnostics(interpolated_game(0.0))
        assert d0.z_zs == pytest.approx(1.0, abs=1e-12)
        assert d0.z_harm == pytest.approx(1.0, abs=1e-8)
        assert structure_diagnostics(interpolated_game(1.0)).z_pot == 1.0

    def test_zero_sum_family(self):
        d = structure_diagnostics_batch(*map(np.stack, zip(*[(g.a, g.b) for g in take(Family.ZERO_SUM, 300)])))
        np.testing.assert_allclose(d[:, ZS], 1.0, atol=1e-9)

    @pytest.mark.parametrize("family", FAMILY_ORDER)
    def test_outputs_are_normalised(self, family):
        for g in take(family, 50, seed=3):
            assert abs(g.a.mean()) < 1e-9 and abs(g.b.mean()) < 1e-9
            assert 1e-8 <= max(np.abs(g.a).max(), np.abs(g.b).max()) <= 1 + 1e-9
            assert g.family == family.value

    def test_harmonic_is_skew_zero_sum(self):
        for g in take(Family.HARMONIC, 20):
            np.testing.assert_allclose(g.a, -g.a.T, atol=1e-12)
            np.testing.assert_allclose(g.b, -g.a, atol=1e-12)

    def test_streams_are_seeded(self):
        a = [g.to_json() for g in take(Family.PERTURBED, 20, seed=5)]
        b = [g.to_json() for g in take(Family.PERTURBED, 20, seed=5)]
        c = [g.to_json() for g in take(Family.PERTURBED, 20, seed=6)]
        assert a == b and a != c

    def test_family_parse(self):
        assert Family.parse("zs, harmonic,pert") == [Family.ZERO_SUM, Family.HARMONIC, Family.PERTURBED]

    def test_family_specs_split_total(self):
        specs = family_specs(FAMILY_ORDER, 20, seed=1)
        assert [s.count for s in specs] == [4, 4, 3, 3, 3, 3]


class TestCoverage:
    def test_single_zero_sum_family_occupies_one_zs_bin(self, tmp_path):
        res = coverage_sample([GeneratorSpec(Family.ZERO_SUM, count=200)], CoverageConfig(max_rejects=5000))
        p = res.pairs.index((DIAGNOSTIC_NAMES.index("z_pot"), ZS))
        occupied_zs = np.nonzero(res.counts[p].sum(axis=0))[0]
        assert list(occupied_zs) == [9]
        write_fill_report(tmp_path / "fill.csv", res)
        lines = (tmp_path / "fill.csv").read_text().splitlines()
        assert lines[0] == "axis_pair,bin_i,bin_j,count"
        zs_rows = [r.split(",") for r in lines[1:] if r.startswith("z_pot|z_zs")]
        assert {r[2] for r in zs_rows} == {"9"}

    def test_counting_bound(self):
        res = coverage_sample(family_specs(FAMILY_ORDER, 300, seed=0),
                              CoverageConfig(bins_per_axis=2, target_per_bin=1, max_rejects=3000,
                                             exhaust_after=200))
        assert len(res.games) <= int((res.counts > 0).sum())

    def test_unfiltered_control_accepts_everything(self):
        res = coverage_sample(family_specs(FAMILY_ORDER, 120, seed=0), filtered=False)
        assert len(res.games) == 120 and res.rejects == 0

    def test_needs_specs(self):
        with pytest.raises(ValueError):
            coverage_sample([])

    @pytest.mark.slow
    def test_filtered_run_is_more_even_than_control(self):
        specs = family_specs(FAMILY_ORDER, 4000, seed=0)
        filtered = coverage_sample(specs, CoverageConfig())
        control = coverage_sample(specs, filtered=False)
        assert len(filtered.games) > 3500
        assert filtered.occupied_cv < control.occupied_cv

    def test_deterministic(self):
        specs = family_specs(FAMILY_ORDER, 200, seed=4)
        cov = CoverageConfig(target_per_bin=5, max_rejects=4000, exhaust_after=300)
        a = [g.to_json() for g in coverage_sample(specs, cov).games]
        b = [g.to_json() for g in coverage_sample(specs, cov).games]
        assert a == b


class TestDedupAndSplit:
    def test_exact_duplicates(self, rng):
        g = center_normalize(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), id="a")
        h = PayoffGame(g.a.copy(), g.b.copy(), id="b")
        assert [x.id for x in dedup([g, h])] == ["a"]

    def test_ten_games_split_eight_two(self, rng):
        games = [center_normalize(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), id=str(i)) for i in range(10)]
        train, val = dedup_and_split(games, 0.8, seed=1)
        assert (len(train), len(val)) == (8, 2)
        again = dedup_and_split(games, 0.8, seed=1)
        assert [g.id for g in train] == [g.id for g in again[0]]
        ids = [g.id for g in train] + [g.id for g in val]
        assert sorted(ids) == sorted(g.id for g in games) and len(set(ids)) == 10

    @pytest.mark.parametrize("frac", [0.0, 1.0])
    def test_fraction_bounds(self, rng, frac):
        with pytest.raises(ValueError):
            dedup_and_split([PayoffGame(np.eye(2), np.eye(2))], frac)

    def test_empty(self):
        with pytest.raises(ValueError):
            dedup_and_split([])

    @settings(max_examples=30)
    @given(st.integers(2, 60), st.integers(0, 1000), st.floats(0.05, 0.95))
    def test_split_is_partition(self, n, seed, frac):
        rng = np.random.default_rng(seed)
        games = [PayoffGame(rng.uniform(-1, 1, (3, 3)), rng.uniform(-1, 1, (3, 3)), id=str(i)) for i in range(n)]
        train, val = dedup_and_split(games, frac, seed=seed)
        a, b = {g.id for g in train}, {g.id for g in val}
        assert not a & b and a | b == {g.id for g in games}
        assert len(train) == int(np.floor(frac * n))

    def test_no_hash_collisions(self):
        rng = np.random.default_rng(0)
        pay = rng.uniform(-1, 1, size=(100_000, 2, 3, 3))
        hashes = {payoff_hash(PayoffGame(p[0], p[1])) for p in pay}
        assert len(hashes) == len(pay)

    @given(st.integers(0, 17), st.floats(2.5e-6, 1e-3))
    def test_separated_games_hash_apart(self, entry, shift):
        base = np.linspace(-1, 1, 18).reshape(2, 3, 3)
        moved = base.copy().reshape(-1)
        moved[entry] += shift
        moved = moved.reshape(2, 3, 3)
        assert payoff_hash(PayoffGame(base[0], base[1])) != payoff_hash(PayoffGame(moved[0], moved[1]))


class TestCorpusFile:
    def test_round_trip_preserves_tags(self, tmp_path):
        games = take(Family.INTERPOLATED_RPS_POT, 5) + take(Family.PERTURBED, 5)
        write_corpus(tmp_path / "c.jsonl", games)
        back = read_corpus(tmp_path / "c.jsonl")
        assert [g.family for g in back] == [g.family for g in games]
        assert [g.gen_params for g in back] == [g.gen_params for g in games]
        for g, h in zip(games, back):
            assert g.a.tobytes() == h.a.tobytes() and g.b.tobytes() == h.b.tobytes()

    def test_malformed_line_reports_location(self, tmp_path):
        path = tmp_path / "c.jsonl"
        write_corpus(path, take(Family.ZERO_SUM, 2))
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(CorpusError, match=r"c\.jsonl:3"):
            read_corpus(path)
