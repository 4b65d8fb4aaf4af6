"""KS test, filtering, binning and pair scoring, with scipy and brute-force
enumeration as independent oracles."""

import itertools
import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkloc import localization as loc
from chunkloc.embeddings import EmbeddingTable, agreement_spec, synthesize_dataset
from chunkloc.grammar import MinimalPair, SentenceRecord, minimal_pairs
from chunkloc.model import MaskedEncoderModel, ModelConfig

rng = np.random.default_rng(7)


class TestKSStatistic:
    def test_identical_samples(self):
        r = loc.ks_two_sample([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.statistic == 0.0
        assert r.pvalue == 1.0

    def test_disjoint_supports(self):
        r = loc.ks_two_sample([1.0, 2.0], [3.0, 4.0])
        assert r.statistic == 1.0

    def test_interleaved_example(self):
        # ECDF sup-difference computed by hand: 0.5 at x in [1,2) and [3,4)
        r = loc.ks_two_sample([1.0, 3.0], [2.0, 4.0])
        assert abs(r.statistic - 0.5) < 1e-15

    def test_symmetry(self):
        for _ in range(20):
            a = rng.normal(size=rng.integers(2, 40))
            b = rng.normal(size=rng.integers(2, 40))
            assert loc.ks_statistic(a, b) == loc.ks_statistic(b, a)

    def test_monotone_transform_invariance(self):
        for _ in range(10):
            a = rng.normal(size=25)
            b = rng.normal(size=31)
            d0 = loc.ks_statistic(a, b)
            transform = lambda x: np.exp(0.5 * x) + x  # strictly increasing
            assert abs(loc.ks_statistic(transform(a), transform(b)) - d0) < 1e-12

    def test_statistic_matches_scipy(self):
        for trial in range(25):
            r = np.random.default_rng(trial)
            a = r.normal(size=r.integers(2, 60))
            b = r.normal(r.uniform(-1, 1), size=r.integers(2, 60))
            ours = loc.ks_two_sample(a, b)
            ref = scipy.stats.ks_2samp(a, b)
            assert abs(ours.statistic - ref.statistic) < 1e-12

    def test_pvalue_formula(self):
        # independent recomputation of the asymptotic formula
        a = rng.normal(size=50)
        b = rng.normal(0.4, size=70)
        r = loc.ks_two_sample(a, b)
        n_e = 50 * 70 / 120
        lam = (math.sqrt(n_e) + 0.12 + 0.11 / math.sqrt(n_e)) * r.statistic
        expected = 2 * sum((-1) ** (j - 1) * math.exp(-2 * j * j * lam * lam) for j in range(1, 80))
        assert abs(r.pvalue - expected) < 1e-12

    def test_pvalue_close_to_scipy_asymptotic(self):
        # scipy's asymptotic mode omits the small-sample correction term, so
        # agreement is approximate and improves with sample size
        for trial in range(5):
            r = np.random.default_rng(100 + trial)
            a = r.normal(size=400)
            b = r.normal(0.1, size=400)
            ours = loc.ks_two_sample(a, b).pvalue
            ref = scipy.stats.ks_2samp(a, b, method="asymp").pvalue
            assert abs(ours - ref) < 0.02

    def test_small_sample_error(self):
        with pytest.raises(ValueError):
            loc.ks_two_sample([1.0], [1.0, 2.0])

    def test_kolmogorov_sf_bounds(self):
        assert loc.kolmogorov_sf(0.0) == 1.0
        assert loc.kolmogorov_sf(5.0) < 1e-10
        lams = np.linspace(0.1, 3, 30)
        values = [loc.kolmogorov_sf(l) for l in lams]
        assert all(0 <= v <= 1 for v in values)
        assert all(values[i] >= values[i + 1] for i in range(len(values) - 1))


def brute_force_exact_pvalue(a, b):
    """Enumerate every assignment of pooled ranks to sample A."""
    a, b = np.asarray(a), np.asarray(b)
    observed = loc.ks_statistic(a, b)
    pooled = np.concatenate([a, b])
    n = len(a)
    total, at_least = 0, 0
    for combo in itertools.combinations(range(len(pooled)), n):
        mask = np.zeros(len(pooled), dtype=bool)
        mask[list(combo)] = True
        d = loc.ks_statistic(pooled[mask], pooled[~mask])
        total += 1
        if d >= observed - 1e-12:
            at_least += 1
    return at_least / total


class TestExactPvalue:
    @pytest.mark.parametrize("trial", range(6))
    def test_matches_brute_force_enumeration(self, trial):
        r = np.random.default_rng(trial)
        a = r.normal(size=5)
        b = r.normal(0.5, size=6)
        assert abs(loc.ks_exact_pvalue(a, b) - brute_force_exact_pvalue(a, b)) < 1e-12

    def test_identical_samples_pvalue_one(self):
        a = np.array([0.1, 0.5, 0.9])
        assert loc.ks_exact_pvalue(a, a + 1e-9) <= 1.0
        assert loc.ks_exact_pvalue(np.array([1.0, 2.0]), np.array([1.5, 2.5])) <= 1.0

    def test_asymptotic_tracks_exact(self):
        r = np.random.default_rng(9)
        a = r.normal(size=10)
        b = r.normal(1.2, size=10)
        exact = loc.ks_exact_pvalue(a, b)
        asym = loc.ks_two_sample(a, b).pvalue
        assert abs(exact - asym) < 0.05


class TestFilterNodes:
    def _collection(self, node_builders, n_per_pattern=30, patterns=("pa", "pb", "pc")):
        values = {}
        for pi, pattern in enumerate(patterns):
            cols = [b(pi, n_per_pattern) for b in node_builders]
            values[pattern] = np.column_stack(cols)
        return loc.ValueCollection(values, len(node_builders))

    def test_constant_node_removed_shifted_node_kept(self):
        r = np.random.default_rng(0)
        builders = [
            lambda pi, n: np.full(n, 3.14),                      # constant everywhere
            lambda pi, n: r.normal(size=n),                      # same distribution
            lambda pi, n: r.normal(10.0 * pi, 0.5, size=n),      # 10-sigma shifts
        ]
        result = loc.filter_nodes(self._collection(builders), alpha=0.05)
        assert 0 in result.removed
        assert 2 in result.kept
        assert result.min_pvalue[0] == 1.0
        assert result.min_pvalue[2] < 1e-6

    def test_decisions_independent_of_pattern_order(self):
        r = np.random.default_rng(1)
        builders = [lambda pi, n: r.normal(pi * 0.8, size=n) for _ in range(4)]
        coll = self._collection(builders)
        result1 = loc.filter_nodes(coll)
        reordered = loc.ValueCollection(
            dict(reversed(list(coll.values.items()))), coll.n_nodes
        )
        result2 = loc.filter_nodes(reordered)
        assert result1.kept == result2.kept
        assert np.allclose(result1.min_pvalue, result2.min_pvalue)

    def test_omnibus_mode(self):
        r = np.random.default_rng(2)
        builders = [
            lambda pi, n: r.normal(size=n),
            lambda pi, n: r.normal(5.0 if pi == 0 else 0.0, size=n),
        ]
        result = loc.filter_nodes(self._collection(builders), mode="omnibus")
        assert 1 in result.kept
        with pytest.raises(ValueError):
            loc.filter_nodes(self._collection(builders), mode="bogus")


class TestBinning:
    def test_boundary_values(self):
        counts, flag = loc.bin_histogram([0.0, 10.0], 0.0, 10.0, bins=100)
        assert counts[0] == 1 and counts[-1] == 1 and counts.sum() == 2
        assert not flag

    def test_uniform_grid_one_per_bin(self):
        lo, hi = 2.0, 7.0
        # bin midpoints: exactly one value per bin
        values = lo + (np.arange(100) + 0.5) * (hi - lo) / 100
        counts, _ = loc.bin_histogram(values, lo, hi, bins=100)
        assert np.all(counts == 1)

    @given(st.integers(0, 10_000))
    @settings(max_examples=25, deadline=None)
    def test_conservation(self, seed):
        r = np.random.default_rng(seed)
        values = r.normal(size=r.integers(1, 200))
        counts, _ = loc.bin_histogram(values, values.min(), values.max() + 1e-9)
        assert counts.sum() == len(values)

    def test_degenerate_range_flagged(self):
        counts, flag = loc.bin_histogram([5.0, 5.0, 5.0], 5.0, 5.0)
        assert flag and counts[0] == 3 and counts.sum() == 3

    def test_left_closed_convention(self):
        counts, _ = loc.bin_histogram([0.0, 0.1, 0.1000001], 0.0, 1.0, bins=10)
        assert counts[0] == 1 and counts[1] == 2


class TestPairScore:
    def test_identical_histograms(self):
        h = np.array([3, 1, 4, 1, 5])
        value, flagged = loc.pair_score(h, h)
        assert abs(value) < 1e-12 and not flagged

    def test_disjoint_support(self):
        value, _ = loc.pair_score([1, 1, 0, 0], [0, 0, 2, 3])
        assert abs(value - 1.0) < 1e-12

    def test_half_overlap_example(self):
        value, _ = loc.pair_score([1, 1, 0], [0, 1, 1])
        assert abs(value - 0.5) < 1e-12

    def test_scale_invariance(self):
        h1 = rng.integers(0, 50, size=100)
        h2 = rng.integers(0, 50, size=100)
        v1, _ = loc.pair_score(h1, h2)
        v2, _ = loc.pair_score(h1 * 7, h2 * 3)
        assert abs(v1 - v2) < 1e-12

    def test_zero_vector_flagged(self):
        value, flagged = loc.pair_score([0, 0, 0], [1, 2, 3])
        assert value == 1.0 and flagged

    def test_range_for_count_histograms(self):
        for _ in range(50):
            v, _ = loc.pair_score(rng.integers(0, 9, 40), rng.integers(0, 9, 40))
            assert -1e-12 <= v <= 1.0 + 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loc.pair_score([1, 2], [1, 2, 3])


@pytest.fixture(scope="module")
def pipeline():
    patterns = [
        "np-sg vp-sg", "np-pl vp-pl", "np-sg pp1-sg vp-sg", "np-sg pp1-pl vp-sg",
    ]
    records = []
    rid = 0
    for p in patterns:
        for _ in range(40):
            records.append(SentenceRecord(rid, f"sentence {rid}", p, "test"))
            rid += 1
    spec = agreement_spec(seed=2)
    table = EmbeddingTable(records, synthesize_dataset(records, spec))
    model = MaskedEncoderModel(ModelConfig(), seed=5)
    return model, records, table


class TestCollectAndReport:

    def test_collect_cardinality(self, pipeline):
        model, records, table = pipeline
        coll = loc.collect_values(model, records, table)
        assert coll.n_nodes == 240
        assert sum(v.shape[0] for v in coll.values.values()) == len(records)
        for v in coll.values.values():
            assert v.shape[1] == 240

    def test_collect_zero_weights_gives_bias(self, pipeline):
        _, records, table = pipeline
        model = MaskedEncoderModel(ModelConfig(), seed=0)
        model.enc_kernel.data[:] = 0.0
        model.enc_bias.data = np.arange(40, dtype=np.float64)
        coll = loc.collect_values(model, records, table)
        for v in coll.values.values():
            per_node = v.reshape(v.shape[0], 40, 6)
            assert np.allclose(per_node, np.arange(40)[None, :, None])

    def test_collect_deterministic(self, pipeline):
        model, records, table = pipeline
        c1 = loc.collect_values(model, records, table)
        c2 = loc.collect_values(model, records, table)
        for p in c1.values:
            assert np.array_equal(c1.values[p], c2.values[p])

    def test_report_covers_kept_nodes_times_pairs(self, pipeline, tmp_path):
        model, records, table = pipeline
        coll = loc.collect_values(model, records, table)
        pairs = [p for p in minimal_pairs("gram_number") if p.p1 in coll.values and p.p2 in coll.values]
        report = loc.build_report(model, coll, pairs)
        kept = set(report.filter_result.kept)
        seen = {(s.node, s.pattern1, s.pattern2) for s in report.scores}
        assert len(seen) == len(report.scores)  # each node appears once per pair
        assert {s.node for s in report.scores} <= kept
        expected = {(n, p.p1, p.p2) for n in kept for p in pairs}
        assert seen == expected

    def test_region_geometry_in_report(self, pipeline):
        model, records, table = pipeline
        coll = loc.collect_values(model, records, table)
        pairs = [p for p in minimal_pairs("gram_number") if p.p1 in coll.values and p.p2 in coll.values]
        report = loc.build_report(model, coll, pairs)
        assert report.region_shapes == [(15, 15), (15, 9), (15, 15), (15, 9), (2, 15), (2, 9)]

    def test_report_files(self, pipeline, tmp_path):
        model, records, table = pipeline
        coll = loc.collect_values(model, records, table)
        pairs = [p for p in minimal_pairs("gram_number") if p.p1 in coll.values and p.p2 in coll.values]
        report = loc.build_report(model, coll, pairs)
        spec = model.config.conv
        loc.write_score_table(report, tmp_path / "scores.csv", spec)
        loc.write_filter_table(report, tmp_path / "filter.csv")
        loc.write_aggregate_table(report, tmp_path / "agg.csv", spec)
        scores = (tmp_path / "scores.csv").read_text().splitlines()
        assert scores[0].startswith("node_id,channel,region_row,region_col")
        assert len(scores) - 1 == len(report.scores)
        filt = (tmp_path / "filter.csv").read_text().splitlines()
        assert filt[0] == "# alpha=0.05 mode=pairwise"
        assert len(filt) - 2 == 240
