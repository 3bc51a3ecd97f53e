"""
Tests for matched score tables: parsing, splitting, correlation, synthesis
"""

import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from modules.cascade import CascadeError, calibrate
from modules.scores import (
    Label, MatchedScoreTable, MatcherMarginals, ScoreSet, ScoreTableError, SynthSpec,
    SynthSpecError, class_counts, column_score_set, correlation_matrix, load_score_matrices,
    parse_score_table, split_table, synth_generate, write_score_table,
)


def _random_table(n_genuine, n_impostor, n_matchers=2, seed=0):
    rng = np.random.default_rng(seed)
    n = n_genuine + n_impostor
    return MatchedScoreTable(
        tuple(f"m{j + 1}" for j in range(n_matchers)),
        np.array([f"r{i}" for i in range(n)], dtype=object),
        np.arange(n) < n_genuine,
        rng.normal(size=(n, n_matchers)),
    )


class TestParseScoreTable:

    def test_single_row(self):
        table = parse_score_table("id,label,m1,m2\na,1,0.9,0.8\n")
        assert table.matcher_names == ('m1', 'm2')
        assert len(table) == 1
        row = table.rows[0]
        assert row.comparison_id == 'a'
        assert row.label == Label.GENUINE
        assert row.scores == (0.9, 0.8)

    def test_leading_byte_order_mark_is_ignored(self):
        table = parse_score_table("\ufeffid,label,m1\na,1,0.5\nb,0,0.1\n")
        assert table.matcher_names == ('m1',)
        assert len(table) == 2

    def test_unknown_label_reports_line(self):
        with pytest.raises(ScoreTableError, match='unknown label') as info:
            parse_score_table("id,label,m1\na,1,0.5\nb,2,0.4\n")
        assert info.value.line == 3

    def test_malformed_header(self):
        with pytest.raises(ScoreTableError, match='malformed header') as info:
            parse_score_table("identifier,label,m1\na,1,0.5\n")
        assert info.value.line == 1

    def test_header_needs_a_matcher(self):
        with pytest.raises(ScoreTableError, match='malformed header'):
            parse_score_table("id,label\na,1\n")

    def test_duplicate_matcher_in_header(self):
        with pytest.raises(ScoreTableError, match='duplicate'):
            parse_score_table("id,label,m1,m1\na,1,0.5,0.5\n")

    def test_ragged_row(self):
        with pytest.raises(ScoreTableError, match='ragged row') as info:
            parse_score_table("id,label,m1,m2\na,1,0.5,0.6\nb,0,0.1\n")
        assert info.value.line == 3

    def test_non_numeric_score(self):
        with pytest.raises(ScoreTableError, match='non-numeric') as info:
            parse_score_table("id,label,m1\na,0,high\n")
        assert info.value.line == 2

    def test_missing_score_rejected(self):
        with pytest.raises(ScoreTableError, match='non-numeric'):
            parse_score_table("id,label,m1,m2\na,0,0.3,\n")

    def test_non_finite_score_rejected(self):
        with pytest.raises(ScoreTableError, match='non-finite'):
            parse_score_table("id,label,m1\na,0,nan\n")

    def test_blank_lines_are_skipped(self):
        table = parse_score_table("id,label,m1\n\na,1,0.5\n\nb,0,0.1\n")
        assert len(table) == 2

    def test_duplicate_ids_allowed(self):
        table = parse_score_table("id,label,m1\nx,1,0.5\nx,1,0.5\n")
        assert len(table) == 2

    def test_fixture_matches_hand_extraction(self, three_matcher_table):
        expected = {
            'm1': ([0.9, 0.6, 0.75], [0.2, 0.65, 0.1]),
            'm2': ([0.8, 0.85, 0.4], [0.3, 0.1, 0.5]),
            'm3': ([0.7, 0.95, 0.9], [0.1, 0.35, 0.2]),
        }
        assert three_matcher_table.matcher_names == ('m1', 'm2', 'm3')
        for matcher, (genuine, impostor) in expected.items():
            scores = column_score_set(three_matcher_table, matcher)
            assert sorted(scores.genuine.tolist()) == sorted(genuine)
            assert sorted(scores.impostor.tolist()) == sorted(impostor)


class TestWriteScoreTable:

    def test_fixture_round_trip(self, three_matcher_table):
        assert parse_score_table(write_score_table(three_matcher_table)) == three_matcher_table

    def test_full_precision_round_trip(self):
        table = _random_table(7, 13, n_matchers=3, seed=11)
        assert parse_score_table(write_score_table(table)) == table

    def test_header(self, three_matcher_table):
        assert write_score_table(three_matcher_table).splitlines()[0] == 'id,label,m1,m2,m3'


class TestTableInvariants:

    def test_rejects_non_finite_scores(self):
        with pytest.raises(ScoreTableError, match='finite'):
            MatchedScoreTable(('m1',), ['a'], [True], [[np.inf]])

    def test_rejects_duplicate_names(self):
        with pytest.raises(ScoreTableError, match='duplicate'):
            MatchedScoreTable(('m1', 'm1'), ['a'], [True], [[0.1, 0.2]])

    def test_rejects_empty_name(self):
        with pytest.raises(ScoreTableError, match='non-empty'):
            MatchedScoreTable(('m1', ' '), ['a'], [True], [[0.1, 0.2]])

    def test_arrays_are_read_only(self, three_matcher_table):
        with pytest.raises(ValueError):
            three_matcher_table.scores[0, 0] = 1.0

    def test_fingerprint_is_stable_and_sensitive(self, three_matcher_table):
        again = parse_score_table(write_score_table(three_matcher_table))
        assert again.fingerprint() == three_matcher_table.fingerprint()
        scores = three_matcher_table.scores.copy()
        scores[0, 0] += 1e-9
        changed = MatchedScoreTable(three_matcher_table.matcher_names, three_matcher_table.ids,
                                    three_matcher_table.genuine, scores)
        assert changed.fingerprint() != three_matcher_table.fingerprint()


class TestSplitTable:

    def test_published_protocol_counts(self):
        n_gen, n_imp = 517, 266_256
        table = MatchedScoreTable(
            ('face',),
            np.array([f"c{i}" for i in range(n_gen + n_imp)], dtype=object),
            np.arange(n_gen + n_imp) < n_gen,
            np.zeros((n_gen + n_imp, 1)),
        )
        train, probe = split_table(table, 100, 51_600, seed=1)
        assert class_counts(train) == {'genuine': 100, 'impostor': 51_600}
        assert class_counts(probe) == {'genuine': 417, 'impostor': 214_656}

    def test_partition_is_disjoint_and_complete(self):
        table = _random_table(50, 200)
        train, probe = split_table(table, 20, 80, seed=3)
        train_ids, probe_ids = set(train.ids), set(probe.ids)
        assert not train_ids & probe_ids
        assert train_ids | probe_ids == set(table.ids)
        assert class_counts(train) == {'genuine': 20, 'impostor': 80}

    def test_rows_keep_their_scores(self):
        table = _random_table(30, 60, seed=5)
        by_id = {row.comparison_id: row for row in table.rows}
        train, probe = split_table(table, 10, 10, seed=9)
        for row in train.rows + probe.rows:
            assert by_id[row.comparison_id] == row

    def test_deterministic_for_a_seed(self):
        table = _random_table(50, 200)
        first = split_table(table, 20, 80, seed=42)
        second = split_table(table, 20, 80, seed=42)
        assert first[0] == second[0] and first[1] == second[1]

    def test_different_seeds_give_different_partitions(self):
        table = _random_table(200, 2000)
        partitions = {tuple(split_table(table, 100, 1000, seed=s)[0].ids) for s in range(20)}
        assert len(partitions) == 20

    def test_insufficient_rows(self):
        table = _random_table(5, 10)
        with pytest.raises(ScoreTableError, match='insufficient genuine'):
            split_table(table, 6, 5, seed=0)
        with pytest.raises(ScoreTableError, match='insufficient impostor'):
            split_table(table, 5, 11, seed=0)

    def test_full_request_leaves_empty_probe(self):
        table = _random_table(5, 10)
        train, probe = split_table(table, 5, 10, seed=0)
        assert len(train) == 15 and len(probe) == 0
        with pytest.raises(CascadeError, match='both classes'):
            calibrate(probe, ['m1', 'm2'])


def _textbook_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / (sxx * syy) ** 0.5


class TestCorrelationMatrix:

    def test_identical_columns(self, fixture_path):
        with open(fixture_path('duplicate_columns.csv'), encoding='utf-8') as f:
            table = parse_score_table(f.read())
        corr = correlation_matrix(table)
        assert corr.value('face', 'face_copy') == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.diag(corr.entries) == 1.0)

    def test_negated_column(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=40)
        table = MatchedScoreTable(('a', 'b'), [f"r{i}" for i in range(40)],
                                  np.arange(40) < 20, np.column_stack([x, -x]))
        assert correlation_matrix(table).value('a', 'b') == pytest.approx(-1.0, abs=1e-12)

    def test_matches_textbook_formula(self):
        table = _random_table(20, 30, n_matchers=3, seed=17)
        corr = correlation_matrix(table)
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                expected = _textbook_pearson(table.scores[:, i].tolist(), table.scores[:, j].tolist())
                assert abs(corr.entries[i, j] - expected) < 1e-12

    def test_exactly_symmetric(self):
        corr = correlation_matrix(_random_table(25, 25, n_matchers=4, seed=8))
        assert np.array_equal(corr.entries, corr.entries.T)

    def test_per_class_matrices(self):
        table = _random_table(20, 30, seed=4)
        genuine = correlation_matrix(table, Label.GENUINE)
        rows = table.scores[table.genuine]
        assert genuine.value('m1', 'm2') == pytest.approx(
            _textbook_pearson(rows[:, 0].tolist(), rows[:, 1].tolist()), abs=1e-12)
        assert genuine.pooling == 'genuine'
        assert correlation_matrix(table).pooling == 'pooled'

    @given(scale=st.floats(0.01, 100.0), shift=st.floats(-100.0, 100.0))
    @settings(max_examples=50, deadline=None)
    def test_affine_invariance(self, scale, shift):
        table = _random_table(15, 15, seed=21)
        scores = table.scores.copy()
        scores[:, 0] = scale * scores[:, 0] + shift
        moved = MatchedScoreTable(table.matcher_names, table.ids, table.genuine, scores)
        assert correlation_matrix(moved).value('m1', 'm2') == pytest.approx(
            correlation_matrix(table).value('m1', 'm2'), abs=1e-9)

    def test_needs_two_rows(self):
        with pytest.raises(ScoreTableError, match='at least 2 rows'):
            correlation_matrix(_random_table(1, 0))

    def test_zero_variance_column(self):
        table = MatchedScoreTable(('a', 'b'), ['x', 'y', 'z'], [True, False, True],
                                  [[0.5, 0.1], [0.5, 0.2], [0.5, 0.9]])
        with pytest.raises(ScoreTableError, match="zero-variance column 'a'"):
            correlation_matrix(table)


class TestColumnScoreSet:

    def test_two_rows(self):
        table = MatchedScoreTable(('m1',), ['g', 'i'], [True, False], [[0.9], [0.1]])
        scores = column_score_set(table, 'm1')
        assert scores.genuine.tolist() == [0.9]
        assert scores.impostor.tolist() == [0.1]

    def test_unknown_matcher(self, three_matcher_table):
        with pytest.raises(ScoreTableError, match='unknown matcher'):
            column_score_set(three_matcher_table, 'iris')

    def test_sizes_equal_class_counts(self, three_matcher_table):
        scores = column_score_set(three_matcher_table, 'm2')
        assert scores.genuine.size == three_matcher_table.n_genuine == 3
        assert scores.impostor.size == three_matcher_table.n_impostor == 3

    def test_score_set_needs_both_classes(self):
        with pytest.raises(ScoreTableError, match='both classes'):
            ScoreSet([0.5], [])


def _null_marginals(n):
    return [MatcherMarginals(f"m{i + 1}", 0.0, 1.0, 0.0, 1.0) for i in range(n)]


class TestSynthGenerate:

    def test_identity_correlation(self):
        spec = SynthSpec.equicorrelated(_null_marginals(3), 0.0, 50_000, 50_000)
        corr = correlation_matrix(synth_generate(spec, seed=1))
        off_diagonal = corr.entries[~np.eye(3, dtype=bool)]
        assert np.all(np.abs(off_diagonal) < 0.02)

    def test_target_correlation(self):
        spec = SynthSpec.equicorrelated(_null_marginals(2), 0.7, 50_000, 50_000)
        corr = correlation_matrix(synth_generate(spec, seed=2))
        assert corr.value('m1', 'm2') == pytest.approx(0.7, abs=0.02)

    def test_marginal_parameters(self, gaussian_spec):
        table = synth_generate(gaussian_spec([3.0], n_genuine=20_000, n_impostor=20_000), seed=3)
        scores = column_score_set(table, 'm1')
        assert scores.genuine.mean() == pytest.approx(3.0, abs=0.05)
        assert scores.impostor.mean() == pytest.approx(0.0, abs=0.05)
        assert scores.genuine.std() == pytest.approx(1.0, abs=0.05)

    def test_independent_pairs_stay_within_four_over_root_n(self):
        n = 2000
        spec = SynthSpec.equicorrelated(_null_marginals(3), 0.0, n // 2, n // 2)
        inside = 0
        total = 0
        for seed in range(100):
            entries = correlation_matrix(synth_generate(spec, seed)).entries
            for i, j in ((0, 1), (0, 2), (1, 2)):
                inside += abs(entries[i, j]) < 4 / np.sqrt(n)
                total += 1
        assert inside / total >= 0.99

    def test_deterministic_per_seed(self, gaussian_spec):
        spec = gaussian_spec([2.0, 3.0], rho=0.3, n_genuine=50, n_impostor=200)
        assert synth_generate(spec, seed=9) == synth_generate(spec, seed=9)
        assert synth_generate(spec, seed=9) != synth_generate(spec, seed=10)

    def test_layout_and_ids(self, gaussian_spec):
        table = synth_generate(gaussian_spec([2.0], n_genuine=2, n_impostor=3), seed=0)
        assert list(table.ids) == ['g000000', 'g000001', 'i000000', 'i000001', 'i000002']
        assert table.genuine.tolist() == [True, True, False, False, False]

    def test_fully_correlated_duplicates_are_allowed(self):
        spec = SynthSpec.equicorrelated(_null_marginals(2), 1.0, 100, 100)
        table = synth_generate(spec, seed=4)
        np.testing.assert_allclose(table.scores[:, 0], table.scores[:, 1], atol=1e-6)

    def test_non_psd_correlation(self):
        corr = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
        with pytest.raises(SynthSpecError, match='positive semidefinite'):
            SynthSpec(tuple(_null_marginals(3)), corr)

    def test_non_positive_std(self):
        with pytest.raises(SynthSpecError, match='std-devs'):
            SynthSpec((MatcherMarginals('m1', 1.0, 0.0, 0.0, 1.0),), np.eye(1))

    def test_single_genuine_row_warns_downstream(self, gaussian_spec, caplog):
        table = synth_generate(gaussian_spec([3.0, 4.0], n_genuine=1, n_impostor=500), seed=5)
        assert table.n_genuine == 1
        with caplog.at_level(logging.WARNING):
            calibrate(table, ['m1', 'm2'])
        assert 'Small training sample' in caplog.text


class TestSynthSpecDocuments:

    def test_from_json_with_scalar_correlation(self, fixture_path):
        with open(fixture_path('synth_spec.json'), encoding='utf-8') as f:
            spec = SynthSpec.from_json(f.read())
        assert spec.matcher_names == ('weak', 'medium', 'strong', 'extra')
        assert np.array_equal(spec.genuine_correlation, np.eye(4))
        assert spec.impostor_correlation is spec.genuine_correlation
        assert (spec.n_genuine, spec.n_impostor) == (400, 4000)

    def test_dict_round_trip(self, gaussian_spec):
        spec = gaussian_spec([1.0, 2.0], rho=0.4, n_genuine=10, n_impostor=20)
        again = SynthSpec.from_dict(spec.to_dict())
        assert again.matchers == spec.matchers
        assert np.array_equal(again.genuine_correlation, spec.genuine_correlation)

    def test_separate_impostor_correlation(self):
        doc = {
            'matchers': [m.to_dict() for m in _null_marginals(2)],
            'correlation': {'genuine': [[1, 0.5], [0.5, 1]], 'impostor': [[1, 0.0], [0.0, 1]]},
            'n_genuine': 5, 'n_impostor': 5,
        }
        spec = SynthSpec.from_dict(doc)
        assert spec.genuine_correlation[0, 1] == 0.5
        assert spec.impostor_correlation[0, 1] == 0.0

    def test_invalid_document(self):
        with pytest.raises(SynthSpecError, match='invalid'):
            SynthSpec.from_dict({'matchers': [{'name': 'm1'}]})
        with pytest.raises(SynthSpecError, match='not valid JSON'):
            SynthSpec.from_json('{matchers')


class TestLoadScoreMatrices:

    def test_diagonal_is_genuine(self, tmp_path):
        (tmp_path / 'face.txt').write_text("0.9 0.1\n0.2 0.8\n")
        (tmp_path / 'finger.txt').write_text("0.7,0.3\n0.4,0.6\n")
        table = load_score_matrices({'face': str(tmp_path / 'face.txt'),
                                     'finger': str(tmp_path / 'finger.txt')})
        assert table.matcher_names == ('face', 'finger')
        assert list(table.ids) == ['p0_g0', 'p0_g1', 'p1_g0', 'p1_g1']
        assert table.genuine.tolist() == [True, False, False, True]
        assert table.scores[:, 1].tolist() == [0.7, 0.3, 0.4, 0.6]

    def test_shape_mismatch(self, tmp_path):
        (tmp_path / 'a.txt').write_text("1 2\n3 4\n")
        (tmp_path / 'b.txt').write_text("1 2 3\n4 5 6\n7 8 9\n")
        with pytest.raises(ScoreTableError, match='different shapes'):
            load_score_matrices({'a': str(tmp_path / 'a.txt'), 'b': str(tmp_path / 'b.txt')})

    def test_undecodable_file(self, tmp_path):
        (tmp_path / 'a.txt').write_bytes(b'0.9 0.1\n0.2 \xff\n')
        with pytest.raises(ScoreTableError, match='not valid UTF-8'):
            load_score_matrices({'a': str(tmp_path / 'a.txt')})

    def test_non_square(self, tmp_path):
        (tmp_path / 'a.txt').write_text("1 2 3\n4 5 6\n")
        with pytest.raises(ScoreTableError, match='square'):
            load_score_matrices({'a': str(tmp_path / 'a.txt')})
