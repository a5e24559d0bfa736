"""SRCC, the lower-triangular stream matrix, PSR/MPSR, exports."""

import numpy as np
import pytest
from scipy.stats import spearmanr

from contiq.core import QualitySample, TaskDataset
from contiq.metrics import (
    PSR_DENOMINATOR_FLOOR,
    MetricsRecord,
    MetricsWarning,
    SrccMatrix,
    empty_srcc_matrix,
    evaluate_stream,
    format_srcc_matrix,
    fractional_ranks,
    mpsr,
    psr,
    record_from_json,
    record_to_json,
    srcc,
    weighted_srcc,
)
from contiq.model import TrunkConfig, add_head, init_model, trunk_forward
from contiq.summarizer import TaskSummary, WeightingConfig

from _oracles import srcc_classical


class TestFractionalRanks:
    def test_distinct_values(self):
        np.testing.assert_array_equal(
            fractional_ranks(np.array([30.0, 10.0, 20.0])), [3.0, 1.0, 2.0]
        )

    def test_ties_share_average_position(self):
        np.testing.assert_array_equal(
            fractional_ranks(np.array([5.0, 5.0, 1.0])), [2.5, 2.5, 1.0]
        )


class TestSrcc:
    def test_identical_order(self):
        assert srcc([1, 2, 3], [10, 20, 30]) == 1.0

    def test_reversed_order(self):
        assert srcc([1, 2, 3], [3, 2, 1]) == -1.0

    def test_partial_disorder(self):
        # rank differences (2, 1, 1): 1 - 6*6/(3*8) = -0.5
        assert srcc([1, 2, 3], [3, 1, 2]) == pytest.approx(-0.5, abs=1e-12)

    def test_matches_classical_formula_tie_free(self):
        rng = np.random.default_rng(5)
        for n in range(2, 9):
            for _ in range(20):
                a = rng.permutation(n).astype(float) + rng.uniform(0, 0.4, n)
                b = rng.permutation(n).astype(float) + rng.uniform(0, 0.4, n)
                assert srcc(a, b) == pytest.approx(srcc_classical(a, b), abs=1e-12)

    def test_matches_library_with_ties(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            a = rng.integers(0, 4, size=12).astype(float)
            b = rng.integers(0, 4, size=12).astype(float)
            if np.all(a == a[0]) or np.all(b == b[0]):
                continue
            expected = spearmanr(a, b).statistic
            assert srcc(a, b) == pytest.approx(expected, abs=1e-12)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(7)
        preds = rng.normal(size=40)
        targets = rng.normal(size=40)
        base = srcc(preds, targets)
        for transform in (np.exp, lambda v: v**3, lambda v: 2.5 * v + 7.0):
            assert srcc(transform(preds), targets) == pytest.approx(base, abs=1e-12)

    def test_constant_vector_flags_and_scores_zero(self):
        with pytest.warns(MetricsWarning):
            assert srcc([1.0, 1.0, 1.0], [1.0, 2.0, 3.0]) == 0.0
        with pytest.warns(MetricsWarning):
            assert srcc([1.0, 2.0, 3.0], [4.0, 4.0, 4.0]) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            srcc([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ValueError):
            srcc([1.0], [2.0])


class TestSrccMatrix:
    def test_entry_access_guards_triangle(self):
        m = empty_srcc_matrix(3)
        m.values[1, 0] = 0.5
        assert m.entry(1, 0) == 0.5
        with pytest.raises(IndexError):
            m.entry(0, 1)
        with pytest.raises(IndexError):
            m.entry(3, 0)

    def test_range_validated(self):
        bad = np.full((2, 2), np.nan)
        bad[1, 0] = 1.5
        with pytest.raises(ValueError):
            SrccMatrix(bad)


def matrix_from_rows(rows):
    t = len(rows)
    values = np.full((t, t), np.nan)
    for i, row in enumerate(rows):
        values[i, : i + 1] = row
    return SrccMatrix(values)


class TestPsr:
    def test_first_task_identity(self):
        m = matrix_from_rows([[0.9]])
        assert psr(m, 0) == 0.9

    def test_two_task_arithmetic(self):
        m = matrix_from_rows([[0.9], [0.8, 0.85]])
        expected = (0.8 / 0.9) * 0.85
        assert expected == pytest.approx(0.755556, abs=1e-6)
        assert psr(m, 1) == pytest.approx(expected, abs=1e-12)

    def test_perfect_stability_returns_current(self):
        m = matrix_from_rows([[0.9], [0.9, 0.8], [0.9, 0.8, 0.7]])
        assert psr(m, 2) == pytest.approx(0.7, abs=1e-12)

    def test_ratios_above_one_are_credited(self):
        m = matrix_from_rows([[0.5], [0.9, 0.8]])
        assert psr(m, 1) == pytest.approx((0.9 / 0.5) * 0.8, abs=1e-12)

    def test_denominator_clamped_with_warning(self):
        m = matrix_from_rows([[0.01], [0.3, 0.9]])
        with pytest.warns(MetricsWarning):
            value = psr(m, 1)
        assert value == pytest.approx((0.3 / PSR_DENOMINATOR_FLOOR) * 0.9, abs=1e-12)

    def test_credit_property_monotone_in_retention(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            diag = rng.uniform(0.4, 0.95, size=3)
            base = matrix_from_rows(
                [[diag[0]], [rng.uniform(0.2, 0.9), diag[1]],
                 [rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), diag[2]]]
            )
            bumped = SrccMatrix(base.values.copy())
            bumped.values[2, 0] = min(1.0, bumped.values[2, 0] + 0.05)
            assert psr(bumped, 2) > psr(base, 2)

    def test_out_of_range(self):
        m = matrix_from_rows([[0.9]])
        with pytest.raises(IndexError):
            psr(m, 1)


class TestMpsrAndWeighted:
    def test_single_value(self):
        assert mpsr([0.8]) == 0.8

    def test_two_values(self):
        values = [0.9, (0.8 / 0.9) * 0.85]
        assert mpsr(values) == pytest.approx(0.8278, abs=1e-4)
        assert mpsr(values) == pytest.approx(sum(values) / 2.0, abs=1e-12)

    def test_constant_vector(self):
        assert mpsr([0.6, 0.6, 0.6, 0.6]) == pytest.approx(0.6, abs=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mpsr([])

    def test_equal_sizes_give_plain_mean(self):
        assert weighted_srcc([0.2, 0.4, 0.9], [7, 7, 7]) == pytest.approx(
            0.5, abs=1e-12
        )

    def test_hand_weighted_pair(self):
        assert weighted_srcc([0.4, 0.8], [1, 3]) == pytest.approx(0.7, abs=1e-12)

    def test_six_task_summation_oracle(self):
        rng = np.random.default_rng(9)
        values = rng.uniform(-1, 1, size=6)
        sizes = rng.integers(50, 500, size=6)
        expected = sum(float(v) * int(s) for v, s in zip(values, sizes)) / float(
            sizes.sum()
        )
        assert weighted_srcc(values, sizes) == pytest.approx(expected, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            weighted_srcc([0.5], [1, 2])
        with pytest.raises(ValueError):
            weighted_srcc([0.5, 0.6], [3, 0])


class TestMetricsRecord:
    def test_mpsr_consistency_enforced(self):
        m = matrix_from_rows([[0.9], [0.8, 0.85]])
        with pytest.raises(ValueError):
            MetricsRecord(
                srcc=m,
                psr=[0.9, 0.75],
                mpsr=0.5,
                weighted_srcc=0.8,
                test_set_sizes=[10, 10],
            )

    def test_vector_lengths_enforced(self):
        m = matrix_from_rows([[0.9]])
        with pytest.raises(ValueError):
            MetricsRecord(
                srcc=m, psr=[0.9, 0.1], mpsr=0.5, weighted_srcc=0.9,
                test_set_sizes=[5, 5],
            )


def tiny_task(name, rng, model, head, n_train=6, n_test=8, reverse=False):
    """Task whose test MOS follows (or reverses) the model's head scores."""
    dim = model.config.input_dim
    x = rng.normal(size=(n_train + n_test, dim))
    emb = trunk_forward(model, x).emb
    scores = emb @ model.heads[head]
    mos = -scores if reverse else scores
    samples = [
        QualitySample(id=f"{name}-{i}", features=x[i], mos=float(mos[i]), std=0.1)
        for i in range(n_train + n_test)
    ]
    return TaskDataset(
        name=name, dim=dim, train=samples[:n_train], test=samples[n_train:]
    )


class TestEvaluateStream:
    def make_model(self, seed=0, heads=1, input_dim=5):
        model = init_model(TrunkConfig(input_dim=input_dim, layer_widths=(8,), seed=seed))
        rng = np.random.default_rng(seed + 50)
        for t in range(heads):
            add_head(model)
            model.heads[t][:] = rng.normal(size=model.config.embedding_dim)
            model.summaries.append(
                TaskSummary(task_index=t, centroids=rng.normal(size=(3, input_dim)))
            )
        return model

    def test_single_task_record(self):
        model = self.make_model()
        rng = np.random.default_rng(1)
        task = tiny_task("a", rng, model, head=0)
        record = evaluate_stream([model], [task], WeightingConfig(mode="latest"))
        assert record.srcc.tasks == 1
        assert record.psr == [record.srcc.entry(0, 0)]
        assert record.mpsr == record.srcc.entry(0, 0)
        assert record.weighted_srcc == record.srcc.entry(0, 0)
        assert record.test_set_sizes == [len(task.test)]
        assert record.srcc.entry(0, 0) == pytest.approx(1.0, abs=1e-12)

    def test_oracle_mode_uses_matching_head(self):
        model = self.make_model(heads=2)
        rng = np.random.default_rng(2)
        # dataset 0 follows head 0 but anti-follows head 1
        task0 = tiny_task("a", rng, model, head=0)
        task1 = tiny_task("b", rng, model, head=1)
        record = evaluate_stream(
            [model, model], [task0, task1], WeightingConfig(mode="oracle")
        )
        assert record.srcc.entry(1, 0) == pytest.approx(1.0, abs=1e-12)
        assert record.srcc.entry(1, 1) == pytest.approx(1.0, abs=1e-12)

    def test_adaptive_matches_manual_composition(self):
        from contiq.summarizer import predict_quality_batch

        model = self.make_model(heads=2, seed=3)
        rng = np.random.default_rng(3)
        tasks = [tiny_task("a", rng, model, 0), tiny_task("b", rng, model, 1)]
        config = WeightingConfig(mode="adaptive", tau=4.0)
        record = evaluate_stream([model, model], tasks, config)
        for t in range(2):
            for k in range(t + 1):
                x = tasks[k].feature_matrix("test")
                manual = srcc(
                    predict_quality_batch(model, x, config),
                    [s.mos for s in tasks[k].test],
                )
                assert record.srcc.entry(t, k) == pytest.approx(manual, abs=1e-12)

    def test_snapshot_count_must_match(self):
        model = self.make_model()
        rng = np.random.default_rng(4)
        task = tiny_task("a", rng, model, 0)
        with pytest.raises(ValueError):
            evaluate_stream([model, model], [task], WeightingConfig(mode="latest"))

    def test_single_model_used_for_all_rows(self):
        model = self.make_model(heads=2, seed=5)
        rng = np.random.default_rng(5)
        tasks = [tiny_task("a", rng, model, 0), tiny_task("b", rng, model, 1)]
        as_list = evaluate_stream([model, model], tasks, WeightingConfig(mode="latest"))
        as_single = evaluate_stream(model, tasks, WeightingConfig(mode="latest"))
        np.testing.assert_array_equal(
            np.nan_to_num(as_list.srcc.values), np.nan_to_num(as_single.srcc.values)
        )

    def test_missing_test_split_rejected(self):
        model = self.make_model()
        rng = np.random.default_rng(6)
        full = tiny_task("a", rng, model, 0)
        empty = TaskDataset(name="b", dim=full.dim, train=full.train, test=())
        with pytest.raises(ValueError):
            evaluate_stream([model, model], [full, empty], WeightingConfig(mode="latest"))

    def test_degenerate_predictions_propagate_flags(self):
        model = init_model(TrunkConfig(input_dim=4, layer_widths=(6,), seed=9))
        add_head(model)
        model.heads[0][:] = 0.0  # constant zero scores
        model.summaries.append(TaskSummary(task_index=0, centroids=np.zeros((1, 4))))
        rng = np.random.default_rng(7)
        task = tiny_task("a", rng, model, 0)
        record = evaluate_stream([model], [task], WeightingConfig(mode="latest"))
        assert record.srcc.entry(0, 0) == 0.0
        assert record.flags and "constant" in record.flags[0]


class TestExports:
    def make_record(self):
        m = matrix_from_rows([[0.9], [0.8, 0.85]])
        ps = [psr(m, 0), psr(m, 1)]
        return MetricsRecord(
            srcc=m,
            psr=ps,
            mpsr=mpsr(ps),
            weighted_srcc=weighted_srcc([0.8, 0.85], [10, 20]),
            test_set_sizes=[10, 20],
            flags=["example flag"],
        )

    def test_matrix_text_shape(self):
        text = format_srcc_matrix(self.make_record().srcc)
        lines = text.strip().splitlines()
        assert len(lines) == 2
        assert lines[0].startswith("after_task_0:")
        assert len(lines[0].split()) == 2  # label + one entry
        assert len(lines[1].split()) == 3

    def test_json_round_trip(self):
        record = self.make_record()
        text = record_to_json(record)
        back = record_from_json(text)
        np.testing.assert_allclose(
            np.nan_to_num(back.srcc.values), np.nan_to_num(record.srcc.values)
        )
        assert back.psr == record.psr
        assert back.mpsr == record.mpsr
        assert back.weighted_srcc == record.weighted_srcc
        assert back.test_set_sizes == record.test_set_sizes
        assert back.flags == record.flags

    def test_json_deterministic(self):
        assert record_to_json(self.make_record()) == record_to_json(self.make_record())
        assert '"flags"' in record_to_json(self.make_record())
