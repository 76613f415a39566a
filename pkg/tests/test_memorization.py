import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipgrain.clipping import ClippingPolicy
from clipgrain.errors import InvalidInputError
from clipgrain.memorization import (
    CanaryCohort,
    CanarySettings,
    build_schedule,
    cer,
    edit_distance,
    exposure,
    exposures,
    generalization_gap,
    generate_canaries,
    run_secret_sharer,
    wer,
)
from clipgrain.models import Dataset, Model, TeacherTask, example_scores, init_params
from clipgrain.numerics import SeededRng
from clipgrain.trainer import TrainConfig, train
from support import brute_force_distances, edit_ball

ORACLE = brute_force_distances("ab", 6)
short_ab = st.text(alphabet="ab", max_size=6)


class TestExposure:
    holdout = np.arange(1, 1025, dtype=float)  # scores 1..1024

    def test_beats_everything(self):
        assert exposure(0.5, self.holdout) == 10.0

    def test_rank_512(self):
        # 511 holdout scores are strictly lower
        assert exposure(511.5, self.holdout) == 1.0

    def test_rank_1024(self):
        assert exposure(1e9, self.holdout) == 0.0

    def test_ties_do_not_count_against_canary(self):
        assert exposure(1.0, self.holdout) == 10.0
        assert exposure(3.0, [1.0, 3.0, 3.0, 3.0]) == 1.0

    def test_too_small_holdout(self):
        with pytest.raises(InvalidInputError):
            exposure(0.0, [1.0])

    def test_vectorised_matches_scalar(self):
        rng = SeededRng(0)
        h = rng.normal(64)
        c = rng.normal(30)
        np.testing.assert_array_equal(exposures(c, h), [exposure(x, h) for x in c])

    @given(st.floats(-1e6, 1e6), st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_bounds(self, c, h):
        e = exposure(c, h)
        assert 0.0 <= e <= math.log2(len(h))

    @given(st.floats(-1e6, 1e6), st.floats(0, 1e3), st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_monotone(self, c, drop, h):
        assert exposure(c - drop, h) >= exposure(c, h)

    def test_untrained_scorer_is_calibrated(self):
        model = Model("mlp", 6, 8, 3)
        w = init_params(model, SeededRng(1))
        holdout = generate_canaries(6, 1024, SeededRng(2), n_classes=3)
        canaries = generate_canaries(6, 500, SeededRng(3), n_classes=3, id_start=5000)
        e = exposures(example_scores(model, w, canaries), example_scores(model, w, holdout))
        assert abs(e.mean() - 1 / math.log(2)) <= 0.15
        assert e.max() <= 10.0


class TestEditDistance:
    @pytest.mark.parametrize("a, b, d", [
        ("kitten", "sitting", 3), ("", "abc", 3), ("abc", "", 3), ("", "", 0),
        ("flaw", "lawn", 2), ("abc", "abc", 0),
    ])
    def test_examples(self, a, b, d):
        assert edit_distance(a, b) == d

    def test_kitten_by_search(self):
        alphabet = "kitensg"
        near = edit_ball("kitten", 2, alphabet, 7)
        assert "sitting" not in near
        one_away = edit_ball("sitting", 1, alphabet, 7)
        assert any(s in near for s in one_away)

    def test_token_sequences(self):
        assert edit_distance(["the", "cat"], ["the", "hat", "sat"]) == 2
        assert edit_distance((1, 2, 3), (1, 3)) == 1

    @settings(max_examples=300)
    @given(short_ab, short_ab)
    def test_against_oracle(self, a, b):
        assert edit_distance(a, b) == ORACLE[a][b]

    @settings(max_examples=200)
    @given(short_ab, short_ab, short_ab)
    def test_metric(self, a, b, c):
        ab = edit_distance(a, b)
        assert ab == edit_distance(b, a)
        assert (ab == 0) == (a == b)
        assert edit_distance(a, c) <= ab + edit_distance(b, c)


class TestErrorRates:
    @pytest.mark.parametrize("hyp, ref, expected", [
        ("hello", "hello", 0.0), ("", "abcde", 1.0), ("abcd", "abce", 0.25),
    ])
    def test_cer(self, hyp, ref, expected):
        assert cer(hyp, ref) == expected

    def test_wer(self):
        assert wer("the cat sat", "the cat sat down") == 0.25

    @pytest.mark.parametrize("fn", [cer, wer])
    def test_empty_reference(self, fn):
        with pytest.raises(InvalidInputError):
            fn("abc", "")


class TestCanaries:
    def test_count_and_flags(self):
        ds = generate_canaries(3, 20, SeededRng(0), cohort_id=2, id_start=100)
        assert len(ds) == 20
        assert ds.is_canary.all() and (ds.cohort == 2).all()
        np.testing.assert_array_equal(ds.ids, np.arange(100, 120))

    @pytest.mark.parametrize("spread", [1.0, 5.0])
    def test_mean_is_offset(self, spread):
        n = 1000
        ds = generate_canaries(4, n, SeededRng(7), offset=5.0, spread=spread)
        se = spread / math.sqrt(n)
        assert np.all(np.abs(ds.X.mean(axis=0) - 5.0) <= 3 * se)

    def test_offset_in_training_units(self):
        center, scale = np.array([1.0, -2.0]), np.array([0.5, 3.0])
        ds = generate_canaries(2, 4000, SeededRng(1), center=center, scale=scale)
        np.testing.assert_allclose((ds.X.mean(axis=0) - center) / scale, 5.0, atol=0.06)

    def test_labels_uniform(self):
        y = generate_canaries(2, 3000, SeededRng(3), n_classes=3).y
        counts = np.bincount(y.astype(int), minlength=3)
        assert np.all(np.abs(counts - 1000) < 100)

    def test_same_stream_position(self):
        a = generate_canaries(3, 5, SeededRng(9))
        b = generate_canaries(3, 5, SeededRng(9))
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.y, b.y)


class TestSchedule:
    def test_each_canary_exactly_k_times(self):
        cohorts, rows, start = [], [], 10
        for ci, k in enumerate((1, 2, 4, 8, 16)):
            ds = generate_canaries(2, 5, SeededRng(ci))
            cohorts.append(CanaryCohort(ci, k, ds))
            rows.append(list(range(start, start + 5)))
            start += 5
        sched = build_schedule(cohorts, rows, 30, 8, SeededRng(0))
        assert len(sched) == 5 * (1 + 2 + 4 + 8 + 16)
        for cohort in cohorts:
            for placements in cohort.schedule:
                steps = [s for s, _ in placements]
                assert len(steps) == len(set(steps)) == cohort.insertion_count
                assert all(1 <= s <= 30 for s in steps)
        for step in sched.steps():
            slots = [s for s, _ in sched.at(step)]
            assert len(slots) == len(set(slots)) and all(0 <= s < 8 for s in slots)

    def test_trajectory_audit(self):
        base = Dataset(SeededRng(0).normal((10, 2)), np.zeros(10))
        can = generate_canaries(2, 3, SeededRng(1), id_start=10)
        cohorts = [CanaryCohort(0, 4, can)]
        sched = build_schedule(cohorts, [[10, 11, 12]], 12, 4, SeededRng(2))
        traj = train(Model("linear", 2), Dataset.concat([base, can]), TrainConfig(12, 2, 2, 0.01),
                     canary_schedule=sched)
        assert [traj.occurrences(i) for i in (10, 11, 12)] == [4, 4, 4]


class TestGeneralizationGap:
    def test_same_set(self):
        m = Model("logistic", 3)
        ds = generate_canaries(3, 10, SeededRng(0))
        w = SeededRng(1).normal(m.n_params)
        tr, gap = generalization_gap(m, w, ds, ds)
        assert gap == 0.0 and tr > 0

    def test_overfit_has_positive_gap(self):
        model = Model("mlp", 4, 16, 2)
        task = TeacherTask("logistic", 4, 2, 0.3, 1.0)
        positive = 0
        for trial in range(100):
            train_set, test_set = task.make_split(2, 20, SeededRng(trial))
            cfg = TrainConfig(150, 1, 2, 1.0, seed=trial, full_batch=True)
            w = train(model, train_set, cfg).final_params
            positive += generalization_gap(model, w, train_set, test_set)[1] > 0
        assert positive >= 95

    def test_empty(self):
        m = Model("linear", 1)
        empty = Dataset(np.zeros((0, 1)), np.zeros(0))
        with pytest.raises(InvalidInputError):
            generalization_gap(m, np.zeros(2), empty, empty)


class TestSecretSharer:
    model = Model("mlp", 4, 8, 2)
    task = TeacherTask("mlp", 4, 2, 0.1, 1.0)
    settings = CanarySettings((1, 2, 4), 3, 64, 5.0)
    cfg = TrainConfig(40, 4, 2, 0.1)
    policies = [ClippingPolicy.none(), ClippingPolicy.per_core(1.0)]

    def data(self, rng):
        return self.task.make_split(48, 32, rng)

    def test_report_shape(self):
        rep = run_secret_sharer(self.data, self.model, self.cfg, self.policies, [0, 1],
                                settings=self.settings)
        assert len(rep.rows) == 2 * 2 * 3
        assert [(r.seed, r.policy, r.cohort_k) for r in rep.rows[:3]] == [
            (0, "none", 1), (0, "none", 2), (0, "none", 4)]
        assert all(len(r.exposures) == 3 for r in rep.rows)
        assert all(0 <= e <= 6.0 for r in rep.rows for e in r.exposures)
        assert rep.cell("none", 2).size == 6
        summary = rep.summary()
        assert len(summary) == 2 * 3 and all(r.seed == -1 for r in summary)

        csv_lines = rep.to_csv().splitlines()
        assert csv_lines[0] == "policy,cohort_k,seed,mean_exposure,std_exposure,train_metric,test_metric,gap"
        assert len(csv_lines) == 1 + 12 + 6

        table = rep.to_table().splitlines()
        assert [c.strip() for c in table[0].split("|")] == ["Canary #Insertion", "1", "2", "4"]
        assert len(table) == 2 + 2
        assert [c.strip() for c in table[2].split("|")][0] == "none"

    def test_parallel_matches_serial(self):
        a = run_secret_sharer(self.data, self.model, self.cfg, self.policies, [3, 4],
                              settings=self.settings)
        b = run_secret_sharer(self.data, self.model, self.cfg, self.policies, [3, 4],
                              settings=self.settings, parallel=2)
        assert a.to_csv() == b.to_csv()

    def test_fixed_dataset(self):
        train_set, test_set = self.data(SeededRng(0))
        rep = run_secret_sharer(train_set, self.model, self.cfg, self.policies[:1], [0],
                                settings=self.settings, test_set=test_set)
        assert len(rep.rows) == 3
        assert math.isfinite(rep.rows[0].gap)

    def test_validation(self):
        with pytest.raises(InvalidInputError):
            run_secret_sharer(self.data, self.model, self.cfg, self.policies, [],
                              settings=self.settings)
        with pytest.raises(InvalidInputError):
            run_secret_sharer(self.data, self.model, self.cfg, self.policies, [0],
                              settings=CanarySettings((), 3, 64))


@pytest.mark.parametrize("seed", range(20))
def test_schedule_half_full_budget(seed):
    # 10 canaries x 4 insertions into 20 steps of 4 slots
    cohorts = [CanaryCohort(0, 4, generate_canaries(1, 10, SeededRng(0)))]
    sched = build_schedule(cohorts, [list(range(10))], 20, 4, SeededRng(seed))
    assert len(sched) == 40
    assert all(len(sched.at(s)) <= 4 for s in sched.steps())
