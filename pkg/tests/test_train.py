import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointvcr import autodiff as ad
from jointvcr import data as D
from jointvcr import model as M
from jointvcr import relax as R
from jointvcr import train as T

TINY = M.ModelConfig(vocab_size=20, embed_dim=4, hidden_dim=3, object_feat_dim=2)
TINY_SPEC = D.GenSpec(n_train=24, n_val=10, vocab_size=20, object_feat_dim=2, noise_prob=0.0)


@pytest.fixture(scope="module")
def tiny_data():
    return D.generate(TINY_SPEC)


class TestAdam:
    def test_first_step_moves_by_lr_times_sign(self):
        params = {"w": np.array([1.0, -2.0, 3.0])}
        grads = {"w": np.array([0.5, -7.0, 1e-3])}
        new, state = T.adam_step(params, grads, T.AdamState(), lr=0.1)
        # bias correction makes the first update lr * g / (|g| + eps')
        np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.sign(grads["w"]), atol=1e-5)
        assert state.t == 1

    def test_weight_decay_is_decoupled(self):
        params = {"w": np.array([2.0])}
        zero = {"w": np.array([0.0])}
        new, _ = T.adam_step(params, zero, T.AdamState(), lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(new["w"], [2.0 - 0.1 * 0.5 * 2.0])

    def test_matches_reference_over_steps(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=3)
        m = v = np.zeros(3)
        params, state = {"w": p.copy()}, T.AdamState()
        for t in range(1, 6):
            g = rng.normal(size=3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            p = p * (1 - 1e-3 * 0.01)
            p = p - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            params, state = T.adam_step(params, {"w": g}, state, lr=1e-3, weight_decay=0.01)
        np.testing.assert_allclose(params["w"], p, rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError, match="w"):
            T.adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, T.AdamState(), 0.1)


class TestClipping:
    def test_three_four_five(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert T.global_norm(grads) == 5.0
        clipped = T.clip_gradients(grads, 1.0)
        np.testing.assert_allclose([clipped["a"][0], clipped["b"][0]], [0.6, 0.8])

    def test_small_gradients_untouched(self):
        grads = {"a": np.array([0.3, 0.4])}
        np.testing.assert_array_equal(T.clip_gradients(grads, 1.0)["a"], grads["a"])

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8), st.floats(0.01, 10))
    @settings(max_examples=50, deadline=None)
    def test_norm_never_exceeds_bound(self, values, bound):
        clipped = T.clip_gradients({"g": np.array(values)}, bound)
        assert T.global_norm(clipped) <= bound * (1 + 1e-12)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            T.clip_gradients({"a": np.ones(1)}, 0.0)


class TestPlateau:
    cfg = T.TrainConfig()

    def test_steady_improvement_never_cuts(self):
        assert T.plateau_scheduler([1.0, 0.9, 0.8, 0.7, 0.6], self.cfg) == [1.0] * 5

    def test_cut_after_patience(self):
        assert T.plateau_scheduler([1.0, 1.0, 1.0], self.cfg) == [1.0, 1.0, 0.5]

    def test_cooldown_delays_next_cut(self):
        mult = T.plateau_scheduler([1.0] * 8, self.cfg)
        # cuts at epochs 3, then cooldown 1 + patience 2 -> 6, then 9
        assert mult == [1.0, 1.0, 0.5, 0.5, 0.5, 0.25, 0.25, 0.25]

    def test_tiny_improvement_counts_as_plateau(self):
        assert T.plateau_scheduler([1.0, 1.0 - 5e-5, 1.0 - 9e-5], self.cfg)[-1] == 0.5

    def test_recovery_resets_counter(self):
        assert T.plateau_scheduler([1.0, 1.1, 0.5, 0.6, 0.4], self.cfg) == [1.0] * 5


class TestConditioning:
    def test_gold_rate(self):
        rng = np.random.default_rng(0)
        gold = rng.integers(0, 4, size=100_000)
        rate = np.mean(T.conditioning_choice(gold, rng) == gold)
        assert 0.805 <= rate <= 0.820

    def test_wrong_only_fallback(self):
        rng = np.random.default_rng(1)
        gold = rng.integers(0, 4, size=100_000)
        choice = T.conditioning_choice(gold, rng, wrong_only=True)
        assert abs(np.mean(choice == gold) - 0.75) < 0.01

    def test_scalar(self):
        assert T.conditioning_choice(2, np.random.default_rng(0), p_correct=1.0) == 2


class TestMetrics:
    def test_q_ar_is_the_and(self):
        a_pred = np.array([0, 1, 2, 3, 0, 1])
        a_gold = np.array([0, 1, 0, 3, 0, 2])
        r_gold_pred = np.array([1, 1, 1, 1, 1, 1])
        r_e2e = np.array([1, 0, 1, 1, 2, 1])
        r_gold = np.array([1, 1, 1, 1, 1, 1])
        q_a, qa_r, q_ar = T.accuracy_row(a_pred, r_gold_pred, r_e2e, a_gold, r_gold)
        assert q_a == pytest.approx(4 / 6)
        assert qa_r == 1.0
        assert q_ar == pytest.approx(2 / 6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_q_ar_bounded_by_both(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.integers(1, 40)
        cols = [rng.integers(0, 4, size=n) for _ in range(5)]
        a_pred, r_pred, a_gold, r_gold = cols[0], cols[1], cols[3], cols[4]
        # end-to-end rationale equals the gold-conditioned one whenever the answer is right
        r_e2e = np.where(a_pred == a_gold, r_pred, cols[2])
        q_a, qa_r, q_ar = T.accuracy_row(a_pred, r_pred, r_e2e, a_gold, r_gold)
        assert q_ar <= min(q_a, qa_r) + 1e-15

    def test_csv_round_trip(self):
        rows = [T.MetricsRow(1, 0.5, 0.25, 0.125, 1.2345678, 0.9, 2e-4)]
        text = T.metrics_csv(rows)
        assert text.splitlines()[0] == T.CSV_HEADER
        assert text.splitlines()[1] == "1,0.500000,0.250000,0.125000,1.234568,0.900000,0.000200"
        back = T.parse_metrics_csv(text)
        assert back[0].epoch == 1 and back[0].q_ar_acc == 0.125

    def test_parse_rejects_other_files(self):
        with pytest.raises(ValueError):
            T.parse_metrics_csv("a,b\n1,2\n")


class TestEvaluate:
    @pytest.mark.parametrize("est", [R.Softmax(), R.GumbelSoftmax(), R.ScoreFunction(), R.JointCE()], ids=lambda e: e.name)
    def test_untrained_model_is_near_chance(self, est):
        _, val = D.generate(D.GenSpec(n_train=1, n_val=400, vocab_size=20, object_feat_dim=2))
        row = T.evaluate(M.init_params(TINY), val, est)
        for acc in (row.q_a_acc, row.qa_r_acc):
            assert 0.15 < acc < 0.35
        assert row.q_ar_acc < 0.15
        assert abs(row.answer_loss - math.log(4)) < 0.05

    def test_batch_size_does_not_change_result(self, tiny_data):
        params = M.init_params(TINY)
        a = T.evaluate(params, tiny_data[1], R.Softmax(), batch_size=3)
        b = T.evaluate(params, tiny_data[1], R.Softmax(), batch_size=500)
        assert a.csv_line() == b.csv_line()

    def test_q_ar_bounded_on_model_predictions(self, tiny_data):
        for est in (R.Softmax(), R.JointCE()):
            row = T.evaluate(M.init_params(TINY), tiny_data[1], est)
            assert row.q_ar_acc <= min(row.q_a_acc, row.qa_r_acc)


class TestTrainRun:
    cfg = T.TrainConfig(epochs=2, batch_size=8, lr=1e-2)

    @pytest.mark.parametrize(
        "est", [R.Softmax(), R.GumbelSoftmax(), R.ScoreFunction(R.ScoreFunctionConfig(n_samples=8)), R.JointCE()],
        ids=lambda e: e.name,
    )
    def test_runs_and_reports_every_epoch(self, est, tiny_data):
        res = T.train_run(TINY, est, self.cfg, *tiny_data)
        assert [r.epoch for r in res.rows] == [1, 2]
        assert res.initial.epoch == 0
        assert len(res.train_losses) == 2
        assert all(np.isfinite(v) for v in res.train_losses)

    def test_training_reduces_loss(self, tiny_data):
        cfg = T.TrainConfig(epochs=6, batch_size=8, lr=1e-2)
        res = T.train_run(TINY, R.Softmax(), cfg, tiny_data[0], tiny_data[0])
        assert res.train_losses[-1] < res.train_losses[0]

    def test_byte_identical_metrics(self, tiny_data):
        a = T.train_run(TINY, R.GumbelSoftmax(), self.cfg, *tiny_data)
        b = T.train_run(TINY, R.GumbelSoftmax(), self.cfg, *tiny_data)
        assert T.metrics_csv(a.rows) == T.metrics_csv(b.rows)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_seed_matters(self, tiny_data):
        a = T.train_run(TINY, R.Softmax(), self.cfg, *tiny_data)
        b = T.train_run(TINY, R.Softmax(), T.TrainConfig(epochs=2, batch_size=8, lr=1e-2, seed=5), *tiny_data)
        assert not np.array_equal(a.params["embed"], b.params["embed"])

    def test_baseline_trains_separate_modules(self, tiny_data):
        cfg = T.TrainConfig(epochs=1, batch_size=8, baseline_mode="conditioned")
        res = T.train_run(TINY, R.Softmax(), cfg, *tiny_data)
        assert "rat.embed" in res.params

    def test_baseline_rationale_loss_leaves_answer_module_alone(self, tiny_data):
        cfg = T.TrainConfig(baseline_mode="conditioned", loss_ratio=(0.0, 1.0))
        params = M.init_params(M.ModelConfig(**{**TINY.__dict__, "share_embedding": False}))
        tape = ad.Tape()
        P = M.bind(params, tape)
        total, _, _ = T.step_losses(P, D.collate(tiny_data[0][:8]), R.Softmax(), cfg, 0, np.random.default_rng(0))
        grads = T.param_grads(tape, tape.backward(total), P)
        for k in M.module_params(grads, "ans") + ["embed"]:
            np.testing.assert_array_equal(grads[k], 0.0)

    def test_non_finite_loss_aborts_with_context(self, tiny_data):
        params = M.init_params(TINY)
        params["ans.head_b2"] = np.array([np.nan])
        with pytest.raises(T.NumericalError, match="epoch 1, batch 0.*softmax"):
            T.train_run(TINY, R.Softmax(), self.cfg, *tiny_data, params=params)

    def test_lr_column_tracks_schedule(self, tiny_data):
        res = T.train_run(TINY, R.Softmax(), self.cfg, *tiny_data)
        assert res.rows[0].lr_current == self.cfg.lr

    def test_ablation_pairs(self, tiny_data):
        cfg = T.TrainConfig(epochs=1, batch_size=8)
        results = T.run_ablation(TINY, R.Softmax(), cfg, *tiny_data)
        assert sorted(results) == [(1.0, 1.0), (1.0, 4.0)]
        curves = T.ablation_curves(results)
        assert {c["ratio"] for c in curves} == {"1:1", "1:4"}

    @pytest.mark.parametrize(
        "kwargs",
        [{"lr": 0}, {"epochs": 0}, {"batch_size": 0}, {"clip_norm": 0}, {"loss_ratio": (0, 0)}, {"baseline_mode": "x"}, {"p_correct": 2}],
    )
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            T.TrainConfig(**kwargs)
