import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xailoop.errors import BadParameter, OutOfBounds
from xailoop.optimizer import (
    BoLoop,
    Dimension,
    HyperparamSpace,
    TrialRecord,
    default_space,
    denormalize,
    expected_improvement,
    gp_fit,
    gp_posterior,
    normalize,
    select_top_by_accuracy,
    shrink_space,
    suggest_next,
)


def one_d_space():
    return HyperparamSpace((Dimension("x", 0.0, 1.0),))


class TestNormalization:
    def test_linear_endpoints(self):
        space = default_space()
        point = {"dropout": 0.05, "learningRate": 1e-5, "batchSize": 1}
        assert normalize(space, point)[0] == pytest.approx(0.0)
        point["dropout"] = 0.5
        assert normalize(space, point)[0] == pytest.approx(1.0)

    def test_log_dimension_hand_value(self):
        space = default_space()
        vec = normalize(space, {"dropout": 0.1, "learningRate": 1e-3, "batchSize": 4})
        assert vec[1] == pytest.approx(0.5)

    def test_integral_round_half_up(self):
        # unit 0.17 on [1, 32] -> round(1 + 0.17 * 31) = round(6.27) = 6,
        # matching the batch size of the first recorded trial
        space = default_space()
        point = denormalize(space, np.array([0.0, 0.0, 0.17]))
        assert point["batchSize"] == 6
        assert isinstance(point["batchSize"], int)

    def test_round_trip_non_integral(self):
        space = default_space()
        point = {"dropout": 0.234, "learningRate": 3.3e-4, "batchSize": 7}
        back = denormalize(space, normalize(space, point))
        assert back["dropout"] == pytest.approx(0.234, abs=1e-12)
        assert back["learningRate"] == pytest.approx(3.3e-4, rel=1e-12)
        assert back["batchSize"] == 7

    def test_out_of_bounds(self):
        with pytest.raises(OutOfBounds):
            normalize(default_space(), {"dropout": 0.9, "learningRate": 1e-3, "batchSize": 4})

    def test_log_scale_requires_positive_lower(self):
        with pytest.raises(BadParameter):
            Dimension("bad", 0.0, 1.0, "log10")


class TestGaussianProcess:
    def test_single_observation_interpolates(self):
        state = gp_fit(np.array([[0.4]]), np.array([0.7]), noise_variance=1e-8)
        mean, _var = gp_posterior(state, np.array([0.4]))
        assert mean == pytest.approx(0.7, abs=1e-6)

    def test_prior_reversion_far_from_data(self):
        state = gp_fit(
            np.array([[0.0], [0.02]]),
            np.array([0.3, 0.5]),
            length_scales=0.01,
            signal_variance=1.0,
            noise_variance=1e-8,
        )
        mean, var = gp_posterior(state, np.array([0.9]))  # 88 length scales away
        assert mean == pytest.approx(0.4, abs=1e-6)
        assert var == pytest.approx(1.0, abs=1e-6)

    def test_three_point_dense_inverse_oracle(self):
        x = np.array([[0.1], [0.5], [0.9]])
        y = np.array([0.3, 0.8, 0.2])
        ls, sig, noise = 0.3, 1.0, 1e-8
        state = gp_fit(x, y, length_scales=ls, signal_variance=sig, noise_variance=noise)

        def matern(a, b):
            r = abs(a - b) / ls
            sr = math.sqrt(5.0) * r
            return sig * (1 + sr + sr * sr / 3.0) * math.exp(-sr)

        k = np.array([[matern(a[0], b[0]) for b in x] for a in x]) + noise * np.eye(3)
        k_inv = np.linalg.inv(k)
        y_mean = y.mean()
        for q in (0.2, 0.5, 0.77):
            ks = np.array([matern(q, b[0]) for b in x])
            ref_mean = y_mean + ks @ k_inv @ (y - y_mean)
            ref_var = sig - ks @ k_inv @ ks
            mean, var = gp_posterior(state, np.array([q]))
            assert abs(mean - ref_mean) <= 1e-10
            assert abs(var - ref_var) <= 1e-10

    def test_interpolation_error_at_training_points(self):
        x = np.array([[0.1], [0.5], [0.9]])
        y = np.array([0.3, 0.8, 0.2])
        state = gp_fit(x, y, noise_variance=1e-10)
        mean, _ = gp_posterior(state, x)
        assert np.abs(mean - y).max() <= 1e-6

    def test_posterior_variance_floor(self):
        state = gp_fit(np.array([[0.5]]), np.array([1.0]), noise_variance=1e-10)
        _, var = gp_posterior(state, np.array([0.5]))
        assert var >= 1e-12


class TestExpectedImprovement:
    def test_zero_sigma_below_best(self):
        assert expected_improvement(0.4, 0.0, 0.5) == 0.0

    def test_zero_sigma_above_best(self):
        assert expected_improvement(0.8, 0.0, 0.5) == pytest.approx(0.3)

    def test_at_best_unit_sigma_is_standard_normal_density(self):
        assert expected_improvement(0.0, 1.0, 0.0, xi=0.0) == pytest.approx(
            1.0 / math.sqrt(2 * math.pi), abs=1e-9
        )

    @given(
        st.floats(-2, 2),
        st.floats(0, 4),
        st.floats(-2, 2),
        st.floats(0, 0.5),
    )
    @settings(max_examples=100, deadline=None)
    def test_always_non_negative(self, mean, var, best, xi):
        assert expected_improvement(mean, var, best, xi) >= 0.0

    def test_monte_carlo_agreement(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            mean = rng.uniform(-1, 1)
            sigma = rng.uniform(0.05, 1.5)
            best = rng.uniform(-1, 1)
            draws = rng.normal(mean, sigma, size=200_000)
            mc = np.maximum(draws - best, 0.0)
            se = mc.std() / math.sqrt(len(mc))
            closed = expected_improvement(mean, sigma**2, best, xi=0.0)
            assert abs(closed - mc.mean()) <= 3 * se


class TestSuggestNext:
    def test_empty_state_uniform_and_reproducible(self):
        space = default_space()
        a = suggest_next(None, space, rng=123)
        b = suggest_next(None, space, rng=123)
        assert a == b
        assert 0.05 <= a["dropout"] <= 0.5
        assert 1e-5 <= a["learningRate"] <= 0.1
        assert 1 <= a["batchSize"] <= 32

    def test_matches_dense_grid_argmax(self):
        space = one_d_space()
        rng = np.random.default_rng(0)
        xs = rng.uniform(0, 1, size=(15, 1))
        ys = -((xs[:, 0] - 0.7) ** 2)
        state = gp_fit(xs, ys)
        suggestion = suggest_next(state, space, rng=7, xi=0.01)
        grid = np.linspace(0, 1, 100_000)[:, None]
        mean, var = gp_posterior(state, grid)
        from xailoop.optimizer import expected_improvement as ei

        dense = ei(mean, var, state.best, xi=0.01)
        best_grid = grid[int(np.argmax(dense)), 0]
        assert abs(suggestion["x"] - best_grid) <= 0.05

    def test_integral_dimension_always_integer(self):
        space = default_space()
        loop = BoLoop(space, seed=5, initial_design=3)
        for t in range(8):
            point = loop.ask()
            assert isinstance(point["batchSize"], int)
            loop.tell(point, 0.1 * t)


class TestShrinkSpace:
    def test_factor_one_identity(self):
        space = default_space()
        incumbent = {"dropout": 0.3, "learningRate": 1e-3, "batchSize": 8}
        out = shrink_space(space, incumbent, 1.0)
        for a, b in zip(out.dimensions, space.dimensions):
            assert a.lower == pytest.approx(b.lower)
            assert a.upper == pytest.approx(b.upper)

    def test_recorded_incumbent_hand_values(self):
        # dropout [0.05, 0.5] around 0.404 at factor 0.5 -> [0.2915, 0.5]
        space = default_space()
        incumbent = {"dropout": 0.404, "learningRate": 0.00175, "batchSize": 6}
        out = shrink_space(space, incumbent, 0.5)
        dropout = out.dimensions[0]
        assert dropout.lower == pytest.approx(0.2915, abs=1e-9)
        assert dropout.upper == pytest.approx(0.5, abs=1e-9)

    def test_incumbent_always_inside(self):
        space = default_space()
        incumbent = {"dropout": 0.05, "learningRate": 0.1, "batchSize": 32}
        out = shrink_space(space, incumbent, 0.3)
        vec = normalize(out, incumbent)
        assert (vec >= 0).all() and (vec <= 1).all()

    def test_integral_keeps_unit_width(self):
        space = HyperparamSpace((Dimension("n", 1, 32, integral=True),))
        out = shrink_space(space, {"n": 16}, 0.01)
        dim = out.dimensions[0]
        assert dim.upper - dim.lower >= 1
        assert dim.lower <= 16 <= dim.upper
        assert float(dim.lower).is_integer() and float(dim.upper).is_integer()

    @given(st.floats(0.1, 0.9), st.floats(0.1, 1.0), st.floats(0.1, 1.0))
    @settings(max_examples=50, deadline=None)
    def test_width_monotone_under_composition(self, center, fa, fb):
        space = one_d_space()
        first = shrink_space(space, {"x": center}, fa)
        mid = 0.5 * (first.dimensions[0].lower + first.dimensions[0].upper)
        second = shrink_space(first, {"x": mid}, fb)
        width = second.dimensions[0].upper - second.dimensions[0].lower
        assert width <= fa * fb * 1.0 + 1e-12

    def test_bad_factor(self):
        with pytest.raises(BadParameter):
            shrink_space(default_space(), {"dropout": 0.3, "learningRate": 1e-3, "batchSize": 4}, 0.0)


def trial(index, accuracy, loss=1.0, grade=None, point=None):
    return TrialRecord(
        index=index,
        iteration=0,
        point=point or {"dropout": 0.2, "learningRate": 1e-3, "batchSize": 4},
        accuracy=accuracy,
        f1=accuracy,
        loss=loss,
        mean_grade=grade,
    )


class TestSelectTopByAccuracy:
    def test_recorded_trial_table(self):
        # five recorded trials, accuracies 0.38/0.38/0.27/0.26/0.38 -> 1, 2, 5
        trials = [
            trial(0, 0.38),
            trial(1, 0.38),
            trial(2, 0.27),
            trial(3, 0.26),
            trial(4, 0.38),
        ]
        top = select_top_by_accuracy(trials, 3)
        assert [t.index for t in top] == [0, 1, 4]

    def test_n_at_least_count_returns_all(self):
        trials = [trial(0, 0.3), trial(1, 0.4)]
        assert len(select_top_by_accuracy(trials, 10)) == 2

    def test_ties_break_by_lower_loss(self):
        trials = [trial(0, 0.38, loss=1.1), trial(1, 0.38, loss=0.9)]
        top = select_top_by_accuracy(trials, 1)
        assert top[0].index == 1

    def test_remaining_ties_break_by_index(self):
        trials = [trial(0, 0.38, loss=1.0), trial(1, 0.38, loss=1.0)]
        assert select_top_by_accuracy(trials, 1)[0].index == 0


class TestTrialRecordSerialization:
    def test_round_trip(self):
        t = trial(3, 0.5, grade=4.0)
        back = TrialRecord.from_json_dict(t.to_json_dict())
        assert back == t

    def test_diverged_objective_is_zero(self):
        t = TrialRecord(
            index=0,
            iteration=0,
            point={"dropout": 0.1, "learningRate": 0.1, "batchSize": 1},
            accuracy=0.0,
            f1=0.0,
            loss=None,
            diverged=True,
        )
        assert t.objective == 0.0
