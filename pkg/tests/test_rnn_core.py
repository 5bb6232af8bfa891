"""
Unit tests for the recurrent cells, projector, heads and loss terms.
"""

import math

import numpy as np
import pytest

from coherence_warning.forecast_dist import EmptyBatchError, TwoPartDist
from coherence_warning.rnn_core import (
    CELL_KINDS,
    HiddenTrajectory,
    LossWeights,
    NumericError,
    RmModel,
    aligned_targets,
    backward_errors,
    cell_forward,
    cell_step,
    forward_pass,
    init_model,
    loss_and_gradients,
    loss_value,
    parameter_shapes,
    predict,
    projector_apply,
    q_hat,
    rm_loss,
    rm_loss_windowed,
    task_loss,
    zero_model,
)


def random_model(
    cell_kind, input_dim=3, hidden_dim=4, leads=(1, 2), dist_hidden=3, seed=0, scale=0.5
):
    model = zero_model(cell_kind, input_dim, hidden_dim, leads, dist_hidden)
    rng = np.random.default_rng(seed)
    for name, value in model.params.items():
        model.params[name] = rng.normal(0.0, scale, size=value.shape)
    return model


class TestModelLayout:
    """Parameter naming, shapes and initialization."""

    @pytest.mark.unit
    def test_gate_names(self):
        assert list(parameter_shapes("elman", 3, 4, 1, 2))[:3] == ["W_x", "W_h", "b_h"]
        gru = parameter_shapes("gru", 3, 4, 1, 2)
        for gate in ("z", "r", "c"):
            assert gru[f"W_{gate}"] == (4, 3)
            assert gru[f"U_{gate}"] == (4, 4)
            assert gru[f"b_{gate}"] == (4,)
        lstm = parameter_shapes("lstm", 3, 4, 2, 5)
        assert {f"W_{g}" for g in "ifog"} <= set(lstm)
        assert lstm["D_W2"] == (6, 5)
        assert lstm["Y_W"] == (2, 4)

    @pytest.mark.unit
    def test_unknown_cell(self):
        with pytest.raises(ValueError):
            parameter_shapes("transformer", 3, 4, 1, 2)

    @pytest.mark.unit
    @pytest.mark.parametrize("cell_kind", CELL_KINDS)
    def test_projector_starts_as_identity(self, cell_kind, rng):
        model = init_model(
            cell_kind, input_dim=5, hidden_dim=6, leads=[1, 3], dist_hidden=4, seed=2
        )
        h = rng.normal(size=(7, 6))
        np.testing.assert_array_equal(projector_apply(h, model), h)
        assert not np.any(model.params["P_W2"])
        assert not np.any(model.params["P_b2"])
        assert np.any(model.params["P_W1"])

    @pytest.mark.unit
    def test_init_is_seeded(self):
        a = init_model("gru", 4, 5, seed=9)
        b = init_model("gru", 4, 5, seed=9)
        c = init_model("gru", 4, 5, seed=10)
        for name in a.parameter_names:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        assert not np.array_equal(a.params["W_z"], c.params["W_z"])

    @pytest.mark.unit
    def test_shape_mismatch_rejected(self):
        model = zero_model("elman", 2, 3)
        params = dict(model.params)
        params["W_h"] = np.zeros((2, 2))
        with pytest.raises(ValueError, match="W_h"):
            RmModel("elman", 2, 3, [1], 4, params)

    @pytest.mark.unit
    def test_non_finite_parameter_rejected(self):
        model = zero_model("elman", 2, 3)
        params = dict(model.params)
        params["b_h"] = np.array([0.0, np.inf, 0.0])
        with pytest.raises(NumericError):
            RmModel("elman", 2, 3, [1], 4, params)

    @pytest.mark.unit
    def test_copy_is_deep(self):
        model = init_model("lstm", 2, 3, seed=1)
        clone = model.copy()
        clone.params["W_i"][0, 0] += 1.0
        assert clone.params["W_i"][0, 0] != model.params["W_i"][0, 0]


class TestCells:
    """Single-step cell equations."""

    @pytest.mark.unit
    def test_elman_zero_model(self):
        model = zero_model("elman", 2, 3)
        h = cell_forward(np.array([1.0, -1.0]), np.ones(3), model)
        np.testing.assert_array_equal(h, np.zeros(3))

    @pytest.mark.unit
    def test_elman_identity_input(self):
        model = zero_model("elman", 2, 2)
        model.params["W_x"] = np.eye(2)
        x = np.array([0.3, -2.0])
        np.testing.assert_allclose(cell_forward(x, np.zeros(2), model), np.tanh(x))

    @pytest.mark.unit
    def test_gru_zero_model_halves_state(self):
        model = zero_model("gru", 2, 2)
        h = cell_forward(np.zeros(2), np.array([1.0, 2.0]), model)
        np.testing.assert_allclose(h, [0.5, 1.0])

    @pytest.mark.unit
    def test_lstm_zero_model(self):
        model = zero_model("lstm", 2, 2)
        h, c = cell_step(np.zeros(2), np.zeros(2), model, np.array([2.0, 0.0]))
        np.testing.assert_allclose(c, [1.0, 0.0])
        np.testing.assert_allclose(h, [0.5 * math.tanh(1.0), 0.0])

    @pytest.mark.unit
    def test_memoryless_cells_return_no_memory(self):
        _, c = cell_step(np.zeros(2), np.zeros(2), zero_model("gru", 2, 2))
        assert c is None

    @pytest.mark.unit
    def test_bad_dimensions(self):
        model = zero_model("elman", 2, 3)
        with pytest.raises(ValueError):
            cell_forward(np.zeros(3), np.zeros(3), model)
        with pytest.raises(NumericError):
            cell_forward(np.array([np.nan, 0.0]), np.zeros(3), model)

    @pytest.mark.unit
    def test_gru_closed_update_gate_holds_state(self, rng):
        model = random_model("gru", seed=5)
        model.params["b_z"] = np.full(4, -60.0)
        h = rng.normal(size=4)
        for _ in range(20):
            h_next = cell_forward(rng.normal(size=3), h, model)
            np.testing.assert_allclose(h_next, h, rtol=0.0, atol=1e-20)
            h = h_next

    @pytest.mark.unit
    def test_contractive_elman_reaches_fixed_point(self, rng):
        model = random_model("elman", seed=6)
        w_h = rng.normal(size=(4, 4))
        model.params["W_h"] = 0.5 * w_h / np.linalg.norm(w_h, 2)
        x = rng.normal(size=3)
        H = forward_pass(np.tile(x, (200, 1)), model).trajectory.h

        p = model.params
        fixed = np.tanh(p["W_x"] @ x + p["b_h"] + p["W_h"] @ H[-1])
        np.testing.assert_allclose(H[-1], fixed, atol=1e-12)
        np.testing.assert_allclose(H[-2], H[-1], atol=1e-12)


class TestForwardPass:
    """Unrolled forward pass and heads."""

    @pytest.mark.unit
    @pytest.mark.parametrize("cell_kind", CELL_KINDS)
    def test_matches_stepwise_cells(self, cell_kind, rng):
        model = random_model(cell_kind, seed=3)
        X = rng.normal(size=(8, 3))
        result = forward_pass(X, model)

        h, c = np.zeros(4), None
        for t in range(8):
            h, c = cell_step(X[t], h, model, c)
            np.testing.assert_allclose(
                result.trajectory.h[t], h, rtol=1e-12, atol=1e-14
            )

    @pytest.mark.unit
    def test_head_shapes(self, rng):
        model = random_model("gru", leads=(1, 2, 6))
        dist, point = predict(model, rng.normal(size=(5, 3)))
        assert point.shape == (5, 3)
        assert np.shape(dist.pi0) == (5, 3)
        assert np.all((dist.pi0 > 0) & (dist.pi0 < 1))
        assert np.all(dist.sigma >= 1e-3) and np.all(dist.sigma <= 1e3)

    @pytest.mark.unit
    def test_input_validation(self, rng):
        model = random_model("elman")
        with pytest.raises(ValueError):
            forward_pass(rng.normal(size=(1, 3)), model)
        with pytest.raises(ValueError):
            forward_pass(rng.normal(size=(4, 2)), model)
        bad = rng.normal(size=(4, 3))
        bad[2, 1] = np.inf
        with pytest.raises(NumericError):
            forward_pass(bad, model)

    @pytest.mark.unit
    def test_trajectory_rejects_non_finite(self):
        with pytest.raises(NumericError):
            HiddenTrajectory(np.array([[0.0, np.nan]]))


class TestBackwardCoherence:
    """Projector defects and RM loss."""

    @pytest.mark.unit
    def test_hand_computed_identity_projector(self):
        model = zero_model("elman", 1, 1)
        h = np.array([[0.0], [1.0], [3.0]])

        np.testing.assert_array_equal(backward_errors(h, model), [[-1.0], [-2.0]])
        assert q_hat(h, model) == 5.0
        assert rm_loss(h, model) == 2.5
        assert rm_loss_windowed(h[1:], model) == 4.0

    @pytest.mark.unit
    def test_projector_formula(self, rng):
        model = random_model("elman", hidden_dim=4)
        p = model.params
        h = rng.normal(size=4)
        hidden = np.maximum(p["P_W1"] @ h + p["P_b1"], 0.0)
        expected = h + p["P_W2"] @ hidden + p["P_b2"]
        np.testing.assert_allclose(projector_apply(h, model), expected)

    @pytest.mark.unit
    def test_rm_nonnegative_and_zero_for_constant_states(self, rng):
        model = init_model("gru", 3, 4, seed=1)
        assert rm_loss(np.tile(rng.normal(size=4), (6, 1)), model) == 0.0
        assert rm_loss(HiddenTrajectory(rng.normal(size=(6, 4))), model) > 0.0

    @pytest.mark.unit
    def test_window_needs_two_states(self):
        with pytest.raises(ValueError):
            rm_loss_windowed(np.zeros((1, 3)), zero_model("elman", 1, 3))

    @pytest.mark.unit
    @pytest.mark.parametrize("cell_kind", CELL_KINDS)
    def test_q_hat_is_sum_of_pair_losses(self, cell_kind, rng):
        model = random_model(cell_kind, seed=11)
        for T in (2, 7, 50):
            traj = forward_pass(rng.normal(size=(T, 3)), model).trajectory
            expected = (T - 1) * rm_loss(traj, model)
            assert q_hat(traj, model) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.unit
    def test_windowed_loss_matches_direct_windows(self, rng):
        model = random_model("elman", seed=12)
        h = rng.normal(size=(2000, 4))
        pair_losses = np.array(
            [
                np.sum((h[t] - projector_apply(h[t + 1], model)) ** 2)
                for t in range(1999)
            ]
        )
        for end in range(168, 2001, 37):
            buffer = h[end - 168 : end]
            expected = np.mean(pair_losses[end - 168 : end - 1])
            assert rm_loss_windowed(buffer, model) == pytest.approx(expected, rel=1e-12)


class TestTaskLoss:
    """Lead-aligned distribution NLL."""

    @pytest.mark.unit
    def test_hand_value(self):
        dist = TwoPartDist(np.full(3, 0.5), np.zeros(3), np.ones(3))
        value = task_loss(dist, np.array([0.0, 1.0, 0.0]), lead=1)
        expected = math.log(2.0) + 0.5 * 0.5 * math.log(2.0 * math.pi)
        assert value == pytest.approx(expected)

    @pytest.mark.unit
    def test_missing_targets_skipped(self):
        dist = TwoPartDist(np.full(3, 0.25), np.zeros(3), np.ones(3))
        value = task_loss(dist, np.array([np.nan, 0.0, np.nan]), lead=0)
        assert value == pytest.approx(-math.log(0.25))

    @pytest.mark.unit
    def test_lead_range(self):
        dist = TwoPartDist(np.full(3, 0.5), np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            task_loss(dist, np.zeros(3), lead=3)
        with pytest.raises(EmptyBatchError):
            task_loss(dist, np.full(3, np.nan), lead=0)

    @pytest.mark.unit
    def test_aligned_targets(self):
        Y = aligned_targets(np.array([1.0, 2.0, 3.0]), [0, 2])
        np.testing.assert_array_equal(Y[:, 0], [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(Y[:, 1], [3.0, np.nan, np.nan])


class TestLossAndGradients:
    """Analytic loss agrees with the independent evaluation."""

    @pytest.mark.unit
    @pytest.mark.parametrize("cell_kind", CELL_KINDS)
    @pytest.mark.parametrize("rm_window", [0, 4])
    def test_total_matches_loss_value(self, cell_kind, rm_window, rng):
        model = random_model(cell_kind, seed=5)
        X = rng.normal(size=(10, 3))
        y = np.array([0.0, 1.3, 0.0, 4.0, np.nan, 0.2, 0.0, 2.5, 0.0, 7.0])

        parts, grads = loss_and_gradients(model, X, y, lam=0.3, rm_window=rm_window)

        expected = loss_value(model, X, y, 0.3, rm_window=rm_window)
        assert parts.total == pytest.approx(expected, rel=1e-10)
        assert parts.task == pytest.approx(parts.nll + 0.1 * parts.mse)
        assert parts.n_pairs == 15
        assert set(grads) == set(model.params)

    @pytest.mark.unit
    def test_no_projector_gradient_without_regularization(self, rng):
        model = random_model("gru", seed=1)
        X = rng.normal(size=(6, 3))
        _, grads = loss_and_gradients(model, X, np.ones(6), lam=0.0)
        for name in ("P_W1", "P_b1", "P_W2", "P_b2"):
            assert not np.any(grads[name])

    @pytest.mark.unit
    def test_weights_scale_terms(self, rng):
        model = random_model("elman", seed=2)
        X, y = rng.normal(size=(6, 3)), np.array([0.0, 1.0, 2.0, 0.0, 3.0, 0.5])
        parts, _ = loss_and_gradients(model, X, y, 0.0, LossWeights(nll=0.0, aux=1.0))
        assert parts.total == pytest.approx(parts.mse)

    @pytest.mark.unit
    def test_all_targets_missing(self, rng):
        with pytest.raises(EmptyBatchError):
            loss_and_gradients(
                random_model("elman"), rng.normal(size=(4, 3)), np.full(4, np.nan), 0.1
            )
