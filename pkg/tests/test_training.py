"""Tests for SGD training and the finite-difference oracle."""

import numpy as np
import pytest

from src.errors import DivergenceError, ParameterError
from src.kalman import LinearGaussianSystem, kalman_exact
from src.losses import (
    NoiseBundle,
    lpvae_loss,
    lpvae_loss_grad,
    tdvae_jumpy_loss,
    tdvae_jumpy_loss_grad,
)
from src.networks import GenerativeParams, RecognitionParams
from src.training import (
    SequenceData,
    check_gradients,
    finite_difference_grads,
    relative_error,
    train_toy,
)


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    gen = GenerativeParams.init(rng, latent_dim=2, x_dim=3, y_dim=2, scale=0.5)
    rec = RecognitionParams.init(rng, latent_dim=2, x_dim=3, belief_dim=4, hidden_dim=4, scale=0.5)
    dataset = [
        SequenceData(x=rng.normal(size=(4, 3)), y=rng.normal(size=(4, 2))) for _ in range(3)
    ]
    return gen, rec, dataset


class TestSequenceData:
    """Test sequence reshaping."""

    def test_actions_cover_later_steps(self):
        """a and m are reshaped to T - 1 rows."""
        seq = SequenceData(x=np.zeros((4, 2)), a=np.zeros(6), m=np.zeros(9))
        assert seq.steps == 4
        assert seq.a.shape == (3, 2)
        assert seq.m.shape == (3, 3)


class TestTrainToy:
    """Test the SGD loop."""

    def test_zero_step_size_keeps_weights(self, toy):
        """step_size 0 leaves every weight unchanged."""
        gen, rec, dataset = toy
        new_gen, new_rec, trace = train_toy(gen, rec, dataset, steps=3, step_size=0.0, seed=1)
        assert len(trace) == 3
        for name, value in gen.weights.items():
            np.testing.assert_array_equal(new_gen.weights[name], value)
        for name, value in rec.weights.items():
            np.testing.assert_array_equal(new_rec.weights[name], value)

    def test_same_seed_same_trace(self, toy):
        """Training is a pure function of its seed."""
        gen, rec, dataset = toy
        _, _, first = train_toy(gen, rec, dataset, steps=5, step_size=0.01, seed=7)
        _, _, second = train_toy(gen, rec, dataset, steps=5, step_size=0.01, seed=7)
        assert first == second

    def test_trace_rows_decompose(self, toy):
        """Each trace row holds parts that sum to the total."""
        gen, rec, dataset = toy
        _, _, trace = train_toy(gen, rec, dataset, steps=4, step_size=0.01, seed=2)
        for row in trace:
            assert row["encoder"] + row["decoder"] + row["prediction"] == pytest.approx(row["total"])

    def test_nan_input_diverges(self, toy):
        """A NaN observation aborts with DivergenceError."""
        gen, rec, _ = toy
        x = np.zeros((3, 3))
        x[1, 0] = np.nan
        with pytest.raises(DivergenceError):
            train_toy(gen, rec, [SequenceData(x=x)], steps=1, step_size=0.01, seed=0)

    def test_unknown_objective(self, toy):
        """Objectives outside the registry are rejected."""
        gen, rec, dataset = toy
        with pytest.raises(ParameterError):
            train_toy(gen, rec, dataset, steps=1, step_size=0.01, seed=0, objective="elbo")

    def test_empty_dataset(self, toy):
        """Training needs data."""
        gen, rec, _ = toy
        with pytest.raises(ParameterError):
            train_toy(gen, rec, [], steps=1, step_size=0.01, seed=0)

    def test_frozen_generative_side(self, toy):
        """train_generative=False updates recognition weights only."""
        gen, rec, dataset = toy
        new_gen, new_rec, _ = train_toy(
            gen, rec, dataset, steps=2, step_size=0.05, seed=3, train_generative=False
        )
        assert new_gen is gen
        assert any(not np.array_equal(new_rec.weights[k], v) for k, v in rec.weights.items())

    def test_tdvae_loss_decreases(self):
        """The jumpy objective drops over 200 steps on smooth toy sequences."""
        rng = np.random.default_rng(4)
        gen = GenerativeParams.init(rng, latent_dim=2, x_dim=2, jump=True, scale=0.3)
        rec = RecognitionParams.init(rng, latent_dim=2, x_dim=2, belief_dim=4, hidden_dim=4, scale=0.3)
        phases = rng.uniform(0, 2 * np.pi, size=4)
        steps = np.arange(6)[:, None]
        dataset = [
            SequenceData(x=np.hstack([np.sin(0.5 * steps + p), np.cos(0.5 * steps + p)]))
            for p in phases
        ]
        noise = NoiseBundle.draw(np.random.default_rng(5), 64, 6, 2)

        def evaluate(g, r):
            return np.mean([tdvae_jumpy_loss(g, r, seq.x, 2, 2, noise) for seq in dataset])

        before = evaluate(gen, rec)
        gen, rec, _ = train_toy(
            gen, rec, dataset, steps=200, step_size=0.02, seed=6,
            objective="tdvae", n_samples=4, max_grad_norm=10.0,
        )
        assert evaluate(gen, rec) < before

    @pytest.mark.slow
    def test_prefix_loss_approaches_likelihood(self):
        """Training the recognition side on linear data halves the gap to the exact NLL."""
        rng = np.random.default_rng(8)
        system = LinearGaussianSystem.random(rng, d=2, n_y=2)
        gen = GenerativeParams.from_linear_system(system)
        rec = RecognitionParams.init(rng, latent_dim=2, x_dim=2, belief_dim=6, hidden_dim=6)
        dataset = [SequenceData(*system.sample(rng, 5)[1:]) for _ in range(8)]
        noise = NoiseBundle.draw(np.random.default_rng(9), 256, 5, 2)

        def gap(r):
            return np.mean([
                lpvae_loss(gen, r, seq.x, seq.y, 5, noise).total - kalman_exact(system, seq.x, seq.y).nll
                for seq in dataset
            ])

        start = gap(rec)
        _, rec, _ = train_toy(
            gen, rec, dataset, steps=500, step_size=0.01, seed=10,
            n_samples=4, max_grad_norm=5.0, train_generative=False, t_min_fraction=1.0,
        )
        assert gap(rec) < 0.5 * start


class TestFiniteDifferences:
    """Test the gradient oracle itself."""

    def test_quadratic(self):
        """Central differences of sum(w^2) give 2w."""
        weights = {"w": np.array([[1.0, -2.0], [0.5, 3.0]])}
        numeric = finite_difference_grads(lambda w: float(np.sum(w["w"] ** 2)), weights)
        np.testing.assert_allclose(numeric["w"], 2 * weights["w"], atol=1e-8)

    def test_named_subset(self):
        """Only the named weights are differenced."""
        weights = {"a": np.ones(2), "b": np.ones(3)}
        numeric = finite_difference_grads(lambda w: float(w["a"].sum() * w["b"].sum()), weights, ["b"])
        assert list(numeric) == ["b"]
        np.testing.assert_allclose(numeric["b"], np.full(3, 2.0), atol=1e-8)

    def test_check_gradients_reports_error(self):
        """A wrong analytic gradient shows a large relative error."""
        weights = {"w": np.array([1.0, 2.0])}
        errors = check_gradients(lambda w: float(np.sum(w["w"] ** 2)), {"w": weights["w"]}, weights)
        assert errors["w"] == pytest.approx(0.5, rel=1e-6)

    def test_relative_error_floor(self):
        """Tiny gradients are compared against the absolute floor."""
        assert relative_error(np.array([1e-9]), np.array([0.0])) == pytest.approx(1e-5)


class TestLossGradients:
    """Test full-loss gradients against central differences over many random models."""

    @pytest.mark.parametrize("seed", range(50))
    def test_prefix_loss_total(self, seed):
        """Every generative and recognition weight of the prefix loss differentiates correctly."""
        rng = np.random.default_rng(seed)
        gen = GenerativeParams.init(rng, latent_dim=2, x_dim=3, y_dim=2, scale=0.5)
        rec = RecognitionParams.init(rng, latent_dim=2, x_dim=3, belief_dim=3, hidden_dim=3, scale=0.5)
        x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 2))
        t = int(rng.integers(1, 5))
        noise = NoiseBundle.draw(rng, 2, 4, 2)
        _, g_grads, r_grads = lpvae_loss_grad(gen, rec, x, y, t, noise)
        g_err = check_gradients(
            lambda w: lpvae_loss(gen.with_weights(w), rec, x, y, t, noise).total, g_grads, gen.weights
        )
        r_err = check_gradients(
            lambda w: lpvae_loss(gen, rec.with_weights(w), x, y, t, noise).total, r_grads, rec.weights
        )
        assert max(g_err.values()) < 1e-4
        assert max(r_err.values()) < 1e-4

    @pytest.mark.parametrize("seed", range(50))
    def test_jumpy_loss_total(self, seed):
        """Every weight of the jumpy loss differentiates correctly, jump head included."""
        rng = np.random.default_rng(1000 + seed)
        gen = GenerativeParams.init(rng, latent_dim=2, x_dim=2, jump=True, scale=0.5)
        rec = RecognitionParams.init(rng, latent_dim=2, x_dim=2, belief_dim=3, hidden_dim=3, scale=0.5)
        x = rng.normal(size=(5, 2))
        t = int(rng.integers(1, 4))
        delta = int(rng.integers(1, 5 - t + 1))
        noise = NoiseBundle.draw(rng, 2, 5, 2)
        _, g_grads, r_grads = tdvae_jumpy_loss_grad(gen, rec, x, t, delta, noise)
        g_err = check_gradients(
            lambda w: tdvae_jumpy_loss(gen.with_weights(w), rec, x, t, delta, noise), g_grads, gen.weights
        )
        r_err = check_gradients(
            lambda w: tdvae_jumpy_loss(gen, rec.with_weights(w), x, t, delta, noise), r_grads, rec.weights
        )
        assert max(g_err.values()) < 1e-4
        assert max(r_err.values()) < 1e-4
