"""Tests for the sequence-model losses."""

import math

import numpy as np
import pytest

from src.errors import NumericalError, ParameterError
from src.gaussian import diag_log_prob
from src.kalman import LinearGaussianSystem, expected_prefix_loss, kalman_exact
from src.losses import (
    LossBreakdown,
    NoiseBundle,
    lpvae_action_loss,
    lpvae_action_loss_grad,
    lpvae_loss,
    lpvae_loss_grad,
    one_step_elbo,
    stdvae_breakdown,
    stdvae_loss,
    stdvae_loss_grad,
    tdvae_breakdown,
    tdvae_jumpy_loss,
)
from src.networks import (
    GenerativeParams,
    KalmanRecognition,
    ParamContext,
    RecognitionParams,
)
from src.tape import Var
from src.training import check_gradients

STEPS = 5


@pytest.fixture
def linear_setup():
    """Exact generative params and exact recognition heads on linear-Gaussian data."""
    rng = np.random.default_rng(0)
    system = LinearGaussianSystem.random(rng, d=2, n_y=2)
    _, x, y = system.sample(rng, STEPS)
    gen = GenerativeParams.from_linear_system(system)
    rec = KalmanRecognition.exact(system, x)
    return system, gen, rec, x, y


@pytest.fixture
def network_setup():
    """Small gated generative model and GRU recognition with random weights."""
    rng = np.random.default_rng(1)
    gen = GenerativeParams.init(rng, latent_dim=2, x_dim=3, y_dim=2, scale=0.8)
    rec = RecognitionParams.init(rng, latent_dim=2, x_dim=3, belief_dim=3, hidden_dim=3, scale=0.8)
    x = rng.normal(size=(3, 3))
    y = rng.normal(size=(3, 2))
    return gen, rec, x, y


class TestLossBreakdown:
    """Test the decomposition record."""

    def test_parts_must_sum(self):
        """A total that is not the sum of its parts is rejected."""
        with pytest.raises(NumericalError):
            LossBreakdown(1.0, 2.0, 3.0, total=7.0)

    def test_from_samples(self):
        """from_samples averages each part and reports a standard error."""
        b = LossBreakdown.from_samples([1.0, 3.0], [0.0, 0.0], [1.0, 1.0])
        assert b.total == pytest.approx(3.0)
        assert b.n_samples == 2
        assert b.total_stderr == pytest.approx(1.0)


class TestLpvaeLoss:
    """Test the prefix loss."""

    def test_single_step_is_elbo(self, linear_setup):
        """T = 1, t = 1 reduces to the one-step negative ELBO."""
        system, gen, _, x, y = linear_setup
        rec = KalmanRecognition.exact(system, x[:1])
        noise = NoiseBundle.draw(np.random.default_rng(2), 16, 1, 2)
        loss = lpvae_loss(gen, rec, x[:1], y[:1], 1, noise)
        assert loss.total == pytest.approx(one_step_elbo(gen, rec, x[0], y[0], noise).mean())
        assert loss.prediction_term == 0.0

    def test_split_range(self, linear_setup):
        """t outside [1, T] is a parameter error."""
        _, gen, rec, x, y = linear_setup
        noise = NoiseBundle.zeros(1, STEPS, 2)
        for t in (0, STEPS + 1):
            with pytest.raises(ParameterError):
                lpvae_loss(gen, rec, x, y, t, noise)

    def test_lower_bounds_likelihood(self, linear_setup):
        """The averaged loss is at least the exact NLL."""
        system, gen, rec, x, y = linear_setup
        noise = NoiseBundle.draw(np.random.default_rng(3), 10_000, STEPS, 2)
        loss = lpvae_loss(gen, rec, x, y, 3, noise)
        assert loss.total >= kalman_exact(system, x, y).nll - 3 * loss.total_stderr

    @pytest.mark.parametrize("recognition", ["exact", "random"])
    @pytest.mark.parametrize("index", range(20))
    def test_bounds_likelihood_on_random_systems(self, index, recognition):
        """On random systems up to d = 4 and T = 10 the loss never undercuts the NLL."""
        rng = np.random.default_rng(100 + index)
        d, steps = int(rng.integers(1, 5)), int(rng.integers(1, 11))
        t = int(rng.integers(1, steps + 1))
        system = LinearGaussianSystem.random(rng, d=d, n_y=2)
        _, x, y = system.sample(rng, steps)
        gen = GenerativeParams.from_linear_system(system)
        rec = KalmanRecognition.exact(system, x)
        if recognition == "random":
            rec = rec.interpolated(float(rng.uniform(0.0, 1.0)))
        nll = kalman_exact(system, x, y).nll
        expected = expected_prefix_loss(system, rec, x, y, t)
        assert expected >= nll - 1e-9
        loss = lpvae_loss(gen, rec, x, y, t, NoiseBundle.draw(rng, 4000, steps, d))
        assert loss.total >= nll - 3 * loss.total_stderr
        assert abs(loss.total - expected) < 4 * loss.total_stderr + 1e-9

    @pytest.mark.parametrize("lam", [0.3, 1.0])
    def test_gap_equals_exact_kl(self, linear_setup, lam):
        """E[loss] - NLL matches the exact KL of the sampling joint to the posterior."""
        system, gen, rec, x, y = linear_setup
        rec = rec.interpolated(lam)
        noise = NoiseBundle.draw(np.random.default_rng(4), 10_000, STEPS, 2)
        loss = lpvae_loss(gen, rec, x, y, 3, noise)
        expected = expected_prefix_loss(system, rec, x, y, 3)
        assert abs(loss.total - expected) < 4 * loss.total_stderr

    def test_decoder_only_perturbation(self, linear_setup):
        """Moving the y emission bias changes decoder and total by the same amount."""
        _, gen, rec, x, y = linear_setup
        noise = NoiseBundle.draw(np.random.default_rng(5), 32, STEPS, 2)
        before = lpvae_loss(gen, rec, x, y, STEPS, noise)
        weights = dict(gen.weights)
        weights["emit_y.b"] = weights["emit_y.b"] + 0.7
        after = lpvae_loss(gen.with_weights(weights), rec, x, y, STEPS, noise)
        assert after.encoder_term == pytest.approx(before.encoder_term)
        assert after.prediction_term == pytest.approx(before.prediction_term)
        assert after.decoder_term - before.decoder_term == pytest.approx(after.total - before.total)
        assert after.decoder_term != pytest.approx(before.decoder_term)

    def test_gradients_match_finite_differences(self, network_setup):
        """Tape gradients of the prefix loss match central differences."""
        gen, rec, x, y = network_setup
        noise = NoiseBundle.draw(np.random.default_rng(6), 2, 3, 2)
        _, g_grads, r_grads = lpvae_loss_grad(gen, rec, x, y, 2, noise)

        def gen_loss(w):
            return lpvae_loss(gen.with_weights(w), rec, x, y, 2, noise).total

        def rec_loss(w):
            return lpvae_loss(gen, rec.with_weights(w), x, y, 2, noise).total

        g_err = check_gradients(gen_loss, g_grads, gen.weights, ["trans.f.W", "trans.s.b", "emit_x.W", "emit_y.b"])
        r_err = check_gradients(rec_loss, r_grads, rec.weights, ["gru.z.W", "gru.n.b", "belief.mu.b", "smooth.h1.W"])
        assert max(g_err.values()) < 1e-4
        assert max(r_err.values()) < 1e-4

    def test_weighted_ce_emission(self):
        """The class-weighted y likelihood gives a finite loss with matching gradients."""
        rng = np.random.default_rng(7)
        gen = GenerativeParams.init(rng, 2, 3, 12, y_likelihood="weighted_ce", scale=0.5)
        rec = RecognitionParams.init(rng, 2, 3, belief_dim=3, hidden_dim=3)
        raw = rng.random((2, 2, 6))
        y = (raw / raw.sum(-1, keepdims=True)).reshape(2, 12)
        x = rng.normal(size=(2, 3))
        noise = NoiseBundle.draw(rng, 2, 2, 2)
        loss, g_grads, _ = lpvae_loss_grad(gen, rec, x, y, 1, noise)
        assert math.isfinite(loss.total)
        err = check_gradients(
            lambda w: lpvae_loss(gen.with_weights(w), rec, x, y, 1, noise).total,
            g_grads, gen.weights, ["emit_y.W"],
        )
        assert err["emit_y.W"] < 1e-4

    def test_class_weights_reach_the_emission(self):
        """Weights given at init scale the class-weighted y likelihood."""
        rng = np.random.default_rng(8)
        base = GenerativeParams.init(rng, 2, 3, 12, y_likelihood="weighted_ce", scale=0.5)
        heavy = GenerativeParams.init(
            rng, 2, 3, 12, y_likelihood="weighted_ce", class_weights=(1.0,) * 6, scale=0.5
        ).with_weights(base.weights)
        assert heavy.class_weights == (1.0,) * 6
        rec = RecognitionParams.init(rng, 2, 3, belief_dim=3, hidden_dim=3)
        raw = rng.random((2, 2, 6))
        y = (raw / raw.sum(-1, keepdims=True)).reshape(2, 12)
        x = rng.normal(size=(2, 3))
        noise = NoiseBundle.draw(rng, 2, 2, 2)
        a = lpvae_loss(base, rec, x, y, 1, noise).total
        b = lpvae_loss(heavy, rec, x, y, 1, noise).total
        assert a != pytest.approx(b, rel=1e-6)


class TestLpvaeActionLoss:
    """Test the prefix loss with actions and masks."""

    @pytest.fixture
    def action_setup(self):
        rng = np.random.default_rng(8)
        gen = GenerativeParams.init(
            rng, 2, 3, 2, action_dim=4, mask_dim=3, scale=0.8
        )
        rec = RecognitionParams.init(rng, 2, 3, belief_dim=3, hidden_dim=3, scale=0.8)
        x = rng.normal(size=(3, 3))
        y = rng.normal(size=(3, 2))
        a = rng.random((2, 4))
        m = rng.normal(size=(2, 3))
        return gen, rec, x, y, a, m

    def test_reduces_without_action_influence(self, network_setup):
        """Zero weights on x_prev, y and a give the plain prefix loss."""
        gen, rec, x, y = network_setup
        wide = np.zeros((3, 3 + 2 + 2 + 4))
        wide[:, 5:7] = gen.weights["emit_x.W"]
        weights = dict(gen.weights)
        weights["emit_x.W"] = wide
        action_gen = GenerativeParams(weights, latent_dim=2, x_dim=3, y_dim=2, action_dim=4)
        noise = NoiseBundle.draw(np.random.default_rng(9), 8, 3, 2)
        a = np.random.default_rng(10).random((2, 4))
        plain = lpvae_loss(gen, rec, x, y, 2, noise)
        acting = lpvae_action_loss(action_gen, rec, x, y, None, a, 2, noise, drop_first_x=False)
        assert acting.total == pytest.approx(plain.total)
        assert acting.decoder_term == pytest.approx(plain.decoder_term)

    def test_exact_mask_head_costs_normalizer_only(self, action_setup):
        """A mask head that reproduces the masks adds only the Gaussian normalizers."""
        gen, rec, x, y, a, _ = action_setup
        vacuous_mask = np.array([0.0, 0.0, 1.0])
        weights = dict(gen.weights)
        weights["emit_m.W"] = np.zeros_like(weights["emit_m.W"])
        weights["emit_m.b"] = vacuous_mask
        gen = gen.with_weights(weights)
        masks = np.tile(vacuous_mask, (2, 1))
        empty = np.zeros((2, 4))
        noise = NoiseBundle.draw(np.random.default_rng(11), 4, 3, 2)
        with_mask = lpvae_action_loss(gen, rec, x, y, masks, empty, 2, noise)
        without = lpvae_action_loss(gen, rec, x, y, None, empty, 2, noise)
        expected = 2 * 0.5 * 3 * math.log(2 * math.pi * gen.alpha_x)
        assert with_mask.total - without.total == pytest.approx(expected)

    def test_first_frame_dropped(self, action_setup):
        """Dropping the first x term lowers the decoder term by its NLL."""
        gen, rec, x, y, a, m = action_setup
        noise = NoiseBundle.draw(np.random.default_rng(12), 4, 3, 2)
        dropped = lpvae_action_loss(gen, rec, x, y, m, a, 2, noise)
        kept = lpvae_action_loss(gen, rec, x, y, m, a, 2, noise, drop_first_x=False)
        assert dropped.encoder_term == pytest.approx(kept.encoder_term)
        assert dropped.prediction_term == pytest.approx(kept.prediction_term)
        assert dropped.decoder_term != pytest.approx(kept.decoder_term)

    def test_gradients_match_finite_differences(self, action_setup):
        """Tape gradients of the action loss match central differences."""
        gen, rec, x, y, a, m = action_setup
        noise = NoiseBundle.draw(np.random.default_rng(13), 2, 3, 2)
        _, g_grads, _ = lpvae_action_loss_grad(gen, rec, x, y, m, a, 1, noise)
        errors = check_gradients(
            lambda w: lpvae_action_loss(gen.with_weights(w), rec, x, y, m, a, 1, noise).total,
            g_grads, gen.weights, ["emit_x.W", "emit_m.W", "trans.c.W"],
        )
        assert max(errors.values()) < 1e-4

    def test_needs_action_model(self, network_setup):
        """Plain generative params cannot evaluate the action loss."""
        gen, rec, x, y = network_setup
        with pytest.raises(ParameterError):
            lpvae_action_loss(gen, rec, x, y, None, np.zeros((2, 4)), 1, NoiseBundle.zeros(1, 3, 2))


def standard_normal_setup(x_value, steps):
    """Linear model and recognition whose every latent distribution is N(0, I)."""
    d = 2
    gen = GenerativeParams(
        {
            "trans.A": np.zeros(d),
            "trans.b": np.zeros(d),
            "trans.log_std": np.zeros(d),
            "emit_x.W": np.zeros((2, d)),
            "emit_x.b": np.asarray(x_value, dtype=float),
        },
        latent_dim=d,
        x_dim=2,
        transition="linear",
    )
    rec = KalmanRecognition(np.zeros((steps, d)), np.ones((steps, d)), np.zeros(d), np.ones(d))
    return gen, rec


class TestStdvaeLoss:
    """Test the smoothing loss."""

    def test_two_step_hand_expansion(self, linear_setup):
        """T = 2, t = 1 matches the hand-expanded term list."""
        system, gen, _, x, _ = linear_setup
        x = x[:2]
        rec = KalmanRecognition.exact(system, x)
        noise = NoiseBundle.draw(np.random.default_rng(14), 64, 2, 2)
        e1, e2 = noise.at(1), noise.at(2)

        def gauss(z, mean, var):
            return diag_log_prob(z, mean, 0.5 * np.log(var))

        z2 = rec.means[1] + np.sqrt(rec.variances[1]) * e2
        alpha, gain, var = rec.smoothing_coefficients(1)
        z1 = alpha + gain * z2 + np.sqrt(var) * e1
        ax = np.full(2, system.alpha_x)
        expected = (
            gauss(z2, rec.means[1], rec.variances[1])
            + gauss(z1, alpha + gain * z2, var)
            - gauss(z1, rec.means[0], rec.variances[0])
            - gauss(z2, system.a * z1, system.q)
            - gauss(x[0], z1 @ system.C.T, ax)
            - gauss(x[1], z2 @ system.C.T, ax)
        )
        assert stdvae_loss(gen, rec, x, 1, noise) == pytest.approx(expected.mean())

    @pytest.mark.parametrize("t", [1, 2, 3])
    def test_standard_normals_leave_emission_constants(self, t):
        """With N(0, I) everywhere and a perfect decoder only normalizers remain."""
        steps = 4
        x_value = np.array([0.4, -1.2])
        gen, rec = standard_normal_setup(x_value, steps)
        x = np.tile(x_value, (steps, 1))
        noise = NoiseBundle.draw(np.random.default_rng(15), 8, steps, 2)
        expected = (steps - t + 1) * 2 * 0.5 * math.log(2 * math.pi * gen.alpha_x)
        assert stdvae_loss(gen, rec, x, t, noise) == pytest.approx(expected)

    def test_latent_part_nonnegative(self, network_setup):
        """The latent (KL) part is nonnegative at 10^5 samples."""
        gen, rec, x, _ = network_setup
        noise = NoiseBundle.draw(np.random.default_rng(16), 100_000, 3, 2)
        b = stdvae_breakdown(gen, rec, x, 1, noise)
        assert b.encoder_term >= -3 * b.encoder_stderr

    def test_split_range(self, network_setup):
        """t must leave at least one later step."""
        gen, rec, x, _ = network_setup
        with pytest.raises(ParameterError):
            stdvae_loss(gen, rec, x, 3, NoiseBundle.zeros(1, 3, 2))

    def test_gradients_match_finite_differences(self, network_setup):
        """Tape gradients of the smoothing loss match central differences."""
        gen, rec, x, _ = network_setup
        noise = NoiseBundle.draw(np.random.default_rng(17), 2, 3, 2)
        _, _, r_grads = stdvae_loss_grad(gen, rec, x, 1, noise)
        errors = check_gradients(
            lambda w: stdvae_loss(gen, rec.with_weights(w), x, 1, noise),
            r_grads, rec.weights, ["smooth.mu.W", "belief.ls.b"],
        )
        assert max(errors.values()) < 1e-4


class TestTdvaeJumpyLoss:
    """Test the two-point jumpy loss."""

    def test_unit_jump_matches_smoothing_terms(self, network_setup):
        """delta = 1 has the latent terms of the two-point smoothing loss."""
        gen, rec, x, _ = network_setup
        noise = NoiseBundle.draw(np.random.default_rng(18), 16, 3, 2)
        jumpy = tdvae_breakdown(gen, rec, x, 1, 1, noise)
        smooth = stdvae_breakdown(gen, rec, x[:2], 1, noise)
        assert jumpy.encoder_term == pytest.approx(smooth.encoder_term)

    def test_identical_heads_cancel(self, network_setup):
        """When the smoothing head equals the belief head only the far-point terms remain."""
        gen, rec, x, _ = network_setup
        weights = dict(rec.weights)
        belief_dim = rec.belief_dim
        for part in ("h1", "h2"):
            w = np.zeros_like(weights[f"smooth.{part}.W"])
            w[:, :belief_dim] = weights[f"belief.{part}.W"]
            weights[f"smooth.{part}.W"] = w
            weights[f"smooth.{part}.b"] = weights[f"belief.{part}.b"]
        for part in ("mu", "ls"):
            weights[f"smooth.{part}.W"] = weights[f"belief.{part}.W"]
            weights[f"smooth.{part}.b"] = weights[f"belief.{part}.b"]
        rec = rec.with_weights(weights)
        noise = NoiseBundle.draw(np.random.default_rng(19), 50_000, 3, 2)
        t, delta = 1, 1
        loss = tdvae_breakdown(gen, rec, x, t, delta, noise)

        ctx = ParamContext(rec.weights)
        beliefs = rec.beliefs(ctx, x)
        far_mean, far_ls = (v.value for v in rec.belief_dist(ctx, beliefs, t + delta))
        near_mean, near_ls = (v.value for v in rec.belief_dist(ctx, beliefs, t))
        z_far = far_mean + np.exp(far_ls) * noise.at(t + delta)
        z_t = near_mean + np.exp(near_ls) * noise.at(t)
        t_mean, t_ls = (v.value for v in gen.transition_dist(ParamContext(gen.weights), Var(z_t)))
        expected = diag_log_prob(z_far, far_mean, far_ls) - diag_log_prob(z_far, t_mean, t_ls)
        assert loss.encoder_term == pytest.approx(expected.mean(), rel=1e-9, abs=1e-9)
        assert loss.encoder_term >= -3 * loss.encoder_stderr

    def test_long_jump_needs_jumpy_transition(self, network_setup):
        """delta > 1 without jump weights is rejected."""
        gen, rec, x, _ = network_setup
        with pytest.raises(ParameterError):
            tdvae_jumpy_loss(gen, rec, x, 1, 2, NoiseBundle.zeros(1, 3, 2))

    def test_jump_range(self):
        """t + delta beyond T and delta outside the configured range are rejected."""
        rng = np.random.default_rng(20)
        gen = GenerativeParams.init(rng, 2, 3, jump=True)
        rec = RecognitionParams.init(rng, 2, 3)
        x = rng.normal(size=(4, 3))
        noise = NoiseBundle.zeros(1, 4, 2)
        assert math.isfinite(tdvae_jumpy_loss(gen, rec, x, 1, 3, noise))
        with pytest.raises(ParameterError):
            tdvae_jumpy_loss(gen, rec, x, 2, 3, noise)
        with pytest.raises(ParameterError):
            tdvae_jumpy_loss(gen, rec, x, 1, 3, noise, delta_range=(1, 2))
