import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vflpriv.attack import DecoderTarget
from vflpriv.defense import (BasicDefense, FbsDefense, FlatAdam, MinimaxConfig, MinimaxState, NaiveDefense,
                             NeuralPrivacyGame, PrivacyLossKind, SimulatedDecoder, basic_defense_step, fbs_lasso,
                             make_flat_optimizer, minimax, naive_defense_gradient, privacy_loss, prox_privacy,
                             soft_threshold, train_simulated_decoder, update_taus)
from vflpriv.errors import DefenseError
from vflpriv.nn import build_mlp
from vflpriv.nn.model import GradBundle
from vflpriv.protocol import train_vfl

from test_protocol import small_system


# privacy loss choices ----------------------------------------------------------

def test_privacy_loss_values_and_slopes():
    assert privacy_loss(2.0, "neg") == (-2.0, -1.0)
    assert privacy_loss(2.0, "exp") == (math.exp(-2.0), -math.exp(-2.0))
    assert privacy_loss(2.0, "inv") == (0.5, -0.25)
    # inverse loss clamps its argument instead of dividing by zero
    g, slope = privacy_loss(0.0, "inv")
    assert g == pytest.approx(1e8, rel=1e-12) and slope == pytest.approx(-1e16, rel=1e-12)
    with pytest.raises(ValueError):
        privacy_loss(1.0, "log")


@given(st.floats(0.01, 50), st.floats(0.01, 50), st.sampled_from(list(PrivacyLossKind)))
def test_privacy_loss_non_increasing(a, b, kind):
    lo, hi = min(a, b), max(a, b)
    assert privacy_loss(hi, kind)[0] <= privacy_loss(lo, kind)[0]
    assert privacy_loss(lo, kind)[1] <= 0


# proximal step on scalar toys ------------------------------------------------------

def quad(a):
    return lambda th: (0.5 * float((th - a) @ (th - a)), th - a)


def absval(th):
    return float(np.abs(th).sum()), np.sign(th)


def test_prox_quadratic_closed_form():
    th = prox_privacy(np.zeros(1), quad(2.0), 1.0, 1.0, steps=200, lr=0.5)
    assert abs(th[0] - 1.0) <= 1e-6


@pytest.mark.parametrize("tau1, tau2, start, a", [(1.0, 3.0, -1.0, 4.0), (0.2, 0.8, 5.0, 0.0), (2.0, 0.5, 1.0, 1.5)])
def test_prox_quadratic_general(tau1, tau2, start, a):
    th = prox_privacy(np.array([start]), quad(a), tau1, tau2, steps=2000, lr=0.2)
    assert abs(th[0] - (tau1 * a + tau2 * start) / (tau1 + tau2)) <= 1e-6


def test_prox_abs_soft_threshold():
    th = prox_privacy(np.array([3.0]), absval, 1.0, 1.0, steps=200, lr=0.5)
    assert abs(th[0] - 2.0) <= 1e-6
    assert abs(th[0] - soft_threshold(np.array([3.0]), 1.0)[0]) <= 1e-6


@pytest.mark.parametrize("start, t", [(3.0, 0.5), (-2.5, 1.0), (0.4, 1.0), (-0.3, 0.2)])
def test_prox_abs_matches_soft_threshold(start, t):
    # tau1 = t, tau2 = 1 gives the prox of t|x|
    want = soft_threshold(np.array([start]), t)[0]
    if abs(start) > t:
        th = prox_privacy(np.array([start]), absval, t, 1.0, steps=200, lr=0.5)
        assert abs(th[0] - want) <= 1e-6
    else:
        # the minimiser sits on the kink; fixed-step subgradient descent hovers within one step of it
        th = prox_privacy(np.array([start]), absval, t, 1.0, steps=4000, lr=1e-3)
        assert abs(th[0] - want) <= 1e-3


def test_prox_tau1_zero_returns_start():
    start = np.array([0.3, -1.2])
    assert np.array_equal(prox_privacy(start, quad(5.0), 0.0, 1.0, steps=10, lr=0.5), start)


def test_prox_anchoring_monotone_in_tau2():
    dists = []
    for tau2 in (0.5, 1.0, 2.0, 4.0):
        th = prox_privacy(np.zeros(1), quad(2.0), 1.0, tau2, steps=2000, lr=0.1)
        dists.append(float(th[0] ** 2))
        assert abs(th[0] - 2.0 / (1.0 + tau2)) <= 1e-6
    assert all(b <= a for a, b in zip(dists, dists[1:]))


def test_prox_domain():
    with pytest.raises(DefenseError):
        prox_privacy(np.zeros(1), quad(1.0), 1.0, 0.0, steps=5, lr=0.1)
    with pytest.raises(DefenseError):
        prox_privacy(np.zeros(1), quad(1.0), 1.0, 1.0, steps=0, lr=0.1)


# forward-backward splitting on a lasso instance -------------------------------------

def lasso_cd(A, b, lam, sweeps=20000, tol=1e-14):
    """Cyclic coordinate descent, written independently of the solver under test."""
    x = np.zeros(A.shape[1])
    col_sq = (A * A).sum(axis=0)
    r = b - A @ x
    for _ in range(sweeps):
        change = 0.0
        for j in range(A.shape[1]):
            rho = A[:, j] @ r + col_sq[j] * x[j]
            new = math.copysign(max(abs(rho) - lam, 0.0), rho) / col_sq[j]
            r += A[:, j] * (x[j] - new)
            change = max(change, abs(new - x[j]))
            x[j] = new
        if change < tol:
            break
    return x


def lasso_instance():
    rng = np.random.default_rng(7)
    A = rng.normal(size=(10, 5))
    b = A @ np.array([1.5, 0.0, -2.0, 0.0, 0.7]) + 0.1 * rng.normal(size=10)
    return A, b, 1.0


def test_fbs_lasso_matches_coordinate_descent():
    A, b, lam = lasso_instance()
    ref = lasso_cd(A, b, lam)
    x, iters = fbs_lasso(A, b, lam, iters=5000)
    assert iters <= 5000
    assert np.max(np.abs(x - ref)) <= 1e-4
    # the reference is a genuine lasso solution: subgradient optimality
    grad = A.T @ (A @ ref - b)
    for j in range(5):
        if ref[j] != 0:
            assert abs(grad[j] + lam * np.sign(ref[j])) < 1e-8
        else:
            assert abs(grad[j]) <= lam + 1e-8


def test_fbs_lasso_early_stop():
    A, b, lam = lasso_instance()
    x, iters = fbs_lasso(A, b, lam, iters=5000, tol=1e-13)
    assert iters < 5000
    assert np.max(np.abs(x - lasso_cd(A, b, lam))) <= 1e-4


def test_soft_threshold():
    assert np.array_equal(soft_threshold(np.array([3.0, -0.5, 0.2, -4.0]), 1.0), np.array([2.0, -0.0, 0.0, -3.0]))


# step weight balancing --------------------------------------------------------------

@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(-50, 50), st.floats(0, 1e6), st.floats(0, 10))
def test_tau_update_positive_and_sums_to_one(t1, t2, g, prox, lr):
    a, b = update_taus(t1, t2, g, prox, lr)
    assert a > 0 and b > 0
    assert a + b == 1.0


def test_tau_update_shifts_weight_to_smaller_term():
    a, b = update_taus(0.5, 0.5, 1.0, 0.0, 0.1)
    assert a < 0.5 < b
    assert update_taus(0.3, 0.7, 0.0, 0.0, 0.1) == pytest.approx((0.3, 0.7))


# the neural privacy game --------------------------------------------------------------

def toy_game(seed=0, kind="exp"):
    rng = np.random.default_rng(seed)
    client = build_mlp(6, ["linear:5", "tanh"], rng)
    x = (rng.random((12, 6)) < 0.5).astype(float)
    dec = SimulatedDecoder.fresh(5, DecoderTarget.all_binary(6), rng, lr=1e-2, hidden=("linear:7", "tanh"))
    return client, dec, x, NeuralPrivacyGame(client, dec, x, kind)


@pytest.mark.parametrize("kind", ["neg", "exp", "inv"])
def test_privacy_gradient_finite_differences(kind):
    client, _, _, game = toy_game(1, kind)
    theta = client.flatten()
    gv, gg = game.g(theta)
    h = 1e-6
    num = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        num[i] = (game.g(theta + e)[0] - game.g(theta - e)[0]) / (2 * h)
    assert np.max(np.abs(num - gg)) / max(np.max(np.abs(gg)), 1e-7) < 1e-6
    assert game.g_value(theta) == pytest.approx(gv, abs=1e-15)


def test_decoder_ascent_raises_g():
    client, dec, x, game = toy_game(2)
    theta = client.flatten()
    before = game.g_value(theta)
    for _ in range(200):
        game.decoder_ascent(theta)
    assert game.g_value(theta) > before
    assert game.reconstruction_loss(theta) < -math.log(before)


def test_minimax_n2_zero_is_identity():
    client, _, _, game = toy_game()
    theta = client.flatten()
    out, _ = minimax(theta, game, MinimaxConfig(n2=0))
    assert np.array_equal(out, theta)


def test_minimax_lowers_privacy_loss_and_tracks_taus():
    client, dec, x, game = toy_game(3)
    theta = client.flatten()
    for _ in range(300):
        game.decoder_ascent(theta)
    before = game.g_value(theta)
    cfg = MinimaxConfig(n2=30, tau1=0.5, tau2=0.5, inner_optimizer="sgd", inner_lr=0.5, decoder_lr=1e-3)
    st_ = MinimaxState(0.5, 0.5)
    out, st_ = minimax(theta, game, cfg, st_)
    assert not np.array_equal(out, theta)
    assert st_.tau1 + st_.tau2 == 1.0 and st_.tau1 > 0 and st_.tau2 > 0
    assert st_.last_prox == pytest.approx(0.5 * float((out - theta) @ (out - theta)))
    # the client step moved against the (now stronger) decoder
    assert game.g_value(out) < before + 0.05


def test_minimax_fixed_taus_stay_fixed():
    client, _, _, game = toy_game(4)
    cfg = MinimaxConfig(n2=5, tau1=0.2, tau2=0.8, auto_tau=False, inner_optimizer="sgd", inner_lr=0.1)
    _, st_ = minimax(client.flatten(), game, cfg)
    assert (st_.tau1, st_.tau2) == (0.2, 0.8)


def test_minimax_feature_prox():
    client, _, _, game = toy_game(5)
    theta = client.flatten()
    prox = game.feature_prox(theta)
    assert prox(theta)[0] == 0.0
    cfg = MinimaxConfig(n2=5, prox_kind="feature", inner_optimizer="sgd", inner_lr=0.1)
    out, st_ = minimax(theta, game, cfg)
    assert st_.last_prox == pytest.approx(prox(out)[0])


def test_minimax_config_validation():
    with pytest.raises(DefenseError):
        MinimaxConfig(n2=-1)
    with pytest.raises(DefenseError):
        MinimaxConfig(tau1=0.0)
    with pytest.raises(DefenseError):
        MinimaxConfig(prox_kind="cosine")
    with pytest.raises(DefenseError):
        make_flat_optimizer("rmsprop", 0.1)


def test_flat_adam_first_step_is_lr_sign():
    opt = FlatAdam(0.1)
    out = opt.step(np.zeros(3), np.array([2.0, -3.0, 0.0]))
    assert np.allclose(out, [-0.1, 0.1, 0.0], atol=1e-8)


# naive and basic placements ------------------------------------------------------------

def test_naive_gradient_is_sum_of_terms():
    client, dec, x, game = toy_game(6)
    acc = GradBundle([np.ones_like(p) for p in client.parameters()])
    combined, gval = naive_defense_gradient(client, x, acc, dec, 2.5)
    _, gflat = game.g(client.flatten())
    assert np.allclose(combined.flat(), 1.0 + 2.5 * gflat, atol=1e-15)
    zero, _ = naive_defense_gradient(client, x, acc, dec, 0.0)
    assert np.array_equal(zero.flat(), acc.flat())


def test_basic_step_drift_grows_with_inner_steps():
    drifts = []
    for steps in (1, 10, 50):
        client, dec, x, game = toy_game(7)
        theta = client.flatten()
        out, _ = basic_defense_step(theta, game, steps, 5, make_flat_optimizer("sgd", 0.5))
        drifts.append(float(np.linalg.norm(out - theta)))
    assert drifts[0] < drifts[1] < drifts[2]
    client, dec, x, game = toy_game(7)
    out, _ = basic_defense_step(client.flatten(), game, 0, 5, make_flat_optimizer("sgd", 0.5))
    assert np.array_equal(out, client.flatten())


def test_simulated_decoder_training_lowers_loss():
    client, dec, x, _ = toy_game(8)
    before = dec.loss_on(client, x)
    train_simulated_decoder(client, x, dec, epochs=100, batch_size=4, seed=0)
    assert dec.loss_on(client, x) < before


# hooks inside the training loop ------------------------------------------------------------

def hook_targets():
    return {1: DecoderTarget.all_binary(10)}, {1: 8}


def history(defense):
    h = train_vfl(small_system(), 3, 32, 1e-2, seed=1, defense=defense)
    return [(r.train_loss, r.eval_accuracy) for r in h.records]


def test_degenerate_defenses_reproduce_baseline():
    base = history(None)
    t, w = hook_targets()
    assert history(FbsDefense(t, w, MinimaxConfig(n2=0))) == base
    assert history(NaiveDefense(t, w, lam=0.0)) == base


def test_active_defenses_change_training_and_log():
    base = history(None)
    t, w = hook_targets()
    for d in (FbsDefense(t, w, MinimaxConfig(n2=2, inner_optimizer="sgd", inner_lr=0.5)),
              NaiveDefense(t, w, lam=5.0), BasicDefense(t, w, inner_steps=2, decoder_steps=2)):
        assert history(d) != base
        assert [x.epoch for x in d.diagnostics] == [1, 2, 3]
        assert all(np.isfinite(x.g_value) for x in d.diagnostics)


def test_naive_rejects_negative_lambda():
    t, w = hook_targets()
    with pytest.raises(DefenseError):
        NaiveDefense(t, w, lam=-1.0)


# oracles for the minimax alternation --------------------------------------------------------

class QuadGame:
    """Convex toy: g(theta) = 0.5 ||theta - a||^2 with no decoder to move."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=float)

    def g(self, theta):
        d = theta - self.a
        return 0.5 * float(d @ d), d

    def g_value(self, theta):
        return self.g(theta)[0]

    def decoder_ascent(self, theta):
        raise AssertionError("M1 = 0 must not touch the decoder")


def test_minimax_without_decoder_steps_is_prox_descent():
    start = np.array([0.5, -1.0, 2.0])
    game = QuadGame([2.0, 1.0, -1.0])
    cfg = MinimaxConfig(n2=20, m1=0, tau1=0.3, tau2=0.7, auto_tau=False, inner_optimizer="sgd", inner_lr=0.4)
    out, _ = minimax(start, game, cfg)
    ref = prox_privacy(start, game.g, 0.3, 0.7, steps=20, lr=0.4)
    assert np.max(np.abs(out - ref)) <= 1e-8


class ZeroGame(NeuralPrivacyGame):
    def g(self, theta):
        return 0.0, np.zeros_like(theta)

    def g_value(self, theta):
        return 0.0

    def decoder_ascent(self, theta):
        pass


def test_fbs_with_zero_privacy_loss_is_baseline_epoch():
    t, w = hook_targets()
    cfg = MinimaxConfig(n2=5, inner_optimizer="sgd", inner_lr=0.5)
    assert history(FbsDefense(t, w, cfg, game_factory=ZeroGame)) == history(None)


def probe_loss(client, x, seed):
    """Reconstruction loss of a fresh decoder fitted to the client's features."""
    rng = np.random.default_rng(seed)
    dec = SimulatedDecoder.fresh(client.out_width, DecoderTarget.all_binary(x.shape[1]), rng, lr=1e-2)
    train_simulated_decoder(client, x[:150], dec, epochs=150, batch_size=32, seed=seed)
    return dec.loss_on(client, x[150:])


def test_minimax_raises_fresh_probe_loss():
    gains = []
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = (rng.random((250, 8)) < 0.5).astype(float)
        client = build_mlp(8, ["linear:8", "tanh"], rng)
        dec = SimulatedDecoder.fresh(8, DecoderTarget.all_binary(8), rng, lr=1e-2)
        train_simulated_decoder(client, x, dec, epochs=50, batch_size=32, seed=seed)
        before = probe_loss(client, x, 100 + seed)
        cfg = MinimaxConfig(n2=60, tau1=0.5, tau2=0.5, auto_tau=False, inner_optimizer="sgd", inner_lr=1.0,
                            decoder_lr=1e-2)
        theta, _ = minimax(client.flatten(), NeuralPrivacyGame(client, dec, x, "exp"), cfg)
        defended = client.copy()
        defended.unflatten(theta)
        gains.append(probe_loss(defended, x, 100 + seed) - before)
    assert np.median(gains) >= 0


@pytest.mark.parametrize("kind", ["neg", "exp", "inv"])
def test_decoder_ascent_lowers_reconstruction_loss(kind):
    # g is non-increasing in l, so a small enough ascent step on g must lower l
    for seed in range(3):
        client, dec, x, _ = toy_game(seed, kind)
        theta = client.flatten()
        lr = 1e-2
        for _ in range(11):
            trial = SimulatedDecoder(dec.model.copy(), dec.target, lr)
            game = NeuralPrivacyGame(client, trial, x, kind)
            before = game.reconstruction_loss(theta)
            game.decoder_ascent(theta)
            if game.reconstruction_loss(theta) < before:
                break
            lr /= 2
        else:
            raise AssertionError("no decrease after 10 halvings")
