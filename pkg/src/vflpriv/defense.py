"""Client-side defenses against feature reconstruction.

A simulated worst-case decoder is trained on the client's own data, and the
client's bottom model is tuned to raise that decoder's reconstruction loss.
Three placements are offered:

* naive: privacy gradient added to the accuracy gradient (lags one step);
* basic: unconstrained descent on the privacy loss before each upload;
* fbs:   a proximal (backward) privacy step before each upload, solved by
  the minimax alternation, followed by the ordinary accuracy (forward) step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from vflpriv.attack import DecoderTarget, make_decoder_model
from vflpriv.errors import DefenseError
from vflpriv.nn.model import GradBundle, MlpModel
from vflpriv.nn.optim import Adam
from vflpriv.protocol import ClientState

INV_CLAMP = 1e-8
TAU_FLOOR = 1e-12


class PrivacyLossKind(str, Enum):
    NEG = "neg"
    INV = "inv"
    EXP = "exp"


def privacy_loss(l_value: float, kind: PrivacyLossKind | str) -> tuple[float, float]:
    """Privacy loss g and dg/dl for a reconstruction loss l (non-increasing in l)."""
    kind = PrivacyLossKind(kind)
    if kind is PrivacyLossKind.NEG:
        return -l_value, -1.0
    if kind is PrivacyLossKind.EXP:
        e = math.exp(-l_value)
        return e, -e
    l_value = max(l_value, INV_CLAMP)
    return 1.0 / l_value, -1.0 / (l_value * l_value)


# flat-vector steppers for the inner privacy loops ---------------------------

class FlatSgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.lr * grad


class FlatAdam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, theta, grad):
        if self.m is None or self.m.shape != theta.shape:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_flat_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return FlatSgd(lr)
    if kind == "adam":
        return FlatAdam(lr)
    raise DefenseError(f"unknown inner optimizer {kind!r}")


# the privacy game -------------------------------------------------------------

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]


class PrivacyGame(Protocol):
    """What the minimax alternation needs from a (client, decoder) pair."""

    def g(self, theta: np.ndarray) -> tuple[float, np.ndarray]: ...

    def g_value(self, theta: np.ndarray) -> float: ...

    def decoder_ascent(self, theta: np.ndarray) -> None: ...


def param_prox(theta_start: np.ndarray) -> Objective:
    def prox(theta):
        d = theta - theta_start
        return 0.5 * float(d @ d), d
    return prox


class NeuralPrivacyGame:
    """g(theta, nu) on one batch for a client model and a simulated decoder.

    ``theta`` is the client's flat parameter vector; the decoder is mutated by
    ``decoder_ascent`` only.
    """

    def __init__(self, client_model: MlpModel, decoder: "SimulatedDecoder", x: np.ndarray,
                 kind: PrivacyLossKind | str):
        self.model = client_model.copy()
        self.decoder = decoder
        self.x = x
        self.y = decoder.target.extract(x)
        self.kind = PrivacyLossKind(kind)
        self.clamped = False
        self._cached = None

    def _features(self, theta):
        # iterates are never mutated in place, so identity marks a repeat evaluation
        if self._cached is not None and self._cached[0] is theta:
            return self._cached[1]
        self.model.unflatten(theta)
        ctrace = self.model.forward(self.x, train=True)
        self._cached = (theta, ctrace)
        return ctrace

    def _eval(self, theta, want_theta=True):
        ctrace = self._features(theta)
        dtrace = self.decoder.model.forward(ctrace.output, train=True)
        l, dl_dout = self.decoder.target.loss(dtrace.output, self.y)
        if self.kind is PrivacyLossKind.INV and l < INV_CLAMP:
            self.clamped = True
        g, dg_dl = privacy_loss(l, self.kind)
        if not np.isfinite(g):
            raise DefenseError(f"non-finite privacy loss (l={l!r})")
        dgrads = self.decoder.model.backward(dtrace, dl_dout * dg_dl)
        gtheta = None
        if want_theta:
            self.model.unflatten(theta)
            gtheta = self.model.backward(ctrace, dgrads.input_grad).flat()
        return g, l, gtheta, dgrads

    def g(self, theta):
        g, _, gtheta, _ = self._eval(theta)
        return g, gtheta

    def g_value(self, theta) -> float:
        """g at theta without any backward pass."""
        out = self.decoder.model.forward(self._features(theta).output, train=True).output
        g, _ = privacy_loss(self.decoder.target.loss(out, self.y)[0], self.kind)
        return g

    def reconstruction_loss(self, theta) -> float:
        out = self.decoder.model.forward(self._features(theta).output, train=True).output
        return self.decoder.target.loss(out, self.y)[0]

    def decoder_ascent(self, theta):
        _, _, _, dgrads = self._eval(theta, want_theta=False)
        # ascending g is a descent step on -g
        self.decoder.optimizer.step(self.decoder.model, dgrads.scaled(-1.0), self.decoder.lr)

    def feature_prox(self, theta_start: np.ndarray) -> Objective:
        """Half squared distance between features at theta and at the anchor."""
        self.model.unflatten(theta_start)
        anchor = self.model.forward(self.x, train=True).output.copy()

        def prox(theta):
            self.model.unflatten(theta)
            tr = self.model.forward(self.x, train=True)
            d = tr.output - anchor
            return 0.5 * float(np.sum(d * d)), self.model.backward(tr, d).flat()
        return prox


@dataclass
class SimulatedDecoder:
    model: MlpModel
    target: DecoderTarget
    lr: float = 1e-3
    optimizer: Adam = field(default_factory=Adam)

    @classmethod
    def fresh(cls, feature_width: int, target: DecoderTarget, rng: np.random.Generator,
              lr: float = 1e-3, hidden=("relu",)) -> "SimulatedDecoder":
        return cls(make_decoder_model(feature_width, target, rng, hidden), target, lr)

    def loss_on(self, client_model: MlpModel, x: np.ndarray) -> float:
        return self.target.loss(self.model(client_model(x)), self.target.extract(x))[0]


def train_simulated_decoder(client_model: MlpModel, shard: np.ndarray, dec: SimulatedDecoder,
                            epochs: int, batch_size: int = 128, seed: int = 0) -> SimulatedDecoder:
    """Fit the worst-case decoder on the client's full shard (reconstruction loss descent)."""
    rng = np.random.default_rng(seed)
    feats = client_model(shard)
    y = dec.target.extract(shard)
    n = shard.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tr = dec.model.forward(feats[idx], train=True)
            _, dout = dec.target.loss(tr.output, y[idx])
            dec.optimizer.step(dec.model, dec.model.backward(tr, dout), dec.lr)
    return dec


# proximal privacy step and minimax -------------------------------------------

def prox_privacy(theta_start: np.ndarray, g_fn: Objective, tau1: float, tau2: float, steps: int, lr: float,
                 prox_fn: Objective | None = None, optimizer: str = "sgd") -> np.ndarray:
    """Approximate argmin of ``tau1*g(theta) + tau2*prox(theta)`` by inner descent.

    ``prox`` defaults to half the squared distance to ``theta_start``. Returns
    the iterate with the lowest objective seen (the start included).
    """
    if tau1 < 0 or tau2 <= 0:
        raise DefenseError("need tau1 >= 0 and tau2 > 0")
    if steps < 1:
        raise DefenseError("prox_privacy needs at least one inner step")
    prox_fn = prox_fn or param_prox(theta_start)
    opt = make_flat_optimizer(optimizer, lr)
    theta = np.array(theta_start, dtype=np.float64, copy=True)
    best, best_val = theta.copy(), None
    for _ in range(steps + 1):
        gv, gg = g_fn(theta) if tau1 else (0.0, np.zeros_like(theta))
        pv, pg = prox_fn(theta)
        val = tau1 * gv + tau2 * pv
        if not np.isfinite(val):
            raise DefenseError("non-finite proximal objective")
        if best_val is None or val < best_val:
            best, best_val = theta.copy(), val
        theta = opt.step(theta, tau1 * gg + tau2 * pg)
    return best


def update_taus(tau1: float, tau2: float, g_value: float, prox_value: float, tau_lr: float) -> tuple[float, float]:
    """Multiplicative balancing: shrink the weight of the larger term, renormalise to sum 1."""
    a = tau1 * math.exp(-min(tau_lr * g_value, 700.0))
    b = tau2 * math.exp(-min(tau_lr * prox_value, 700.0))
    t1 = min(max(a / (a + b), TAU_FLOOR), 1.0 - TAU_FLOOR) if a + b > 0 else 0.5
    t2 = 1.0 - t1
    # make the pair sum to exactly 1.0 in floating point
    while t1 + t2 != 1.0:
        t1 = 1.0 - t2
        t2 = 1.0 - t1
    return t1, t2


@dataclass
class MinimaxConfig:
    n2: int = 10
    m1: int = 1
    m2: int = 1
    tau1: float = 0.5
    tau2: float = 0.5
    auto_tau: bool = True
    tau_lr: float = 1e-2
    g_kind: PrivacyLossKind = PrivacyLossKind.EXP
    prox_kind: str = "param"  # or "feature"
    decoder_lr: float = 1e-3
    inner_lr: float = 1e-3
    inner_optimizer: str = "adam"

    def __post_init__(self):
        if min(self.n2, self.m1, self.m2) < 0:
            raise DefenseError("minimax step counts must be >= 0")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise DefenseError("tau1 and tau2 must be positive")
        self.g_kind = PrivacyLossKind(self.g_kind)
        if self.prox_kind not in ("param", "feature"):
            raise DefenseError(f"unknown proximal term {self.prox_kind!r}")


@dataclass
class MinimaxState:
    """Per-client state carried across minimax calls.

    The inner optimizer persists; the step weights restart from the configured
    values on every call and are balanced within it.
    """

    tau1: float
    tau2: float
    optimizer: object = None
    last_g: float = float("nan")
    last_prox: float = float("nan")


def minimax(theta: np.ndarray, game: PrivacyGame, cfg: MinimaxConfig,
            state: MinimaxState | None = None) -> tuple[np.ndarray, MinimaxState]:
    """Alternate decoder ascent on g and client descent on the proximal privacy objective.

    Returns the final client iterate and the updated state. With ``n2 == 0``
    the input is returned unchanged.
    """
    theta_start = np.array(theta, dtype=np.float64, copy=True)
    if state is None:
        state = MinimaxState(cfg.tau1, cfg.tau2)
    state.tau1, state.tau2 = cfg.tau1, cfg.tau2
    if state.optimizer is None:
        state.optimizer = make_flat_optimizer(cfg.inner_optimizer, cfg.inner_lr)
    if cfg.n2 == 0:
        return theta_start, state
    if cfg.prox_kind == "feature":
        prox_fn = game.feature_prox(theta_start)
    else:
        prox_fn = param_prox(theta_start)
    th = theta_start.copy()
    for _ in range(cfg.n2):
        for _ in range(cfg.m1):
            game.decoder_ascent(th)
        for _ in range(cfg.m2):
            gv, gg = game.g(th)
            pv, pg = prox_fn(th)
            if not (np.isfinite(gv) and np.isfinite(pv)):
                raise DefenseError("non-finite value inside minimax")
            th = state.optimizer.step(th, state.tau1 * gg + state.tau2 * pg)
        gv = game.g_value(th)
        pv, _ = prox_fn(th)
        if not (np.isfinite(gv) and np.isfinite(pv)):
            raise DefenseError("non-finite value inside minimax")
        state.last_g, state.last_prox = gv, pv
        if cfg.auto_tau:
            state.tau1, state.tau2 = update_taus(state.tau1, state.tau2, gv, pv, cfg.tau_lr)
    return th, state


# defenses as training-loop hooks ----------------------------------------------

@dataclass
class DefenseDiagnostics:
    epoch: int
    client: int
    tau1: float
    tau2: float
    g_value: float
    prox_distance: float


class _ClientDecoders:
    def __init__(self, targets: dict[int, DecoderTarget], widths: dict[int, int], seed: int,
                 decoder_lr: float, hidden):
        self.decoders = {}
        for cid in sorted(targets):
            rng = np.random.default_rng([seed, cid])
            self.decoders[cid] = SimulatedDecoder.fresh(widths[cid], targets[cid], rng, decoder_lr, hidden)


class FbsDefense:
    """Backward privacy step (minimax) before each upload."""

    def __init__(self, targets: dict[int, DecoderTarget], widths: dict[int, int], cfg: MinimaxConfig,
                 seed: int = 0, hidden=("relu",), cold_start: bool = False, game_factory=None):
        self.cfg = cfg
        self.game_factory = game_factory or NeuralPrivacyGame
        self.targets = targets
        self.widths = widths
        self.seed = seed
        self.hidden = hidden
        self.cold_start = cold_start
        self.decoders = _ClientDecoders(targets, widths, seed, cfg.decoder_lr, hidden).decoders
        self.states = {cid: MinimaxState(cfg.tau1, cfg.tau2) for cid in targets}
        self.diagnostics: list[DefenseDiagnostics] = []
        self._epoch_acc: dict[int, list[tuple[float, float]]] = {cid: [] for cid in targets}
        self._calls = 0

    def before_upload(self, client: ClientState, rows, epoch, batch_index):
        if client.id not in self.targets or self.cfg.n2 == 0:
            return
        if self.cold_start:
            rng = np.random.default_rng([self.seed, client.id, self._calls])
            self.decoders[client.id] = SimulatedDecoder.fresh(
                self.widths[client.id], self.targets[client.id], rng, self.cfg.decoder_lr, self.hidden)
        self._calls += 1
        x = client.shard[rows]
        game = self.game_factory(client.model, self.decoders[client.id], x, self.cfg.g_kind)
        theta, state = minimax(client.model.flatten(), game, self.cfg, self.states[client.id])
        client.model.unflatten(theta)
        self._epoch_acc[client.id].append((state.last_g, state.last_prox))

    def client_gradient(self, client, grads):
        return grads

    def end_epoch(self, epoch):
        for cid, vals in self._epoch_acc.items():
            st = self.states[cid]
            g_mean = float(np.mean([v[0] for v in vals])) if vals else float("nan")
            p_mean = float(np.mean([v[1] for v in vals])) if vals else float("nan")
            self.diagnostics.append(DefenseDiagnostics(epoch, cid, st.tau1, st.tau2, g_mean, p_mean))
            vals.clear()


class NaiveDefense:
    """Accuracy gradient plus lambda times the privacy gradient.

    The decoder used for the privacy gradient was fitted on earlier batches
    only; it is updated on the current batch afterwards.
    """

    def __init__(self, targets: dict[int, DecoderTarget], widths: dict[int, int], lam: float = 1.0,
                 g_kind: PrivacyLossKind | str = PrivacyLossKind.EXP, decoder_lr: float = 1e-3,
                 decoder_steps: int = 1, seed: int = 0, hidden=("relu",)):
        if lam < 0:
            raise DefenseError("lambda must be >= 0")
        self.lam = lam
        self.g_kind = PrivacyLossKind(g_kind)
        self.decoder_steps = decoder_steps
        self.targets = targets
        self.decoders = _ClientDecoders(targets, widths, seed, decoder_lr, hidden).decoders
        self.diagnostics: list[DefenseDiagnostics] = []
        self._g: dict[int, list[float]] = {cid: [] for cid in targets}

    def before_upload(self, client, rows, epoch, batch_index):
        pass

    def client_gradient(self, client: ClientState, grads: GradBundle) -> GradBundle:
        if client.id not in self.targets:
            return grads
        combined, gval = naive_defense_gradient(client.model, client.last_input, grads,
                                                self.decoders[client.id], self.lam, self.g_kind)
        self._g[client.id].append(gval)
        game = NeuralPrivacyGame(client.model, self.decoders[client.id], client.last_input, self.g_kind)
        theta = client.model.flatten()
        for _ in range(self.decoder_steps):
            game.decoder_ascent(theta)
        return combined

    def end_epoch(self, epoch):
        for cid, vals in self._g.items():
            self.diagnostics.append(DefenseDiagnostics(epoch, cid, float("nan"), float("nan"),
                                                       float(np.mean(vals)) if vals else float("nan"), 0.0))
            vals.clear()


def naive_defense_gradient(client_model: MlpModel, x: np.ndarray, accuracy_grads: GradBundle,
                           decoder: SimulatedDecoder, lam: float,
                           g_kind: PrivacyLossKind | str = PrivacyLossKind.EXP) -> tuple[GradBundle, float]:
    """``accuracy_grads + lam * grad_theta g`` against a frozen decoder."""
    game = NeuralPrivacyGame(client_model, decoder, x, g_kind)
    gval, gflat = game.g(client_model.flatten())
    out = []
    offset = 0
    for a in accuracy_grads.param_grads:
        out.append(a + lam * gflat[offset:offset + a.size].reshape(a.shape))
        offset += a.size
    return GradBundle(out, accuracy_grads.input_grad), gval


class BasicDefense:
    """Unconstrained privacy descent before each upload (no proximity term)."""

    def __init__(self, targets: dict[int, DecoderTarget], widths: dict[int, int], inner_steps: int = 10,
                 decoder_steps: int = 10, g_kind: PrivacyLossKind | str = PrivacyLossKind.EXP,
                 decoder_lr: float = 1e-3, inner_lr: float = 1e-3, inner_optimizer: str = "adam",
                 seed: int = 0, hidden=("relu",)):
        self.targets = targets
        self.inner_steps = inner_steps
        self.decoder_steps = decoder_steps
        self.g_kind = PrivacyLossKind(g_kind)
        self.decoders = _ClientDecoders(targets, widths, seed, decoder_lr, hidden).decoders
        self.optimizers = {cid: make_flat_optimizer(inner_optimizer, inner_lr) for cid in targets}
        self.diagnostics: list[DefenseDiagnostics] = []
        self._vals: dict[int, list[tuple[float, float]]] = {cid: [] for cid in targets}

    def before_upload(self, client, rows, epoch, batch_index):
        if client.id not in self.targets:
            return
        x = client.shard[rows]
        start = client.model.flatten()
        theta, gval = basic_defense_step(start, NeuralPrivacyGame(client.model, self.decoders[client.id], x,
                                                                  self.g_kind),
                                         self.inner_steps, self.decoder_steps, self.optimizers[client.id])
        client.model.unflatten(theta)
        d = theta - start
        self._vals[client.id].append((gval, 0.5 * float(d @ d)))

    def client_gradient(self, client, grads):
        return grads

    def end_epoch(self, epoch):
        for cid, vals in self._vals.items():
            self.diagnostics.append(DefenseDiagnostics(
                epoch, cid, float("nan"), float("nan"),
                float(np.mean([v[0] for v in vals])) if vals else float("nan"),
                float(np.mean([v[1] for v in vals])) if vals else float("nan")))
            vals.clear()


def basic_defense_step(theta: np.ndarray, game: PrivacyGame, inner_steps: int, decoder_steps: int,
                       optimizer) -> tuple[np.ndarray, float]:
    """Re-fit the simulated decoder, then descend g with no proximity constraint."""
    th = np.array(theta, dtype=np.float64, copy=True)
    for _ in range(decoder_steps):
        game.decoder_ascent(th)
    gval = float("nan")
    for _ in range(inner_steps):
        gval, gg = game.g(th)
        th = optimizer.step(th, gg)
    if inner_steps:
        gval = game.g_value(th)
    return th, gval


# forward-backward splitting on a convex toy ---------------------------------------

def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    """Exact prox of ``t * ||x||_1``."""
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def fbs_lasso(A: np.ndarray, b: np.ndarray, lam: float, iters: int = 5000, step: float | None = None,
              tol: float = 0.0) -> tuple[np.ndarray, int]:
    """Solve ``min 0.5||Ax-b||^2 + lam ||x||_1`` by forward gradient steps and exact prox.

    The default step is 1/L with L the largest eigenvalue of A^T A, inside the
    convergence bound (0, 2/L).
    """
    if step is None:
        step = 1.0 / np.linalg.eigvalsh(A.T @ A).max()
    x = np.zeros(A.shape[1])
    for k in range(1, iters + 1):
        x_hat = x - step * (A.T @ (A @ x - b))
        x_new = soft_threshold(x_hat, step * lam)
        if tol and np.max(np.abs(x_new - x)) < tol:
            return x_new, k
        x = x_new
    return x, iters
