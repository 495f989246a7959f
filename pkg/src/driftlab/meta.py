"""Offline meta-training of features, prior and noise scales.

The loss runs the closed-form posterior update across each training window
and scores every one-step prediction made before the matching observation is
absorbed, so gradients flow through the whole recursive chain.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .bayes import (N_FEATURES, N_LEARNED, FeatureNetwork, PosteriorBelief,
                    feature_forward, log_transitions, update_from_features_)
from .dynamics import (DT, NOMINAL, V, DriftHold, InvalidGeometry, OpenLoop, ReferenceTrajectory,
                       TrajectoryLog, make_reference, mirror, nominal_step_batch, rollout)

log = logging.getLogger(__name__)

PRIOR_KEYS = ("theta0", "lam_chol", "log_sigma")
SOFTPLUS_ONE = math.log(math.e - 1.0)


class NonFinite(FloatingPointError):
    pass


class NonPSDPrior(ValueError):
    pass


@dataclass
class TrainConfig:
    horizon: int = 10
    epochs: int = 1000
    step_size: float = 1e-3
    decay: float = 0.9975
    batch_size: int = 32
    seed: int = 0
    clip_norm: float = 10.0
    holdout_fraction: float = 0.25

    def __post_init__(self):
        if self.horizon < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("horizon and batch_size must be positive, epochs >= 0")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.step_size <= 0 or self.clip_norm <= 0:
            raise ValueError("step_size and clip_norm must be positive")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")


@dataclass
class EpisodeBatch:
    """Windows of ``T`` transitions: inputs ``z`` (B, T, 8), nominal
    predictions ``h`` (B, T, 4) and observed next states ``y`` (B, T, 4)."""

    z: np.ndarray
    h: np.ndarray
    y: np.ndarray
    task: np.ndarray

    def __len__(self):
        return len(self.z)

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("z", "h", "y", "task")))


class WindowSource:
    """Per-task transition arrays from which windows are cut."""

    def __init__(self, logs, nominal=NOMINAL):
        self.z, self.h, self.y, self.task = [], [], [], []
        for lg in logs:
            n = lg.n_transitions
            if n < 1:
                continue
            self.z.append(lg.feature_inputs()[:n])
            self.h.append(np.asarray(nominal_step_batch(lg.x[:n], lg.u[:n], 0.0, nominal))[:, :4])
            self.y.append(lg.x[1:, :4])
            self.task.append(int(lg.meta.get("task", 0)))

    def lengths(self):
        return np.array([len(z) for z in self.z])

    def windows(self, which, offsets, horizon):
        sl = [slice(o, o + horizon) for o in offsets]
        return EpisodeBatch(np.stack([self.z[w][s] for w, s in zip(which, sl)]),
                            np.stack([self.h[w][s] for w, s in zip(which, sl)]),
                            np.stack([self.y[w][s] for w, s in zip(which, sl)]),
                            np.array([self.task[w] for w in which]))

    def partition(self, horizon):
        """Non-overlapping windows covering every log (fixed; for evaluation)."""
        which, offsets = [], []
        for j, z in enumerate(self.z):
            for o in range(0, len(z) - horizon + 1, horizon):
                which.append(j)
                offsets.append(o)
        if not which:
            return None
        return self.windows(which, offsets, horizon)

    def sample(self, rng, count, horizon):
        lens = self.lengths()
        ok = np.flatnonzero(lens >= horizon)
        if len(ok) == 0:
            raise ValueError("no log is long enough for the training horizon")
        weights = (lens[ok] - horizon + 1).astype(float)
        which = rng.choice(ok, size=count, p=weights / weights.sum())
        offsets = [int(rng.integers(0, lens[w] - horizon + 1)) for w in which]
        return self.windows(which, offsets, horizon)


# ---------------------------------------------------------------------------
# parameters


def _softplus_diag_factor(lam_chol):
    d = ad.value(lam_chol).shape[-1]
    eye = np.eye(d)
    offdiag = ad.tril(lam_chol, -1)
    diag_vals = ad.sum_(lam_chol * eye, axis=-1)  # (4, d)
    diag = ad.expand_dims(ad.softplus(diag_vals), -1) * eye
    return offdiag + diag


def lam_inv_from_chol(lam_chol):
    L = _softplus_diag_factor(lam_chol)
    return L @ ad.swapaxes(L, -1, -2)


def chol_from_lam_inv(lam_inv):
    """Inverse of :func:`lam_inv_from_chol` for positive definite inputs."""
    L = np.linalg.cholesky(lam_inv)
    raw = np.tril(L, -1)
    diag = np.diagonal(L, axis1=-2, axis2=-1)
    raw_diag = diag + np.log(-np.expm1(-diag))  # softplus inverse
    return raw + raw_diag[..., None] * np.eye(L.shape[-1])


def init_params(net, sigma=None, n_features=N_FEATURES):
    """Trainable dictionary: network weights plus prior and log noise scales."""
    params = {k: np.array(v, dtype=float) for k, v in net.params().items()}
    params["theta0"] = np.zeros((N_LEARNED, n_features))
    params["lam_chol"] = np.tile(SOFTPLUS_ONE * np.eye(n_features), (N_LEARNED, 1, 1))
    s = np.asarray(NOMINAL.noise_std[:N_LEARNED] if sigma is None else sigma, dtype=float)
    params["log_sigma"] = np.log(s[:N_LEARNED])
    return params


def to_model(net, params, sigma_tail=None):
    """Build ``(FeatureNetwork, PosteriorBelief)`` from trained parameters."""
    net = net.with_params(params)
    lam_inv = np.asarray(ad.value(lam_inv_from_chol(np.asarray(ad.value(params["lam_chol"])))))
    tail = np.asarray(NOMINAL.noise_std[N_LEARNED:] if sigma_tail is None else sigma_tail)
    sigma = np.concatenate([np.exp(ad.value(params["log_sigma"])), tail])
    belief = PosteriorBelief.from_prior(np.array(ad.value(params["theta0"])), lam_inv, sigma)
    return net, belief


# ---------------------------------------------------------------------------
# loss


def nll_loss(params, batch, shift, scale):
    """Negative log-likelihood of ``batch`` under the recursively updated model.

    Works on plain arrays or autodiff Vars.  Returns the sum over windows,
    steps and learned dimensions of ``err^2 / var + log var``.
    """
    B, T, _ = batch.z.shape
    phi_all = feature_forward(params, shift, scale, batch.z)  # (B, T, 4, d)
    d = ad.value(phi_all).shape[-1]
    lam = lam_inv_from_chol(params["lam_chol"])  # (4, d, d)
    lam = lam + np.zeros((B, 1, 1, 1))
    theta = params["theta0"] + np.zeros((B, 1, 1))
    var0 = ad.exp(2.0 * params["log_sigma"])  # (4,)
    total = 0.0
    for k in range(T):
        phi = phi_all[:, k]  # (B, 4, d)
        lphi = ad.reshape(lam @ ad.reshape(phi, (B, N_LEARNED, d, 1)), (B, N_LEARNED, d))
        quad = ad.sum_(phi * lphi, axis=-1)  # (B, 4)
        one_q = 1.0 + quad
        var = var0 * one_q
        err = batch.y[:, k] - batch.h[:, k] - ad.sum_(phi * theta, axis=-1)
        total = total + ad.sum_(err * err / var + ad.log(var))
        if k == T - 1:
            break
        gain = lphi / ad.expand_dims(one_q, -1)
        theta = theta + gain * ad.expand_dims(err, -1)
        lam = lam - ad.expand_dims(gain, -1) * ad.expand_dims(lphi, -2)
    return total


def nll_reference(params, batch, shift, scale):
    """Loop-by-loop NLL using the accumulator form of the update.

    Deliberately independent from :func:`nll_loss`: explicit per-dimension
    loops, ``Q``-accumulator updates and a linear solve for the prior.
    """
    p = {k: np.asarray(ad.value(v), dtype=float) for k, v in params.items()}
    lam0 = np.asarray(lam_inv_from_chol(p["lam_chol"]))
    sig2 = np.exp(2.0 * p["log_sigma"])
    total = 0.0
    for b in range(len(batch.z)):
        phis = feature_forward(p, shift, scale, batch.z[b])
        for i in range(N_LEARNED):
            lam_inv = lam0[i].copy()
            q = np.linalg.solve(lam0[i], p["theta0"][i])
            theta = p["theta0"][i].copy()
            for k in range(batch.z.shape[1]):
                phi = phis[k, i]
                mu = batch.h[b, k, i] + theta @ phi
                var = sig2[i] * (1.0 + phi @ lam_inv @ phi)
                total += (batch.y[b, k, i] - mu) ** 2 / var + math.log(var)
                lp = lam_inv @ phi
                lam_inv = lam_inv - np.outer(lp, lp) / (1.0 + phi @ lp)
                q = q + (batch.y[b, k, i] - batch.h[b, k, i]) * phi
                theta = lam_inv @ q
    return total


def grad_nll(params, batch, shift, scale):
    """``(loss, gradients)`` for every entry of ``params`` via reverse mode."""
    names = sorted(params)
    vars_ = {k: ad.Var(params[k]) for k in names}
    loss = nll_loss(vars_, batch, shift, scale)
    lv = float(ad.value(loss))
    if not math.isfinite(lv):
        raise NonFinite("negative log-likelihood is not finite")
    grads = ad.grad(loss, [vars_[k] for k in names])
    return lv, dict(zip(names, grads))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()})


def adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; returns new ``(state, params)`` without mutating inputs."""
    t = state.t + 1
    m, v, new = {}, {}, {}
    for k in params:
        g = grads[k]
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = m[k] / (1 - beta1 ** t)
        vhat = v[k] / (1 - beta2 ** t)
        new[k] = params[k] - lr * mhat / (np.sqrt(vhat) + eps)
    return AdamState(m, v, t), new


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}, norm


# ---------------------------------------------------------------------------
# dataset


def _straight_track(n):
    x = np.zeros((n + 1, 6))
    x[:, V] = 10.0
    s = np.arange(n + 1) * 1.0
    return ReferenceTrajectory(x, np.zeros(n + 1), -1e3 * np.ones(n + 1), 1e3 * np.ones(n + 1),
                               s, np.zeros((n + 1, 2)), "excitation")


def _smooth_noise(rng, n, scale, corr=0.85):
    out = np.zeros(n)
    for k in range(1, n):
        out[k] = corr * out[k - 1] + math.sqrt(1 - corr * corr) * rng.standard_normal() * scale
    return out


def _scenario(name, rng, n):
    """Excitation for one log: ``(x0, controller, reference)``."""
    if name == "drift_hold":
        # closed-loop drifting around a sampled equilibrium of the base vehicle
        for _ in range(50):
            sgn = rng.choice([-1.0, 1.0])
            radius = sgn * rng.uniform(8.0, 16.0)
            beta = -sgn * rng.uniform(0.15, 0.45)
            dither = np.stack([_smooth_noise(rng, n + 1, 0.04, 0.8),
                               _smooth_noise(rng, n + 1, 200.0, 0.8)], axis=1)
            try:
                ctl = DriftHold(radius, beta, dither=dither)
                break
            except InvalidGeometry:  # no equilibrium for this pair; draw again
                continue
        else:
            raise InvalidGeometry("could not sample a drift equilibrium")
        ref = make_reference("circle", {"radius": abs(radius), "beta": abs(beta),
                                        "duration": n * DT, "half_width": 1e3})
        if sgn < 0:
            ref = ReferenceTrajectory(ref.x_ref, -ref.kappa, ref.e_min, ref.e_max, ref.s,
                                      ref.u_ref, ref.kind)
        x0 = ctl.x_eq + rng.normal(0.0, 1.0, 6) * np.array([0.05, 0.2, 0.03, 0.3, 0.0, 0.0])
        return x0, ctl, ref
    x0, u = _scenario_controls(name, rng, n)
    return x0, OpenLoop(u), _straight_track(n)


def _scenario_controls(name, rng, n):
    """Open-loop excitation sequences ``(x0, u_seq)`` of length ``n + 1``."""
    t = np.arange(n + 1) * DT
    u = np.zeros((n + 1, 2))
    if name == "sine_steer":
        v0 = rng.uniform(7.0, 14.0)
        amp, freq = rng.uniform(0.05, 0.2), rng.uniform(0.3, 0.8)
        u[:, 0] = amp * np.sin(2 * math.pi * freq * t)
        u[:, 1] = rng.uniform(150.0, 600.0) + 100.0 * np.sin(2 * math.pi * 0.2 * t)
    elif name == "torque_pulses":
        v0 = rng.uniform(6.0, 10.0)
        levels = rng.uniform(-300.0, 1800.0, size=n // 10 + 2)
        u[:, 1] = np.repeat(levels, 10)[: n + 1]
        u[:, 0] = _smooth_noise(rng, n + 1, 0.03)
    elif name == "step_steer":
        v0 = rng.uniform(8.0, 14.0)
        sgn = rng.choice([-1.0, 1.0])
        k0 = int(rng.integers(5, 15))
        u[k0:, 0] = sgn * rng.uniform(0.1, 0.35)
        u[:, 1] = np.clip((t - t[k0]) * rng.uniform(300.0, 900.0), 0.0, rng.uniform(500.0, 1600.0)) + 150.0
    elif name == "drift_attempt":
        v0 = rng.uniform(8.0, 12.0)
        sgn = rng.choice([-1.0, 1.0])
        k0 = int(rng.integers(5, 12))
        k1 = k0 + int(rng.integers(6, 12))
        u[k0:k1, 0] = sgn * rng.uniform(0.2, 0.4)
        u[k1:, 0] = -sgn * rng.uniform(0.0, 0.2)
        u[k0:, 1] = rng.uniform(900.0, 1800.0)
        u[:k0, 1] = 300.0
    elif name == "random_walk":
        v0 = rng.uniform(7.0, 13.0)
        u[:, 0] = np.clip(_smooth_noise(rng, n + 1, 0.15, 0.9), -0.5, 0.5)
        u[:, 1] = np.clip(500.0 + _smooth_noise(rng, n + 1, 600.0, 0.9), -400.0, 1900.0)
    else:
        raise ValueError(f"unknown excitation scenario {name!r}")
    x0 = np.array([0.0, v0, 0.0, v0, 0.0, 0.0])
    return x0, u


DEFAULT_SCENARIOS = ("sine_steer", "torque_pulses", "step_steer", "drift_attempt", "drift_hold",
                     "random_walk")


def build_dataset(ensemble, scenarios=DEFAULT_SCENARIOS, seed=0, steps=60, mirrored=True):
    """Roll scripted excitation on every plant; append mirrored copies.

    Spin-outs are kept: the resulting short logs are still valid data.
    """
    if not ensemble:
        raise ValueError("ensemble must be non-empty")
    rng = np.random.default_rng(seed)
    logs = []
    for j, plant in enumerate(ensemble):
        for name in scenarios:
            x0, ctl, ref = _scenario(name, rng, steps)
            roll_seed = int(rng.integers(0, 2 ** 31 - 1))
            lg = rollout(plant, ctl, ref, steps, roll_seed, x0=x0,
                         meta={"task": j, "plant": j, "scenario": name})
            logs.append(lg)
    if mirrored:
        logs = logs + [mirror(lg) for lg in logs]
    return logs


# ---------------------------------------------------------------------------
# training


def fit_normalization(logs):
    Z = np.concatenate([lg.feature_inputs() for lg in logs])
    return Z.mean(axis=0), np.maximum(Z.std(axis=0), 1e-3)


@dataclass
class TrainResult:
    net: FeatureNetwork
    belief: PosteriorBelief
    params: dict
    curve: list = field(default_factory=list)
    status: str = "Completed"


def split_tasks(logs, holdout_fraction, seed):
    tasks = sorted({int(lg.meta.get("task", 0)) for lg in logs})
    n_hold = int(round(holdout_fraction * len(tasks)))
    if len(tasks) > 1:
        n_hold = min(n_hold, len(tasks) - 1)
    else:
        n_hold = 0
    rng = np.random.default_rng(seed + 7919)
    hold = set(int(t) for t in rng.permutation(tasks)[:n_hold])
    train = [lg for lg in logs if int(lg.meta.get("task", 0)) not in hold]
    holdout = [lg for lg in logs if int(lg.meta.get("task", 0)) in hold]
    return train, holdout


def meta_train(dataset, config, callback=None):
    """Meta-train on ``dataset`` (list of logs tagged with ``task`` ids).

    Returns a :class:`TrainResult`; its ``curve`` holds one row per epoch
    (epoch 0 is the initialization) with mean per-window train and holdout
    NLL.  If the loss becomes non-finite, training stops and the best
    parameters so far are returned with status ``Diverged``.
    """
    train_logs, hold_logs = split_tasks(dataset, config.holdout_fraction, config.seed)
    shift, scale = fit_normalization(train_logs)
    net = FeatureNetwork.init(config.seed, shift, scale)
    src = WindowSource(train_logs)
    hold_src = WindowSource(hold_logs) if hold_logs else None
    resid = np.concatenate([y - h for y, h in zip(src.y, src.h)])
    params = init_params(net, sigma=np.maximum(resid.std(axis=0), 1e-3))
    T = config.horizon
    n_windows = max(config.batch_size, int(src.lengths().sum()) // T)
    if int((src.lengths() >= T).sum()) == 0:
        raise ValueError("dataset has no window of the requested horizon")
    train_eval = src.partition(T)
    hold_eval = hold_src.partition(T) if hold_src is not None else None

    def evaluate(p):
        tr = float(nll_loss(p, train_eval, shift, scale)) / len(train_eval)
        ho = float(nll_loss(p, hold_eval, shift, scale)) / len(hold_eval) if hold_eval else float("nan")
        return tr, ho

    rng = np.random.default_rng(config.seed)
    state = AdamState.zeros_like(params)
    tr, ho = evaluate(params)
    curve = [{"epoch": 0, "train_nll": tr, "holdout_nll": ho, "step_size": config.step_size}]
    best = (tr, params)
    status = "Completed"
    lr = config.step_size
    for epoch in range(1, config.epochs + 1):
        n_batches = max(1, n_windows // config.batch_size)
        diverged = False
        for _ in range(n_batches):
            batch = src.sample(rng, config.batch_size, T)
            try:
                _, grads = grad_nll(params, batch, shift, scale)
            except (NonFinite, FloatingPointError, np.linalg.LinAlgError):
                diverged = True
                break
            grads, _ = clip_global_norm(grads, config.clip_norm)
            state, params = adam_step(state, params, grads, lr)
        if not diverged:
            tr, ho = evaluate(params)
            diverged = not math.isfinite(tr)
        if diverged:
            log.warning("meta-training diverged at epoch %d; keeping best parameters", epoch)
            status = "Diverged"
            break
        curve.append({"epoch": epoch, "train_nll": tr, "holdout_nll": ho, "step_size": lr})
        if tr < best[0]:
            best = (tr, params)
        if callback is not None:
            callback(epoch, tr, ho)
        lr *= config.decay
    final = params if status == "Completed" else best[1]
    net_out, belief = to_model(net, final)
    return TrainResult(net_out, belief, final, curve, status)


def write_curve(path, curve):
    with open(path, "w") as fh:
        fh.write("epoch,train_nll,holdout_nll,step_size\n")
        for row in curve:
            fh.write(f"{row['epoch']},{row['train_nll']!r},{row['holdout_nll']!r},{row['step_size']!r}\n")



# ---------------------------------------------------------------------------
# adaptation benchmark


def random_feature_model(dataset, config):
    """Untrained baseline: the network and prior ``meta_train`` starts from."""
    return meta_train(dataset, replace(config, epochs=0))


def adapted_mse(net, belief, logs, n_updates=10, seed=0, nominal=NOMINAL):
    """One-step prediction error after ``n_updates`` recursive updates.

    The updates use ``n_updates`` transitions drawn at random from ``logs``;
    the error is evaluated on every remaining transition, per dimension in
    units of the nominal plant noise, and averaged.
    """
    phis, resids = zip(*(log_transitions(net, lg, nominal) for lg in logs))
    phi, resid = np.concatenate(phis), np.concatenate(resids)
    if len(phi) <= n_updates:
        raise ValueError("not enough transitions to hold out an evaluation set")
    order = np.random.default_rng(seed).permutation(len(phi))
    fit, test = order[:n_updates], order[n_updates:]
    post = belief.copy()
    for k in fit:
        update_from_features_(post, phi[k], resid[k])
    err = resid[test] - np.einsum("nid,id->ni", phi[test], post.theta)
    return float(np.mean((err / nominal.noise_std[:N_LEARNED]) ** 2))
