"""Last-layer Bayesian residual model on top of the nominal vehicle model.

Dimensions 0..3 of the state (yaw rate, speed, sideslip, wheel speed) carry a
learned residual ``theta_i . phi_i(z)``; the path coordinates (e, dphi) follow
the nominal kinematics exactly.  Each learned dimension keeps an independent
Gaussian belief over its last-layer weights, updated in closed form.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dynamics import NOMINAL, N_STATE, nominal_step, nominal_step_batch

N_LEARNED = 4
N_FEATURES = 16
HIDDEN = 128
N_INPUT = 8
CHECKPOINT_VERSION = 1


class NumericalBreakdown(ArithmeticError):
    pass


@dataclass
class FeatureNetwork:
    """Shared tanh trunk with one linear output head per learned dimension."""

    shift: np.ndarray  # (8,)
    scale: np.ndarray  # (8,)
    w1: np.ndarray  # (H, 8)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H, H)
    b2: np.ndarray  # (H,)
    w_out: np.ndarray  # (4, d, H)
    b_out: np.ndarray  # (4, d)

    TRAINABLE = ("w1", "b1", "w2", "b2", "w_out", "b_out")

    @classmethod
    def init(cls, seed, shift=None, scale=None, hidden=HIDDEN, n_features=N_FEATURES):
        rng = np.random.default_rng(seed)

        def glorot(fan_out, fan_in, *lead):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(*lead, fan_out, fan_in))

        return cls(
            shift=np.zeros(N_INPUT) if shift is None else np.asarray(shift, float),
            scale=np.ones(N_INPUT) if scale is None else np.asarray(scale, float),
            w1=glorot(hidden, N_INPUT), b1=np.zeros(hidden),
            w2=glorot(hidden, hidden), b2=np.zeros(hidden),
            w_out=glorot(n_features, hidden, N_LEARNED), b_out=np.zeros((N_LEARNED, n_features)),
        )

    @property
    def n_features(self):
        return self.w_out.shape[1]

    def params(self):
        return {name: getattr(self, name) for name in self.TRAINABLE}

    def with_params(self, params):
        kw = {name: np.array(ad.value(params[name])) for name in self.TRAINABLE}
        return FeatureNetwork(self.shift.copy(), self.scale.copy(), **kw)


def feature_forward(params, shift, scale, Z):
    """Features for inputs ``Z`` of shape ``(..., 8)`` -> ``(..., 4, d)``.

    ``params`` maps the trainable names to arrays or autodiff Vars.
    """
    zn = (Z - shift) / scale
    lead = ad.value(zn).shape[:-1]
    zn = ad.reshape(zn, (-1, N_INPUT))
    h1 = ad.tanh(zn @ ad.swapaxes(params["w1"], 0, 1) + params["b1"])
    h2 = ad.tanh(h1 @ ad.swapaxes(params["w2"], 0, 1) + params["b2"])
    w_out = params["w_out"]
    n_out, d, hid = ad.value(w_out).shape
    w_cat = ad.reshape(w_out, (n_out * d, hid))
    phi = h2 @ ad.swapaxes(w_cat, 0, 1) + ad.reshape(params["b_out"], (n_out * d,))
    return ad.reshape(phi, (*lead, n_out, d))


def features(net, z):
    """Per-dimension features ``phi_i(z)``; ``z`` is ``(8,)`` or ``(..., 8)``."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        from .dynamics import NonFiniteInput
        raise NonFiniteInput("non-finite feature input")
    return feature_forward(net.params(), net.shift, net.scale, z)


def feature_input(x, u, u_next):
    x = np.asarray(x, dtype=float)
    return np.concatenate([x[..., :4], np.asarray(u, float), np.asarray(u_next, float)], axis=-1)


@dataclass
class PosteriorBelief:
    """Gaussian beliefs over last-layer weights, one per learned dimension.

    ``theta`` (4, d) means, ``lam_inv`` (4, d, d) covariance factors (the
    weight covariance is ``sigma_i^2 * lam_inv[i]``), ``q`` (4, d) information
    accumulators with ``theta = lam_inv @ q``; ``sigma`` (6,) noise stds for
    all six state dimensions.
    """

    theta: np.ndarray
    lam_inv: np.ndarray
    q: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_prior(cls, theta, lam_inv, sigma):
        theta = np.array(theta, dtype=float)
        lam_inv = np.array(lam_inv, dtype=float)
        q = np.empty_like(theta)
        for i in range(len(theta)):
            q[i] = np.linalg.lstsq(lam_inv[i], theta[i], rcond=None)[0]
        return cls(theta, lam_inv, q, np.array(sigma, dtype=float))

    @classmethod
    def default(cls, n_features=N_FEATURES, sigma=None):
        sigma = np.asarray(NOMINAL.noise_std if sigma is None else sigma, dtype=float)
        eye = np.tile(np.eye(n_features), (N_LEARNED, 1, 1))
        return cls(np.zeros((N_LEARNED, n_features)), eye, np.zeros((N_LEARNED, n_features)),
                   sigma.copy())

    def copy(self):
        return PosteriorBelief(self.theta.copy(), self.lam_inv.copy(), self.q.copy(),
                               self.sigma.copy())


@dataclass
class Prediction:
    mean: np.ndarray
    var: np.ndarray


# ---------------------------------------------------------------------------
# model evaluation


def residual_batch(params, shift, scale, theta, Z):
    """Learned residual ``theta_i . phi_i(z)`` for dims 0..3, shape ``(..., 4)``."""
    phi = feature_forward(params, shift, scale, Z)
    return ad.sum_(phi * theta, axis=-1)


def model_step_batch(net, theta, X, U, U_next, kappa, nominal=NOMINAL):
    """Vectorized ``h(x, u) + g(z)``; works on autodiff Vars for Jacobians."""
    h = nominal_step_batch(X, U, kappa, nominal)
    Z = ad.concatenate([X[..., :4], U, U_next], axis=-1)
    g = residual_batch(net.params(), net.shift, net.scale, theta, Z)
    pad = np.zeros(ad.value(g).shape[:-1] + (N_STATE - N_LEARNED,))
    return h + ad.concatenate([g, pad], axis=-1)


def model_step(net, belief, x, u, u_next, kappa=0.0, nominal=NOMINAL):
    """Mean one-step prediction of the adapted model."""
    h = nominal_step(x, u, kappa, nominal)
    phi = features(net, feature_input(x, u, u_next))
    out = h.copy()
    out[:N_LEARNED] += np.einsum("id,id->i", belief.theta, phi)
    return out


def predict(net, belief, x, u, u_next, kappa=0.0, nominal=NOMINAL):
    h = nominal_step(x, u, kappa, nominal)
    phi = features(net, feature_input(x, u, u_next))
    mean = h.copy()
    mean[:N_LEARNED] += np.einsum("id,id->i", belief.theta, phi)
    quad = np.einsum("id,ide,ie->i", phi, belief.lam_inv, phi)
    var = belief.sigma ** 2
    var = var.copy()
    var[:N_LEARNED] *= 1.0 + quad
    return Prediction(mean, var)


def info_gain_step(net, belief, z):
    """One-step information gain ``0.5 * sum_i log(1 + phi_i' Lam_i^-1 phi_i)``."""
    phi = features(net, z)
    quad = np.einsum("...id,ide,...ie->...i", phi, belief.lam_inv, phi)
    return 0.5 * np.sum(np.log1p(quad), axis=-1)


def covariance_norm(belief, i):
    """Spectral norm of ``Lam_i^-1`` (largest eigenvalue; it is symmetric PSD)."""
    return float(np.linalg.eigvalsh(belief.lam_inv[i])[-1])


def total_covariance_norm(belief):
    return sum(covariance_norm(belief, i) for i in range(N_LEARNED))


# ---------------------------------------------------------------------------
# recursive updates


def update_from_features_(belief, phi, resid):
    """In-place rank-one update of every learned dimension.

    ``phi`` is ``(4, d)``, ``resid`` the targets ``x_next_i - h_i`` ``(4,)``.
    """
    lam_inv = belief.lam_inv
    lphi = np.einsum("ide,ie->id", lam_inv, phi)
    denom = 1.0 + np.einsum("id,id->i", phi, lphi)
    if np.any(denom < 1e-12) or not np.all(np.isfinite(denom)):
        raise NumericalBreakdown("1 + phi' Lam^-1 phi fell below 1e-12")
    lam_inv -= np.einsum("id,ie->ide", lphi, lphi) / denom[:, None, None]
    lam_inv[:] = 0.5 * (lam_inv + np.swapaxes(lam_inv, 1, 2))
    belief.q += resid[:, None] * phi
    # a zero feature carries no information; keep that dimension bit-for-bit
    seen = np.any(phi != 0.0, axis=1)
    belief.theta = np.where(seen[:, None], np.einsum("ide,ie->id", lam_inv, belief.q), belief.theta)
    return belief


def update_from_features(belief, phi, resid):
    return update_from_features_(belief.copy(), phi, resid)


def _residual_target(x_next, h_pred):
    return np.asarray(x_next, float)[:N_LEARNED] - np.asarray(h_pred, float)[:N_LEARNED]


def update(net, belief, z, x_next, h_pred):
    """Posterior after observing ``x_next`` from feature input ``z``.

    ``h_pred`` is the nominal prediction at the same step.  The input belief
    is left untouched.
    """
    phi = features(net, z)
    return update_from_features(belief, phi, _residual_target(x_next, h_pred))


def update_(net, belief, z, x_next, h_pred):
    """In-place variant of :func:`update` for control loops."""
    phi = features(net, z)
    return update_from_features_(belief, phi, _residual_target(x_next, h_pred))


def log_transitions(net, log, nominal=NOMINAL):
    """Features and residual targets for every transition in ``log``."""
    n = log.n_transitions
    if n < 1:
        return np.zeros((0, N_LEARNED, net.n_features)), np.zeros((0, N_LEARNED))
    Z = log.feature_inputs()[:n]
    phi = features(net, Z)
    h = nominal_step_batch(log.x[:n], log.u[:n], 0.0, nominal)
    resid = log.x[1:, :N_LEARNED] - h[:, :N_LEARNED]
    return phi, resid


def adapt_on_log(net, belief, log, nominal=NOMINAL):
    """Fold :func:`update` over every transition of ``log`` in order."""
    out = belief.copy()
    phi, resid = log_transitions(net, log, nominal)
    for k in range(len(phi)):
        update_from_features_(out, phi[k], resid[k])
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def save_checkpoint(path, net, belief, meta=None):
    """JSON checkpoint; floats are written with round-trip precision."""
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "meta": dict(meta or {}),
        "normalization": {"shift": _arr(net.shift), "scale": _arr(net.scale)},
        "trunk": {"w1": _arr(net.w1), "b1": _arr(net.b1), "w2": _arr(net.w2), "b2": _arr(net.b2)},
        "heads": {"w_out": _arr(net.w_out), "b_out": _arr(net.b_out)},
        "belief": {"theta": _arr(belief.theta), "lam_inv": _arr(belief.lam_inv),
                   "q": _arr(belief.q), "sigma": _arr(belief.sigma)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    a = lambda v: np.array(v, dtype=float)  # noqa: E731
    net = FeatureNetwork(a(doc["normalization"]["shift"]), a(doc["normalization"]["scale"]),
                         a(doc["trunk"]["w1"]), a(doc["trunk"]["b1"]),
                         a(doc["trunk"]["w2"]), a(doc["trunk"]["b2"]),
                         a(doc["heads"]["w_out"]), a(doc["heads"]["b_out"]))
    b = doc["belief"]
    belief = PosteriorBelief(a(b["theta"]), a(b["lam_inv"]), a(b["q"]), a(b["sigma"]))
    return net, belief, doc.get("meta", {})
