"""Curvilinear single-track vehicle: nominal Euler model and randomized plant.

State vector layout (``x``, shape ``(6,)``)::

    0 r        yaw rate                         rad/s
    1 v        total speed                      m/s
    2 beta     sideslip                         rad
    3 omega_r  rear wheel surface speed         m/s  (angular rate times radius)
    4 e        lateral deviation from the path  m
    5 dphi     heading deviation from the path  rad

Control vector (``u``, shape ``(2,)``): steering angle ``delta`` [rad] and
engine torque ``tau`` [N m].

The rear wheel speed is stored as a surface speed so that rolling without slip
reads ``omega_r == v * cos(beta)``; the wheel radius still converts torque to
force and enters the wheel inertia.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad

DT = 0.1
N_STATE = 6
N_CONTROL = 2
R, V, BETA, OMEGA, E, DPHI = range(6)
DELTA, TAU = range(2)
STATE_NAMES = ("r", "v", "beta", "omega_r", "e", "dphi")
CONTROL_NAMES = ("delta", "tau")
GRAVITY = 9.81
MIN_SPEED = 0.1
PLANT_SUBSTEPS = 10


class DegenerateSpeed(ValueError):
    """Speed at or below ``MIN_SPEED``: sideslip and slip angles are undefined."""


class NonFiniteInput(ValueError):
    pass


class InvalidGeometry(ValueError):
    pass


@dataclass(frozen=True)
class VehicleState:
    r: float
    v: float
    beta: float
    omega_r: float
    e: float = 0.0
    dphi: float = 0.0

    def to_array(self):
        return np.array([self.r, self.v, self.beta, self.omega_r, self.e, self.dphi])

    @classmethod
    def from_array(cls, x):
        return cls(*(float(c) for c in np.asarray(x, dtype=float)[:N_STATE]))


@dataclass(frozen=True)
class Control:
    delta: float
    tau: float

    def to_array(self):
        return np.array([self.delta, self.tau])


@dataclass(frozen=True)
class ControlWithRate:
    """Control held over one step: linear ramp from ``u`` towards ``u_next``."""

    u: np.ndarray
    u_dot: np.ndarray

    @classmethod
    def from_plan(cls, u, u_next, dt=DT):
        u = np.asarray(u, dtype=float)
        u_next = np.asarray(u_next, dtype=float)
        return cls(u, (u_next - u) / dt)

    def at(self, t):
        return self.u + t * self.u_dot

    @property
    def u_next(self):
        return self.u + DT * self.u_dot


@dataclass(frozen=True)
class PlantParams:
    mass: float = 1500.0
    yaw_inertia: float = 2250.0
    a: float = 1.35
    b: float = 1.45
    mu_f: float = 0.8
    mu_r: float = 0.7
    c_f: float = 70000.0
    c_r: float = 80000.0
    c_x: float = 60000.0
    wheel_radius: float = 0.33
    wheel_inertia: float = 6.0
    torque_gain: float = 1.0
    drivetrain_tau: float = 0.05
    rolling_coeff: float = 0.015
    aero_coeff: float = 0.4
    noise_std: tuple = (0.01, 0.02, 0.005, 0.05, 0.01, 0.002)

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            vals = val if isinstance(val, tuple) else (val,)
            if not all(math.isfinite(c) and c > 0 for c in vals):
                raise ValueError(f"PlantParams.{f.name} must be positive and finite, got {val!r}")
        if not (0 < self.mu_f <= 2 and 0 < self.mu_r <= 2):
            raise ValueError("friction coefficients must lie in (0, 2]")
        if len(self.noise_std) != N_STATE:
            raise ValueError("noise_std needs one entry per state dimension")

    @property
    def length(self):
        return self.a + self.b

    @property
    def fz_front(self):
        return self.mass * GRAVITY * self.b / self.length

    @property
    def fz_rear(self):
        return self.mass * GRAVITY * self.a / self.length

    def to_dict(self):
        d = asdict(self)
        d["noise_std"] = list(self.noise_std)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "noise_std" in d:
            d["noise_std"] = tuple(float(s) for s in d["noise_std"])
        return cls(**d)


NOMINAL = PlantParams()

# log-uniform perturbation half-ranges around the base vehicle
WIDE_FIELDS = ("mu_f", "mu_r", "c_f", "c_r", "c_x", "torque_gain")
NARROW_FIELDS = ("mass", "yaw_inertia")
WIDE_SPREAD = 0.25
NARROW_SPREAD = 0.10


def sample_plant_ensemble(seed, count, base=NOMINAL):
    """Draw ``count`` plants around ``base``; deterministic in ``seed``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    plants = []
    for _ in range(count):
        changes = {}
        for name in WIDE_FIELDS:
            f = math.exp(rng.uniform(math.log(1 - WIDE_SPREAD), math.log(1 + WIDE_SPREAD)))
            changes[name] = getattr(base, name) * f
        for name in NARROW_FIELDS:
            f = math.exp(rng.uniform(math.log(1 - NARROW_SPREAD), math.log(1 + NARROW_SPREAD)))
            changes[name] = getattr(base, name) * f
        changes["mu_f"] = min(changes["mu_f"], 2.0)
        changes["mu_r"] = min(changes["mu_r"], 2.0)
        plants.append(replace(base, **changes))
    return plants


# ---------------------------------------------------------------------------
# tire forces


def brush_force(sigma, mu_fz):
    """Saturating brush-tire characteristic for a signed stiffness-scaled slip.

    Cubic up to full sliding at ``|sigma| = 3 mu_fz``, constant ``mu_fz`` beyond;
    continuously differentiable.  Works on floats, arrays and autodiff Vars.
    """
    mag = ad.abs_(sigma)
    lin = sigma - sigma * mag / (3.0 * mu_fz) + sigma * sigma * sigma / (27.0 * mu_fz * mu_fz)
    sat = mu_fz * np.sign(ad.value(sigma))
    return ad.where(ad.value(mag) < 3.0 * mu_fz, lin, sat)


def fiala_lateral(tan_alpha, stiffness, mu_fz):
    """Fiala lateral force; opposes the slip angle."""
    return -brush_force(stiffness * tan_alpha, mu_fz)


def slip_ratio(omega_r, vx):
    return (omega_r - vx) / ad.maximum(vx, 0.5)


# ---------------------------------------------------------------------------
# nominal model


def _nominal_derivs(X, U, kappa, p):
    r, v, beta = X[..., R], X[..., V], X[..., BETA]
    omega, e, dphi = X[..., OMEGA], X[..., E], X[..., DPHI]
    delta = U[..., DELTA]
    cb, sb = ad.cos(beta), ad.sin(beta)
    vx, vy = v * cb, v * sb
    tan_af = ad.tan(ad.arctan2(vy + p.a * r, vx) - delta)
    tan_ar = (vy - p.b * r) / vx
    fyf = fiala_lateral(tan_af, p.c_f, p.mu_f * p.fz_front)
    fyr = fiala_lateral(tan_ar, p.c_r, p.mu_r * p.fz_rear)
    fxr = brush_force(p.c_x * slip_ratio(omega, vx), p.mu_r * p.fz_rear)
    drag = p.rolling_coeff * p.mass * GRAVITY + p.aero_coeff * v * v
    d_b = delta - beta
    cdb, sdb = ad.cos(d_b), ad.sin(d_b)
    r_dot = (p.a * fyf * ad.cos(delta) - p.b * fyr) / p.yaw_inertia
    v_dot = (-fyf * sdb + fxr * cb + fyr * sb - drag) / p.mass
    beta_dot = (fyf * cdb + fyr * cb - fxr * sb) / (p.mass * v) - r
    heading = beta + dphi
    e_dot = v * ad.sin(heading)
    dphi_dot = r - kappa * v * ad.cos(heading) / (1.0 - kappa * e)
    return r_dot, v_dot, beta_dot, e_dot, dphi_dot


def nominal_step_batch(X, U, kappa, params=NOMINAL, dt=DT):
    """Vectorized nominal step over leading axes; accepts autodiff Vars.

    The wheel speed is propagated unchanged: its increment is left entirely
    to the learned residual.
    """
    vmin = np.min(ad.value(X)[..., V])
    if not vmin > MIN_SPEED:
        raise DegenerateSpeed(f"speed {vmin:.4g} m/s is at or below {MIN_SPEED}")
    r_dot, v_dot, beta_dot, e_dot, dphi_dot = _nominal_derivs(X, U, kappa, params)
    X0 = X
    cols = [X0[..., R] + dt * r_dot,
            X0[..., V] + dt * v_dot,
            X0[..., BETA] + dt * beta_dot,
            X0[..., OMEGA] * 1.0,
            X0[..., E] + dt * e_dot,
            X0[..., DPHI] + dt * dphi_dot]
    return ad.stack(cols, axis=-1)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteInput("non-finite input")


def nominal_step(x, u, kappa=0.0, params=NOMINAL):
    """One explicit-Euler step of the nominal single-track model."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u, np.asarray(kappa, dtype=float))
    return nominal_step_batch(x, u, float(kappa), params)


# ---------------------------------------------------------------------------
# plant


def _brush_scalar(sigma, mu_fz):
    if sigma >= 3.0 * mu_fz:
        return mu_fz
    return sigma - sigma * sigma / (3.0 * mu_fz) + sigma ** 3 / (27.0 * mu_fz * mu_fz)


def _rear_forces(p, omega, vx, tan_ar):
    """Coupled longitudinal/lateral brush forces on the driven rear axle."""
    s = (omega - vx) / max(vx, 0.5)
    sx = p.c_x * s
    sy = p.c_r * tan_ar
    mag = math.hypot(sx, sy)
    if mag < 1e-12:
        return sx, -sy
    f = _brush_scalar(mag, p.mu_r * p.fz_rear)
    return f * sx / mag, -f * sy / mag


def _front_force(p, tan_af):
    mu_fz = p.mu_f * p.fz_front
    sig = p.c_f * tan_af
    return -math.copysign(_brush_scalar(abs(sig), mu_fz), sig)


def plant_derivs(p, x, delta, torque, kappa):
    """Continuous-time plant derivatives (yaw rate, speed, sideslip, wheel, e, dphi)."""
    r, v, beta, omega, e, dphi = x
    cb, sb = math.cos(beta), math.sin(beta)
    vx, vy = v * cb, v * sb
    tan_af = math.tan(math.atan2(vy + p.a * r, vx) - delta)
    tan_ar = (vy - p.b * r) / vx
    fyf = _front_force(p, tan_af)
    fxr, fyr = _rear_forces(p, omega, vx, tan_ar)
    drag = p.rolling_coeff * p.mass * GRAVITY + p.aero_coeff * v * v
    d_b = delta - beta
    r_dot = (p.a * fyf * math.cos(delta) - p.b * fyr) / p.yaw_inertia
    v_dot = (-fyf * math.sin(d_b) + fxr * cb + fyr * sb - drag) / p.mass
    beta_dot = (fyf * math.cos(d_b) + fyr * cb - fxr * sb) / (p.mass * v) - r
    w_dot = p.wheel_radius * (p.torque_gain * torque - p.wheel_radius * fxr) / p.wheel_inertia
    heading = beta + dphi
    e_dot = v * math.sin(heading)
    dphi_dot = r - kappa * v * math.cos(heading) / (1.0 - kappa * e)
    return (r_dot, v_dot, beta_dot, w_dot, e_dot, dphi_dot), tan_ar


def plant_step(params, x, uwr, kappa, noise, substeps=PLANT_SUBSTEPS, dt=DT):
    """True plant over one step, followed by additive Gaussian noise.

    Controls ramp linearly across the step per ``uwr``.  The engine torque
    reaching the wheels lags the command by ``drivetrain_tau`` (the ramp
    response of a first-order lag).  The stiff wheel-speed mode is advanced
    linearly-implicitly inside each sub-step; everything else is explicit.
    """
    p = params
    x = np.asarray(x, dtype=float)
    noise = np.asarray(noise, dtype=float)
    _check_finite(x, uwr.u, uwr.u_dot, noise, np.asarray(kappa, dtype=float))
    if not x[V] > MIN_SPEED:
        raise DegenerateSpeed(f"speed {x[V]:.4g} m/s is at or below {MIN_SPEED}")
    h = dt / substeps
    state = [float(c) for c in x]
    d0, t0 = float(uwr.u[DELTA]), float(uwr.u[TAU])
    dd, dt_ = float(uwr.u_dot[DELTA]), float(uwr.u_dot[TAU])
    ratio = p.wheel_radius * p.wheel_radius / p.wheel_inertia
    for j in range(substeps):
        t = j * h
        delta = d0 + t * dd
        torque = t0 + (t - p.drivetrain_tau) * dt_
        derivs, tan_ar = plant_derivs(p, state, delta, torque, kappa)
        if state[V] <= MIN_SPEED:
            raise DegenerateSpeed(f"speed {state[V]:.4g} m/s is at or below {MIN_SPEED}")
        # d(w_dot)/d(omega) through the rear longitudinal force, by difference
        vx = state[V] * math.cos(state[BETA])
        eps = 1e-4 * max(1.0, abs(state[OMEGA]))
        fx_hi = _rear_forces(p, state[OMEGA] + eps, vx, tan_ar)[0]
        fx_lo = _rear_forces(p, state[OMEGA] - eps, vx, tan_ar)[0]
        jac = -ratio * (fx_hi - fx_lo) / (2 * eps)
        new = [s + h * d for s, d in zip(state, derivs)]
        new[OMEGA] = state[OMEGA] + h * derivs[OMEGA] / (1.0 - h * min(jac, 0.0))
        state = new
    out = np.array(state) + np.asarray(p.noise_std) * noise
    if not np.all(np.isfinite(out)):
        raise NonFiniteInput("plant state became non-finite")
    return out


# ---------------------------------------------------------------------------
# steady states and references


def steady_state(radius, params=NOMINAL, speed=None, beta=None):
    """Constant-radius equilibrium of the plant on the path (``e = 0``).

    The velocity is tangent to the path, so ``dphi = -beta`` and ``r = kappa * v``.

    Exactly one of ``speed`` and ``beta`` is given; the other is solved for
    together with steering, torque and wheel speed.  ``radius`` is signed
    (positive turns left).  Returns ``(x, u)``.
    """
    from scipy.optimize import least_squares

    if (speed is None) == (beta is None):
        raise ValueError("give exactly one of speed and beta")
    kappa = 1.0 / radius
    sgn = 1.0 if radius > 0 else -1.0

    def unpack(z):
        if speed is None:
            v, b = z[0], beta
        else:
            v, b = speed, z[0]
        return v, b, z[1], z[2], z[3]

    def resid(z):
        v, b, delta, torque, omega = unpack(z)
        x = (kappa * v, v, b, omega, 0.0, -b)
        d, _ = plant_derivs(params, x, delta, torque, kappa)
        return [d[0] * 10.0, d[1], d[2] * 10.0, d[3]]

    if speed is None:
        v0 = math.sqrt(0.6 * params.mu_r * GRAVITY * abs(radius))
        z0 = [v0, -sgn * 0.1, 300.0, v0 * math.cos(beta) * 1.2]
    else:
        z0 = [-sgn * 0.01, sgn * params.length / abs(radius), 300.0, speed]
    sol = least_squares(resid, z0, xtol=1e-14, ftol=1e-14, gtol=1e-14)
    if not sol.success or np.max(np.abs(sol.fun)) > 1e-6:
        raise InvalidGeometry(f"no steady state for radius={radius}, speed={speed}, beta={beta}")
    v, b, delta, torque, omega = unpack(sol.x)
    x = np.array([kappa * v, v, b, omega, 0.0, -b])
    return x, np.array([delta, torque])


@dataclass
class ReferenceTrajectory:
    """Time-indexed reference: ``K + 1`` points spaced ``dt`` apart.

    ``s`` is the reference arc length at each point; ``u_ref`` holds
    feedforward controls (used for warm starts and tracker feedforward).
    """

    x_ref: np.ndarray
    kappa: np.ndarray
    e_min: np.ndarray
    e_max: np.ndarray
    s: np.ndarray
    u_ref: np.ndarray
    kind: str = "custom"
    dt: float = DT

    def __post_init__(self):
        n = len(self.x_ref)
        for name in ("kappa", "e_min", "e_max", "s", "u_ref"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"reference field {name} has wrong length")
        if np.any(self.e_min >= self.e_max):
            raise InvalidGeometry("corridor bounds need e_min < e_max")

    @property
    def n_steps(self):
        return len(self.x_ref) - 1

    def window(self, k0, n):
        """Points ``k0 .. k0 + n``, padding with the final point."""
        idx = np.minimum(np.arange(k0, k0 + n + 1), self.n_steps)
        return ReferenceTrajectory(self.x_ref[idx].copy(), self.kappa[idx].copy(),
                                   self.e_min[idx].copy(), self.e_max[idx].copy(),
                                   self.s[idx].copy(), self.u_ref[idx].copy(),
                                   self.kind, self.dt)

    def kappa_at(self, s):
        """Path curvature at arc length ``s`` (piecewise constant)."""
        k = int(np.searchsorted(self.s, s, side="right")) - 1
        return float(self.kappa[min(max(k, 0), self.n_steps)])

    def corridor_at(self, s):
        k = int(np.searchsorted(self.s, s, side="right")) - 1
        k = min(max(k, 0), self.n_steps)
        return float(self.e_min[k]), float(self.e_max[k])

    def to_csv(self, path):
        header = "k,r_ref,v_ref,beta_ref,omega_ref,e_ref,dphi_ref,kappa,e_min,e_max"
        rows = np.column_stack([np.arange(len(self.x_ref)), self.x_ref, self.kappa,
                                self.e_min, self.e_max])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(str(int(row[0])) + "," + ",".join(repr(float(c)) for c in row[1:]) + "\n")


def _blend(x_from, x_to, n):
    w = np.linspace(0.0, 1.0, n + 2)[1:-1, None]
    return (1 - w) * x_from + w * x_to


def make_reference(kind, params=None, vehicle=NOMINAL):
    """Scripted geometric references.

    kinds and their parameters (defaults in brackets):

    * ``straight``: v0 [7.5], v1 [20.0], steps [45], half_width [3.0]
    * ``circle``: radius [15.0], speed [9.0] or beta, duration [10.0], half_width [2.0]
    * ``figure8``: radius [12.0], beta [0.3], laps [1], half_width [2.0], transition [1.0]
    * ``drift_initiation``: v0 [9.0], straight [60.0] m, radius [12.0], beta [0.3],
      duration [8.0] s of drifting, half_width [3.0], transition [1.0]
    """
    p = dict(params or {})
    if kind == "straight":
        v0, v1 = float(p.get("v0", 7.5)), float(p.get("v1", 20.0))
        n = int(p.get("steps", 45))
        hw = float(p.get("half_width", 3.0))
        if n < 1:
            raise InvalidGeometry("straight reference needs steps >= 1")
        if v0 <= 0 or v1 <= 0 or hw <= 0:
            raise InvalidGeometry("speeds and width must be positive")
        speeds = np.linspace(v0, v1, n + 1)
        x = np.zeros((n + 1, N_STATE))
        x[:, V] = speeds
        x[:, OMEGA] = speeds
        s = np.concatenate([[0.0], np.cumsum(0.5 * (speeds[1:] + speeds[:-1]) * DT)])
        u = np.zeros((n + 1, N_CONTROL))
        return ReferenceTrajectory(x, np.zeros(n + 1), -hw * np.ones(n + 1), hw * np.ones(n + 1),
                                   s, u, kind)
    if kind == "circle":
        radius = float(p.get("radius", 15.0))
        duration = float(p.get("duration", 10.0))
        hw = float(p.get("half_width", 2.0))
        if radius <= 0 or duration <= 0:
            raise InvalidGeometry("circle needs positive radius and duration")
        if "beta" in p:
            xs, us = steady_state(radius, vehicle, beta=-abs(float(p["beta"])))
        else:
            xs, us = steady_state(radius, vehicle, speed=float(p.get("speed", 9.0)))
        n = max(1, int(round(duration / DT)))
        x = np.tile(xs, (n + 1, 1))
        ds = xs[V] * DT
        return ReferenceTrajectory(x, np.full(n + 1, 1.0 / radius), -hw * np.ones(n + 1),
                                   hw * np.ones(n + 1), ds * np.arange(n + 1),
                                   np.tile(us, (n + 1, 1)), kind)
    if kind == "figure8":
        radius = float(p.get("radius", 12.0))
        beta = abs(float(p.get("beta", 0.3)))
        laps = int(p.get("laps", 1))
        hw = float(p.get("half_width", 2.0))
        trans = float(p.get("transition", 1.0))
        if radius <= 0 or laps < 1:
            raise InvalidGeometry("figure8 needs positive radius and laps >= 1")
        xl, ul = steady_state(radius, vehicle, beta=-beta)
        xr, ur = steady_state(-radius, vehicle, beta=beta)
        ds_nom = xl[V] * DT
        per_lobe = int(round(2 * math.pi * radius / ds_nom))
        ds = 2 * math.pi * radius / per_lobe
        nt = int(round(trans / DT))
        xs, us, ks = [], [], []
        for _ in range(laps):
            for xa, ua, xb, ub, k in ((xl, ul, xr, ur, 1.0 / radius), (xr, ur, xl, ul, -1.0 / radius)):
                xs.append(np.tile(xa, (per_lobe, 1)))
                us.append(np.tile(ua, (per_lobe, 1)))
                ks.append(np.full(per_lobe, k))
        # the closing point continues the last lobe
        x = np.concatenate(xs + [xs[-1][-1:]])
        u = np.concatenate(us + [us[-1][-1:]])
        kap = np.concatenate(ks + [ks[-1][-1:]])
        # smooth the state reference across each lobe change
        for j in range(1, 2 * laps):
            c = j * per_lobe
            lo, hi = max(c - nt // 2, 1), min(c + nt - nt // 2, len(x) - 1)
            if hi - lo > 0:
                x[lo:hi] = _blend(x[lo - 1], x[hi], hi - lo)
                u[lo:hi] = _blend(u[lo - 1], u[hi], hi - lo)
        n = len(x)
        return ReferenceTrajectory(x, kap, -hw * np.ones(n), hw * np.ones(n), ds * np.arange(n), u,
                                   kind)
    if kind == "drift_initiation":
        v0 = float(p.get("v0", 9.0))
        straight = float(p.get("straight", 60.0))
        radius = float(p.get("radius", 12.0))
        beta = abs(float(p.get("beta", 0.3)))
        duration = float(p.get("duration", 8.0))
        hw = float(p.get("half_width", 3.0))
        trans = float(p.get("transition", 1.0))
        if radius <= 0 or straight <= 0 or duration <= 0 or v0 <= 0:
            raise InvalidGeometry("drift_initiation needs positive geometry")
        xd, ud = steady_state(radius, vehicle, beta=-beta)
        xg, ug = steady_state(1e6, vehicle, speed=v0)
        xg[R] = 0.0
        n_straight = int(round(straight / (v0 * DT)))
        n_drift = int(round(duration / DT))
        nt = int(round(trans / DT))
        x = np.concatenate([np.tile(xg, (n_straight, 1)), np.tile(xd, (n_drift + 1, 1))])
        u = np.concatenate([np.tile(ug, (n_straight, 1)), np.tile(ud, (n_drift + 1, 1))])
        if nt > 0:
            x[n_straight:n_straight + nt] = _blend(xg, xd, nt)
            u[n_straight:n_straight + nt] = _blend(ug, ud, nt)
        kap = np.concatenate([np.zeros(n_straight), np.full(n_drift + 1, 1.0 / radius)])
        ds = x[:, V] * np.cos(x[:, BETA] + x[:, DPHI]) * DT
        s = np.concatenate([[0.0], np.cumsum(ds[:-1])])
        n = len(x)
        return ReferenceTrajectory(x, kap, -hw * np.ones(n), hw * np.ones(n), s, u, kind)
    raise InvalidGeometry(f"unknown reference kind {kind!r}")


# ---------------------------------------------------------------------------
# logs


@dataclass
class TrajectoryLog:
    """Uniformly sampled state/control records.

    Record ``k`` holds the state at ``t[k]`` and the control ramp applied over
    the following step (``u[k]`` towards ``u_next[k]``).  Transition ``k`` is
    ``(record k) -> x[k + 1]``; a log of ``K + 1`` records has ``K`` transitions.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_next: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.t)
        if n < 1:
            raise ValueError("a log needs at least one record")
        if not (len(self.x) == len(self.u) == len(self.u_next) == n):
            raise ValueError("log columns have mismatched lengths")
        if n > 1:
            steps = np.diff(self.t)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9:
                raise ValueError("timestamps must be strictly increasing and uniform")

    def __len__(self):
        return len(self.t)

    @property
    def n_transitions(self):
        return len(self.t) - 1

    def feature_inputs(self):
        """``z_k = (r, v, beta, omega_r, u_k, u_{k+1})`` for every record."""
        return np.concatenate([self.x[:, :4], self.u, self.u_next], axis=1)

    def to_csv(self, path):
        header = "t,r,v,beta,omega_r,e,dphi,delta,tau,delta_next,tau_next"
        rows = np.column_stack([self.t, self.x, self.u, self.u_next])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(repr(float(c)) for c in row) + "\n")
        write_sidecar(str(path) + ".meta", self.meta)

    @classmethod
    def from_csv(cls, path):
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        meta = {}
        try:
            meta = read_sidecar(str(path) + ".meta")
        except FileNotFoundError:
            pass
        return cls(data[:, 0], data[:, 1:7], data[:, 7:9], data[:, 9:11], meta)

    def copy(self):
        return TrajectoryLog(self.t.copy(), self.x.copy(), self.u.copy(), self.u_next.copy(),
                             dict(self.meta))


def write_sidecar(path, meta):
    with open(path, "w") as fh:
        for key in sorted(meta):
            fh.write(f"{key} = {meta[key]}\n")


def read_sidecar(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            if "=" in line:
                key, val = line.split("=", 1)
                meta[key.strip()] = val.strip()
    return meta


MIRROR_STATE = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, -1.0])
MIRROR_CONTROL = np.array([-1.0, 1.0])


def mirror(log):
    """Left/right mirror image: negate r, beta, e, dphi and steering."""
    meta = dict(log.meta)
    meta["mirrored"] = str(not (str(meta.get("mirrored", "False")) == "True"))
    return TrajectoryLog(log.t.copy(), log.x * MIRROR_STATE, log.u * MIRROR_CONTROL,
                         log.u_next * MIRROR_CONTROL, meta)


# ---------------------------------------------------------------------------
# controllers and rollouts


@dataclass
class TrackerGains:
    k_e: float = 0.08
    k_dphi: float = 0.6
    k_v: float = 150.0


class PlanTracker:
    """Low-level tracker for an open-loop plan.

    The control signal stays continuous: each step starts from the previous
    end point and ramps to the planned next control plus proportional
    corrections on lateral error, heading error and speed.
    """

    def __init__(self, x_plan, u_plan, gains=None, u_min=(-0.6, -500.0), u_max=(0.6, 2000.0)):
        self.x_plan = np.asarray(x_plan, dtype=float)
        self.u_plan = np.asarray(u_plan, dtype=float)
        self.gains = gains or TrackerGains()
        self.u_min = np.asarray(u_min, dtype=float)
        self.u_max = np.asarray(u_max, dtype=float)
        self._last = None

    def __call__(self, k, x):
        kp = min(k, len(self.u_plan) - 1)
        kn = min(k + 1, len(self.u_plan) - 1)
        u0 = self.u_plan[kp] if self._last is None else self._last
        xp = self.x_plan[min(k, len(self.x_plan) - 1)]
        g = self.gains
        fb = np.array([-g.k_e * (x[E] - xp[E]) - g.k_dphi * (x[DPHI] - xp[DPHI]),
                       g.k_v * (xp[V] - x[V])])
        u1 = np.clip(self.u_plan[kn] + fb, self.u_min, self.u_max)
        self._last = u1
        return ControlWithRate.from_plan(u0, u1)


class OpenLoop:
    """Replays a fixed control sequence (piecewise-linear between entries)."""

    def __init__(self, u_seq):
        self.u_seq = np.asarray(u_seq, dtype=float)

    def __call__(self, k, x):
        n = len(self.u_seq) - 1
        return ControlWithRate.from_plan(self.u_seq[min(k, n)], self.u_seq[min(k + 1, n)])


class DriftHold:
    """Linear-quadratic stabilizer around a steady drift of ``params``.

    The plant map is linearized by central differences at the equilibrium
    and the discrete Riccati equation gives the gain.  ``dither`` (n, 2) is
    added to the commanded control at step k, for excitation.
    """

    Q = (1.0, 1.0, 10.0, 0.1, 1.0, 1.0)
    R = (10.0, 1e-6)

    def __init__(self, radius, beta, params=NOMINAL, dither=None,
                 u_min=(-0.6, -500.0), u_max=(0.6, 2000.0)):
        from scipy.linalg import solve_discrete_are

        self.x_eq, self.u_eq = steady_state(radius, params, beta=beta)
        A, B = self._linearize(params, 1.0 / radius)
        Q, R = np.diag(self.Q), np.diag(self.R)
        P = solve_discrete_are(A, B, Q, R)
        self.K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        self.dither = None if dither is None else np.asarray(dither, dtype=float)
        self.u_min = np.asarray(u_min, dtype=float)
        self.u_max = np.asarray(u_max, dtype=float)
        self._last = None

    def _linearize(self, params, kappa, h=1e-5):
        xs, us = self.x_eq, self.u_eq
        zero = np.zeros(N_STATE)

        def f(x, u):
            return plant_step(params, x, ControlWithRate.from_plan(u, u), kappa, zero)

        A = np.empty((N_STATE, N_STATE))
        B = np.empty((N_STATE, N_CONTROL))
        for j in range(N_STATE):
            d = np.zeros(N_STATE)
            d[j] = h * max(1.0, abs(xs[j]))
            A[:, j] = (f(xs + d, us) - f(xs - d, us)) / (2 * d[j])
        for j in range(N_CONTROL):
            d = np.zeros(N_CONTROL)
            d[j] = h * max(1.0, abs(us[j]))
            B[:, j] = (f(xs, us + d) - f(xs, us - d)) / (2 * d[j])
        return A, B

    def __call__(self, k, x):
        u1 = self.u_eq - self.K @ (np.asarray(x) - self.x_eq)
        if self.dither is not None:
            u1 = u1 + self.dither[min(k, len(self.dither) - 1)]
        u1 = np.clip(u1, self.u_min, self.u_max)
        u0 = u1 if self._last is None else self._last
        self._last = u1
        return ControlWithRate.from_plan(u0, u1)


SPINOUT_BETA = math.pi / 2
CORRIDOR_FACTOR = 3.0


def rollout(plant, controller, reference, steps, seed, x0=None, meta=None):
    """Simulate ``steps`` transitions of ``plant`` under ``controller``.

    ``controller(k, x)`` returns the :class:`ControlWithRate` for step ``k``.
    The arc length along ``reference`` is integrated alongside the state to
    look up curvature and corridor.  The run stops early with status
    ``SpinOut`` when ``|beta| > pi/2`` or ``|e|`` leaves three corridor
    widths, or ``Stalled`` when the speed collapses.
    """
    rng = np.random.default_rng(seed)
    x = np.array(reference.x_ref[0] if x0 is None else x0, dtype=float)
    s = 0.0
    ts, xs, us, uns = [], [x.copy()], [], []
    status = "Completed"
    for k in range(steps):
        uwr = controller(k, x)
        us.append(np.array(uwr.u))
        uns.append(np.array(uwr.u_next))
        kappa = reference.kappa_at(s)
        noise = rng.standard_normal(N_STATE)
        try:
            x_new = plant_step(plant, x, uwr, kappa, noise)
        except (DegenerateSpeed, NonFiniteInput):
            us.pop()
            uns.pop()
            status = "Stalled"
            break
        s += x[V] * math.cos(x[BETA] + x[DPHI]) / (1.0 - kappa * x[E]) * DT
        x = x_new
        xs.append(x.copy())
        lo, hi = reference.corridor_at(s)
        width = hi - lo
        if abs(x[BETA]) > SPINOUT_BETA or abs(x[E]) > CORRIDOR_FACTOR * width:
            status = "SpinOut"
            break
    n = len(xs)
    if us:
        us.append(uns[-1].copy())
        uns.append(uns[-1].copy())
    else:
        us.append(np.zeros(N_CONTROL))
        uns.append(np.zeros(N_CONTROL))
    info = {"seed": seed, "status": status, "scenario": reference.kind}
    info.update(meta or {})
    return TrajectoryLog(DT * np.arange(n), np.array(xs), np.array(us), np.array(uns), info)
