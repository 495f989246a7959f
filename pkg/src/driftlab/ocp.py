"""Trajectory optimization and receding-horizon control.

The tracking problem over horizon ``N`` is

    min   sum_{k<N} |x_k - x_ref,k|_Q^2 + |u_k - u_{k+1}|_R^2  [- alpha * info]
    s.t.  x_{k+1} = f(x_k, u_k, u_{k+1}),  x_0 = x_init,
          u_min <= u_k <= u_max,  e_min,k <= e_k <= e_max,k   (k = 1..N)

with states and controls both decision variables (multiple shooting).  It is
solved by a line-search SQP: each iteration linearizes the dynamics with
reverse-mode Jacobians, solves a convex QP and backtracks on an l1 merit
function.

Control convention: ``u_0`` is the control at the start of the horizon.  In
MPC it is pinned to the control already being applied (``u_fixed``); in
open-loop planning it is a free variable subject to the input bounds.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from . import qp
from .bayes import (N_LEARNED, PosteriorBelief, feature_forward, features, info_gain_step,
                    model_step_batch, update_)
from .dynamics import (BETA, DPHI, DT, E, N_CONTROL, N_STATE, NOMINAL, V, ControlWithRate,
                       DegenerateSpeed, NonFiniteInput, PlanTracker, ReferenceTrajectory,
                       TrajectoryLog, VehicleState, nominal_step, rollout)

DEFAULT_Q = (2.0, 1.0, 4.0, 0.1, 8.0, 8.0)
DEFAULT_R = (5.0, 1e-4)
DEFAULT_U_MIN = (-0.6, -500.0)
DEFAULT_U_MAX = (0.6, 2000.0)
MODES = ("Nominal", "Info")


class QpFailure(RuntimeError):
    pass


@dataclass
class OcpSpec:
    horizon: int
    x_init: np.ndarray
    reference: ReferenceTrajectory
    Q: np.ndarray = DEFAULT_Q
    R: np.ndarray = DEFAULT_R
    u_min: np.ndarray = DEFAULT_U_MIN
    u_max: np.ndarray = DEFAULT_U_MAX
    alpha: float = 1.0
    mode: str = "Nominal"
    u_fixed: np.ndarray | None = None
    corridor: bool = True
    corridor_penalty: float | None = 1e3  # None: hard corridor bounds
    sequential_info: bool = False
    max_iter: int = 100
    tol: float = 1e-5

    def __post_init__(self):
        if isinstance(self.x_init, VehicleState):
            self.x_init = self.x_init.to_array()
        self.x_init = np.asarray(self.x_init, dtype=float).reshape(N_STATE)
        self.Q = np.asarray(self.Q, dtype=float).reshape(N_STATE)
        self.R = np.asarray(self.R, dtype=float).reshape(N_CONTROL)
        self.u_min = np.asarray(self.u_min, dtype=float).reshape(N_CONTROL)
        self.u_max = np.asarray(self.u_max, dtype=float).reshape(N_CONTROL)
        if self.u_fixed is not None:
            self.u_fixed = np.asarray(self.u_fixed, dtype=float).reshape(N_CONTROL)
        if int(self.horizon) < 1:
            raise ValueError("horizon must be >= 1")
        self.horizon = int(self.horizon)
        if np.any(self.Q < 0) or np.any(self.R < 0):
            raise ValueError("cost weights must be non-negative")
        if np.any(self.u_min >= self.u_max):
            raise ValueError("need u_min < u_max")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.corridor_penalty is not None and self.corridor_penalty <= 0:
            raise ValueError("corridor_penalty must be positive or None")
        if self.reference.n_steps < self.horizon:
            raise ValueError("reference shorter than the horizon")

    @property
    def soft_corridor(self):
        return self.corridor and self.corridor_penalty is not None

    @property
    def info_weight(self):
        return self.alpha if self.mode == "Info" else 0.0


@dataclass
class OcpSolution:
    x: np.ndarray  # (N+1, 6)
    u: np.ndarray  # (N+1, 2), u[0] is the control at the start of the horizon
    cost: float
    info: float
    iterations: int
    status: str
    y: np.ndarray = None  # QP multipliers at the returned iterate
    kkt: float = math.inf
    defect: float = math.inf
    qp_iterations: int = 0
    diagnostics: list = field(default_factory=list)

    @property
    def converged(self):
        return self.status == "Converged"

    def to_log(self, meta=None):
        u_next = np.vstack([self.u[1:], self.u[-1:]])
        info = {"status": self.status, "cost": self.cost, "info": self.info,
                "iterations": self.iterations}
        info.update(meta or {})
        return TrajectoryLog(DT * np.arange(len(self.x)), self.x.copy(), self.u.copy(), u_next, info)

    def write(self, path, meta=None):
        """Trajectory CSV plus a ``.meta`` sidecar with cost, info and status."""
        log = self.to_log(meta)
        log.to_csv(path)
        return log


# ---------------------------------------------------------------------------
# objectives


def stage_cost(x, u, w, x_ref, Q, R):
    """``|x - x_ref|_Q^2 + |u - w|_R^2`` for diagonal weights ``Q``, ``R``."""
    dx = np.asarray(x, float) - np.asarray(x_ref, float)
    du = np.asarray(u, float) - np.asarray(w, float)
    return float(np.sum(np.asarray(Q, float) * dx * dx) + np.sum(np.asarray(R, float) * du * du))


def tracking_cost(X, U, x_ref, Q, R):
    n = len(X) - 1
    dx = X[:n] - x_ref[:n]
    du = U[:n] - U[1:n + 1]
    return float(np.sum(dx * dx * Q) + np.sum(du * du * R))


def _plan_inputs(x, u):
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = len(x) - 1
    return np.concatenate([x[:n, :N_LEARNED], u[:n], u[1:n + 1]], axis=1)


def info_objective(net, belief, x, u):
    """Sum of one-step information gains along a plan, with the belief frozen."""
    Z = _plan_inputs(x, u)
    return float(np.sum(info_gain_step(net, belief, Z)))


def _sequential_terms(phi, lam_inv):
    """Per-step gains with the covariance contracted along the plan.

    Works on numpy arrays or autodiff Vars for ``phi`` of shape (N, 4, d).
    """
    terms = []
    lam = lam_inv
    for k in range(ad.value(phi).shape[0]):
        p = phi[k]
        lp = ad.sum_(ad.expand_dims(p, -1) * lam, axis=-2)  # (4, d)
        quad = ad.sum_(lp * p, axis=-1)
        terms.append(0.5 * ad.sum_(ad.log1p(quad)))
        outer = ad.expand_dims(lp, -1) * ad.expand_dims(lp, -2)
        lam = lam - outer / ad.expand_dims(ad.expand_dims(1.0 + quad, -1), -1)
    return terms


def info_objective_sequential(net, belief, x, u):
    """Like :func:`info_objective` but the covariance is downdated after each
    step of the plan (means untouched, no targets are observed)."""
    phi = features(net, _plan_inputs(x, u))
    return float(sum(_sequential_terms(phi, belief.lam_inv.copy())))


# ---------------------------------------------------------------------------
# dynamics hooks


class LearnedDynamics:
    """Mean dynamics of the adapted model ``h + theta' phi``."""

    def __init__(self, net, belief, nominal=NOMINAL):
        self.net, self.belief, self.nominal = net, belief, nominal

    def __call__(self, X, U, Un, kappa):
        return model_step_batch(self.net, self.belief.theta, X, U, Un, kappa, self.nominal)


class LinearDynamics:
    """Test hook ``x+ = A x + B u + C u_next`` (curvature ignored).

    :meth:`double_integrator` gives a 6-state chain of three double
    integrators driven by the two inputs, so the plan has the same shape as a
    vehicle plan.
    """

    def __init__(self, A, B, C=None):
        self.A = np.asarray(A, float)
        self.B = np.asarray(B, float)
        self.C = np.zeros_like(self.B) if C is None else np.asarray(C, float)

    @classmethod
    def double_integrator(cls, dt=DT):
        A = np.eye(N_STATE)
        B = np.zeros((N_STATE, N_CONTROL))
        for j in range(3):
            A[2 * j, 2 * j + 1] = dt
        B[1, 0] = dt
        B[3, 1] = dt
        B[5, 0] = 0.5 * dt
        B[5, 1] = 0.5 * dt
        return cls(A, B)

    def __call__(self, X, U, Un, kappa):
        return X @ self.A.T + U @ self.B.T + Un @ self.C.T


def dynamics_jacobians(dyn, X, U, Un, kappa):
    """Per-step Jacobians of ``dyn`` w.r.t. ``x_k``, ``u_k`` and ``u_{k+1}``.

    Rows of the batch are independent, so the batch is replicated once per
    output dimension and copy ``j`` is seeded on output column ``j``: a single
    reverse sweep then yields every row of all N Jacobians.
    """
    n = len(X)
    kap = np.tile(np.broadcast_to(kappa, (n,)), N_STATE)
    Xv = ad.Var(np.tile(X, (N_STATE, 1)))
    Uv = ad.Var(np.tile(U, (N_STATE, 1)))
    Nv = ad.Var(np.tile(Un, (N_STATE, 1)))
    out = dyn(Xv, Uv, Nv, kap)
    F = np.array(ad.value(out)[:n])
    seed = np.repeat(np.eye(N_STATE), n, axis=0)
    gx, gu, gn = ad.grad(out, [Xv, Uv, Nv], seed)
    Jx = np.transpose(gx.reshape(N_STATE, n, N_STATE), (1, 0, 2))
    Ju = np.transpose(gu.reshape(N_STATE, n, N_CONTROL), (1, 0, 2))
    Jn = np.transpose(gn.reshape(N_STATE, n, N_CONTROL), (1, 0, 2))
    return F, Jx, Ju, Jn


def _info_derivs(net, lam_inv, Z, sequential=False):
    """Info objective and its gradient w.r.t. each ``z_k``: ``(value, (N, 8))``."""
    Zv = ad.Var(Z)
    phi = feature_forward(net.params(), net.shift, net.scale, Zv)
    if sequential:
        total = ad.sum_(ad.stack(_sequential_terms(phi, lam_inv)))
    else:
        lp = ad.sum_(ad.expand_dims(phi, -1) * lam_inv, axis=-2)
        total = 0.5 * ad.sum_(ad.log1p(ad.sum_(lp * phi, axis=-1)))
    return float(ad.value(total)), ad.grad(total, [Zv])[0]


# ---------------------------------------------------------------------------
# SQP


class _Layout:
    """Index bookkeeping for the stacked decision vector ``[x_0..x_N, u_0..u_N]``,
    followed by one corridor slack per stage k = 1..N when the corridor is soft."""

    def __init__(self, n, slacks=False):
        self.N = n
        self.nx = N_STATE * (n + 1)
        self.nxu = self.nx + N_CONTROL * (n + 1)
        self.ns = n if slacks else 0
        self.nv = self.nxu + self.ns

    def x(self, k):
        return np.arange(N_STATE * k, N_STATE * (k + 1))

    def u(self, k):
        return self.nx + np.arange(N_CONTROL * k, N_CONTROL * (k + 1))

    def split(self, w):
        return (w[:self.nx].reshape(self.N + 1, N_STATE),
                w[self.nx:self.nxu].reshape(self.N + 1, N_CONTROL))

    def slack(self, w):
        return w[self.nxu:]

    def join(self, X, U, S=None):
        parts = [X.ravel(), U.ravel()]
        if self.ns:
            parts.append(np.zeros(self.ns) if S is None else S)
        return np.concatenate(parts)

    def z(self, k):
        return np.concatenate([self.x(k)[:N_LEARNED], self.u(k), self.u(k + 1)])


def _initial_guess(spec, lay, warm):
    ref = spec.reference
    N = spec.horizon
    if warm is not None:
        X = np.array(warm[0], dtype=float)[:N + 1]
        U = np.array(warm[1], dtype=float)[:N + 1]
    else:
        X = ref.x_ref[:N + 1].copy()
        U = ref.u_ref[:N + 1].copy()
    X[0] = spec.x_init
    if spec.u_fixed is not None:
        U[0] = spec.u_fixed
    U = np.clip(U, spec.u_min, spec.u_max)
    if spec.u_fixed is not None:
        U[0] = spec.u_fixed
    if spec.corridor and not spec.soft_corridor:
        X[1:, E] = np.clip(X[1:, E], ref.e_min[1:N + 1], ref.e_max[1:N + 1])
    X[1:, V] = np.maximum(X[1:, V], 0.5)
    return X, U


def _corridor_excess(spec, X):
    ref = spec.reference
    N = spec.horizon
    return np.maximum(0.0, np.maximum(ref.e_min[1:N + 1] - X[1:, E], X[1:, E] - ref.e_max[1:N + 1]))


class _Problem:
    """Everything the SQP needs to evaluate at a candidate point."""

    def __init__(self, spec, dyn, net, belief):
        self.spec = spec
        self.dyn = dyn
        self.net = net
        self.belief = belief
        N = spec.horizon
        self.lay = _Layout(N, spec.soft_corridor)
        ref = spec.reference
        self.x_ref = ref.x_ref[:N + 1]
        self.kappa = ref.kappa[:N]
        self.alpha = spec.info_weight
        self._build_structure()

    # -- objective

    def cost(self, X, U):
        return tracking_cost(X, U, self.x_ref, self.spec.Q, self.spec.R)

    def info(self, X, U):
        if self.net is None:
            return 0.0
        if self.spec.sequential_info:
            return info_objective_sequential(self.net, self.belief, X, U)
        return info_objective(self.net, self.belief, X, U)

    def slack_cost(self, S):
        """Exact l1 penalty plus a small quadratic term on the corridor slacks."""
        if not self.lay.ns:
            return 0.0
        return float(self.spec.corridor_penalty * np.sum(S) + SLACK_QUAD * np.sum(S * S))

    def objective(self, X, U, S=None):
        val = self.cost(X, U)
        if S is not None:
            val += self.slack_cost(S)
        if self.alpha > 0:
            val -= self.alpha * self.info(X, U)
        return val

    def defects(self, X, U):
        F = self.dyn(X[:-1], U[:-1], U[1:], self.kappa)
        return np.concatenate([(np.asarray(F) - X[1:]).ravel(), self.spec.x_init - X[0]])

    def merit(self, w, mu):
        X, U = self.lay.split(w)
        try:
            c = self.defects(X, U)
            val = self.objective(X, U, self.lay.slack(w)) + mu * float(np.sum(np.abs(c)))
        except (DegenerateSpeed, NonFiniteInput, FloatingPointError):
            return math.inf
        return val if math.isfinite(val) else math.inf

    # -- QP structure

    def _build_structure(self):
        spec, lay = self.spec, self.lay
        N = lay.N
        rows, cols = [], []
        r = 0
        self.dyn_rows = r
        for k in range(N):
            rr = np.arange(r, r + N_STATE)
            for idx, width in ((lay.x(k), N_STATE), (lay.u(k), N_CONTROL), (lay.u(k + 1), N_CONTROL)):
                rows.append(np.repeat(rr, width))
                cols.append(np.tile(idx, N_STATE))
            rows.append(rr)
            cols.append(lay.x(k + 1))
            r += N_STATE
        self.n_dyn = r
        rows.append(np.arange(r, r + N_STATE))
        cols.append(lay.x(0))
        r += N_STATE
        self.n_eq = r
        for k in range(N + 1):
            rows.append(np.arange(r, r + N_CONTROL))
            cols.append(lay.u(k))
            r += N_CONTROL
        self.n_u_rows = N_CONTROL * (N + 1)
        self.e_rows = r
        if spec.soft_corridor:
            # e_k + s_k >= e_min, e_k - s_k <= e_max, s_k >= 0
            e_idx = np.array([lay.x(k)[E] for k in range(1, N + 1)], dtype=int)
            s_idx = lay.nxu + np.arange(N)
            for off in range(2):
                rr = r + off * N + np.arange(N)
                rows.extend([rr, rr])
                cols.extend([e_idx, s_idx])
            rows.append(r + 2 * N + np.arange(N))
            cols.append(s_idx)
            r += 3 * N
        elif spec.corridor:
            for k in range(1, N + 1):
                rows.append(np.array([r]))
                cols.append(np.array([lay.x(k)[E]]))
                r += 1
        self.m = r
        self.A_rows = np.concatenate(rows)
        self.A_cols = np.concatenate(cols)

        # constant Gauss-Newton Hessian of the tracking cost
        Q2, R2 = 2.0 * spec.Q, 2.0 * spec.R
        hr, hc, hv = [], [], []
        for k in range(N):
            ix = lay.x(k)
            hr.append(ix), hc.append(ix), hv.append(Q2)
            a, b = lay.u(k), lay.u(k + 1)
            for i1, i2, s in ((a, a, 1.0), (b, b, 1.0), (a, b, -1.0), (b, a, -1.0)):
                hr.append(i1), hc.append(i2), hv.append(s * R2)
        if lay.ns:
            s_idx = lay.nxu + np.arange(N)
            hr.append(s_idx), hc.append(s_idx), hv.append(np.full(N, 2.0 * SLACK_QUAD))
        self.H_track = sp.csc_matrix((np.concatenate(hv), (np.concatenate(hr), np.concatenate(hc))),
                                     shape=(lay.nv, lay.nv))
        # proximal weights for the Levenberg-Marquardt safeguard
        prox = np.asarray(self.H_track.diagonal()).copy()
        prox[lay.x(N)] = Q2
        floor = np.concatenate([np.tile(Q2, N + 1), np.tile(R2, N + 1), np.ones(lay.ns)])
        self.prox = np.maximum(prox, np.maximum(floor, 1e-6))
        self.z_index = np.stack([lay.z(k) for k in range(N)]) if N else np.zeros((0, 8), int)
        stage = np.stack([np.concatenate([lay.x(k), lay.u(k), lay.u(k + 1)]) for k in range(N)])
        width = stage.shape[1]
        self.stage_rows = np.repeat(stage, width, axis=1).reshape(N, width, width)
        self.stage_cols = np.tile(stage, (1, width)).reshape(N, width, width)

    def stage_gradient(self, S, y_dyn, reps=1):
        """Gradient of ``sum_k y_k' f_k - alpha * info_k`` w.r.t. the stage
        inputs ``S = (x_k, u_k, u_{k+1})`` stacked as (reps * N, 10)."""
        kappa = np.tile(self.kappa, reps)
        if y_dyn is not None:
            y_dyn = np.tile(y_dyn, (reps, 1))
        Xv = ad.Var(S[:, :N_STATE])
        Uv = ad.Var(S[:, N_STATE:N_STATE + N_CONTROL])
        Nv = ad.Var(S[:, N_STATE + N_CONTROL:])
        total = 0.0
        if y_dyn is not None:
            total = ad.sum_(self.dyn(Xv, Uv, Nv, kappa) * y_dyn)
        if self.alpha > 0:
            Z = ad.concatenate([Xv[:, :N_LEARNED], Uv, Nv], axis=1)
            net = self.net
            phi = feature_forward(net.params(), net.shift, net.scale, Z)
            lp = ad.sum_(ad.expand_dims(phi, -1) * self.belief.lam_inv, axis=-2)
            quad = ad.sum_(lp * phi, axis=-1)
            total = total - 0.5 * self.alpha * ad.sum_(ad.log1p(quad))
        if not ad.is_var(total):
            return np.zeros_like(S)
        return np.concatenate(ad.grad(total, [Xv, Uv, Nv]), axis=1)

    def stage_curvature(self, X, U, y_dyn, rel_step=1e-5):
        """Per-stage Hessian of the multiplier-weighted dynamics plus the
        information term, by central differences of reverse-mode gradients,
        with eigenvalues floored at zero."""
        N = self.lay.N
        S = np.concatenate([X[:N], U[:N], U[1:]], axis=1)
        width = S.shape[1]
        # all 2 * width perturbed copies go through one batched tape pass
        h = rel_step * np.maximum(1.0, np.max(np.abs(S), axis=0))
        shifts = np.concatenate([np.diag(h), -np.diag(h)])
        batch = (S[None] + shifts[:, None, :]).reshape(-1, width)
        G = self.stage_gradient(batch, y_dyn, reps=2 * width).reshape(2 * width, N, width)
        B = np.transpose((G[:width] - G[width:]) / (2 * h[:, None, None]), (1, 2, 0))
        B = 0.5 * (B + np.swapaxes(B, 1, 2))
        lam, vec = np.linalg.eigh(B)
        return np.einsum("kij,kj,klj->kil", vec, np.maximum(lam, 0.0), vec)

    def linearize(self, w, y_dyn=None):
        """Objective gradient, Hessian approximation and constraint Jacobian.

        ``y_dyn`` (N, 6) are multiplier estimates for the dynamics rows; with
        them the Hessian includes the (projected) curvature of the dynamics.
        """
        spec, lay = self.spec, self.lay
        N = lay.N
        X, U = lay.split(w)
        F, Jx, Ju, Jn = dynamics_jacobians(self.dyn, X[:-1], U[:-1], U[1:], self.kappa)
        vals = []
        for k in range(N):
            vals.extend([Jx[k].ravel(), Ju[k].ravel(), Jn[k].ravel(), -np.ones(N_STATE)])
        vals.append(np.ones(N_STATE))
        vals.append(np.ones(self.n_u_rows))
        if spec.soft_corridor:
            vals.append(np.concatenate([np.ones(3 * N), -np.ones(N), np.ones(N)]))
        elif spec.corridor:
            vals.append(np.ones(N))
        A = sp.csc_matrix((np.concatenate(vals), (self.A_rows, self.A_cols)),
                          shape=(self.m, lay.nv))

        g = np.zeros(lay.nv)
        dx = X[:N] - self.x_ref[:N]
        g[:lay.nx - N_STATE] = (2.0 * spec.Q * dx).ravel()
        du = U[:N] - U[1:]
        gu = np.zeros_like(U)
        gu[:N] += 2.0 * spec.R * du
        gu[1:] -= 2.0 * spec.R * du
        g[lay.nx:lay.nxu] = gu.ravel()
        if lay.ns:
            g[lay.nxu:] = spec.corridor_penalty + 2.0 * SLACK_QUAD * lay.slack(w)
        if self.alpha > 0:
            Z = np.concatenate([X[:N, :N_LEARNED], U[:N], U[1:]], axis=1)
            _, gz = _info_derivs(self.net, self.belief.lam_inv, Z, self.spec.sequential_info)
            np.add.at(g, self.z_index, -self.alpha * gz)
        H = self.H_track
        if y_dyn is not None or self.alpha > 0:
            blocks = self.stage_curvature(X, U, y_dyn)
            H = H + sp.csc_matrix((blocks.ravel(), (self.stage_rows.ravel(), self.stage_cols.ravel())),
                                  shape=H.shape)

        defect = np.asarray(F) - X[1:]
        return g, H, A, defect, (Jx, Ju, Jn)

    def bounds(self, w, defect):
        spec, lay = self.spec, self.lay
        N = lay.N
        X, U = lay.split(w)
        lo = np.empty(self.m)
        hi = np.empty(self.m)
        lo[:self.n_dyn] = hi[:self.n_dyn] = -defect.ravel()
        lo[self.n_dyn:self.n_eq] = hi[self.n_dyn:self.n_eq] = spec.x_init - X[0]
        ul = np.tile(spec.u_min, (N + 1, 1)) - U
        uh = np.tile(spec.u_max, (N + 1, 1)) - U
        if spec.u_fixed is not None:
            ul[0] = uh[0] = spec.u_fixed - U[0]
        lo[self.n_eq:self.e_rows] = ul.ravel()
        hi[self.n_eq:self.e_rows] = uh.ravel()
        ref = spec.reference
        if spec.soft_corridor:
            S = lay.slack(w)
            r = self.e_rows
            lo[r:r + N] = ref.e_min[1:N + 1] - X[1:, E] - S
            hi[r:r + N] = np.inf
            lo[r + N:r + 2 * N] = -np.inf
            hi[r + N:r + 2 * N] = ref.e_max[1:N + 1] - X[1:, E] + S
            lo[r + 2 * N:] = -S
            hi[r + 2 * N:] = np.inf
        elif spec.corridor:
            lo[self.e_rows:] = ref.e_min[1:N + 1] - X[1:, E]
            hi[self.e_rows:] = ref.e_max[1:N + 1] - X[1:, E]
        return lo, hi

    def equality_violation(self, w):
        X, U = self.lay.split(w)
        return float(np.max(np.abs(self.defects(X, U)))) if len(X) else 0.0

    def bound_violation(self, w):
        X, U = self.lay.split(w)
        spec = self.spec
        v = max(float(np.max(spec.u_min - U[1:], initial=0.0)),
                float(np.max(U[1:] - spec.u_max, initial=0.0)))
        if spec.u_fixed is None:
            v = max(v, float(np.max(spec.u_min - U[0])), float(np.max(U[0] - spec.u_max)))
        if self.lay.ns:
            S = self.lay.slack(w)
            v = max(v, float(np.max(-S, initial=0.0)),
                    float(np.max(_corridor_excess(spec, X) - S, initial=0.0)))
        elif spec.corridor:
            ref = spec.reference
            N = self.lay.N
            v = max(v, float(np.max(ref.e_min[1:N + 1] - X[1:, E], initial=0.0)),
                    float(np.max(X[1:, E] - ref.e_max[1:N + 1], initial=0.0)))
        return max(v, 0.0)


SLACK_QUAD = 1.0
ARMIJO = 1e-4
BACKTRACK = 0.5
MIN_STEP = 1e-10
LM_INIT = 1e-6
LM_MIN = 1e-12
LM_MAX = 1e8


def solve_ocp(net, belief, spec, warm=None, dynamics=None, qp_settings=None,
              diagnostics=None, check_jacobians=False):
    """Line-search SQP for the tracking / information-gathering OCP.

    ``warm`` is an optional ``(X, U)`` initial guess; ``dynamics`` replaces the
    learned model (used with :class:`LinearDynamics` for testing).  With
    ``diagnostics`` set to a path, one CSV row per iteration is written.
    ``check_jacobians`` compares the first linearization against central
    differences and raises ``AssertionError`` on a mismatch.
    """
    dyn = dynamics if dynamics is not None else LearnedDynamics(net, belief)
    if spec.info_weight > 0 and net is None:
        raise ValueError("the information objective needs a feature network")
    prob = _Problem(spec, dyn, net, belief)
    lay = prob.lay
    X, U = _initial_guess(spec, lay, warm)
    w = lay.join(X, U, _corridor_excess(spec, X) if lay.ns else None)
    settings = qp_settings or qp.QpSettings()
    mu = 1.0
    lm = LM_INIT
    rows = []
    status = "MaxIter"
    qp_total = 0
    y = None
    kkt = math.inf
    it = 0
    for it in range(1, spec.max_iter + 1):
        try:
            y_dyn = y[:prob.n_dyn].reshape(-1, N_STATE) if y is not None else None
            g, H, A, defect, jac = prob.linearize(w, y_dyn)
        except (DegenerateSpeed, NonFiniteInput) as exc:
            raise QpFailure(f"linearization failed: {exc}") from exc
        if check_jacobians and it == 1:
            _check_jacobians(dyn, lay.split(w), prob.kappa, jac)
        lo, hi = prob.bounds(w, defect)
        # the proximal term vanishes at a solution and only damps the step
        H = H + sp.diags(lm * prob.prox)
        sub = qp.QpProblem(H, g, A, lo, hi)
        res = qp.solve(sub, settings, y0=y)
        qp_total += res.iterations
        if not (res.solved or (res.status == "MaxIter" and res.prim_res <= 1e-6)):
            status = "QpFailure"
            rows.append((it, prob.merit(w, mu), kkt, 0.0, res.iterations))
            break
        dw, y = res.x, res.y
        stat = float(np.max(np.abs(g + A.T @ y)))
        feas = prob.equality_violation(w)
        kkt = max(stat, feas)
        if kkt <= spec.tol:
            status = "Converged"
            rows.append((it, prob.merit(w, mu), kkt, 0.0, res.iterations))
            break
        y_eq = y[:prob.n_eq]
        y_inf = float(np.max(np.abs(y_eq))) if len(y_eq) else 0.0
        if mu < 1.1 * y_inf:
            mu = 2.0 * y_inf
        m0 = prob.merit(w, mu)
        c_l1 = float(np.sum(np.abs(prob.defects(*lay.split(w)))))
        slope = float(g @ dw) - mu * c_l1
        if slope > 0:
            # the PSD approximation can point uphill when the info term dominates
            slope = -abs(float(dw @ (H @ dw)))
        t = 1.0
        while t >= MIN_STEP:
            m1 = prob.merit(w + t * dw, mu)
            if m1 <= m0 + ARMIJO * t * slope:
                break
            t *= BACKTRACK
        if t < MIN_STEP:
            rows.append((it, m0, kkt, 0.0, res.iterations))
            status = "MaxIter"
            break
        if not m1 <= m0:
            raise AssertionError("accepted step increased the merit function")
        lm = max(lm / 4.0, LM_MIN) if t == 1.0 else min(lm * 4.0, LM_MAX)
        w = w + t * dw
        rows.append((it, m1, kkt, t * float(np.max(np.abs(dw))), res.iterations))

    X, U = lay.split(w)
    if spec.u_fixed is not None:
        U = U.copy()
        U[0] = spec.u_fixed
    sol = OcpSolution(x=X.copy(), u=U.copy(), cost=prob.cost(X, U), info=prob.info(X, U),
                      iterations=it, status=status, y=y, kkt=kkt,
                      defect=prob.equality_violation(w), qp_iterations=qp_total, diagnostics=rows)
    if diagnostics is not None:
        write_diagnostics(diagnostics, rows)
    return sol


def write_diagnostics(path, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["iter", "merit", "kkt", "step_len", "qp_iters"])
        for it, merit, kkt, step, qpi in rows:
            wr.writerow([it, repr(float(merit)), repr(float(kkt)), repr(float(step)), qpi])


def _check_jacobians(dyn, XU, kappa, jac, h=1e-6, rtol=1e-4):
    X, U = XU
    Jx, Ju, _ = jac
    k = len(X) // 2 - 1 if len(X) > 2 else 0
    x, u, un = X[k:k + 1], U[k:k + 1], U[k + 1:k + 2]
    kap = np.atleast_1d(kappa)[k:k + 1]
    for J, base, which in ((Jx[k], x, 0), (Ju[k], u, 1)):
        fd = np.empty_like(J)
        for j in range(base.shape[1]):
            step = h * max(1.0, abs(base[0, j]))
            args_p = [x.copy(), u.copy(), un.copy()]
            args_m = [x.copy(), u.copy(), un.copy()]
            args_p[which][0, j] += step
            args_m[which][0, j] -= step
            fd[:, j] = (np.asarray(dyn(*args_p, kap)) - np.asarray(dyn(*args_m, kap)))[0] / (2 * step)
        scale = np.maximum(np.abs(fd), 1.0)
        if np.max(np.abs(J - fd) / scale) > rtol:
            raise AssertionError("SQP Jacobian disagrees with finite differences")


# ---------------------------------------------------------------------------
# receding horizon


@dataclass
class MpcState:
    belief: PosteriorBelief
    warm: tuple | None = None
    step: int = 0
    online: bool = False
    s: float = 0.0
    u_applied: np.ndarray | None = None
    last: tuple | None = None  # (x, u, u_next, kappa) of the previous step
    statuses: list = field(default_factory=list)


def _arc_rate(x, kappa):
    return x[V] * math.cos(x[BETA] + x[DPHI]) / (1.0 - kappa * x[E])


def _shift(X, U, x_now):
    Xs = np.vstack([X[1:], X[-1:]])
    Us = np.vstack([U[1:], U[-1:]])
    Xs[0] = x_now
    return Xs, Us


MPC_QP_SETTINGS = qp.QpSettings(max_iter=1000)


def mpc_step(state, net, spec, x_measured, reference=None, qp_settings=MPC_QP_SETTINGS):
    """One receding-horizon step.

    ``spec`` is a template: its horizon, weights, bounds and mode are used, its
    reference (or ``reference`` when given) is the full track, windowed at the
    vehicle's progress.  Returns the control ramp for the next interval and
    the updated state (the input state is not modified).
    """
    ref = reference if reference is not None else spec.reference
    x = np.asarray(x_measured, dtype=float)
    st = MpcState(state.belief, state.warm, state.step, state.online, state.s,
                  state.u_applied, state.last, list(state.statuses))
    if st.last is not None:
        xp, up, unp, kp = st.last
        if st.online:
            st.belief = st.belief.copy()
            z = np.concatenate([xp[:N_LEARNED], up, unp])
            update_(net, st.belief, z, x, nominal_step(xp, up, kp))
        st.s += _arc_rate(xp, kp) * DT
    k0 = int(np.searchsorted(ref.s, st.s + 1e-9, side="right")) - 1
    k0 = min(max(k0, 0), ref.n_steps)
    window = ref.window(k0, spec.horizon)
    u_fixed = st.u_applied if st.u_applied is not None else window.u_ref[0]
    u_fixed = np.clip(u_fixed, spec.u_min, spec.u_max)
    sub = replace(spec, x_init=x, reference=window, u_fixed=u_fixed)
    warm = _shift(*st.warm, x) if st.warm is not None else None
    try:
        sol = solve_ocp(net, st.belief, sub, warm=warm, qp_settings=qp_settings)
        status = sol.status
        X, U = sol.x, sol.u
    except QpFailure:
        status = "QpFailure"
        sol = None
    if sol is None or sol.status == "QpFailure":
        if warm is not None:
            X, U = warm
        else:
            X = window.x_ref.copy()
            U = np.tile(u_fixed, (spec.horizon + 1, 1))
        U = U.copy()
        U[0] = u_fixed
    u0, u1 = np.array(U[0]), np.clip(U[1], spec.u_min, spec.u_max)
    st.warm = (X.copy(), U.copy())
    st.u_applied = u1
    st.last = (x.copy(), u0, u1, float(ref.kappa_at(st.s)))
    st.step += 1
    st.statuses.append(status)
    return ControlWithRate.from_plan(u0, u1), st


class MpcController:
    """Adapter so :func:`~driftlab.dynamics.rollout` can drive the MPC."""

    def __init__(self, net, belief, spec, online=False, reference=None):
        self.net = net
        self.spec = spec
        self.reference = reference
        self.state = MpcState(belief.copy(), online=online)

    def __call__(self, k, x):
        uwr, self.state = mpc_step(self.state, self.net, self.spec, x, self.reference)
        return uwr


def info_gathering_round(net, belief, spec_info, plant, seed, gains=None, warm=None):
    """Plan an information-gathering trajectory, drive it on ``plant`` with the
    low-level tracker and adapt the belief on what was observed.

    Returns ``(log, adapted_belief, solution)``; a spin-out still yields the
    partial log.
    """
    from .bayes import adapt_on_log

    sol = solve_ocp(net, belief, spec_info, warm=warm)
    tracker = PlanTracker(sol.x, sol.u, gains, spec_info.u_min, spec_info.u_max)
    log = rollout(plant, tracker, spec_info.reference, spec_info.horizon, seed,
                  x0=spec_info.x_init, meta={"plan_status": sol.status})
    return log, adapt_on_log(net, belief, log), sol


