import math

import numpy as np
import pytest
from scipy.optimize import brentq

from driftlab import ocp
from driftlab.bayes import FeatureNetwork, PosteriorBelief, info_gain_step, total_covariance_norm
from driftlab.dynamics import (NOMINAL, ReferenceTrajectory, make_reference, nominal_step,
                               plant_step, rollout)
from driftlab.ocp import OcpSpec, info_objective, info_objective_sequential, solve_ocp, stage_cost

INF2 = [-np.inf, -np.inf]


def riccati_plan(lin, Q, R, x0, N):
    """Finite-horizon LQ optimum for ``sum |x_k|_Q^2 + |u_k - u_{k+1}|_R^2``.

    The previous control joins the state so the rate penalty becomes an
    ordinary cross-weighted stage cost; ``u_0`` minimizes the cost-to-go.
    """
    A, B, C = lin.A, lin.B, lin.C
    Ab = np.block([[A, B], [np.zeros((2, 8))]])
    Bb = np.vstack([C, np.eye(2)])
    M = np.diag(np.concatenate([Q, R]))
    S = np.vstack([np.zeros((6, 2)), -np.diag(R)])
    P = np.zeros((8, 8))
    gains = []
    for _ in range(N):
        G = np.diag(R) + Bb.T @ P @ Bb
        H = S.T + Bb.T @ P @ Ab
        K = np.linalg.solve(G, H)
        gains.append(K)
        P = M + Ab.T @ P @ Ab - H.T @ K
    gains = gains[::-1]
    u0 = -np.linalg.solve(P[6:, 6:], P[6:, :6] @ x0)
    xi = np.concatenate([x0, u0])
    X, U = [x0], [u0]
    for K in gains:
        v = -K @ xi
        xi = Ab @ xi + Bb @ v
        X.append(xi[:6])
        U.append(v)
    return np.array(X), np.array(U)


def zero_reference(N):
    return ReferenceTrajectory(np.zeros((N + 1, 6)), np.zeros(N + 1), -np.ones(N + 1),
                               np.ones(N + 1), np.arange(N + 1.0), np.zeros((N + 1, 2)))


def solve_linear(N=20, seed=0):
    rng = np.random.default_rng(seed)
    lin = ocp.LinearDynamics.double_integrator()
    Q = rng.uniform(0.1, 5, 6)
    R = rng.uniform(0.1, 5, 2)
    x0 = rng.normal(size=6)
    spec = OcpSpec(N, x0, zero_reference(N), Q=Q, R=R, u_min=INF2, u_max=[np.inf, np.inf],
                   corridor=False, tol=1e-9)
    return spec, lin, solve_ocp(None, None, spec, dynamics=lin)


@pytest.fixture(scope="module")
def net():
    return FeatureNetwork.init(5, shift=[0, 10, 0, 10, 0, 500, 0, 500],
                               scale=[0.3, 4, 0.2, 4, 0.2, 600, 0.2, 600])


def straight_equilibrium(v=10.0):
    """Wheel speed at which drive force balances drag on a straight line."""
    def dv(w):
        return nominal_step([0.0, v, 0.0, w, 0.0, 0.0], [0.0, 0.0])[1] - v
    w = brentq(dv, v, 1.2 * v, xtol=1e-14)
    return np.array([0.0, v, 0.0, w, 0.0, 0.0])


def constant_reference(x, N, u=(0.0, 300.0)):
    xs = np.tile(x, (N + 1, 1))
    return ReferenceTrajectory(xs, np.zeros(N + 1), -2 * np.ones(N + 1), 2 * np.ones(N + 1),
                               x[1] * 0.1 * np.arange(N + 1), np.tile(u, (N + 1, 1)), "straight")


# costs


def test_stage_cost_examples(rng):
    x, u = rng.normal(size=6), rng.normal(size=2)
    assert stage_cost(x, u, u, x, np.ones(6), np.ones(2)) == 0.0
    assert stage_cost(np.eye(6)[0], u, rng.normal(size=2), np.zeros(6), np.ones(6), np.zeros(2)) == 1.0
    Q, R, w, xr = rng.uniform(0, 3, 6), rng.uniform(0, 3, 2), rng.normal(size=2), rng.normal(size=6)
    want = sum(Q[i] * (x[i] - xr[i]) ** 2 for i in range(6)) + sum(R[j] * (u[j] - w[j]) ** 2 for j in range(2))
    assert abs(stage_cost(x, u, w, xr, Q, R) - want) <= 1e-12 * max(1, want)


def test_info_objective_sums_step_gains(net, rng):
    b = PosteriorBelief.default()
    X = np.column_stack([rng.normal(0, .2, 8), 10 + rng.normal(size=8), rng.normal(0, .1, 8),
                         11 + rng.normal(size=8), np.zeros(8), np.zeros(8)])
    U = np.column_stack([rng.normal(0, .2, 8), 500 + 300 * rng.normal(size=8)])
    want = sum(info_gain_step(net, b, np.concatenate([X[k, :4], U[k], U[k + 1]])) for k in range(7))
    assert abs(info_objective(net, b, X, U) - want) <= 1e-12 * want
    one = info_objective(net, b, X[:2], U[:2])
    assert one == pytest.approx(info_gain_step(net, b, np.concatenate([X[0, :4], U[0], U[1]])), rel=1e-15)
    zero = PosteriorBelief.default()
    zero.lam_inv[:] = 0
    assert info_objective(net, zero, X, U) == 0.0


def test_sequential_info_objective(net, rng):
    b = PosteriorBelief.default()
    X = np.column_stack([rng.normal(0, .2, 6), 10 + rng.normal(size=6), rng.normal(0, .1, 6),
                         11 + rng.normal(size=6), np.zeros(6), np.zeros(6)])
    U = np.column_stack([rng.normal(0, .2, 6), 500 + 300 * rng.normal(size=6)])
    assert info_objective_sequential(net, b, X[:2], U[:2]) == pytest.approx(
        info_objective(net, b, X[:2], U[:2]), rel=1e-14)
    assert info_objective_sequential(net, b, X, U) <= info_objective(net, b, X, U)
    Xr, Ur = np.tile(X[0], (6, 1)), np.tile(U[0], (6, 1))
    assert info_objective_sequential(net, b, Xr, Ur) < info_objective(net, b, Xr, Ur)


# SQP


def test_sqp_matches_riccati():
    for seed in range(3):
        spec, lin, sol = solve_linear(seed=seed)
        X, U = riccati_plan(lin, spec.Q, spec.R, spec.x_init, spec.horizon)
        assert sol.converged
        assert np.max(np.abs(sol.x - X)) <= 1e-6 and np.max(np.abs(sol.u - U)) <= 1e-6


def test_equilibrium_is_already_optimal():
    x = straight_equilibrium()
    N = 10
    spec = OcpSpec(N, x, constant_reference(x, N))
    sol = solve_ocp(FeatureNetwork.init(0), PosteriorBelief.default(), spec, check_jacobians=True)
    assert sol.converged and sol.cost <= 1e-6
    assert np.max(np.abs(np.diff(sol.u, axis=0))) <= 1e-4


def test_converged_solution_invariants(net):
    ref = make_reference("circle", {"radius": 15.0, "speed": 9.0, "duration": 3.0})
    x0 = ref.x_ref[0] + np.array([0.05, 0.3, 0.02, 0.3, 0.3, 0.05])
    spec = OcpSpec(15, x0, ref, corridor_penalty=None)
    b = PosteriorBelief.default()
    sol = solve_ocp(net, b, spec, check_jacobians=True)
    assert sol.converged
    assert sol.defect <= 1e-5 and sol.kkt <= 1e-5
    assert np.all(sol.u >= spec.u_min - 1e-6) and np.all(sol.u <= spec.u_max + 1e-6)
    e = sol.x[1:, 4]
    assert np.all(e >= ref.e_min[1:16] - 1e-6) and np.all(e <= ref.e_max[1:16] + 1e-6)
    merits = [row[1] for row in sol.diagnostics]
    assert all(b <= a + 1e-9 * abs(a) for a, b in zip(merits, merits[1:]))


def test_zero_alpha_info_equals_nominal(net):
    ref = make_reference("straight")
    b = PosteriorBelief.default()
    kw = dict(horizon=20, x_init=ref.x_ref[0], reference=ref, max_iter=5)
    a = solve_ocp(net, b, OcpSpec(mode="Nominal", **kw))
    c = solve_ocp(net, b, OcpSpec(mode="Info", alpha=0.0, **kw))
    assert np.array_equal(a.x, c.x) and np.array_equal(a.u, c.u)


def test_zero_uncertainty_info_equals_nominal(net):
    ref = make_reference("straight")
    b = PosteriorBelief.default()
    b.lam_inv[:] = 0.0
    kw = dict(horizon=20, x_init=ref.x_ref[0], reference=ref, max_iter=5)
    a = solve_ocp(net, b, OcpSpec(mode="Nominal", **kw))
    c = solve_ocp(net, b, OcpSpec(mode="Info", alpha=1.0, **kw))
    assert c.info == 0.0
    assert np.max(np.abs(a.x - c.x)) <= 1e-6 and np.max(np.abs(a.u - c.u)) <= 1e-6


def test_spec_validation():
    ref = make_reference("straight")
    with pytest.raises(ValueError):
        OcpSpec(0, ref.x_ref[0], ref)
    with pytest.raises(ValueError):
        OcpSpec(10, ref.x_ref[0], ref, Q=-np.ones(6))
    with pytest.raises(ValueError):
        OcpSpec(10, ref.x_ref[0], ref, u_min=[1, 1], u_max=[0, 0])
    with pytest.raises(ValueError):
        OcpSpec(10, ref.x_ref[0], ref, mode="Greedy")
    with pytest.raises(ValueError):
        OcpSpec(100, ref.x_ref[0], ref)


def test_diagnostics_csv(tmp_path):
    spec, lin, _ = solve_linear(N=5)
    solve_ocp(None, None, spec, dynamics=lin, diagnostics=tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "iter,merit,kkt,step_len,qp_iters"


def test_solution_log_round_trip(tmp_path):
    spec, lin, sol = solve_linear(N=5)
    log = sol.write(tmp_path / "plan.csv")
    assert len(log) == 6 and (tmp_path / "plan.csv.meta").exists()


# receding horizon


def test_mpc_holds_equilibrium():
    x_eq = straight_equilibrium()
    ref = constant_reference(x_eq, 40)
    net = FeatureNetwork.init(0)
    b = PosteriorBelief.default()
    spec = OcpSpec(10, x_eq, ref)
    state = ocp.MpcState(b)
    x = x_eq.copy()
    first = None
    for _ in range(10):
        uwr, state = ocp.mpc_step(state, net, spec, x)
        x = nominal_step(x, uwr.u, 0.0)
        assert np.allclose(uwr.u, ref.u_ref[0], atol=1e-6)
        if first is None:
            first = state.warm[0].copy()
        assert np.max(np.abs(state.warm[0] - first)) <= 1e-5


def test_mpc_step_is_deterministic(demo_model):
    net, prior = demo_model
    ref = make_reference("circle", {"radius": 15.0, "speed": 9.0})
    spec = OcpSpec(15, ref.x_ref[0], ref, max_iter=3)
    s0 = ocp.MpcState(prior, online=True)
    x = ref.x_ref[0] + 0.01
    u1, s1 = ocp.mpc_step(s0, net, spec, x)
    u2, s2 = ocp.mpc_step(s0, net, spec, x)
    assert np.array_equal(u1.u, u2.u) and np.array_equal(u1.u_dot, u2.u_dot)
    assert np.array_equal(s1.warm[0], s2.warm[0])
    assert s0.step == 0 and s1.step == 1


def test_shifted_warm_start_stays_dynamically_feasible(net):
    ref = make_reference("circle", {"radius": 15.0, "speed": 9.0})
    b = PosteriorBelief.default()
    dyn = ocp.LearnedDynamics(net, b)
    spec = OcpSpec(15, ref.x_ref[0], ref, corridor_penalty=None)
    sol = solve_ocp(net, b, spec)
    x_now = dyn(sol.x[:1], sol.u[:1], sol.u[1:2], ref.kappa[:1])[0]  # plant == model
    Xs, Us = ocp._shift(sol.x, sol.u, x_now)
    d = dyn(Xs[:-2], Us[:-2], Us[1:-1], ref.kappa[1:spec.horizon])
    assert np.max(np.abs(np.asarray(d) - Xs[1:-1])) <= 1e-5


def test_circle_tracking_on_matching_plant(demo_model):
    net, prior = demo_model
    ref = make_reference("circle", {"radius": 15.0, "speed": 9.0, "duration": 10.0})
    spec = OcpSpec(15, ref.x_ref[0], ref, max_iter=3)
    b = PosteriorBelief.default(sigma=prior.sigma)
    b.theta[:] = 0.0
    lg = rollout(NOMINAL, ocp.MpcController(net, b, spec), ref, 100, seed=0)
    assert lg.meta["status"] == "Completed"
    assert math.sqrt(np.mean(lg.x[:, 4] ** 2)) < 0.3


# information gathering


def test_info_round_contracts_covariance(demo_model):
    net, prior = demo_model
    ref = make_reference("straight")
    spec = OcpSpec(45, ref.x_ref[0], ref, mode="Info")
    log1, b1, _ = ocp.info_gathering_round(net, prior, spec, NOMINAL, seed=0)
    log2, b2, _ = ocp.info_gathering_round(net, b1, spec, NOMINAL, seed=1)
    assert total_covariance_norm(b1) < total_covariance_norm(prior)
    assert total_covariance_norm(b2) <= total_covariance_norm(b1)
    assert log1.n_transitions >= 1
