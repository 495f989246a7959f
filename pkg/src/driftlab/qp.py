"""Operator-splitting solver for convex quadratic programs.

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

ADMM iterations on a Ruiz-equilibrated copy of the problem, with adaptive
step parameter ``rho``, infeasibility certificates and an optional polishing
pass that solves the KKT system on the detected active set.  Equality rows
are encoded as ``l == u``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

INF = 1e30
DENSE_P_LIMIT = 2000


class QpError(ValueError):
    pass


@dataclass
class QpProblem:
    P: object
    q: np.ndarray
    A: object
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        n = len(q)
        P = self.P
        if sp.issparse(P):
            P = sp.csc_matrix(0.5 * (P + P.T))
            if n <= DENSE_P_LIMIT:
                P = P.toarray()
        else:
            P = np.asarray(P, dtype=float).reshape(n, n)
            P = 0.5 * (P + P.T)
            if n > DENSE_P_LIMIT:
                P = sp.csc_matrix(P)
        A = self.A
        if A is None:
            A = sp.csc_matrix((0, n))
        A = sp.csc_matrix(A, dtype=float)
        if A.shape[1] != n:
            raise QpError(f"A has {A.shape[1]} columns, expected {n}")
        m = A.shape[0]
        l = np.asarray(self.l if self.l is not None else np.zeros(0), dtype=float).ravel()
        u = np.asarray(self.u if self.u is not None else np.zeros(0), dtype=float).ravel()
        if len(l) != m or len(u) != m:
            raise QpError("bound vectors must match the number of constraint rows")
        if np.any(l > u):
            raise QpError("need l <= u elementwise")
        self.P, self.q, self.A, self.l, self.u = P, q, A, l, u

    @property
    def n(self):
        return len(self.q)

    @property
    def m(self):
        return self.A.shape[0]

    def P_sparse(self):
        return self.P if sp.issparse(self.P) else sp.csc_matrix(self.P)

    def P_dot(self, x):
        return self.P @ x

    def objective(self, x):
        return 0.5 * float(x @ self.P_dot(x)) + float(self.q @ x)


@dataclass
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_prim_inf: float = 1e-5
    eps_dual_inf: float = 1e-5
    max_iter: int = 4000
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    scaling_iters: int = 15
    polish: bool = True
    polish_refine_iter: int = 5
    polish_interval: int = 25
    check_interval: int = 5


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    prim_res: float
    dual_res: float
    iterations: int
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def solved(self):
        return self.status == "Solved"


def kkt_residuals(problem, x, y):
    """Infinity norms of the bound violation and of the stationarity residual."""
    Ax = problem.A @ x
    prim = float(np.max(np.abs(np.clip(Ax, problem.l, problem.u) - Ax))) if problem.m else 0.0
    dual = float(np.max(np.abs(problem.P_dot(x) + problem.q + problem.A.T @ y))) if problem.n else 0.0
    return prim, dual


def _inf_norm(v):
    return float(np.max(np.abs(v))) if len(v) else 0.0


def _col_inf_norms(M):
    M = sp.csc_matrix(abs(M))
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    return np.asarray(M.max(axis=0).todense()).ravel()


class _Scaling:
    """Ruiz equilibration of the KKT matrix plus a cost scale.

    Works directly on the CSC data arrays; the sparsity pattern is fixed.
    """

    def __init__(self, P, q, A, iters):
        n, m = P.shape[0], A.shape[0]
        Ps = sp.csc_matrix(P, copy=True)
        As = sp.csc_matrix(A, copy=True)
        Ps.sum_duplicates()
        As.sum_duplicates()
        p_col = np.repeat(np.arange(n), np.diff(Ps.indptr))
        p_row = Ps.indices
        a_col = np.repeat(np.arange(n), np.diff(As.indptr))
        a_row = As.indices
        pd, ad_ = Ps.data.astype(float), As.data.astype(float)
        qs = np.asarray(q, dtype=float).copy()
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        for _ in range(iters):
            col = np.zeros(n)
            np.maximum.at(col, p_col, np.abs(pd))
            np.maximum.at(col, a_col, np.abs(ad_))
            row = np.zeros(m)
            np.maximum.at(row, a_row, np.abs(ad_))
            dd = 1.0 / np.sqrt(_limit(col))
            ee = 1.0 / np.sqrt(_limit(row))
            pd = pd * dd[p_row] * dd[p_col]
            ad_ = ad_ * ee[a_row] * dd[a_col]
            qs = dd * qs
            D *= dd
            E *= ee
            pcol = np.zeros(n)
            np.maximum.at(pcol, p_col, np.abs(pd))
            gamma = 1.0 / _limit(max(float(np.mean(pcol)) if n else 1.0, _inf_norm(qs)))
            pd = gamma * pd
            qs = gamma * qs
            c *= gamma
        Ps.data = pd
        As.data = ad_
        self.D, self.E, self.c = D, E, c
        self.P, self.A, self.q = Ps, As, qs


def _limit(v, lo=1e-4, hi=1e4):
    v = np.asarray(v, dtype=float)
    return np.clip(np.where(v < lo, 1.0, v), lo, hi)


def _kkt_factor(P, A, sigma, rho):
    n = P.shape[0]
    K = sp.bmat([[P + sigma * sp.eye(n), A.T], [A, -sp.diags(1.0 / rho)]], format="csc")
    return spla.splu(K)


def _rho_vector(l, u, rho):
    r = np.full(len(l), rho)
    eq = (u - l) < 1e-10
    r[eq] = 1e3 * rho
    free = (l <= -INF) & (u >= INF)
    r[free] = 1e-6
    return r


def _polish(problem, x, y, z, delta=1e-7, refine=5, rounds=20):
    """Solve the equality-constrained KKT system on a guessed active set.

    The first guess comes from the sign of ``y`` and the distance of ``z`` to
    its bounds.  If the result violates a bound or has a multiplier of the
    wrong sign, violated rows are added and wrong-sign rows dropped, for at
    most ``rounds`` rounds.  Returns ``(x, y)`` or None.
    """
    n = problem.n
    l, u = problem.l, problem.u
    eq = np.abs(u - l) < 1e-10
    Pc = problem.P_sparse().tocoo()
    Ac = problem.A.tocoo()
    low = (z - l < -y) & (l > -INF)
    upp = (u - z < y) & (u < INF)
    low &= ~upp
    seen = set()
    for _ in range(rounds):
        low[eq] = False
        upp[eq] = True
        key = (low.tobytes(), upp.tobytes())
        if key in seen:
            return None
        seen.add(key)
        act = np.flatnonzero(low | upp)
        target = np.where(upp[act], u[act], l[act])
        # assemble [[P, A_act^T], [A_act, 0]] from triplets; much cheaper than bmat
        pos = np.full(problem.m, -1)
        pos[act] = np.arange(len(act))
        keep = pos[Ac.row] >= 0
        ar, ac, av = pos[Ac.row[keep]] + n, Ac.col[keep], Ac.data[keep]
        rows = np.concatenate([Pc.row, ar, ac])
        cols = np.concatenate([Pc.col, ac, ar])
        vals = np.concatenate([Pc.data, av, av])
        size = n + len(act)
        K = sp.csc_matrix((vals, (rows, cols)), shape=(size, size))
        dr = np.arange(size)
        reg = np.where(dr < n, delta, -delta)
        rhs = np.concatenate([-problem.q, target])
        try:
            lu = spla.splu(sp.csc_matrix((np.concatenate([vals, reg]),
                                          (np.concatenate([rows, dr]), np.concatenate([cols, dr]))),
                                         shape=(size, size)))
        except RuntimeError:
            return None
        sol = lu.solve(rhs)
        for _ in range(refine):
            sol = sol + lu.solve(rhs - K @ sol)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(problem.m)
        yp[act] = sol[n:]
        zp = problem.A @ xp
        # a lower-active row needs y <= 0, an upper-active row y >= 0
        wrong_low = low & ~eq & (yp > 1e-9)
        wrong_upp = upp & ~eq & (yp < -1e-9)
        tol = 1e-9 * (1.0 + np.abs(zp))
        below = zp < l - tol
        above = zp > u + tol
        if not (wrong_low.any() or wrong_upp.any() or below.any() or above.any()):
            return xp, yp
        low = (low & ~wrong_low) | below
        upp = (upp & ~wrong_upp) | above
    return None


def solve(problem, settings=None, x0=None, y0=None, _retries=2):
    """Solve ``problem``; optional warm start ``x0``/``y0`` (unscaled).

    When polishing fails and the plain iterate misses the absolute tolerance,
    the iteration is continued from the current point with tighter tolerances.
    """
    st = settings or QpSettings()
    n, m = problem.n, problem.m
    l = np.maximum(problem.l, -INF)
    u = np.minimum(problem.u, INF)
    if m == 0:
        return _solve_unconstrained(problem)
    scl = _Scaling(problem.P_sparse(), problem.q, problem.A, st.scaling_iters)
    D, E, c = scl.D, scl.E, scl.c
    P, A, q = scl.P, scl.A, scl.q
    At = A.T.tocsr()
    ls = np.where(l > -INF, E * l, -INF)
    us = np.where(u < INF, E * u, INF)

    x = np.zeros(n) if x0 is None else np.asarray(x0, float) / D
    y = np.zeros(m) if y0 is None else np.asarray(y0, float) * c / E
    z = np.clip(A @ x, ls, us)
    rho = _rho_vector(ls, us, st.rho)
    sigma = st.sigma
    lu = _kkt_factor(P, A, sigma, rho)
    Dinv, Einv = 1.0 / D, 1.0 / E

    def unscaled_residuals(x, y, z):
        xu, yu = D * x, E * y / c
        Ax = Einv * (A @ x)
        zu = Einv * z
        Px = Dinv * (P @ x) / c
        Aty = Dinv * (At @ y) / c
        qu = Dinv * q / c
        rp = _inf_norm(Ax - zu)
        rd = _inf_norm(Px + qu + Aty)
        ep = st.eps_abs + st.eps_rel * max(_inf_norm(Ax), _inf_norm(zu))
        ed = st.eps_abs + st.eps_rel * max(_inf_norm(Px), _inf_norm(Aty), _inf_norm(qu))
        return xu, yu, rp, rd, ep, ed, Ax, Px, Aty, qu

    def early_polish(x, y, z, it):
        # the active set is usually found long before ADMM converges
        xu, yu = D * x, E * y / c
        out = _polish(problem, xu, yu, np.clip(Einv * z, l, u), refine=st.polish_refine_iter)
        if out is None:
            return None
        pr, du = kkt_residuals(problem, *out)
        if pr <= st.eps_abs and du <= st.eps_abs:
            return QpSolution(out[0], out[1], "Solved", pr, du, it, True)
        return None

    if st.polish and (x0 is not None or y0 is not None):
        done = early_polish(x, y, z, 0)
        if done is not None:
            return done

    status = "MaxIter"
    next_polish = st.polish_interval
    best = None
    it = 0
    x_prev, y_prev = x.copy(), y.copy()
    for it in range(1, st.max_iter + 1):
        x_prev, y_prev, z_prev = x, y, z
        rhs = np.concatenate([sigma * x - q, z - y / rho])
        sol = lu.solve(rhs)
        xt, nu = sol[:n], sol[n:]
        zt = z + (nu - y) / rho
        x = st.alpha * xt + (1 - st.alpha) * x_prev
        zr = st.alpha * zt + (1 - st.alpha) * z_prev
        z = np.clip(zr + y / rho, ls, us)
        y = y + rho * (zr - z)

        if it % st.check_interval and it != st.max_iter:
            continue
        xu, yu, rp, rd, ep, ed, Ax, Px, Aty, qu = unscaled_residuals(x, y, z)
        score = max(rp / ep, rd / ed)
        if best is None or score < best[0]:
            best = (score, x.copy(), y.copy(), z.copy())
        if rp <= ep and rd <= ed:
            status = "Solved"
            break
        if st.polish and st.polish_interval and it == next_polish:
            # attempts back off geometrically so hard problems do not pay for them
            next_polish *= 2
            done = early_polish(x, y, z, it)
            if done is not None:
                return done
        dy = y - y_prev
        dx = x - x_prev
        if _primal_infeasible(At, ls, us, dy, E, st.eps_prim_inf):
            status = "PrimalInfeasible"
            break
        if _dual_infeasible(P, q, A, ls, us, dx, D, E, c, st.eps_dual_inf):
            status = "DualInfeasible"
            break
        if st.adaptive_rho_interval and it % st.adaptive_rho_interval == 0:
            rp_s = _inf_norm(A @ x - z) / max(_inf_norm(A @ x), _inf_norm(z), 1e-12)
            rd_s = _inf_norm(P @ x + q + At @ y) / max(_inf_norm(P @ x), _inf_norm(At @ y),
                                                       _inf_norm(q), 1e-12)
            ratio = np.sqrt(max(rp_s, 1e-12) / max(rd_s, 1e-12))
            new = float(np.clip(st.rho * ratio, 1e-6, 1e6))
            if new > st.adaptive_rho_tolerance * st.rho or new < st.rho / st.adaptive_rho_tolerance:
                st = _replace(st, rho=new)
                rho = _rho_vector(ls, us, new)
                lu = _kkt_factor(P, A, sigma, rho)

    if status in ("PrimalInfeasible", "DualInfeasible"):
        xu, yu = D * x, E * y / c
        return QpSolution(xu, yu, status, *kkt_residuals(problem, xu, yu), it)
    if status == "MaxIter" and best is not None:
        _, x, y, z = best
    xu, yu = D * x, E * y / c
    zu = Einv * z
    prim, dual = kkt_residuals(problem, xu, yu)
    polished = False
    if st.polish:
        out = _polish(problem, xu, yu, zu, refine=st.polish_refine_iter)
        if out is not None:
            pr, du = kkt_residuals(problem, *out)
            if max(pr, du) <= max(prim, dual) or (pr <= st.eps_abs and du <= st.eps_abs):
                xu, yu = out
                prim, dual = pr, du
                polished = True
    if status == "MaxIter" and polished and prim <= st.eps_abs and dual <= st.eps_abs:
        status = "Solved"
    if (not polished and _retries > 0 and it < st.max_iter
            and max(prim, dual) > _eps_abs(settings)):
        tight = _replace(st, eps_abs=st.eps_abs * 0.1, eps_rel=st.eps_rel * 0.1,
                         max_iter=st.max_iter - it)
        again = solve(problem, tight, xu, yu, _retries - 1)
        if again.status in ("Solved", "MaxIter") and max(again.prim_res, again.dual_res) < max(prim, dual):
            if status == "Solved" or (again.prim_res <= st.eps_abs and again.dual_res <= st.eps_abs):
                again.status = "Solved"
            again.iterations += it
            return again
    return QpSolution(xu, yu, status, prim, dual, it, polished)


def _eps_abs(settings):
    return (settings or QpSettings()).eps_abs


def _replace(st, **kw):
    d = dict(st.__dict__)
    d.update(kw)
    return QpSettings(**d)


def _primal_infeasible(At, l, u, dy, E, eps):
    ndy = _inf_norm(E * dy)
    if ndy < 1e-12:
        return False
    if _inf_norm(At @ dy) > eps * ndy:
        return False
    pos, neg = np.maximum(dy, 0.0), np.minimum(dy, 0.0)
    if np.any((u >= INF) & (pos > 0)) or np.any((l <= -INF) & (neg < 0)):
        return False
    val = float(np.where(u < INF, u, 0.0) @ pos + np.where(l > -INF, l, 0.0) @ neg)
    return val < -eps * ndy


def _dual_infeasible(P, q, A, l, u, dx, D, E, c, eps):
    ndx = _inf_norm(D * dx)
    if ndx < 1e-12:
        return False
    if _inf_norm((P @ dx) / D) / c > eps * ndx:
        return False
    if float(q @ dx) / c > -eps * ndx:
        return False
    adx = (A @ dx) / E
    tol = eps * ndx
    ok_hi = (u >= INF) | (adx <= tol)
    ok_lo = (l <= -INF) | (adx >= -tol)
    return bool(np.all(ok_hi & ok_lo))


def _solve_unconstrained(problem):
    P = problem.P_sparse()
    n = problem.n
    try:
        lu = spla.splu((P + 1e-12 * sp.eye(n)).tocsc())
        x = lu.solve(-problem.q)
        for _ in range(3):
            x = x + lu.solve(-problem.q - P @ x)
    except RuntimeError:
        x = np.linalg.lstsq(P.toarray(), -problem.q, rcond=None)[0]
    y = np.zeros(0)
    prim, dual = kkt_residuals(problem, x, y)
    if dual > 1e-6 * max(1.0, _inf_norm(problem.q)):
        return QpSolution(x, y, "DualInfeasible", prim, dual, 0)
    return QpSolution(x, y, "Solved", prim, dual, 0, True)


# ---------------------------------------------------------------------------
# text format
#
#   qp 1
#   <n> <m>
#   P <nnz>        followed by nnz lines "i j value"
#   q              followed by n values, one per line
#   A <nnz>        followed by nnz lines "i j value"
#   l              followed by m values
#   u              followed by m values
#
# Values use Python float syntax; infinite bounds are written as inf/-inf.


def dump_problem(problem, path):
    P = sp.coo_matrix(problem.P_sparse())
    A = sp.coo_matrix(problem.A)
    lines = ["qp 1", f"{problem.n} {problem.m}", f"P {P.nnz}"]
    lines += [f"{i} {j} {float(v)!r}" for i, j, v in zip(P.row, P.col, P.data)]
    lines.append("q")
    lines += [repr(float(v)) for v in problem.q]
    lines.append(f"A {A.nnz}")
    lines += [f"{i} {j} {float(v)!r}" for i, j, v in zip(A.row, A.col, A.data)]
    lines.append("l")
    lines += [repr(float(v)) for v in problem.l]
    lines.append("u")
    lines += [repr(float(v)) for v in problem.u]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_problem(path):
    with open(path) as fh:
        toks = [ln.strip() for ln in fh if ln.strip()]
    if not toks or toks[0] != "qp 1":
        raise QpError("not a qp problem file (missing 'qp 1' header)")
    pos = 1
    n, m = (int(t) for t in toks[pos].split())
    pos += 1

    def triplets(tag, shape):
        nonlocal pos
        head, nnz = toks[pos].split()
        if head != tag:
            raise QpError(f"expected section {tag}, found {head}")
        pos += 1
        rows, cols, vals = [], [], []
        for _ in range(int(nnz)):
            i, j, v = toks[pos].split()
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
            pos += 1
        return sp.csc_matrix((vals, (rows, cols)), shape=shape)

    def vector(tag, count):
        nonlocal pos
        if toks[pos] != tag:
            raise QpError(f"expected section {tag}, found {toks[pos]}")
        pos += 1
        out = np.array([float(t) for t in toks[pos:pos + count]])
        pos += count
        return out

    P = triplets("P", (n, n))
    q = vector("q", n)
    A = triplets("A", (m, n))
    l = vector("l", m)
    u = vector("u", m)
    return QpProblem(P, q, A, l, u)
