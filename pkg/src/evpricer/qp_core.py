"""Convex QP/LP solving and polyhedral utilities used by every other module.

Dual sign convention used throughout the package: for

    min .5 x'Hx + c'x   s.t.   A_eq x = b_eq : y,   A_in x <= b_in : z

the Lagrangian is L = .5 x'Hx + c'x + y'(A_eq x - b_eq) + z'(A_in x - b_in)
with z >= 0, so stationarity reads  Hx + c + A_eq'y + A_in'z = 0  and the
dual objective is  -b_eq'y - b_in'z - .5 x'Hx.

Backends: scipy's HiGHS for pure LPs, Clarabel for QPs.  Both are
post-processed to a crisp active set (relative tolerance ``ACTIVE_TOL``,
ties by lowest constraint index) and polished by re-solving the
equality-constrained KKT system on the detected active set, so that
returned points satisfy the KKT residual contract regardless of backend.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.linalg import null_space
from scipy.optimize import linprog, lsq_linear

import clarabel

ACTIVE_TOL = 1e-7
KKT_TOL = 1e-8
_RADIUS_CAP = 1e12


class InfeasibleProblemError(RuntimeError):
    """The constraint set admits no point."""


class UnboundedProblemError(RuntimeError):
    """The objective decreases without bound over the feasible set."""


class SolverFailureError(RuntimeError):
    """The backend stopped without a certified solution."""


class EmptyPolyhedronError(RuntimeError):
    """A polyhedral operation received an empty set."""


def _as_matrix(a, n, name):
    if a is None:
        return np.zeros((0, n))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return np.zeros((0, n))
    if a.shape[1] != n:
        raise ValueError(f"{name} has {a.shape[1]} columns, expected {n}")
    return a


def _as_vector(b, m, name):
    if b is None:
        return np.zeros(m)
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    if b.shape[0] != m:
        raise ValueError(f"{name} has length {b.shape[0]}, expected {m}")
    return b


@dataclass(frozen=True)
class QpProblem:
    """Convex QP in standard form.  ``hessian=None`` marks a pure LP.

    Fields
    ------
    hessian : (n, n) symmetric positive semidefinite matrix or None
    cost    : (n,) linear cost
    a_eq, b_eq : equality system A_eq x = b_eq
    a_in, b_in : inequality system A_in x <= b_in
    """

    hessian: np.ndarray | None
    cost: np.ndarray
    a_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    a_in: np.ndarray | None = None
    b_in: np.ndarray | None = None

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.cost, dtype=float)).ravel()
        object.__setattr__(self, "cost", c)
        n = c.shape[0]
        h = self.hessian
        if h is not None:
            h = np.asarray(h, dtype=float)
            if h.shape != (n, n):
                raise ValueError(f"hessian shape {h.shape}, expected {(n, n)}")
            scale = np.abs(h).max() if h.size else 0.0
            if scale == 0.0:
                h = None
            else:
                if np.abs(h - h.T).max() > 1e-8 * scale:
                    raise ValueError("hessian is not symmetric")
                h = 0.5 * (h + h.T)
                eigmin = float(np.linalg.eigvalsh(h).min())
                if eigmin < -1e-9 * max(1.0, scale):
                    raise ValueError(f"hessian is not PSD (eigmin={eigmin:g})")
        object.__setattr__(self, "hessian", h)
        a_eq = _as_matrix(self.a_eq, n, "a_eq")
        a_in = _as_matrix(self.a_in, n, "a_in")
        object.__setattr__(self, "a_eq", a_eq)
        object.__setattr__(self, "a_in", a_in)
        object.__setattr__(self, "b_eq", _as_vector(self.b_eq, a_eq.shape[0], "b_eq"))
        object.__setattr__(self, "b_in", _as_vector(self.b_in, a_in.shape[0], "b_in"))

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    @property
    def is_lp(self) -> bool:
        return self.hessian is None


@dataclass(frozen=True)
class PrimalDualPoint:
    """Primal/dual solution with a crisp active set.

    ``active`` holds the sorted indices of inequality rows with slack below
    the active-set tolerance.  ``residuals`` carries the scaled KKT residuals
    (stationarity, eq_feasibility, in_feasibility, complementarity).
    """

    x: np.ndarray
    eq_duals: np.ndarray
    in_duals: np.ndarray
    active: tuple[int, ...]
    objective: float
    residuals: dict = field(default_factory=dict)


def _objective(p: QpProblem, x: np.ndarray) -> float:
    val = float(p.cost @ x)
    if p.hessian is not None:
        val += 0.5 * float(x @ p.hessian @ x)
    return val


def kkt_residuals(p: QpProblem, x, y, z) -> dict:
    """Scaled KKT residuals of a candidate primal/dual point."""
    grad = p.cost.copy()
    if p.hessian is not None:
        grad = grad + p.hessian @ x
    stat = grad + p.a_eq.T @ y + p.a_in.T @ z
    stat_scale = 1.0 + np.abs(grad).max(initial=0.0)
    eq_res = p.a_eq @ x - p.b_eq if p.a_eq.shape[0] else np.zeros(0)
    eq_scale = 1.0 + (np.abs(p.b_eq).max(initial=0.0))
    slack = p.b_in - p.a_in @ x if p.a_in.shape[0] else np.zeros(0)
    in_scale = 1.0 + (np.abs(p.b_in).max(initial=0.0))
    comp = z * slack if slack.size else np.zeros(0)
    comp_scale = 1.0 + np.abs(z).max(initial=0.0) * (1.0 + np.abs(slack).max(initial=0.0))
    return {
        "stationarity": float(np.abs(stat).max(initial=0.0) / stat_scale),
        "eq_feasibility": float(np.abs(eq_res).max(initial=0.0) / eq_scale),
        "in_feasibility": float(max(0.0, -slack.min(initial=0.0)) / in_scale),
        "complementarity": float(np.abs(comp).max(initial=0.0) / comp_scale),
        "dual_sign": float(max(0.0, -z.min(initial=0.0))),
    }


def _active_set(p: QpProblem, x: np.ndarray, active_tol: float) -> np.ndarray:
    if p.a_in.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    slack = p.b_in - p.a_in @ x
    row_norm = np.linalg.norm(p.a_in, axis=1)
    xnorm = max(1.0, float(np.linalg.norm(x, np.inf))) if x.size else 1.0
    tol = active_tol * (1.0 + np.abs(p.b_in) + row_norm * xnorm)
    return slack <= tol


def _kkt_solve(p: QpProblem, act_idx):
    """Equality-constrained KKT solve with the working set as equalities.

    Least squares keeps the result deterministic (minimum norm) when the
    working set is rank deficient.
    """
    n = p.n
    me = p.a_eq.shape[0]
    c_mat = np.vstack([p.a_eq, p.a_in[act_idx]])
    d_vec = np.concatenate([p.b_eq, p.b_in[act_idx]])
    m = c_mat.shape[0]
    h = p.hessian if p.hessian is not None else np.zeros((n, n))
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = h
    kkt[:n, n:] = c_mat.T
    kkt[n:, :n] = c_mat
    rhs = np.concatenate([-p.cost, d_vec])
    sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    x_p = sol[:n]
    y_p = sol[n:n + me]
    z_p = np.zeros(p.a_in.shape[0])
    z_p[act_idx] = sol[n + me:]
    return x_p, y_p, z_p


def _dual_fit(p: QpProblem, x_p, act_idx):
    """Sign-feasible dual recovery on a possibly degenerate working set.

    When active rows are linearly dependent the plain least-squares dual
    split can put one component slightly negative even though a
    nonnegative certificate exists; refitting with sign bounds finds it.
    Returns (y, z_active, scaled stationarity residual).
    """
    grad = p.cost.copy()
    if p.hessian is not None:
        grad = grad + p.hessian @ x_p
    me = p.a_eq.shape[0]
    mat = np.hstack([p.a_eq.T, p.a_in[act_idx].T])
    lo = np.concatenate([np.full(me, -np.inf), np.zeros(len(act_idx))])
    hi = np.full(me + len(act_idx), np.inf)
    fit = lsq_linear(mat, -grad, bounds=(lo, hi), method="bvls")
    resid = np.abs(mat @ fit.x + grad).max(initial=0.0)
    return fit.x[:me], fit.x[me:], resid / (1.0 + np.abs(grad).max(initial=0.0))


def _opposed_pairs(p: QpProblem):
    """Index pairs of inequality rows that are exact negations.

    Fixed variables enter as opposed bound rows; when both are in the
    working set their multipliers are only determined up to a common
    shift, which the least-squares solve splits with one side negative.
    """
    rows = {}
    pairs = []
    for k in range(p.a_in.shape[0]):
        # adding 0.0 rewrites -0.0 entries so negated rows hash alike
        key = ((p.a_in[k] + 0.0).tobytes(), float(p.b_in[k]))
        mate = rows.get(((-p.a_in[k] + 0.0).tobytes(), float(-p.b_in[k])))
        if mate is not None:
            pairs.append((mate, k))
        rows[key] = k
    return pairs


def _polish(p: QpProblem, x, y, z, active, kkt_tol):
    """Active-set refinement of an interior-point iterate.

    Interior-point iterates stall near facets, leaving a tiny slack paired
    with a tiny multiplier that a fixed tolerance cannot classify.
    Starting from the detected active set, re-solve with the working set
    as equalities and repair it: the most violated inactive row enters,
    the active row with the most negative multiplier leaves.  On success
    the point sits exactly on the optimal face; on a cycle or residual
    failure the caller keeps the raw iterate.
    """
    n_in = p.a_in.shape[0]
    row_norm = np.linalg.norm(p.a_in, axis=1) if n_in else np.zeros(0)
    opposed = _opposed_pairs(p)
    work = frozenset(int(k) for k in np.flatnonzero(active))
    seen = set()
    for _ in range(2 * n_in + 10):
        if work in seen:
            return None
        seen.add(work)
        x_p, y_p, z_p = _kkt_solve(p, sorted(work))
        for j, k in opposed:
            # shift the undetermined common component to the sign cone
            if j in work and k in work:
                lift = min(z_p[j], z_p[k])
                if lift < 0.0:
                    z_p[j] -= lift
                    z_p[k] -= lift
        if n_in:
            xnorm = max(1.0, float(np.abs(x_p).max(initial=0.0)))
            slack = p.b_in - p.a_in @ x_p
            feas_tol = 1e-10 * (1.0 + np.abs(p.b_in) + row_norm * xnorm)
            outside = [k for k in range(n_in) if k not in work]
            if outside:
                worst = min(outside, key=lambda k: slack[k] + feas_tol[k])
                if slack[worst] < -feas_tol[worst]:
                    work = work | {worst}
                    continue
            dual_tol = 1e-9 * (1.0 + np.abs(z_p).max(initial=0.0))
            negatives = [k for k in sorted(work) if z_p[k] < -dual_tol]
            if negatives:
                act = sorted(work)
                y_f, z_f, resid = _dual_fit(p, x_p, act)
                if resid <= max(kkt_tol, 1e-9):
                    y_p = y_f
                    z_p = np.zeros(n_in)
                    z_p[act] = z_f
                else:
                    work = work - {min(negatives, key=lambda k: z_p[k])}
                    continue
        z_p = np.maximum(z_p, 0.0)
        res = kkt_residuals(p, x_p, y_p, z_p)
        if max(res["stationarity"], res["eq_feasibility"], res["in_feasibility"],
               res["complementarity"]) > kkt_tol:
            return None
        return x_p, y_p, z_p, res, tuple(sorted(work))
    return None


def _active_set_refine(p: QpProblem, x0, w0, kkt_tol):
    """Primal active-set descent to a certified stationary point.

    The fallback when the one-shot polish cannot classify the face.  From
    a near-feasible iterate, walk facet to facet with ratio-tested steps;
    flat reduced directions become explicit descent rays instead of
    unusable least-squares solves, so every iteration either lowers the
    objective or sharpens the working set.  A sign-feasible dual fit
    certifies the stop.
    """
    n = p.n
    n_in = p.a_in.shape[0]
    h = p.hessian if p.hessian is not None else np.zeros((n, n))
    row_norm = np.linalg.norm(p.a_in, axis=1) if n_in else np.zeros(0)

    work = set(int(k) for k in w0)
    x = np.asarray(x0, dtype=float).copy()
    for _ in range(n_in + 1):
        act = sorted(work)
        c_mat = np.vstack([p.a_eq, p.a_in[act]])
        d_vec = np.concatenate([p.b_eq, p.b_in[act]])
        if c_mat.shape[0]:
            corr, *_ = np.linalg.lstsq(c_mat, d_vec - c_mat @ x, rcond=None)
            x = x + corr
            if np.abs(c_mat @ x - d_vec).max(initial=0.0) > 1e-7 * (
                    1.0 + np.abs(d_vec).max(initial=0.0)):
                raise SolverFailureError("refinement seed face is inconsistent")
        if not n_in:
            break
        slack = p.b_in - p.a_in @ x
        ftol = 1e-9 * (1.0 + np.abs(p.b_in)
                       + row_norm * max(1.0, np.abs(x).max(initial=0.0)))
        violated = [k for k in range(n_in) if slack[k] < -ftol[k] and k not in work]
        if not violated:
            break
        work.add(min(violated, key=lambda k: slack[k]))
    else:
        raise SolverFailureError("could not seat the refinement seed on a face")

    for _ in range(4 * (n + n_in) + 20):
        act = sorted(work)
        grad = p.cost + h @ x
        c_mat = np.vstack([p.a_eq, p.a_in[act]])
        basis = null_space(c_mat) if c_mat.shape[0] else np.eye(n)
        moved = False
        if basis.shape[1]:
            hr = basis.T @ h @ basis
            gr = basis.T @ grad
            u, *_ = np.linalg.lstsq(hr, -gr, rcond=None)
            left = hr @ u + gr
            if np.abs(left).max(initial=0.0) > 1e-10 * (
                    1.0 + np.abs(gr).max(initial=0.0)):
                # leftover gradient lies in the reduced hessian's null
                # space: a zero-curvature descent ray
                d = basis @ -left
                d /= max(np.abs(d).max(initial=0.0), 1e-300)
                full_step = np.inf
            else:
                d = basis @ u
                full_step = 1.0
            if np.abs(d).max(initial=0.0) > 1e-11 * (1.0 + np.abs(x).max(initial=0.0)):
                alpha, block = full_step, None
                for k in range(n_in):
                    if k in work:
                        continue
                    ad = float(p.a_in[k] @ d)
                    if ad <= 1e-12 * (1.0 + row_norm[k]):
                        continue
                    a_k = max(float(p.b_in[k] - p.a_in[k] @ x), 0.0) / ad
                    if a_k < alpha:
                        alpha, block = a_k, k
                if not np.isfinite(alpha):
                    raise UnboundedProblemError("descent ray never meets a facet")
                if alpha > 0.0:
                    x = x + alpha * d
                    moved = True
                if block is not None:
                    work.add(block)
                    moved = True
        if moved:
            continue
        y_f, z_f, resid = _dual_fit(p, x, act)
        if resid <= max(kkt_tol, 1e-9):
            z = np.zeros(n_in)
            z[act] = np.maximum(z_f, 0.0)
            return x, y_f, z, kkt_residuals(p, x, y_f, z), tuple(act)
        # no sign-feasible certificate on this face; drop the lowest
        # indexed negative so the working set cannot cycle
        mat = np.hstack([p.a_eq.T, p.a_in[act].T])
        sol, *_ = np.linalg.lstsq(mat, -grad, rcond=None)
        z_u = sol[p.a_eq.shape[0]:]
        dual_tol = 1e-9 * (1.0 + np.abs(z_u).max(initial=0.0))
        negatives = [k for k, v in zip(act, z_u) if v < -dual_tol]
        if not negatives:
            raise SolverFailureError("stationary point failed dual certification")
        work.discard(negatives[0])
    raise SolverFailureError("active set refinement did not converge")


def _solve_lp(p: QpProblem):
    res = linprog(
        p.cost,
        A_ub=p.a_in if p.a_in.shape[0] else None,
        b_ub=p.b_in if p.a_in.shape[0] else None,
        A_eq=p.a_eq if p.a_eq.shape[0] else None,
        b_eq=p.b_eq if p.a_eq.shape[0] else None,
        bounds=(None, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10,
                 "dual_feasibility_tolerance": 1e-10},
    )
    if res.status == 2:
        raise InfeasibleProblemError("LP infeasible")
    if res.status == 3:
        raise UnboundedProblemError("LP unbounded")
    if res.status != 0:
        raise SolverFailureError(f"LP solver failure: {res.message}")
    x = np.asarray(res.x, dtype=float)
    # HiGHS marginals are dObj/db, our convention flips the sign
    y = -np.asarray(res.eqlin.marginals, dtype=float) if p.a_eq.shape[0] else np.zeros(0)
    z = -np.asarray(res.ineqlin.marginals, dtype=float) if p.a_in.shape[0] else np.zeros(0)
    return x, y, np.maximum(z, 0.0)


def _solve_clarabel(p: QpProblem, ridge: float = 0.0):
    n = p.n
    me, mi = p.a_eq.shape[0], p.a_in.shape[0]
    h = p.hessian if p.hessian is not None else np.zeros((n, n))
    if ridge > 0.0:
        lift = ridge * max(1.0, float(np.abs(p.cost).max(initial=0.0)))
        h = h.copy()
        np.fill_diagonal(h, np.maximum(h.diagonal(), lift))
    a = sparse.csc_matrix(np.vstack([p.a_eq, p.a_in]))
    b = np.concatenate([p.b_eq, p.b_in])
    cones = []
    if me:
        cones.append(clarabel.ZeroConeT(me))
    if mi:
        cones.append(clarabel.NonnegativeConeT(mi))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-11
    settings.tol_gap_rel = 1e-11
    settings.tol_feas = 1e-11
    solver = clarabel.DefaultSolver(sparse.csc_matrix(h), p.cost, a, b, cones, settings)
    out = solver.solve()
    status = str(out.status)
    if "PrimalInfeasible" in status:
        raise InfeasibleProblemError("QP infeasible")
    if "DualInfeasible" in status:
        raise UnboundedProblemError("QP unbounded")
    # a stalled iterate is still a usable polish seed; the residual gate
    # after polishing decides whether the point certifies
    if status not in ("Solved", "AlmostSolved", "InsufficientProgress"):
        raise SolverFailureError(f"QP solver stopped with status {status}")
    x = np.asarray(out.x, dtype=float)
    dual = np.asarray(out.z, dtype=float)
    y = dual[:me]
    z = np.maximum(dual[me:], 0.0)
    return x, y, z


def solve_qp(p: QpProblem, active_tol: float = ACTIVE_TOL,
             kkt_tol: float = KKT_TOL) -> PrimalDualPoint:
    """Solve a convex QP/LP to a certified primal/dual point.

    :param p: problem description (PSD hessian or None for an LP)
    :param active_tol: relative slack tolerance for active-set detection
    :param kkt_tol: scaled KKT residual each returned point must meet
    :return: PrimalDualPoint with crisp active set and residual report
    :raises InfeasibleProblemError, UnboundedProblemError, SolverFailureError
    """
    if p.a_eq.shape[0] == 0 and p.a_in.shape[0] == 0:
        if p.hessian is None:
            if np.abs(p.cost).max(initial=0.0) > 0:
                raise UnboundedProblemError("unconstrained LP with nonzero cost")
            x = np.zeros(p.n)
        else:
            x, *_ = np.linalg.lstsq(p.hessian, -p.cost, rcond=None)
            if np.abs(p.hessian @ x + p.cost).max(initial=0.0) > kkt_tol * (
                    1.0 + np.abs(p.cost).max(initial=0.0)):
                raise UnboundedProblemError("QP unbounded along a null direction")
        res = kkt_residuals(p, x, np.zeros(0), np.zeros(0))
        return PrimalDualPoint(x, np.zeros(0), np.zeros(0), (), _objective(p, x), res)

    if p.is_lp:
        # simplex basis duals are exact; re-solving a tolerance-detected
        # active set could silently move to a neighboring basis
        x, y, z = _solve_lp(p)
        active = tuple(int(i) for i in np.flatnonzero(_active_set(p, x, active_tol)))
        res = kkt_residuals(p, x, y, z)
    else:
        x, y, z = _solve_clarabel(p)
        detected = _active_set(p, x, active_tol)
        polished = _polish(p, x, y, z, detected, kkt_tol)
        if polished is None:
            # flat directions stall the interior point iteration before it
            # identifies the optimal face; a whiff of curvature restores
            # progress, and the polish certifies against the true problem
            x_r, y_r, z_r = _solve_clarabel(p, ridge=1e-7)
            det_r = _active_set(p, x_r, active_tol)
            polished = _polish(p, x_r, y_r, z_r, det_r, kkt_tol)
            if polished is None:
                polished = _active_set_refine(p, x_r, np.flatnonzero(det_r),
                                              kkt_tol)
        x, y, z, res, active = polished
    worst = max(res["stationarity"], res["eq_feasibility"],
                res["in_feasibility"], res["complementarity"])
    if worst > max(kkt_tol, 1e-8):
        raise SolverFailureError(f"KKT residuals above tolerance: {res}")
    return PrimalDualPoint(
        x=x, eq_duals=y, in_duals=z, active=active,
        objective=_objective(p, x), residuals=res)


def _drop_trivial_rows(a: np.ndarray, b: np.ndarray):
    """Split off rows with (numerically) zero normals.

    A zero row with negative offset certifies emptiness; other zero rows are
    vacuous and dropped.
    """
    norms = np.linalg.norm(a, axis=1) if a.shape[0] else np.zeros(0)
    zero = norms <= 1e-12
    if np.any(zero) and np.any(b[zero] < -1e-9):
        raise EmptyPolyhedronError("0'x <= b with b < 0")
    keep = np.flatnonzero(~zero)
    return a[keep], b[keep], keep


def chebyshev_center(a, b):
    """Center and radius of the largest ball inscribed in {x : a x <= b}.

    :return: (center, radius); radius > 0 iff the set is full-dimensional,
        radius 0 for lower-dimensional nonempty sets
    :raises EmptyPolyhedronError: if the set is empty
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    n = a.shape[1]
    a, b, _ = _drop_trivial_rows(a, b)
    if a.shape[0] == 0:
        return np.zeros(n), _RADIUS_CAP
    norms = np.linalg.norm(a, axis=1)
    # variables (x, r): max r  s.t.  a_k x + |a_k| r <= b_k, r <= cap
    a_lp = np.hstack([np.vstack([a, np.zeros((1, n))]),
                      np.concatenate([norms, [1.0]])[:, None]])
    b_lp = np.concatenate([b, [_RADIUS_CAP]])
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    point = solve_qp(QpProblem(None, cost, a_in=a_lp, b_in=b_lp))
    radius = float(point.x[-1])
    if radius < -1e-9:
        raise EmptyPolyhedronError(f"deepest point violates by {-radius:g}")
    return point.x[:n], max(radius, 0.0)


def remove_redundant(a, b, tol: float = 1e-9):
    """Minimal representation of the polyhedron {x : a x <= b}.

    A constraint is kept iff maximizing its left-hand side over the other
    kept constraints exceeds its right-hand side by more than ``tol`` (it
    cuts interior away).  Constraints are examined in descending index
    order, so of duplicated rows the lowest-index copy survives.

    :return: (a_kept, b_kept, kept_indices) with original row scaling
    :raises EmptyPolyhedronError: if the set is empty
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float)).ravel()
    a_nz, b_nz, keep_map = _drop_trivial_rows(a, b)
    chebyshev_center(a_nz, b_nz)  # raises on empty input
    norms = np.linalg.norm(a_nz, axis=1)
    a_n = a_nz / norms[:, None]
    b_n = b_nz / norms
    kept = list(range(a_n.shape[0]))
    for k in reversed(range(a_n.shape[0])):
        others = [j for j in kept if j != k]
        rows = a_n[others]
        offs = b_n[others]
        # bound the LP by the relaxed constraint itself so it cannot be
        # unbounded; the relaxation does not affect the > b_k test
        rows = np.vstack([rows, a_n[k][None, :]])
        offs = np.concatenate([offs, [b_n[k] + 1.0 + abs(b_n[k])]])
        point = solve_qp(QpProblem(None, -a_n[k], a_in=rows, b_in=offs))
        if -point.objective <= b_n[k] + tol:
            kept.remove(k)
    kept_idx = [int(keep_map[j]) for j in kept]
    return a[kept_idx], b[kept_idx], kept_idx
