"""Piecewise-affine charging demand map via multiparametric programming.

Station prices enter the traffic QP only through its linear cost, so the
optimal solution is an affine function of the prices wherever the optimal
active set stays fixed.  This module computes that affine map at a price
point (by differentiating the KKT system), describes the polyhedral price
region over which it remains valid, and enumerates all such regions over
a price box by stepping across facets.

The differentiated KKT system is assembled literally in the block layout

    [ Q         O          O    G'            -I ]   [dxi  ]   [-[0;J] ]
    [ O         2 eps_f I  E'   O             A' ]   [df   ]   [ O     ]
    [ O         E          O    O             O  ] * [dpsi ] = [ O     ] * dlam
    [-I         A          O    O             O  ]   [dphi ]   [ O     ]
    [ D(phi) G  O          O    D(G xi - h)   O  ]   [ddelta]  [ O     ]

with the base solution crisped first: slacks of active rows snapped to
exactly zero and multipliers of inactive rows zeroed, so the
complementarity block rows read either "phi_k d(slack_k) = 0" (active) or
"slack_k dphi_k = 0" (inactive) without cross terms.  Strict
complementarity (no row active with zero multiplier) is required; seeds
violating it are reported for the caller to perturb.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .qp_core import (
    EmptyPolyhedronError,
    InfeasibleProblemError,
    QpProblem,
    SolverFailureError,
    chebyshev_center,
    remove_redundant,
    solve_qp,
)
from .traffic_model import CompactQP, TrafficSolution, solve_traffic

EPS_DIM = 1e-8
EPS_STEP_BASE = 1e-6
MEMBER_TOL = 1e-9
DEFAULT_REGION_CAP = 100_000
DEFAULT_AUDIT_SAMPLES = 1000
MAX_SEED_RETRIES = 5
SEED_PERTURBATION = 1e-5


class DegenerateSeedError(RuntimeError):
    """The price point does not admit a clean affine map.

    Raised on weakly active constraints (active with zero multiplier), a
    singular differentiated KKT matrix, or an empty/lower-dimensional
    region.  Callers perturb the point and retry.
    """


class RegionLimitError(RuntimeError):
    """Exploration exceeded the configured region cap."""


class CoverageGapError(RuntimeError):
    """Sampled price points lie in no discovered region."""

    def __init__(self, message, points=()):
        super().__init__(message)
        self.points = tuple(np.asarray(p, dtype=float) for p in points)


@dataclass(frozen=True)
class SensitivitySystem:
    """Differentiated KKT system at a crisped base solution."""

    M0: np.ndarray
    N0: np.ndarray
    J: np.ndarray
    condition: float


@dataclass(frozen=True)
class AffinePolicy:
    """Affine primal/dual solution map around a base price point.

    Every block varies as value(lam) = base + S_block (lam - lam_base);
    the station demand map is demand_at(lam) = demand_matrix @ lam +
    demand_offset.  Partitions loaded from disk carry only the demand map
    (sensitivity blocks None).
    """

    lam_base: np.ndarray
    xi_base: np.ndarray | None
    f_base: np.ndarray | None
    psi_base: np.ndarray | None
    phi_base: np.ndarray | None
    delta_base: np.ndarray | None
    s_xi: np.ndarray | None
    s_f: np.ndarray | None
    s_psi: np.ndarray | None
    s_phi: np.ndarray | None
    s_delta: np.ndarray | None
    demand_matrix: np.ndarray
    demand_offset: np.ndarray
    condition: float

    def _delta_lam(self, lam_c):
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        return lam_c - self.lam_base

    def xi_at(self, lam_c) -> np.ndarray:
        return self.xi_base + self.s_xi @ self._delta_lam(lam_c)

    def f_at(self, lam_c) -> np.ndarray:
        return self.f_base + self.s_f @ self._delta_lam(lam_c)

    def phi_at(self, lam_c) -> np.ndarray:
        return self.phi_base + self.s_phi @ self._delta_lam(lam_c)

    def demand_at(self, lam_c) -> np.ndarray:
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        return self.demand_matrix @ lam_c + self.demand_offset


@dataclass(frozen=True)
class CriticalRegion:
    """Price polyhedron R lam <= r with a fixed affine solution map."""

    region_id: int
    rows: np.ndarray
    rhs: np.ndarray
    fingerprint: tuple
    policy: AffinePolicy
    interior_point: np.ndarray
    radius: float

    def contains(self, lam_c, tol: float = MEMBER_TOL) -> bool:
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        return bool((self.rows @ lam_c - self.rhs).max(initial=-np.inf) <= tol)


@dataclass(frozen=True)
class PiecewiseAffineDemandFunction:
    """Complete station-demand map over a price box."""

    lambda_box: np.ndarray  # (n_stations, 2) columns [lo, hi]
    regions: tuple

    def __post_init__(self):
        object.__setattr__(self, "_by_fingerprint",
                           {reg.fingerprint: reg for reg in self.regions})

    def region_by_fingerprint(self, fingerprint):
        return self._by_fingerprint.get(tuple(fingerprint))

    def in_box(self, lam_c, tol: float = MEMBER_TOL) -> bool:
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        return bool(np.all(lam_c >= self.lambda_box[:, 0] - tol)
                    and np.all(lam_c <= self.lambda_box[:, 1] + tol))

    def locate(self, lam_c):
        """Containing region, lowest id on shared boundaries."""
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        if not self.in_box(lam_c):
            raise ValueError(f"price point {lam_c} outside the price box")
        for reg in self.regions:
            if reg.contains(lam_c):
                return reg
        raise CoverageGapError(f"no region contains {lam_c}", points=[lam_c])


def as_lambda_box(bounds, n_stations: int) -> np.ndarray:
    """Normalize box bounds to an (n_stations, 2) array."""
    box = np.asarray(bounds, dtype=float)
    if box.ndim == 1:
        if box.shape[0] != 2:
            raise ValueError("scalar price box must be a (lo, hi) pair")
        box = np.tile(box, (n_stations, 1))
    if box.shape != (n_stations, 2):
        raise ValueError(f"price box shape {box.shape}, expected ({n_stations}, 2)")
    if np.any(box[:, 0] >= box[:, 1]):
        raise ValueError("price box is empty or degenerate")
    return box


def box_halfspaces(box: np.ndarray):
    n = box.shape[0]
    rows = np.vstack([np.eye(n), -np.eye(n)])
    rhs = np.concatenate([box[:, 1], -box[:, 0]])
    return rows, rhs


def _crisp(cqp: CompactQP, sol: TrafficSolution):
    """Snap the base solution onto its active set and check strictness."""
    n_arcs = cqp.dims[0]
    xi = sol.xi.copy()
    phi = np.zeros_like(sol.phi)
    active = np.zeros(2 * n_arcs, dtype=bool)
    active[list(sol.active)] = True
    for k in np.flatnonzero(active):
        phi[k] = sol.phi[k]
        if k < n_arcs:
            xi[k] = 0.0
        else:
            xi[k - n_arcs] = cqp.h[k]
    phi_scale = 1.0 + np.abs(sol.phi).max(initial=0.0)
    weak = [int(k) for k in np.flatnonzero(active) if phi[k] <= 1e-9 * phi_scale]
    if weak:
        raise DegenerateSeedError(
            f"weakly active flow bounds (zero multiplier) at rows {weak}")
    slack = cqp.h - cqp.G @ xi
    slack_tol = 1e-9 * (1.0 + np.abs(cqp.h)
                        + np.linalg.norm(cqp.G, axis=1) * max(1.0, np.abs(xi).max(initial=0.0)))
    grazing = [int(k) for k in np.flatnonzero(~active) if abs(slack[k]) <= slack_tol[k]]
    if grazing:
        raise DegenerateSeedError(
            f"inactive flow bounds with zero slack at rows {grazing}")
    both = [int(k) for k in range(n_arcs) if active[k] and active[k + n_arcs]]
    if both:
        raise DegenerateSeedError(f"arc pinned by both bounds at rows {both}")
    return xi, phi, active


def sensitivity_system(cqp: CompactQP, xi, phi) -> SensitivitySystem:
    """Assemble and condition-check the differentiated KKT matrix."""
    n_arcs, n_routes, n_pairs = cqp.dims
    n_c = cqp.n_stations
    n_u = 4 * n_arcs + n_routes + n_pairs
    m0 = np.zeros((n_u, n_u))
    xi_sl = slice(0, n_arcs)
    f_sl = slice(n_arcs, n_arcs + n_routes)
    psi_sl = slice(f_sl.stop, f_sl.stop + n_pairs)
    phi_sl = slice(psi_sl.stop, psi_sl.stop + 2 * n_arcs)
    dlt_sl = slice(phi_sl.stop, n_u)

    m0[xi_sl, xi_sl] = cqp.Q
    m0[xi_sl, phi_sl] = cqp.G.T
    m0[xi_sl, dlt_sl] = -np.eye(n_arcs)
    m0[f_sl, f_sl] = 2.0 * cqp.eps_f * np.eye(n_routes)
    m0[f_sl, psi_sl] = cqp.E.T
    m0[f_sl, dlt_sl] = cqp.A.T
    m0[psi_sl, f_sl] = cqp.E
    m0[dlt_sl, xi_sl] = -np.eye(n_arcs)
    m0[dlt_sl, f_sl] = cqp.A
    m0[phi_sl, xi_sl] = np.diag(phi) @ cqp.G
    m0[phi_sl, phi_sl] = np.diag(cqp.G @ xi - cqp.h)

    n0 = np.zeros((n_u, n_c))
    n0[cqp.charge_slice, :] = -cqp.J
    return SensitivitySystem(M0=m0, N0=n0, J=cqp.J, condition=np.nan)


def sensitivity_at(cqp: CompactQP, lam_tilde, sol: TrafficSolution) -> AffinePolicy:
    """Affine solution map of the traffic QP around the price point.

    :param cqp: assembled traffic QP
    :param lam_tilde: station prices at which ``sol`` was solved
    :param sol: primal/dual solution at lam_tilde
    :raises DegenerateSeedError: weak activity or singular system
    """
    lam_tilde = np.atleast_1d(np.asarray(lam_tilde, dtype=float))
    n_arcs, n_routes, n_pairs = cqp.dims
    xi, phi, _ = _crisp(cqp, sol)
    system = sensitivity_system(cqp, xi, phi)

    # row equilibration keeps slack magnitudes from skewing the solve
    stacked = np.hstack([system.M0, system.N0])
    scale = np.abs(stacked).max(axis=1)
    if np.any(scale <= 0.0):
        raise DegenerateSeedError("differentiated KKT system has a zero row")
    m_eq = system.M0 / scale[:, None]
    n_eq = system.N0 / scale[:, None]
    cond = float(np.linalg.cond(m_eq))
    if not np.isfinite(cond) or cond > 1e12:
        raise DegenerateSeedError(f"singular differentiated KKT system (cond {cond:.2e})")
    sens = np.linalg.solve(m_eq, n_eq)

    xi_sl = slice(0, n_arcs)
    f_sl = slice(n_arcs, n_arcs + n_routes)
    psi_sl = slice(f_sl.stop, f_sl.stop + n_pairs)
    phi_sl = slice(psi_sl.stop, psi_sl.stop + 2 * n_arcs)
    dlt_sl = slice(phi_sl.stop, sens.shape[0])
    s_xi = sens[xi_sl]
    s_f = sens[f_sl]

    check_scale = 1.0 + np.abs(s_xi).max(initial=0.0)
    if np.abs(cqp.E @ s_f).max(initial=0.0) > 1e-8 * check_scale:
        raise SolverFailureError("sensitivity violates route aggregation")
    if np.abs(cqp.A @ s_f - s_xi).max(initial=0.0) > 1e-8 * check_scale:
        raise SolverFailureError("sensitivity violates arc linkage")

    d_mat = cqp.J @ s_xi[cqp.charge_slice]
    d_off = cqp.J @ xi[cqp.charge_slice] - d_mat @ lam_tilde
    return AffinePolicy(
        lam_base=lam_tilde, xi_base=xi, f_base=sol.f.copy(), psi_base=sol.psi.copy(),
        phi_base=phi, delta_base=sol.delta.copy(),
        s_xi=s_xi, s_f=s_f, s_psi=sens[psi_sl], s_phi=sens[phi_sl],
        s_delta=sens[dlt_sl], demand_matrix=d_mat, demand_offset=d_off,
        condition=cond)


def build_region(cqp: CompactQP, policy: AffinePolicy, active_set, lambda_box,
                 region_id: int = -1) -> CriticalRegion:
    """Polyhedron in price space on which the policy stays optimal.

    Rows: feasibility of inactive flow bounds under the primal map,
    nonnegativity of active multipliers under the dual map, and the price
    box, with redundant rows removed.

    :raises DegenerateSeedError: region empty or lower-dimensional
    """
    box = as_lambda_box(lambda_box, cqp.n_stations)
    n_rows = cqp.G.shape[0]
    active = np.zeros(n_rows, dtype=bool)
    active[list(active_set)] = True
    inactive_idx = np.flatnonzero(~active)
    active_idx = np.flatnonzero(active)

    lam0 = policy.lam_base
    # G_k xi(lam) <= h_k for rows currently inactive
    g_in = cqp.G[inactive_idx]
    rows_feas = g_in @ policy.s_xi
    rhs_feas = cqp.h[inactive_idx] - g_in @ policy.xi_base + rows_feas @ lam0
    # phi_k(lam) >= 0 for rows currently active
    rows_opt = -policy.s_phi[active_idx]
    rhs_opt = policy.phi_base[active_idx] + rows_opt @ lam0
    box_rows, box_rhs = box_halfspaces(box)

    rows = np.vstack([rows_feas, rows_opt, box_rows])
    rhs = np.concatenate([rhs_feas, rhs_opt, box_rhs])
    try:
        rows_min, rhs_min, _ = remove_redundant(rows, rhs)
        center, radius = chebyshev_center(rows_min, rhs_min)
    except EmptyPolyhedronError as exc:
        raise DegenerateSeedError(f"empty region: {exc}") from exc
    if radius <= EPS_DIM:
        raise DegenerateSeedError(f"lower-dimensional region (radius {radius:.2e})")
    return CriticalRegion(
        region_id=region_id, rows=rows_min, rhs=rhs_min,
        fingerprint=tuple(int(k) for k in sorted(active_set)),
        policy=policy, interior_point=center, radius=radius)


def region_at(cqp: CompactQP, lam_c, lambda_box,
              max_retries: int = MAX_SEED_RETRIES) -> CriticalRegion:
    """Derive the critical region containing a price point.

    Degenerate points are retried from deterministic pseudo-random
    perturbations of norm ~1e-5 around the original point.
    """
    lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
    point = lam_c
    last = None
    for attempt in range(max_retries + 1):
        try:
            sol = solve_traffic(cqp, point)
            policy = sensitivity_at(cqp, point, sol)
            return build_region(cqp, policy, sol.active, lambda_box)
        except DegenerateSeedError as exc:
            last = exc
            rng = np.random.default_rng(715 + attempt)
            step = rng.standard_normal(lam_c.shape[0])
            point = lam_c + SEED_PERTURBATION * step / np.linalg.norm(step)
    raise DegenerateSeedError(
        f"point {lam_c} still degenerate after {max_retries} perturbed retries: {last}")


def _facet_point(rows, rhs, k):
    """Chebyshev center of facet k: deepest point of the facet within the
    other constraints, measured inside the facet's hyperplane."""
    normal = rows[k] / np.linalg.norm(rows[k])
    proj = np.sqrt(np.maximum(
        np.linalg.norm(rows, axis=1) ** 2 - (rows @ normal) ** 2, 0.0))
    others = [j for j in range(rows.shape[0]) if j != k]
    # variables (lam, radius): maximize radius subject to the facet plane
    n = rows.shape[1]
    a_in = np.hstack([rows[others], proj[others][:, None]])
    a_in = np.vstack([a_in, np.concatenate([np.zeros(n), [1.0]])])
    b_in = np.concatenate([rhs[others], [1.0]])  # cap keeps the LP bounded
    a_eq = np.concatenate([rows[k], [0.0]])[None, :]
    b_eq = np.array([rhs[k]])
    cost = np.zeros(n + 1)
    cost[-1] = -1.0
    try:
        point = solve_qp(QpProblem(None, cost, a_eq=a_eq, b_eq=b_eq,
                                   a_in=a_in, b_in=b_in))
    except InfeasibleProblemError:
        return None
    if point.x[-1] < -1e-9:
        return None
    return point.x[:-1], normal


def explore(cqp: CompactQP, lambda_box, lam_seed,
            region_cap: int = DEFAULT_REGION_CAP,
            audit_samples: int = DEFAULT_AUDIT_SAMPLES) -> PiecewiseAffineDemandFunction:
    """Enumerate all critical regions over the price box.

    Breadth-first over facets: each discovered region contributes one
    candidate point per facet (the facet's deepest point stepped slightly
    along the outward normal); candidates inside the box and outside every
    known region seed new regions, deduplicated by active-set fingerprint.
    Runs single-threaded so discovery order, hence region ids, are
    reproducible.  Finishes with a uniform-sample coverage audit.

    :raises RegionLimitError: more than region_cap regions discovered
    :raises CoverageGapError: audit found uncovered price points
    """
    box = as_lambda_box(lambda_box, cqp.n_stations)
    lam_seed = np.atleast_1d(np.asarray(lam_seed, dtype=float))
    if not np.all((lam_seed >= box[:, 0]) & (lam_seed <= box[:, 1])):
        raise ValueError("seed point outside the price box")

    regions: dict = {}
    order = []

    def store(region: CriticalRegion):
        if region.fingerprint in regions:
            return regions[region.fingerprint]
        if len(order) >= region_cap:
            raise RegionLimitError(f"more than {region_cap} regions")
        numbered = replace(region, region_id=len(order))
        regions[region.fingerprint] = numbered
        order.append(numbered)
        return numbered

    queue = deque([store(region_at(cqp, lam_seed, box))])
    while queue:
        region = queue.popleft()
        for k in range(region.rows.shape[0]):
            facet = _facet_point(region.rows, region.rhs, k)
            if facet is None:
                continue
            point, normal = facet
            step = EPS_STEP_BASE * (1.0 + np.linalg.norm(point))
            candidate = point + step * normal
            if not np.all((candidate >= box[:, 0]) & (candidate <= box[:, 1])):
                continue
            if any(reg.contains(candidate) for reg in order):
                continue
            try:
                neighbor = region_at(cqp, candidate, box)
            except DegenerateSeedError:
                continue
            if neighbor.fingerprint not in regions:
                queue.append(store(neighbor))

    pi = PiecewiseAffineDemandFunction(lambda_box=box, regions=tuple(order))
    audit_coverage(pi, samples=audit_samples)
    return pi


def audit_coverage(pi: PiecewiseAffineDemandFunction, samples: int = DEFAULT_AUDIT_SAMPLES,
                   seed: int = 0) -> int:
    """Uniformly sample the box and require every point to be covered.

    Returns the sample count; raises CoverageGapError listing (up to 10)
    uncovered points otherwise.
    """
    rng = np.random.default_rng(seed)
    box = pi.lambda_box
    pts = rng.uniform(box[:, 0], box[:, 1], size=(samples, box.shape[0]))
    missing = []
    for p in pts:
        if not any(reg.contains(p) for reg in pi.regions):
            missing.append(p)
            if len(missing) >= 10:
                break
    if missing:
        raise CoverageGapError(
            f"{len(missing)}+ of {samples} sampled price points uncovered "
            f"(first: {missing[0]})", points=missing)
    return samples


def evaluate(pi: PiecewiseAffineDemandFunction, lam_c):
    """Station demand at a price point and the id of the region used."""
    region = pi.locate(lam_c)
    return region.policy.demand_at(lam_c), region.region_id


def continuity_report(pi: PiecewiseAffineDemandFunction) -> list:
    """Demand mismatch of adjacent policies at facet midpoints.

    For every region facet, evaluates both the region's own policy and the
    policy of any other region containing the facet's deepest point;
    returns (region_id, other_id, point, max demand difference) tuples.
    """
    out = []
    for region in pi.regions:
        for k in range(region.rows.shape[0]):
            facet = _facet_point(region.rows, region.rhs, k)
            if facet is None:
                continue
            point, _ = facet
            if not pi.in_box(point, tol=1e-7):
                continue
            own = region.policy.demand_at(point)
            for other in pi.regions:
                if other.region_id == region.region_id:
                    continue
                if other.contains(point, tol=1e-7):
                    diff = float(np.abs(other.policy.demand_at(point) - own).max(initial=0.0))
                    out.append((region.region_id, other.region_id, point, diff))
    return out


PARTITION_SCHEMA_VERSION = 1


def save_partition(pi: PiecewiseAffineDemandFunction, path) -> None:
    """Write the partition to JSON (demand maps only, round-trippable)."""
    payload = {
        "schema_version": PARTITION_SCHEMA_VERSION,
        "lambda_box": pi.lambda_box.tolist(),
        "regions": [{
            "id": reg.region_id,
            "rows": reg.rows.tolist(),
            "rhs": reg.rhs.tolist(),
            "fingerprint": list(reg.fingerprint),
            "base_point": reg.policy.lam_base.tolist(),
            "demand_matrix": reg.policy.demand_matrix.tolist(),
            "demand_offset": reg.policy.demand_offset.tolist(),
            "interior_point": reg.interior_point.tolist(),
            "radius": reg.radius,
        } for reg in pi.regions],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_partition(path) -> PiecewiseAffineDemandFunction:
    """Read a partition written by save_partition.

    Loaded policies carry the demand map and base point only; the full
    sensitivity blocks are not serialized.
    """
    with open(path) as fh:
        data = json.load(fh)
    if data.get("schema_version") != PARTITION_SCHEMA_VERSION:
        raise ValueError(f"unsupported partition schema version "
                         f"{data.get('schema_version')!r}")
    regions = []
    for rec in data["regions"]:
        policy = AffinePolicy(
            lam_base=np.array(rec["base_point"], dtype=float),
            xi_base=None, f_base=None, psi_base=None, phi_base=None,
            delta_base=None, s_xi=None, s_f=None, s_psi=None, s_phi=None,
            s_delta=None,
            demand_matrix=np.array(rec["demand_matrix"], dtype=float),
            demand_offset=np.array(rec["demand_offset"], dtype=float),
            condition=np.nan)
        regions.append(CriticalRegion(
            region_id=int(rec["id"]), rows=np.array(rec["rows"], dtype=float),
            rhs=np.array(rec["rhs"], dtype=float),
            fingerprint=tuple(int(k) for k in rec["fingerprint"]),
            policy=policy,
            interior_point=np.array(rec["interior_point"], dtype=float),
            radius=float(rec["radius"])))
    return PiecewiseAffineDemandFunction(
        lambda_box=np.array(data["lambda_box"], dtype=float),
        regions=tuple(regions))
