"""Conservation laws and the Morawetz multiplier identity on trajectories.

The identity pairs the equation with q u_x~ + u~ q_x / 2 for a real
multiplier q(x) and collects interior space-time integrals, an
end-of-time bracket and boundary brackets over the graph's endpoints and
the vertex.  For a trajectory of the homogeneous discrete system every
term is evaluated numerically (exact element quadrature in space,
trapezoid in time, one-sided Hermite derivatives at the bracket points)
and the sum is reported as a residual that must vanish under refinement.

Multipliers are restricted to time-independent polynomials of degree at
most four; q = 1 and q = x are the two specializations the observability
argument uses.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import DiscreteGraphSpace, GraphMatrices, GraphState, shape_values
from .propagate import Trajectory

_GAUSS_X, _GAUSS_W = np.polynomial.legendre.leggauss(5)
_XI = 0.5 * (_GAUSS_X + 1.0)
_WI = 0.5 * _GAUSS_W

TERM_NAMES = (
    "interior_dtq",
    "interior_grad_dxq",
    "interior_hess_dxq",
    "interior_mixed_dx2q",
    "interior_grad_dx3q",
    "interior_mixed_dx4q",
    "time_bracket",
    "boundary_hess_q",
    "boundary_dt_q",
    "boundary_grad_q",
    "boundary_mixed_dxq",
    "boundary_grad_dx2q",
    "boundary_cross_dxq",
    "boundary_shear_grad_q",
    "boundary_mixed_dx3q",
    "boundary_hess_mixed_dx2q",
    "boundary_shear_mixed_dxq",
)


@dataclass(frozen=True)
class MultiplierFunction:
    """Real polynomial multiplier q, expressed in each edge's own coordinate."""

    kind: str
    coeffs: tuple   # ascending powers

    def __post_init__(self):
        if len(self.coeffs) > 5:
            raise ValueError("multiplier degree must be at most 4")

    @classmethod
    def one(cls) -> "MultiplierFunction":
        return cls("constant_one", (1.0,))

    @classmethod
    def coordinate(cls) -> "MultiplierFunction":
        return cls("coordinate_x", (0.0, 1.0))

    @classmethod
    def polynomial(cls, coeffs) -> "MultiplierFunction":
        return cls("polynomial", tuple(float(c) for c in coeffs))

    def derivative_coeffs(self, s: int) -> np.ndarray:
        c = np.asarray(self.coeffs, dtype=float)
        for _ in range(s):
            c = c[1:] * np.arange(1, c.size) if c.size > 1 else np.zeros(0)
        return c

    def eval(self, x, s: int = 0):
        c = self.derivative_coeffs(s)
        x = np.asarray(x, dtype=float)
        if c.size == 0:
            return np.zeros_like(x)
        return sum(ck * x**k for k, ck in enumerate(c))


def quadratic_forms(matrices: GraphMatrices, state) -> tuple:
    """(u*Mu, u*K1u, u*K2u) of one state: mass, H1- and H2-seminorms."""
    u = state.coeffs if isinstance(state, GraphState) else np.asarray(state)
    form = lambda A: float(np.real(np.vdot(u, A @ u)))
    return form(matrices.M), form(matrices.K1), form(matrices.K2)


@dataclass(frozen=True)
class ConservationReport:
    """Relative drift of the three conserved forms along a trajectory."""

    mass: np.ndarray
    energy: np.ndarray
    h2gram: np.ndarray
    drift_mass: float
    drift_energy: float
    drift_h2gram: float
    forced: bool

    def as_dict(self) -> dict:
        return {
            "drift_mass": self.drift_mass,
            "drift_energy": self.drift_energy,
            "drift_h2gram": self.drift_h2gram,
            "forced": self.forced,
        }


def _batched_form(A: sp.spmatrix, U: np.ndarray) -> np.ndarray:
    return np.real(np.einsum("ti,ti->t", np.conj(U), (A @ U.T).T))


def conservation_report(matrices: GraphMatrices, trajectory: Trajectory) -> ConservationReport:
    """Drifts of u*Mu, u*(K1+K2)u and u*Gu over the trajectory.

    Along forced trajectories the forms are those of the full physical
    reconstruction (lifting included) and need not be conserved; the
    report is informational there.
    """
    forced = trajectory.controls is not None
    if forced:
        idx = np.rint(trajectory.times / trajectory.step).astype(int)
        U = trajectory.states @ matrices.space.R.T.toarray()
        U += trajectory.controls.samples[idx] @ matrices.lift_tilde.T
        mass = _batched_form(matrices.M_full, U)
        k1 = _batched_form(matrices.K1_full, U)
        k2 = _batched_form(matrices.K2_full, U)
    else:
        U = trajectory.states
        mass = _batched_form(matrices.M, U)
        k1 = _batched_form(matrices.K1, U)
        k2 = _batched_form(matrices.K2, U)
    energy = k1 + k2
    h2gram = mass + energy
    drift = lambda a: float(np.max(np.abs(a - a[0])) / max(abs(a[0]), 1e-300))
    return ConservationReport(
        mass=mass,
        energy=energy,
        h2gram=h2gram,
        drift_mass=drift(mass),
        drift_energy=drift(energy),
        drift_h2gram=drift(h2gram),
        forced=forced,
    )


@dataclass(frozen=True)
class IdentityReport:
    """Named terms of the multiplier identity and their signed sum."""

    terms: dict
    residual: float
    scale: float

    @property
    def relative(self) -> float:
        return self.residual / self.scale if self.scale > 0 else 0.0

    def to_json(self, **kwargs) -> str:
        payload = dict(self.terms)
        payload["residual"] = self.residual
        payload["scale"] = self.scale
        payload["relative"] = self.relative
        return json.dumps(payload, **kwargs)


def _weighted_matrix(space: DiscreteGraphSpace, q: MultiplierFunction, p: int, r: int, s: int):
    """Full-space matrix T with  u* T u = int (d^p u)(conj d^r u) q^{(s)} dx."""
    n_e = space.elements_per_edge
    rows, cols, vals = [], [], []
    for e in range(space.cfg.n_edges):
        h = space.mesh_size(e)
        off = space.edge_offset(e)
        nodes = space.edge_nodes[e]
        vr = shape_values(h, _XI, r)
        vp = shape_values(h, _XI, p)
        for k in range(n_e):
            xg = nodes[k] + h * _XI
            qv = q.eval(xg, s)
            block = h * (vr * (_WI * qv)) @ vp.T
            idx = off + 2 * k + np.arange(4)
            rows.append(np.repeat(idx, 4))
            cols.append(np.tile(idx, 4))
            vals.append(block.ravel())
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(space.n_full, space.n_full),
    ).tocsr()


def _bracket_points(space: DiscreteGraphSpace):
    """(edge, element, xi_local, x, orientation sign) for every bracket endpoint."""
    n_e = space.elements_per_edge
    pts = []
    pts.append((0, 0, 0.0, space.edge_nodes[0][0], -1.0))
    pts.append((0, n_e - 1, 1.0, 0.0, +1.0))
    for e in range(1, space.cfg.n_edges):
        pts.append((e, 0, 0.0, 0.0, -1.0))
        pts.append((e, n_e - 1, 1.0, space.edge_nodes[e][-1], +1.0))
    return pts


def _endpoint_values(space: DiscreteGraphSpace, U_full: np.ndarray, deriv: int) -> np.ndarray:
    """One-sided endpoint values of a derivative for all states at once.

    For the third derivative (piecewise constant on cubics) the value is
    extrapolated from the two elements nearest the endpoint, which
    restores second-order accuracy; lower derivatives evaluate the
    adjacent element directly.
    """
    pts = _bracket_points(space)
    out = np.empty((U_full.shape[0], len(pts)), dtype=np.complex128)
    n_e = space.elements_per_edge
    for col, (e, k, xi, _x, _sgn) in enumerate(pts):
        h = space.mesh_size(e)
        off = space.edge_offset(e)
        idx = off + 2 * k + np.arange(4)
        row = shape_values(h, np.array([xi]), deriv)[:, 0]
        if deriv == 3 and n_e >= 2:
            inward = k + 1 if k == 0 else k - 1
            idx2 = off + 2 * inward + np.arange(4)
            row2 = shape_values(h, np.array([xi]), 3)[:, 0]
            out[:, col] = 1.5 * (U_full[:, idx] @ row) - 0.5 * (U_full[:, idx2] @ row2)
        else:
            out[:, col] = U_full[:, idx] @ row
    return out


def morawetz_residual(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    trajectory: Trajectory,
    q: MultiplierFunction,
) -> IdentityReport:
    """Evaluate every term of the multiplier identity for a trajectory.

    Requires a homogeneous, unthinned trajectory and a time-independent
    multiplier.  The boundary u du/dt~ bracket is evaluated through the
    equation itself (i du/dt = -u_xx + u_xxxx, the bi-Laplacian vanishing
    on the cubic reconstruction), which avoids time differencing.
    """
    if trajectory.controls is not None:
        raise ValueError("multiplier identity applies to homogeneous trajectories")
    times = trajectory.times
    dt = np.diff(times)
    if not np.allclose(dt, dt[0], rtol=1e-9, atol=0.0):
        raise ValueError("trajectory must be stored on a uniform time grid")
    wt = np.full(times.size, dt[0])
    wt[0] = wt[-1] = 0.5 * dt[0]

    U = trajectory.states @ space.R.T.toarray()  # (n_t, n_full)

    def interior(p, r, s):
        T = _weighted_matrix(space, q, p, r, s)
        vals = np.einsum("ti,ti->t", np.conj(U), (T @ U.T).T)
        return np.sum(wt * vals)

    terms = {}
    terms["interior_dtq"] = 0.0
    terms["interior_grad_dxq"] = -float(np.real(interior(1, 1, 1)))
    terms["interior_hess_dxq"] = -2.0 * float(np.real(interior(2, 2, 1)))
    terms["interior_mixed_dx2q"] = -0.5 * float(np.real(interior(1, 0, 2)))
    terms["interior_grad_dx3q"] = 1.5 * float(np.real(interior(1, 1, 3)))
    terms["interior_mixed_dx4q"] = 0.5 * float(np.real(interior(1, 0, 4)))

    T7 = _weighted_matrix(space, q, 0, 1, 0)
    ends = np.einsum("ti,ti->t", np.conj(U[[0, -1]]), (T7 @ U[[0, -1]].T).T)
    terms["time_bracket"] = -0.5 * float(np.imag(ends[1]) - np.imag(ends[0]))

    pts = _bracket_points(space)
    sgn = np.array([p[4] for p in pts])
    xpt = np.array([p[3] for p in pts])
    qs = [np.asarray(q.eval(xpt, s), dtype=float) for s in range(4)]
    v = [_endpoint_values(space, U, d) for d in range(4)]

    def bracket(series):
        """Time-trapezoid of the orientation-signed sum over bracket points."""
        return float(np.sum(wt * np.sum(series * sgn[None, :], axis=1)))

    terms["boundary_hess_q"] = 0.5 * bracket(np.abs(v[2]) ** 2 * qs[0])
    # Im(u du/dt~) = -Re(u conj(u_xx)) + Re(u conj(u_xxxx)); the last term
    # is identically zero on the piecewise-cubic reconstruction.
    terms["boundary_dt_q"] = 0.5 * bracket(-np.real(v[0] * np.conj(v[2])) * qs[0])
    terms["boundary_grad_q"] = 0.5 * bracket(np.abs(v[1]) ** 2 * qs[0])
    terms["boundary_mixed_dxq"] = 0.5 * bracket(np.real(v[1] * np.conj(v[0])) * qs[1])
    terms["boundary_grad_dx2q"] = -bracket(np.abs(v[1]) ** 2 * qs[2])
    terms["boundary_cross_dxq"] = 1.5 * bracket(np.real(v[2] * np.conj(v[1])) * qs[1])
    terms["boundary_shear_grad_q"] = -bracket(np.real(v[3] * np.conj(v[1])) * qs[0])
    terms["boundary_mixed_dx3q"] = -0.5 * bracket(np.real(v[1] * np.conj(v[0])) * qs[3])
    terms["boundary_hess_mixed_dx2q"] = 0.5 * bracket(np.real(v[2] * np.conj(v[0])) * qs[2])
    terms["boundary_shear_mixed_dxq"] = -0.5 * bracket(np.real(v[3] * np.conj(v[0])) * qs[1])

    total = math.fsum(terms[name] for name in TERM_NAMES)
    scale = max(abs(terms[name]) for name in TERM_NAMES)
    return IdentityReport(terms=terms, residual=abs(total), scale=scale)
