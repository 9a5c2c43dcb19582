"""Control synthesis by the Hilbert Uniqueness Method.

Steering is reduced to steering-from-zero through the defect
d = uT - S(T) u0.  The minimal-energy control is the solution of the
Gramian normal equations; numerically they are solved in least-squares
(CGLS) form on the control variable, using the exact transpose pair
(control-to-state map, trapezoid-weighted observation) and measuring the
steering residual in the G^{-1} dual norm.  In exact arithmetic this is
conjugate gradients on the Gramian in the G-inner product; the
least-squares form stays stable when the discrete Gramian is nearly
singular, which at desk resolutions it always is: the Cayley one-step map
compresses every under-resolved mode's phase toward pi, so the top of the
spectrum is essentially unobservable over any fixed horizon.  Those
directions carry no weight for resolved data; for mesh-scale data the
residual floor reports the honest distance to the reachable set.

The adjoint-state vector vT accumulating alongside the iteration keeps
the control law form h = obs(vT) exact, so the control energy equals the
Gramian quadratic form of the minimizer to round-off.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .fem import DiscreteGraphSpace, GraphMatrices, GraphState
from .observability import GramianOperator
from .propagate import ControlSignal, trapezoid_weights


def _as_vec(state, n) -> np.ndarray:
    v = state.coeffs if isinstance(state, GraphState) else np.asarray(state)
    v = np.asarray(v, dtype=np.complex128)
    if v.shape != (n,):
        raise ValueError(f"state has shape {v.shape}, expected ({n},)")
    return v


def _chol_G(matrices: GraphMatrices) -> np.ndarray:
    """Upper-triangular C with G = C^T C (dense; desk-scale spaces)."""
    return matrices.cached("G_chol", lambda: cholesky(matrices.G.toarray(), lower=False))


@dataclass
class HUMResult:
    """Synthesized controls plus solver and steering diagnostics."""

    controls: ControlSignal
    vT: GraphState
    cg_iterations: int
    cg_residual: float
    steering_error_M: float
    steering_error_dual: float
    control_energy: float
    final_state: GraphState
    residual_history: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "cg_iterations": self.cg_iterations,
            "cg_residual": self.cg_residual,
            "steering_error_M": self.steering_error_M,
            "steering_error_dual": self.steering_error_dual,
            "control_energy": self.control_energy,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.summary(), **kwargs)


def free_final_state(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    u0,
    T: float,
    n_steps: int,
    engine: str = "spectral",
) -> GraphState:
    """S(T) u0: the uncontrolled forward evolution of u0."""
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    return GraphState(op.free_final(_as_vec(u0, space.n_dof)), float(T))


def hum_solve(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    u0,
    uT,
    T: float,
    n_steps: int,
    cg_tol: float = 1e-8,
    max_iter: int = 2000,
    engine: str = "spectral",
) -> HUMResult:
    """Steer u0 to uT over [0, T]; returns controls and steering report.

    ``cg_tol`` bounds the relative gradient of the least-squares
    functional (the Gramian-equation residual); the dual-norm steering
    residual itself decreases monotonically along the iteration.
    """
    n = space.n_dof
    u0 = _as_vec(u0, n)
    uT = _as_vec(uT, n)
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    M = matrices.M
    C = _chol_G(matrices)
    w = trapezoid_weights(T, n_steps)
    sqw = np.sqrt(w)[:, None]

    free_u0 = op.free_final(u0)
    defect = uT - free_u0

    # A htil = C^{-T} M L (htil / sqrt(w)); A^H s = i sqrt(w) obs(C^{-1} s)
    def apply_A(htil):
        y = op.steer_from_zero(htil / sqw)
        return solve_triangular(C, M @ y, trans="T", lower=False)

    def apply_AH(s):
        z = solve_triangular(C, s, trans="N", lower=False)
        obs, _ = op.observation(z)
        return 1j * sqw * obs, 1j * z

    c = solve_triangular(C, M @ defect, trans="T", lower=False)
    htil = np.zeros((n_steps + 1, space.n_controlled), dtype=np.complex128)
    vT = np.zeros(n, dtype=np.complex128)
    s = c.copy()
    g, gz = apply_AH(s)
    gamma = float(np.real(np.vdot(g, g)))
    gamma0 = gamma
    p, pz = g.copy(), gz.copy()
    resid_hist = [float(np.linalg.norm(s))]
    it = 0
    while it < max_iter and gamma > (cg_tol * cg_tol) * gamma0 and gamma0 > 0.0:
        q = apply_A(p)
        qq = float(np.real(np.vdot(q, q)))
        if qq == 0.0:
            break
        alpha = gamma / qq
        htil += alpha * p
        vT += alpha * pz
        s -= alpha * q
        resid_hist.append(float(np.linalg.norm(s)))
        g, gz = apply_AH(s)
        gamma_new = float(np.real(np.vdot(g, g)))
        beta = gamma_new / gamma
        p = g + beta * p
        pz = gz + beta * pz
        gamma = gamma_new
        it += 1

    h = htil / sqw
    controls = ControlSignal(0.0, T, h)
    reached = free_u0 + op.steer_from_zero(h)

    norm_m = lambda v: float(np.sqrt(np.real(np.vdot(v, M @ v))))
    scale = max(norm_m(u0), norm_m(uT))
    err = norm_m(reached - uT)
    steering_m = err / scale if scale > 0 else err

    def dual(v):
        y = solve_triangular(C, M @ v, trans="T", lower=False)
        return float(np.linalg.norm(y))

    dscale = max(dual(u0), dual(uT))
    derr = dual(reached - uT)
    steering_dual = derr / dscale if dscale > 0 else derr

    return HUMResult(
        controls=controls,
        vT=GraphState(vT, float(T)),
        cg_iterations=it,
        cg_residual=float(np.sqrt(gamma / gamma0)) if gamma0 > 0 else 0.0,
        steering_error_M=steering_m,
        steering_error_dual=steering_dual,
        control_energy=controls.energy(),
        final_state=GraphState(reached, float(T)),
        residual_history=np.asarray(resid_hist),
    )


def null_control(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    u0,
    T: float,
    n_steps: int,
    cg_tol: float = 1e-8,
    max_iter: int = 2000,
    engine: str = "spectral",
) -> HUMResult:
    """Drive u0 to the zero state: hum_solve with uT = 0."""
    zero = np.zeros(space.n_dof, dtype=np.complex128)
    return hum_solve(
        space, matrices, u0, zero, T, n_steps,
        cg_tol=cg_tol, max_iter=max_iter, engine=engine,
    )


def dense_least_norm_controls(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    defect: np.ndarray,
    T: float,
    n_steps: int,
    engine: str = "spectral",
    rcond: float = 1e-10,
) -> np.ndarray:
    """Minimal trapezoid-L2-energy least-squares controls, densely.

    Brute-force small-instance oracle: builds the control-to-final-state
    matrix column by column and solves the weighted least-norm problem
    through the pseudoinverse (rank-revealing, so the numerically
    unreachable directions are truncated exactly like the iterative
    solver never excites them).
    """
    m = space.n_controlled
    nh = (n_steps + 1) * m
    if nh > 2000:
        raise ValueError("dense least-norm oracle is meant for tiny instances")
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    C = _chol_G(matrices)
    n = space.n_dof
    w = np.repeat(trapezoid_weights(T, n_steps), m)
    A = np.empty((n, nh), dtype=np.complex128)
    H = np.zeros((n_steps + 1, m), dtype=np.complex128)
    for col in range(nh):
        H.flat[col] = 1.0 / np.sqrt(w[col])
        A[:, col] = solve_triangular(
            C, matrices.M @ op.steer_from_zero(H), trans="T", lower=False
        )
        H.flat[col] = 0.0
    c = solve_triangular(C, matrices.M @ np.asarray(defect), trans="T", lower=False)
    htil, *_ = np.linalg.lstsq(A, c, rcond=rcond)
    return (htil / np.sqrt(w)).reshape(n_steps + 1, m)
