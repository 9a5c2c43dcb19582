"""Boundary observation of adjoint trajectories and the HUM Gramian.

The observation of an adjoint trajectory is the discrete realization of
the tip second derivative d^2/dx^2 v_j(l_j, t): it is defined as the exact
transpose of the control-to-state map under the trapezoid pairing, so the
duality identity

    i v(T)* M u(T) - i v(0)* M u(0) = sum_j int h_j(t) conj(obs_j(t)) dt

holds to solver round-off for every control/final-data pair, not merely
up to discretization error.  The Gramian quadratic form built from it is
Hermitian positive semidefinite by construction, and its smallest
eigenvalue relative to the H^2_0 Gram matrix G is the discrete
observability constant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .fem import DiscreteGraphSpace, GraphMatrices, GraphState
from .graph import StarGraphConfig, length_constants, t_min, t_min_optimal
from .propagate import (
    ControlSignal,
    Trajectory,
    nodal_from_midpoints,
    solve_adjoint,
    solve_forward,
    spectral,
    trapezoid_weights,
)


@dataclass
class ObservationTrace:
    """Per-edge samples of the observed tip second derivative over time."""

    T: float
    samples: np.ndarray   # (n_steps+1, N-1)

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.T / self.n_steps * np.arange(self.n_steps + 1)

    def edge_samples(self, j: int) -> np.ndarray:
        return self.samples[:, j - 2]


def observe(
    space: DiscreteGraphSpace, matrices: GraphMatrices, trajectory: Trajectory
) -> ObservationTrace:
    """Observation trace of a homogeneous (adjoint) trajectory.

    The trajectory must be stored unthinned; the midpoint averages of
    consecutive states enter the transpose-consistent formula.
    """
    if trajectory.controls is not None:
        raise ValueError("observation is defined for homogeneous trajectories")
    dt = np.diff(trajectory.times)
    if not np.allclose(dt, trajectory.step, rtol=1e-9, atol=0.0):
        raise ValueError("trajectory must be stored at every time node")
    mids = 0.5 * (trajectory.states[:-1] + trajectory.states[1:])
    obs = nodal_from_midpoints(mids @ matrices.ntilde)
    return ObservationTrace(T=float(trajectory.times[-1]), samples=obs)


class GramianOperator:
    """Matrix-free HUM Gramian on one (space, matrices, T, n_steps) grid.

    ``apply_b(v)`` realizes the Hermitian positive-semidefinite matrix of
    the quadratic form Q(v, w) = sum_j int obs_j(v) conj(obs_j(w)) dt:
    one adjoint solve, one observation, one controlled forward solve and
    the i M pairing.  ``engine`` selects the diagonalized fast path or the
    sparse-LU stepping path; both realize the same one-step map.
    """

    def __init__(
        self,
        space: DiscreteGraphSpace,
        matrices: GraphMatrices,
        T: float,
        n_steps: int,
        engine: str = "spectral",
    ):
        if engine not in ("spectral", "lu"):
            raise ValueError("engine must be 'spectral' or 'lu'")
        self.space = space
        self.matrices = matrices
        self.T = float(T)
        self.n_steps = int(n_steps)
        self.tau = self.T / self.n_steps
        self.engine = engine
        self.weights = trapezoid_weights(self.T, self.n_steps)
        self._eng = spectral(matrices) if engine == "spectral" else None

    def observation(self, vT: np.ndarray):
        """(obs, v0) of the adjoint trajectory from final data vT."""
        if self._eng is not None:
            return self._eng.adjoint_observation(vT, self.tau, self.n_steps)
        traj = solve_adjoint(
            self.space, self.matrices, GraphState(vT), self.T, self.n_steps
        )
        mids = 0.5 * (traj.states[:-1] + traj.states[1:])
        obs = nodal_from_midpoints(mids @ self.matrices.ntilde)
        return obs, traj.states[0].copy()

    def steer_from_zero(self, H: np.ndarray) -> np.ndarray:
        """Final state of the controlled forward solve started at zero."""
        if self._eng is not None:
            return self._eng.forward_from_zero_final(H, self.tau, self.n_steps)
        controls = ControlSignal(0.0, self.T, H)
        traj = solve_forward(
            self.space,
            self.matrices,
            GraphState(np.zeros(self.space.n_dof, dtype=np.complex128)),
            controls,
            self.T,
            self.n_steps,
            store_every=self.n_steps,
        )
        return traj.states[-1].copy()

    def free_final(self, u0: np.ndarray) -> np.ndarray:
        if self._eng is not None:
            return self._eng.propagate_final(u0, self.tau, self.n_steps)
        traj = solve_forward(
            self.space, self.matrices, GraphState(u0), None, self.T, self.n_steps,
            store_every=self.n_steps,
        )
        return traj.states[-1].copy()

    def apply(self, vT: np.ndarray) -> np.ndarray:
        obs, _ = self.observation(vT)
        return self.steer_from_zero(obs)

    def apply_b(self, vT: np.ndarray) -> np.ndarray:
        return 1j * (self.matrices.M @ self.apply(vT))

    def quadratic(self, vT: np.ndarray, wT: np.ndarray) -> complex:
        ov, _ = self.observation(vT)
        ow, _ = self.observation(wT)
        return complex(np.sum(self.weights[:, None] * ov * np.conj(ow)))

    def rayleigh(self, vT: np.ndarray) -> float:
        """Q(v, v) / v*Gv evaluated as a cancellation-free positive sum."""
        obs, _ = self.observation(vT)
        num = float(np.sum(self.weights[:, None] * np.abs(obs) ** 2))
        den = float(np.real(np.vdot(vT, self.matrices.G @ vT)))
        return num / den


def gramian_quadratic(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    vT,
    wT,
    T: float,
    n_steps: int,
    engine: str = "spectral",
) -> complex:
    """Q(v, w) = sum_j int_0^T obs_j(v) conj(obs_j(w)) dt (trapezoid)."""
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    vT = vT.coeffs if isinstance(vT, GraphState) else np.asarray(vT)
    wT = wT.coeffs if isinstance(wT, GraphState) else np.asarray(wT)
    return op.quadratic(vT, wT)


def gramian_matrix(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    T: float,
    n_steps: int,
    engine: str = "spectral",
) -> np.ndarray:
    """Dense Gramian matrix, cross-check oracle for small spaces."""
    n = space.n_dof
    if n > 200:
        raise ValueError("dense Gramian assembly is reserved for n_dof <= 200")
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    cols = np.empty((n, n), dtype=np.complex128)
    eye = np.eye(n)
    for k in range(n):
        cols[:, k] = op.apply_b(eye[:, k].astype(np.complex128))
    return 0.5 * (cols + cols.conj().T)


@dataclass
class GramianDiagnostics:
    """Extremal Gramian eigenvalues vs G together with the proof constant."""

    lambda_min: float
    lambda_max: float
    c_theory: float
    iterations: int
    T: float
    T_min: float
    epsilon: float
    minimizer: Optional[np.ndarray] = None
    maximizer: Optional[np.ndarray] = None

    @property
    def one_over_c_theory(self) -> float:
        return 1.0 / self.c_theory if self.c_theory > 0 else math.inf

    def flag_weak_observability(self) -> bool:
        """True when the discrete constant sits below half the proof bound."""
        return math.isfinite(self.c_theory) and self.lambda_min < 0.5 / self.c_theory

    def to_json(self, **kwargs) -> str:
        return json.dumps(
            {
                "lambda_min": self.lambda_min,
                "lambda_max": self.lambda_max,
                "c_theory": self.c_theory,
                "one_over_c_theory": self.one_over_c_theory,
                "iterations": self.iterations,
                "T": self.T,
                "T_min": self.T_min,
                "epsilon": self.epsilon,
            },
            **kwargs,
        )


def c_theory(cfg: StarGraphConfig, epsilon: float, T: float) -> float:
    """Observability constant produced by the multiplier proof.

    C = L (L^2/pi^2 + 1) / (2 Lbar K) with
    K = (1/Lbar - eps) T - (L^2/pi^2 + 1) / (eps T); requires K > 0,
    which holds exactly when T exceeds the eps-dependent threshold.
    """
    L, lbar = length_constants(cfg)
    if not 0.0 < epsilon < 1.0 / lbar:
        raise ValueError(f"epsilon = {epsilon} outside (0, {1.0 / lbar})")
    p = L**2 / math.pi**2 + 1.0
    K = (1.0 / lbar - epsilon) * T - p / (epsilon * T)
    if K <= 0.0:
        raise ValueError(
            f"K = {K} <= 0: horizon T = {T} is below the eps-dependent threshold"
        )
    return L * p / (2.0 * lbar * K)


def _gsolve(matrices: GraphMatrices):
    lu = matrices.cached("G_lu", lambda: spla.splu(matrices.G.tocsc()))
    return lambda X: lu.solve(X.real) + 1j * lu.solve(X.imag)


def _orthonormalize_g(S: np.ndarray, G) -> np.ndarray:
    """G-orthonormal basis of the columns of S (rank-revealing MGS)."""
    cols = []
    for k in range(S.shape[1]):
        v = S[:, k].copy()
        nrm0 = np.sqrt(np.real(np.vdot(v, G @ v)))
        for u in cols:
            v -= np.vdot(u, G @ v) * u
        nrm = np.sqrt(np.real(np.vdot(v, G @ v)))
        if nrm > 1e-10 * max(nrm0, 1.0):
            cols.append(v / nrm)
    return np.column_stack(cols)


def _lobpcg_extremal(op: GramianOperator, matrices, seed, largest, tol, maxiter, block):
    """Locally optimal block iteration on the pencil (Gramian, G).

    Inverse-free: only Gramian applications and G solves.  Convergence is
    declared when the targeted Ritz value stagnates relative to the
    spectral scale; the near-kernel of the discrete Gramian makes
    eigen-residuals meaningless down there, so the returned value is the
    cancellation-free Rayleigh quotient of the best direction found.
    """
    n = op.space.n_dof
    G = matrices.G
    gsolve = _gsolve(matrices)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block)) + 1j * rng.standard_normal((n, block))
    X = _orthonormalize_g(X, G)
    applyB = lambda Y: np.column_stack([op.apply_b(Y[:, k]) for k in range(Y.shape[1])])
    BX = applyB(X)
    Xprev = None
    best_prev = None
    stall = 0
    it = 0
    while it < maxiter:
        it += 1
        H = X.conj().T @ BX
        theta = np.real(np.diag(H))
        R = BX - (G @ X) * theta[None, :]
        W = gsolve(R)
        parts = [X, W] if Xprev is None else [X, W, Xprev]
        S = _orthonormalize_g(np.column_stack(parts), G)
        BS = applyB(S)
        Hs = S.conj().T @ BS
        Hs = 0.5 * (Hs + Hs.conj().T)
        vals, Z = eigh(Hs)
        take = Z[:, -block:] if largest else Z[:, :block]
        Xprev = X
        X = S @ take
        BX = BS @ take
        best = vals[-1] if largest else vals[0]
        scale = max(abs(vals[-1]), abs(vals[0]), 1e-300)
        if best_prev is not None and abs(best - best_prev) <= tol * scale:
            stall += 1
            if stall >= 3:
                break
        else:
            stall = 0
        best_prev = best
    # report the positive-sum Rayleigh quotient of each kept direction
    ray = [op.rayleigh(X[:, k]) for k in range(X.shape[1])]
    pick = int(np.argmax(ray)) if largest else int(np.argmin(ray))
    return float(ray[pick]), X[:, pick], it


def lambda_min(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    T: float,
    n_steps: int,
    tol: float = 1e-8,
    seed: int = 0,
    maxiter: int = 120,
    engine: str = "spectral",
    epsilon: Optional[float] = None,
    block: int = 4,
) -> GramianDiagnostics:
    """Extremal generalized eigenvalues of (Gramian, G), matrix-free.

    Every Gramian application is one adjoint solve, one observation and
    one controlled forward accumulation.  Deterministic for a fixed seed.
    The reported extremal values are Rayleigh quotients of the computed
    directions: positive sums, hence nonnegative by construction, with
    lambda_min at the round-off floor whenever the horizon/resolution
    leaves part of the discrete spectrum unobservable.
    """
    op = GramianOperator(space, matrices, T, n_steps, engine=engine)
    lam_lo, vec_lo, it_lo = _lobpcg_extremal(
        op, matrices, seed, False, tol, maxiter, block
    )
    lam_hi, vec_hi, it_hi = _lobpcg_extremal(
        op, matrices, seed + 1, True, tol, maxiter, block
    )
    cfg = space.cfg
    if epsilon is None:
        epsilon = t_min_optimal(cfg)[0]
    tmin = t_min(cfg, epsilon)
    try:
        c = c_theory(cfg, epsilon, T)
    except ValueError:
        c = math.nan
    return GramianDiagnostics(
        lambda_min=lam_lo,
        lambda_max=lam_hi,
        c_theory=c,
        iterations=it_lo + it_hi,
        T=float(T),
        T_min=tmin,
        epsilon=float(epsilon),
        minimizer=vec_lo,
        maximizer=vec_hi,
    )
