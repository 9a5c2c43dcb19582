"""Time integration of the discrete system i M du/dt = (K1+K2) u.

One step is the Crank-Nicolson / Cayley update

    (M + i tau K / 2) u^{n+1} = (M - i tau K / 2) u^n + forcing,

which is exactly M-unitary for the Hermitian pencil, so the L2 mass and
the H1+H2 energies are conserved to solver round-off along homogeneous
trajectories.  Controlled tip derivatives enter through the
M-orthogonalized load vectors (``GraphMatrices.ntilde``) with controls
sampled at the time nodes and trapezoidal (endpoint-averaged) lifting.

Besides the sparse-LU stepper there is a spectral engine that applies the
very same one-step map in the M-orthonormal eigenbasis of (K, M); it is
used by the Gramian and control-synthesis loops where thousands of solves
per eigen/CG iteration would otherwise dominate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .fem import DiscreteGraphSpace, GraphMatrices, GraphState

_GRID_RTOL = 1e-9


@dataclass
class ControlSignal:
    """Uniformly sampled tip-derivative data h_j(t) for edges 2..N.

    ``samples`` has shape (n_steps+1, N-1); column k belongs to edge k+2.
    Between nodes the control is understood as piecewise linear, matching
    the trapezoidal lifting of the stepper.
    """

    t0: float
    t1: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.samples.ndim != 2:
            raise ValueError("samples must be 2-D (time node, controlled edge)")
        if not np.all(np.isfinite(self.samples.view(np.float64))):
            raise ValueError("control samples must be finite")
        if not self.t1 > self.t0:
            raise ValueError("need t1 > t0")

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0] - 1

    @property
    def n_edges(self) -> int:
        return self.samples.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + (self.t1 - self.t0) / self.n_steps * np.arange(self.n_steps + 1)

    def edge_samples(self, j: int) -> np.ndarray:
        """Samples of edge j in the paper's numbering (j = 2 .. N)."""
        return self.samples[:, j - 2]

    def energy(self) -> float:
        """Sum over edges of the trapezoid-rule L2(0,T) norm squared."""
        tau = (self.t1 - self.t0) / self.n_steps
        w = np.full(self.n_steps + 1, tau)
        w[0] = w[-1] = tau / 2.0
        return float(np.sum(w[:, None] * np.abs(self.samples) ** 2))

    @classmethod
    def zeros(cls, n_edges: int, T: float, n_steps: int) -> "ControlSignal":
        return cls(0.0, T, np.zeros((n_steps + 1, n_edges), dtype=np.complex128))


@dataclass
class Trajectory:
    """States at (possibly thinned) uniform time nodes of one solve."""

    times: np.ndarray
    states: np.ndarray           # (n_stored, n_dof)
    step: float                  # tau of the underlying grid
    controls: Optional[ControlSignal] = None

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("time stamps must be strictly increasing")

    @property
    def n_stored(self) -> int:
        return self.states.shape[0]

    def state(self, i: int) -> GraphState:
        return GraphState(self.states[i].copy(), float(self.times[i]))

    @property
    def initial(self) -> GraphState:
        return self.state(0)

    @property
    def final(self) -> GraphState:
        return self.state(self.n_stored - 1)


class CayleyFactor:
    """Cached sparse factorization of M + i|tau|K/2 for one step size.

    The backward-step matrix is the complex conjugate, so a single LU
    serves both time directions.  One iterative-refinement pass keeps the
    conserved quadratic forms at round-off level over long horizons.
    """

    def __init__(self, matrices: GraphMatrices, tau: float):
        self.tau = abs(tau)
        theta = 0.5 * self.tau
        K = matrices.K
        self.a_plus = (matrices.M + 1j * theta * K).tocsr()
        self.lu = spla.splu(self.a_plus.tocsc())

    def solve_plus(self, b: np.ndarray) -> np.ndarray:
        x = self.lu.solve(b)
        x += self.lu.solve(b - self.a_plus @ x)
        return x

    def solve_minus(self, b: np.ndarray) -> np.ndarray:
        return np.conj(self.solve_plus(np.conj(b)))


def _factor(matrices: GraphMatrices, tau: float) -> CayleyFactor:
    return matrices.cached(("cayley", abs(tau)), lambda: CayleyFactor(matrices, tau))


def step(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    state: GraphState,
    tau: float,
    boundary_data=None,
) -> GraphState:
    """Advance one Cayley step of signed size tau.

    ``boundary_data``, when given, is the pair (h(t), h(t+tau)) of
    tip-derivative values (arrays of length N-1) entering through the
    endpoint-averaged lifting.
    """
    if tau == 0.0:
        raise ValueError("tau must be nonzero")
    u = np.asarray(state.coeffs, dtype=np.complex128)
    if u.shape != (space.n_dof,):
        raise ValueError(f"state has {u.shape}, space has {space.n_dof} dofs")
    fac = _factor(matrices, tau)
    theta = 0.5 * tau
    K = matrices.K
    b = matrices.M @ u - 1j * theta * (K @ u)
    if boundary_data is not None:
        h0, h1 = boundary_data
        h0 = np.asarray(h0, dtype=np.complex128)
        h1 = np.asarray(h1, dtype=np.complex128)
        b = b - 1j * theta * (matrices.ntilde @ (h0 + h1))
    nxt = fac.solve_plus(b) if tau > 0 else fac.solve_minus(b)
    return GraphState(nxt, state.time + tau)


def _stored_indices(n_steps: int, store_every: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, store_every)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def solve_forward(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    u0: GraphState,
    controls: Optional[ControlSignal],
    T: float,
    n_steps: int,
    store_every: int = 1,
) -> Trajectory:
    """Integrate from t=0 to t=T, optionally forced by tip controls.

    With controls present the space must have been built with
    ``control_tips_free``; the physical solution's tip derivative equals
    h_j(t_n) at every node while the stored coefficients remain the
    L2-projection onto the constrained space.
    """
    if n_steps < 1 or T <= 0:
        raise ValueError("need n_steps >= 1 and T > 0")
    tau = T / n_steps
    H = None
    if controls is not None:
        if not space.control_tips_free:
            raise ValueError("space was not built with control_tips_free")
        if controls.n_steps != n_steps or controls.n_edges != space.n_controlled:
            raise ValueError("control grid does not match (T, n_steps)")
        if abs(controls.t0) > _GRID_RTOL * T or abs(controls.t1 - T) > _GRID_RTOL * T:
            raise ValueError("control window does not match [0, T]")
        H = controls.samples
    fac = _factor(matrices, tau)
    theta = 0.5 * tau
    K = matrices.K
    M = matrices.M
    keep = _stored_indices(n_steps, store_every)
    states = np.empty((keep.size, space.n_dof), dtype=np.complex128)
    pos = 0
    u = np.asarray(u0.coeffs, dtype=np.complex128).copy()
    if keep[pos] == 0:
        states[pos] = u
        pos += 1
    for n in range(n_steps):
        b = M @ u - 1j * theta * (K @ u)
        if H is not None:
            b -= 1j * theta * (matrices.ntilde @ (H[n] + H[n + 1]))
        u = fac.solve_plus(b)
        if pos < keep.size and keep[pos] == n + 1:
            states[pos] = u
            pos += 1
    times = tau * keep
    return Trajectory(times=times, states=states, step=tau, controls=controls)


def solve_adjoint(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    vT: GraphState,
    T: float,
    n_steps: int,
    store_every: int = 1,
) -> Trajectory:
    """Backward solve of the same (self-adjoint) equation from final data.

    Returns the trajectory on [0, T] in forward time order with
    states[-1] = vT.  Homogeneous boundary data throughout.
    """
    if n_steps < 1 or T <= 0:
        raise ValueError("need n_steps >= 1 and T > 0")
    tau = T / n_steps
    fac = _factor(matrices, tau)
    theta = 0.5 * tau
    K = matrices.K
    M = matrices.M
    keep = _stored_indices(n_steps, store_every)
    states = np.empty((keep.size, space.n_dof), dtype=np.complex128)
    pos = keep.size - 1
    v = np.asarray(vT.coeffs, dtype=np.complex128).copy()
    if keep[pos] == n_steps:
        states[pos] = v
        pos -= 1
    for n in range(n_steps - 1, -1, -1):
        # A_minus v^n = A_plus v^{n+1}
        v = fac.solve_minus(M @ v + 1j * theta * (K @ v))
        if pos >= 0 and keep[pos] == n:
            states[pos] = v
            pos -= 1
    times = tau * keep
    return Trajectory(times=times, states=states, step=tau, controls=None)


def nodal_from_midpoints(atilde: np.ndarray) -> np.ndarray:
    """Map midpoint-sampled series (n_steps, m) to time-node samples.

    Interior nodes average the two adjacent midpoints; the endpoints take
    the one-sided midpoint value.  This is exactly the map under which the
    trapezoid pairing of controls against the observation reproduces the
    discrete duality identity.
    """
    n, m = atilde.shape
    out = np.empty((n + 1, m), dtype=atilde.dtype)
    out[0] = atilde[0]
    out[-1] = atilde[-1]
    out[1:-1] = 0.5 * (atilde[:-1] + atilde[1:])
    return out


def trapezoid_weights(T: float, n_steps: int) -> np.ndarray:
    tau = T / n_steps
    w = np.full(n_steps + 1, tau)
    w[0] = w[-1] = 0.5 * tau
    return w


class SpectralEngine:
    """The same Cayley map, diagonalized in the (K, M) eigenbasis.

    Both quadratic invariants are conserved exactly because every mode is
    multiplied by a unimodular phase per step.  Agreement with the
    sparse-LU stepper is limited only by the dense eigensolve round-off.
    """

    def __init__(self, matrices: GraphMatrices):
        K = matrices.K.toarray()
        M = matrices.M.toarray()
        lam, V = eigh(K, M)
        self.lam = lam
        self.V = V                       # columns M-orthonormal
        self.VtM = V.T @ M
        self.W = matrices.ntilde.T @ V   # (m, n) observation coupling
        self._powers: dict = {}

    def n_dof(self) -> int:
        return self.lam.size

    def to_modal(self, u: np.ndarray) -> np.ndarray:
        return self.VtM @ u

    def from_modal(self, uhat: np.ndarray) -> np.ndarray:
        return self.V @ uhat

    def phases(self, tau: float) -> np.ndarray:
        return 2.0 * np.arctan(0.5 * tau * self.lam)

    def powers(self, tau: float, n_steps: int) -> np.ndarray:
        """P[k, n] = c_k^n with c_k the per-step phase factor (|c_k| = 1)."""
        key = (tau, n_steps)
        if key not in self._powers:
            if len(self._powers) > 3:
                self._powers.clear()
            phi = self.phases(tau)
            self._powers[key] = np.exp(-1j * np.outer(phi, np.arange(n_steps + 1)))
        return self._powers[key]

    def propagate_final(self, u0: np.ndarray, tau: float, n_steps: int) -> np.ndarray:
        """Homogeneous evolution over n_steps steps (negative tau allowed)."""
        phase = np.exp(-1j * self.phases(abs(tau)) * n_steps * np.sign(tau))
        return self.V @ (phase * self.to_modal(u0))

    def homogeneous_trajectory(self, u0: np.ndarray, tau: float, n_steps: int) -> np.ndarray:
        P = self.powers(tau, n_steps)
        return (self.V @ (self.to_modal(u0)[:, None] * P)).T

    def adjoint_observation(self, vT: np.ndarray, tau: float, n_steps: int):
        """Observation samples of the adjoint trajectory from final data vT.

        Returns (obs, v0): obs has shape (n_steps+1, m) and v0 is the
        adjoint state at t=0 (useful for pairing checks).
        """
        q = self.to_modal(np.asarray(vT, dtype=np.complex128))
        P = self.powers(tau, n_steps)
        Pc_rev = np.conj(P)[:, ::-1]          # column n holds conj(c)^{N-n}
        mid = 0.5 * (Pc_rev[:, :-1] + Pc_rev[:, 1:])
        atilde = (self.W @ (q[:, None] * mid)).T
        v0 = self.V @ (Pc_rev[:, 0] * q)
        return nodal_from_midpoints(atilde), v0

    def forward_from_zero_final(self, H: np.ndarray, tau: float, n_steps: int) -> np.ndarray:
        """Final state of the controlled solve started from zero."""
        theta = 0.5 * tau
        hsum = (H[:-1] + H[1:]).T             # (m, n_steps)
        E = (-1j * theta) * (self.W.T @ hsum)
        E /= (1.0 + 1j * theta * self.lam)[:, None]
        P = self.powers(tau, n_steps)
        uhat = np.einsum("kn,kn->k", P[:, n_steps - 1 :: -1], E)
        return self.V @ uhat

    def forward_final(
        self, u0: np.ndarray, H: Optional[np.ndarray], tau: float, n_steps: int
    ) -> np.ndarray:
        out = self.propagate_final(u0, tau, n_steps)
        if H is not None:
            out = out + self.forward_from_zero_final(H, tau, n_steps)
        return out


def spectral(matrices: GraphMatrices) -> SpectralEngine:
    return matrices.cached("spectral", lambda: SpectralEngine(matrices))


def trajectory_to_csv(trajectory: Trajectory, path) -> None:
    """Write the trajectory in long form: time, dof index, real, imag."""
    import csv

    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["time", "dof", "re", "im"])
        for i, t in enumerate(trajectory.times):
            row_t = format(float(t), ".17g")
            for d in range(trajectory.states.shape[1]):
                z = trajectory.states[i, d]
                writer.writerow(
                    [row_t, d, format(z.real, ".17g"), format(z.imag, ".17g")]
                )
