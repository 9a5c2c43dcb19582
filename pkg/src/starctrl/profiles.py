"""Named analytic state profiles for experiment configurations.

A profile spec is a small dict: {"profile": "zero"},
{"profile": "gaussian", "edge": j, "center": c, "width": w,
 "amplitude": a (complex as [re, im] or real)}, or
{"profile": "eigenmode", "index": k, "amplitude": a}.  Gaussian bumps are
interpolated on the free dofs of one edge (paper numbering, edge 1 is the
uncontrolled one); keep them supported away from the vertex and the tips
so the clamped and coupled dofs stay consistent with the profile.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import eigh

from .fem import DERIV, VALUE, DiscreteGraphSpace, GraphMatrices, GraphState


def _amplitude(value) -> complex:
    if isinstance(value, (list, tuple)):
        re, im = value
        return complex(re, im)
    return complex(value)


def gaussian_bump(
    space: DiscreteGraphSpace,
    edge: int,
    center: float,
    width: float,
    amplitude=1.0,
) -> GraphState:
    """Interpolate a Gaussian bump supported on one edge (paper numbering)."""
    e = edge - 1
    if not 0 <= e < space.cfg.n_edges:
        raise ValueError(f"edge {edge} outside 1..{space.cfg.n_edges}")
    amp = _amplitude(amplitude)
    f = lambda x: amp * np.exp(-((x - center) ** 2) / (2.0 * width**2))
    fp = lambda x: f(x) * (-(x - center) / width**2)
    u = np.zeros(space.n_dof, dtype=np.complex128)
    for i in range(1, space.elements_per_edge):
        x = space.edge_nodes[e][i]
        u[space.dof_map[(e, i, VALUE)].index] = f(x)
        u[space.dof_map[(e, i, DERIV)].index] = fp(x)
    return GraphState(u)


def eigenmode(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    index: int,
    amplitude=1.0,
) -> GraphState:
    """M-normalized generalized eigenvector of (K1+K2, M).

    The sign is fixed so that the first controlled-edge observation
    coupling is nonnegative real, making the profile deterministic across
    runs and mesh refinements.
    """
    lam, V = matrices.cached(
        "eigenmodes",
        lambda: eigh(matrices.K.toarray(), matrices.M.toarray()),
    )
    if not 0 <= index < lam.size:
        raise ValueError(f"eigenmode index {index} outside 0..{lam.size - 1}")
    v = V[:, index].astype(np.complex128)
    marker = (matrices.ntilde.T @ v)[0]
    if abs(marker) > 1e-12 * np.abs(matrices.ntilde.T @ v).max():
        v *= np.conj(marker) / abs(marker)
    return GraphState(_amplitude(amplitude) * v)


def smooth_random(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    rng: np.random.Generator,
    n_modes: int = 12,
) -> GraphState:
    """Random smooth state: random complex mix of the lowest eigenmodes.

    This is the "random state" used by steering tests: it samples the
    resolved part of the discretization, which is the regime the control
    horizon theory speaks about, while coefficient-level white noise
    would mostly consist of mesh-scale artifacts.
    """
    lam, V = matrices.cached(
        "eigenmodes",
        lambda: eigh(matrices.K.toarray(), matrices.M.toarray()),
    )
    k = min(n_modes, lam.size)
    c = rng.standard_normal(k) + 1j * rng.standard_normal(k)
    u = V[:, :k] @ c
    return GraphState(u / np.sqrt(np.real(np.vdot(u, matrices.M @ u))))


def from_spec(
    space: DiscreteGraphSpace,
    matrices: GraphMatrices,
    spec_dict: dict,
) -> GraphState:
    """Build a state from a profile dict; see the module docstring."""
    kind = spec_dict.get("profile", "zero")
    if kind == "zero":
        return GraphState(np.zeros(space.n_dof, dtype=np.complex128))
    if kind == "gaussian":
        return gaussian_bump(
            space,
            edge=int(spec_dict.get("edge", 1)),
            center=float(spec_dict["center"]),
            width=float(spec_dict["width"]),
            amplitude=spec_dict.get("amplitude", 1.0),
        )
    if kind == "eigenmode":
        return eigenmode(
            space,
            matrices,
            index=int(spec_dict.get("index", 0)),
            amplitude=spec_dict.get("amplitude", 1.0),
        )
    raise ValueError(f"unknown profile kind: {kind!r}")
