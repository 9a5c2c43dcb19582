"""H2-conforming discretization of graph functions on the star graph.

Each edge carries cubic Hermite elements (value + first-derivative dofs at
every node), so second-derivative energies are well defined.  The clamped
outer ends, the zero tip values, the vertex value coupling
``u_1(0) = alpha_j u_j(0)`` and the vertex derivative-sum coupling
``u_1'(0) = sum_j u_j'(0)/alpha_j`` are eliminated exactly through a
reduction matrix R; the second- and third-derivative couplings at the
vertex are the natural conditions of the bilinear forms and hold weakly.

Controlled tip derivatives are never free unknowns: they enter as
inhomogeneous slots whose M-orthogonalized lifting is precomputed here, so
that a trajectory coefficient vector is always the L2-projection of the
physical state onto the constrained space.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import eigh

from .graph import StarGraphConfig, validate_config

VALUE, DERIV = 0, 1

# Cubic Hermite shapes on the reference element [0,1] for an element of
# physical length h, as polynomial coefficients in xi (constant term first).
# Rows: value-left, deriv-left, value-right, deriv-right.
_SHAPE_COEFFS = np.array(
    [
        [1.0, 0.0, -3.0, 2.0],
        [0.0, 1.0, -2.0, 1.0],   # scaled by h
        [0.0, 0.0, 3.0, -2.0],
        [0.0, 0.0, -1.0, 1.0],   # scaled by h
    ]
)


def shape_values(h: float, xi, deriv: int = 0) -> np.ndarray:
    """Evaluate the four Hermite shapes (or an x-derivative) at local xi.

    Returns an array of shape (4, len(xi)).  Derivatives are with respect
    to the physical coordinate, hence the 1/h^deriv scaling.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    coeffs = _SHAPE_COEFFS.copy()
    coeffs[1] *= h
    coeffs[3] *= h
    for _ in range(deriv):
        coeffs = coeffs[:, 1:] * np.arange(1, coeffs.shape[1])
    if coeffs.shape[1] == 0:
        return np.zeros((4, xi.size))
    powers = xi[None, :] ** np.arange(coeffs.shape[1])[:, None]
    return (coeffs @ powers) / h**deriv


def element_matrices(h: float) -> tuple:
    """Exact (mass, grad, bending) 4x4 matrices of one Hermite element."""
    h2 = h * h
    m = (h / 420.0) * np.array(
        [
            [156.0, 22 * h, 54.0, -13 * h],
            [22 * h, 4 * h2, 13 * h, -3 * h2],
            [54.0, 13 * h, 156.0, -22 * h],
            [-13 * h, -3 * h2, -22 * h, 4 * h2],
        ]
    )
    k1 = (1.0 / (30.0 * h)) * np.array(
        [
            [36.0, 3 * h, -36.0, 3 * h],
            [3 * h, 4 * h2, -3 * h, -h2],
            [-36.0, -3 * h, 36.0, -3 * h],
            [3 * h, -h2, -3 * h, 4 * h2],
        ]
    )
    k2 = (1.0 / h**3) * np.array(
        [
            [12.0, 6 * h, -12.0, 6 * h],
            [6 * h, 4 * h2, -6 * h, 2 * h2],
            [-12.0, -6 * h, 12.0, -6 * h],
            [6 * h, 2 * h2, -6 * h, 4 * h2],
        ]
    )
    return m, k1, k2


def _interval_matrices(n_elems: int, h: float, offset: int, n_total: int):
    """COO triplets of the three forms for one uniform edge of n_elems cells."""
    me, k1e, k2e = element_matrices(h)
    rows, cols = [], []
    for k in range(n_elems):
        idx = offset + 2 * k + np.arange(4)
        rows.append(np.repeat(idx, 4))
        cols.append(np.tile(idx, 4))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    data_m = np.tile(me.ravel(), n_elems)
    data_k1 = np.tile(k1e.ravel(), n_elems)
    data_k2 = np.tile(k2e.ravel(), n_elems)
    build = lambda d: sp.coo_matrix((d, (rows, cols)), shape=(n_total, n_total))
    return build(data_m), build(data_k1), build(data_k2)


@dataclass(frozen=True)
class DofRef:
    """Where a per-edge (node, kind) dof ended up after elimination.

    kind_of_ref is one of "free", "zero", "coupled" (linear combination of
    free dofs) or "slot" (inhomogeneous control slot k).
    """

    kind_of_ref: str
    index: int = -1
    terms: tuple = ()


@dataclass(frozen=True)
class DiscreteGraphSpace:
    """Meshes, constraint reduction and dof bookkeeping for one star graph."""

    cfg: StarGraphConfig
    elements_per_edge: int
    control_tips_free: bool
    edge_nodes: tuple            # node coordinates per edge
    n_full: int
    n_dof: int
    R: sp.csr_matrix             # n_full x n_dof reduction (full = R @ free)
    dof_map: dict                # (edge, node, VALUE|DERIV) -> DofRef
    control_slots: np.ndarray    # full dof index of each controlled tip derivative
    vertex_value_dof: int
    vertex_deriv_dofs: np.ndarray

    @property
    def n_controlled(self) -> int:
        return self.cfg.n_controlled

    def edge_offset(self, edge: int) -> int:
        return edge * 2 * (self.elements_per_edge + 1)

    def full_index(self, edge: int, node: int, kind: int) -> int:
        return self.edge_offset(edge) + 2 * node + kind

    def edge_length(self, edge: int) -> float:
        return self.cfg.lengths[edge]

    def mesh_size(self, edge: int) -> float:
        return self.cfg.lengths[edge] / self.elements_per_edge

    def describe_constraints(self) -> tuple:
        lines = [
            "edge 1 outer end (-l_1): value and derivative clamped",
            "tips l_j (j>=2): value clamped",
            "vertex: 1 free value dof, edge values recovered by 1/alpha_j",
            "vertex: N-1 free derivative dofs, edge-1 derivative recovered "
            "as the alpha-weighted sum",
        ]
        if self.control_tips_free:
            lines.append(
                "tips l_j (j>=2): derivative = inhomogeneous control slot h_j(t)"
            )
        else:
            lines.append("tips l_j (j>=2): derivative clamped")
        return tuple(lines)


def build_space(
    cfg: StarGraphConfig,
    elements_per_edge: int,
    control_tips_free: bool = False,
) -> DiscreteGraphSpace:
    """Mesh every edge uniformly and eliminate the essential constraints.

    With ``control_tips_free`` the tip-derivative dofs of edges 2..N are
    recorded as inhomogeneous slots (the free dimension is unchanged);
    otherwise they are clamped, which is the adjoint/homogeneous setting.
    """
    report = validate_config(cfg)
    if not report.ok:
        raise ValueError("invalid star-graph config: " + "; ".join(report.violations))
    n_e = int(elements_per_edge)
    if n_e < 1:
        raise ValueError("elements_per_edge must be >= 1")
    N = cfg.n_edges
    alphas = np.asarray(cfg.alphas)

    edge_nodes = []
    for e, l in enumerate(cfg.lengths):
        h = l / n_e
        if e == 0:
            edge_nodes.append(-l + h * np.arange(n_e + 1))
        else:
            edge_nodes.append(h * np.arange(n_e + 1))
        edge_nodes[-1][-1 if e == 0 else 0] = 0.0  # vertex coordinate exactly 0
    edge_nodes = tuple(edge_nodes)

    n_full = N * 2 * (n_e + 1)
    offset = lambda e: e * 2 * (n_e + 1)
    fidx = lambda e, i, k: offset(e) + 2 * i + k

    dof_map = {}
    rows, cols, vals = [], [], []
    free = 0

    def bind(e, i, k, idx):
        rows.append(fidx(e, i, k))
        cols.append(idx)
        vals.append(1.0)
        dof_map[(e, i, k)] = DofRef("free", idx)

    for e in range(N):
        for i in range(1, n_e):
            bind(e, i, VALUE, free)
            bind(e, i, DERIV, free + 1)
            free += 2
    vertex_value = free
    free += 1
    vertex_derivs = np.arange(free, free + N - 1)
    free += N - 1
    n_dof = free

    # vertex value: u_1(0) is the free dof, edge values are 1/alpha_j of it
    rows.append(fidx(0, n_e, VALUE))
    cols.append(vertex_value)
    vals.append(1.0)
    dof_map[(0, n_e, VALUE)] = DofRef("free", vertex_value)
    for e in range(1, N):
        w = 1.0 / alphas[e - 1]
        rows.append(fidx(e, 0, VALUE))
        cols.append(vertex_value)
        vals.append(w)
        dof_map[(e, 0, VALUE)] = DofRef("coupled", terms=((vertex_value, w),))

    # vertex derivatives: edges 2..N free, edge-1 derivative is their weighted sum
    terms = []
    for e in range(1, N):
        idx = int(vertex_derivs[e - 1])
        rows.append(fidx(e, 0, DERIV))
        cols.append(idx)
        vals.append(1.0)
        dof_map[(e, 0, DERIV)] = DofRef("free", idx)
        w = 1.0 / alphas[e - 1]
        rows.append(fidx(0, n_e, DERIV))
        cols.append(idx)
        vals.append(w)
        terms.append((idx, w))
    dof_map[(0, n_e, DERIV)] = DofRef("coupled", terms=tuple(terms))

    dof_map[(0, 0, VALUE)] = DofRef("zero")
    dof_map[(0, 0, DERIV)] = DofRef("zero")
    control_slots = np.empty(N - 1, dtype=np.int64)
    for e in range(1, N):
        dof_map[(e, n_e, VALUE)] = DofRef("zero")
        control_slots[e - 1] = fidx(e, n_e, DERIV)
        if control_tips_free:
            dof_map[(e, n_e, DERIV)] = DofRef("slot", index=e - 1)
        else:
            dof_map[(e, n_e, DERIV)] = DofRef("zero")

    R = sp.coo_matrix((vals, (rows, cols)), shape=(n_full, n_dof)).tocsr()
    return DiscreteGraphSpace(
        cfg=cfg,
        elements_per_edge=n_e,
        control_tips_free=bool(control_tips_free),
        edge_nodes=edge_nodes,
        n_full=n_full,
        n_dof=n_dof,
        R=R,
        dof_map=dof_map,
        control_slots=control_slots,
        vertex_value_dof=vertex_value,
        vertex_deriv_dofs=vertex_derivs,
    )


@dataclass(eq=False)
class GraphMatrices:
    """Assembled Hermitian forms of the discretization.

    M, K1, K2 realize the L2, H1-seminorm and H2-seminorm quadratic forms
    on the constrained space; G = M + K1 + K2 is the discrete H^2_0 Gram
    matrix.  The lifting data realize the controlled tip-derivative slots:
    ``ntilde`` is the M-orthogonalized load vector, so that the control
    enters the reduced dynamics as i M du/dt = K u + ntilde h(t) with the
    coefficient vector staying the L2-projection of the physical state.
    """

    space: DiscreteGraphSpace
    M: sp.csr_matrix
    K1: sp.csr_matrix
    K2: sp.csr_matrix
    G: sp.csr_matrix
    M_full: sp.csr_matrix
    K1_full: sp.csr_matrix
    K2_full: sp.csr_matrix
    n_mass: np.ndarray        # R^T M_full on the slot columns
    n_stiff: np.ndarray       # R^T (K1+K2)_full on the slot columns
    psi: np.ndarray           # M^{-1} n_mass
    ntilde: np.ndarray        # n_stiff - (K1+K2) psi
    lift_tilde: np.ndarray    # full-space M-orthogonal lifting columns
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def K(self) -> sp.csr_matrix:
        return self._cache.setdefault("K", (self.K1 + self.K2).tocsr())

    def cached(self, key, builder):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = builder()
            return self._cache[key]


def _symmetrize(a: sp.spmatrix) -> sp.csr_matrix:
    a = a.tocsr()
    return ((a + a.T) * 0.5).tocsr()


def assemble(space: DiscreteGraphSpace) -> GraphMatrices:
    """Assemble exact element integrals and reduce by the constraint matrix."""
    n_e = space.elements_per_edge
    blocks_m, blocks_k1, blocks_k2 = [], [], []
    for e in range(space.cfg.n_edges):
        h = space.mesh_size(e)
        m, k1, k2 = _interval_matrices(n_e, h, space.edge_offset(e), space.n_full)
        blocks_m.append(m)
        blocks_k1.append(k1)
        blocks_k2.append(k2)
    M_full = _symmetrize(sum(blocks_m))
    K1_full = _symmetrize(sum(blocks_k1))
    K2_full = _symmetrize(sum(blocks_k2))

    R = space.R
    M = _symmetrize(R.T @ M_full @ R)
    K1 = _symmetrize(R.T @ K1_full @ R)
    K2 = _symmetrize(R.T @ K2_full @ R)
    G = _symmetrize(M + K1 + K2)

    slots = space.control_slots
    m = slots.size
    n_mass = np.asarray((R.T @ M_full[:, slots]).todense())
    n_stiff = np.asarray((R.T @ (K1_full + K2_full)[:, slots]).todense())
    lu_m = spla.splu(M.tocsc())
    psi = np.column_stack([lu_m.solve(n_mass[:, k]) for k in range(m)])
    ntilde = n_stiff - (K1 + K2) @ psi
    lift_tilde = -np.asarray((R @ psi))
    lift_tilde[slots, np.arange(m)] += 1.0

    return GraphMatrices(
        space=space,
        M=M,
        K1=K1,
        K2=K2,
        G=G,
        M_full=M_full,
        K1_full=K1_full,
        K2_full=K2_full,
        n_mass=n_mass,
        n_stiff=n_stiff,
        psi=psi,
        ntilde=ntilde,
        lift_tilde=lift_tilde,
    )


@dataclass
class GraphState:
    """Complex coefficient vector of a graph function at one time instant."""

    coeffs: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if not np.all(np.isfinite(self.coeffs.view(np.float64))):
            raise ValueError("state coefficients must be finite")

    def copy(self) -> "GraphState":
        return GraphState(self.coeffs.copy(), self.time)


def zero_state(space: DiscreteGraphSpace, time: float = 0.0) -> GraphState:
    return GraphState(np.zeros(space.n_dof, dtype=np.complex128), time)


def full_coeffs(space, state, controls_value=None) -> np.ndarray:
    """Per-edge nodal coefficients of the physical graph function.

    ``controls_value`` supplies the tip-derivative data h_j(t) when the
    state belongs to a forced trajectory; without it the reconstruction is
    the homogeneous one.  Requires the assembled matrices' lifting when
    forced, so pass the matrices object as ``space`` is not enough there.
    """
    coeffs = state.coeffs if isinstance(state, GraphState) else np.asarray(state)
    if isinstance(space, GraphMatrices):
        mats, space = space, space.space
    else:
        mats = None
    out = space.R @ coeffs
    if controls_value is not None:
        if mats is None:
            raise ValueError("forced reconstruction needs GraphMatrices")
        out = out + mats.lift_tilde @ np.asarray(controls_value, dtype=np.complex128)
    return out


def evaluate(space: DiscreteGraphSpace, full: np.ndarray, edge: int, x, deriv: int = 0):
    """Evaluate the Hermite reconstruction (or a derivative) on one edge.

    Points exactly on element boundaries use the element to their left
    except at the edge's left end, so evaluation at a node is one-sided.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    nodes = space.edge_nodes[edge]
    h = space.mesh_size(edge)
    n_e = space.elements_per_edge
    k = np.clip(np.ceil((x - nodes[0]) / h).astype(int) - 1, 0, n_e - 1)
    xi = (x - nodes[k]) / h
    off = space.edge_offset(edge)
    out = np.zeros(x.shape, dtype=np.complex128)
    for kk in np.unique(k):
        mask = k == kk
        local = full[off + 2 * kk + np.arange(4)]
        out[mask] = local @ shape_values(h, xi[mask], deriv)
    return out if out.size > 1 else out[0]


@dataclass(frozen=True)
class VertexTrace:
    value_edge1: complex
    deriv_edge1: complex
    edge_values: np.ndarray
    edge_derivs: np.ndarray


def vertex_trace(space: DiscreteGraphSpace, state) -> VertexTrace:
    """Vertex dof values and the alpha-recovered per-edge traces.

    The recovered traces satisfy the coupling identities exactly; they are
    defined by them.
    """
    coeffs = state.coeffs if isinstance(state, GraphState) else np.asarray(state)
    alphas = np.asarray(space.cfg.alphas)
    u1 = coeffs[space.vertex_value_dof]
    edge_values = u1 / alphas
    edge_derivs = coeffs[space.vertex_deriv_dofs]
    du1 = np.sum(edge_derivs / alphas)
    return VertexTrace(u1, du1, edge_values, edge_derivs)


def poincare_constant(space: DiscreteGraphSpace, matrices: GraphMatrices = None) -> float:
    """Discrete best constant c_h in ||f||^2 <= c_h ||f'||^2.

    Largest generalized eigenvalue of (M, K1) on the constrained space;
    requires the homogeneous setting so that K1 is positive definite.
    """
    if matrices is None:
        matrices = assemble(space)
    md = matrices.M.toarray()
    k1d = matrices.K1.toarray()
    vals = eigh(md, k1d, eigvals_only=True)
    return float(vals[-1])


def clamped_interval_matrices(length: float, n_elems: int) -> tuple:
    """(M, K1, K2) of a single edge clamped (value and slope) at both ends.

    Benchmark space for the classical clamped-beam eigenvalue; shares the
    element integrals with the graph assembly.
    """
    h = length / n_elems
    n_total = 2 * (n_elems + 1)
    m, k1, k2 = _interval_matrices(n_elems, h, 0, n_total)
    keep = np.arange(2, n_total - 2)
    sel = lambda a: _symmetrize(a.tocsr()[keep][:, keep])
    return sel(m), sel(k1), sel(k2)


def dump_matrices(matrices: GraphMatrices, directory) -> None:
    """Write M, K1, K2, G in Matrix Market coordinate format (debug aid)."""
    import pathlib

    from scipy.io import mmwrite

    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("M", "K1", "K2", "G"):
        mmwrite(str(directory / f"{name}.mtx"), getattr(matrices, name))
