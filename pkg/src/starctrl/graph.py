"""Star-graph geometry, coupling coefficients, and admissible control horizons.

The graph has N edges meeting at a single central vertex: edge 1 is
parametrized on (-l_1, 0) and carries no control, edges 2..N are
parametrized on (0, l_j) and are actuated through their tip Neumann data.
This module validates the standing hypotheses on the coupling weights
``alpha_j`` and evaluates the minimal control horizon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


DEFAULT_ALPHA_TOL = 1e-12


@dataclass(frozen=True)
class StarGraphConfig:
    """Geometry and coupling data of the star graph.

    Parameters
    ----------
    lengths : tuple of float
        Edge lengths ``l_1 .. l_N``; edge 1 is the uncontrolled edge.
    alphas : tuple of float
        Coupling weights ``alpha_2 .. alpha_N`` of the controlled edges
        (one fewer entry than ``lengths``).
    """

    lengths: tuple
    alphas: tuple

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(float(l) for l in self.lengths))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if len(self.lengths) < 2:
            raise ValueError("a star graph needs at least 2 edges")
        if len(self.alphas) != len(self.lengths) - 1:
            raise ValueError(
                f"expected {len(self.lengths) - 1} coupling weights for "
                f"{len(self.lengths)} edges, got {len(self.alphas)}"
            )

    @property
    def n_edges(self) -> int:
        return len(self.lengths)

    @property
    def n_controlled(self) -> int:
        return len(self.alphas)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of the hypothesis check; violations are data, not faults."""

    ok: bool
    violations: tuple = ()

    def __bool__(self) -> bool:
        return self.ok


@dataclass(frozen=True)
class TimeHorizon:
    """A control horizon T together with the free Young-inequality weight.

    ``epsilon`` must lie in (0, 1/Lbar); for control synthesis T must
    additionally exceed ``t_min(cfg, epsilon)``.
    """

    T: float
    epsilon: float

    def check(self, cfg: StarGraphConfig, for_control: bool = True) -> ValidationReport:
        violations = []
        _, lbar = length_constants(cfg)
        if not 0.0 < self.epsilon < 1.0 / lbar:
            violations.append(
                f"epsilon = {self.epsilon} outside (0, 1/Lbar) = (0, {1.0 / lbar})"
            )
        if self.T <= 0.0:
            violations.append(f"T = {self.T} is not positive")
        elif for_control and not violations:
            tmin = t_min(cfg, self.epsilon)
            if self.T <= tmin:
                violations.append(f"T = {self.T} does not exceed T_min = {tmin}")
        return ValidationReport(ok=not violations, violations=tuple(violations))


def validate_config(cfg: StarGraphConfig, tol: float = DEFAULT_ALPHA_TOL) -> ValidationReport:
    """Check positivity of the data and the two coupling-weight constraints.

    The weights must satisfy ``sum_j 1/alpha_j^2 = 1`` and
    ``1/alpha_j^2 <= 1/(N-1)`` for every controlled edge, both within
    ``tol``.  Every violated constraint is named in the report.
    """
    violations = []
    for j, l in enumerate(cfg.lengths, start=1):
        if not l > 0.0:
            violations.append(f"length l_{j} = {l} is not positive")
    for j, a in enumerate(cfg.alphas, start=2):
        if not a > 0.0:
            violations.append(f"coupling alpha_{j} = {a} is not positive")
    if not any(v.startswith("coupling") for v in violations):
        inv_sq = [1.0 / a**2 for a in cfg.alphas]
        total = math.fsum(inv_sq)
        if abs(total - 1.0) > tol:
            violations.append(f"sum of 1/alpha^2 = {total} != 1")
        bound = 1.0 / cfg.n_controlled
        for j, s in enumerate(inv_sq, start=2):
            if s > bound + tol:
                violations.append(
                    f"1/alpha_{j}^2 = {s} exceeds 1/(N-1) = {bound}"
                )
    return ValidationReport(ok=not violations, violations=tuple(violations))


def length_constants(cfg: StarGraphConfig) -> tuple:
    """Return (L, Lbar): the longest edge and max(2 l_1, max_{j>=2} l_j + l_1)."""
    l1 = cfg.lengths[0]
    L = max(cfg.lengths)
    lbar = max(2.0 * l1, max(cfg.lengths[1:]) + l1)
    return L, lbar


def t_min(cfg: StarGraphConfig, epsilon: float) -> float:
    """Minimal control horizon sqrt(Lbar (L^2 + pi^2) / (pi^2 eps (1 - Lbar eps))).

    Raises ``ValueError`` when ``epsilon`` lies outside (0, 1/Lbar), where
    the denominator is nonpositive.
    """
    L, lbar = length_constants(cfg)
    if not 0.0 < epsilon < 1.0 / lbar:
        raise ValueError(
            f"epsilon = {epsilon} outside admissible interval (0, {1.0 / lbar})"
        )
    num = lbar * (L**2 + math.pi**2)
    den = math.pi**2 * epsilon * (1.0 - lbar * epsilon)
    return math.sqrt(num / den)


def t_min_optimal(cfg: StarGraphConfig) -> tuple:
    """Return (eps*, T*) minimizing the horizon over admissible epsilon.

    ``eps(1 - Lbar eps)`` is a downward parabola with interior maximum at
    ``eps* = 1/(2 Lbar)``, so T* = t_min(cfg, eps*) is the infimum.
    """
    _, lbar = length_constants(cfg)
    eps_star = 1.0 / (2.0 * lbar)
    return eps_star, t_min(cfg, eps_star)
