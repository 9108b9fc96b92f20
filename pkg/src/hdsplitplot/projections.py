"""Projection matrices encoding linear hypotheses about split-plot mean vectors.

A null hypothesis ``H mu = 0`` with a Kronecker-structured contrast matrix
``H = H_W (x) H_S`` (whole-plot block times sub-plot block) is equivalently
expressed through the pair of projectors ``(T_W, T_S)`` with
``T = T_W (x) T_S``.  All downstream formulas work on the pair; the full
``(a*d) x (a*d)`` projector is only materialized for small problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Largest row count for which a full Kronecker projector may be materialized.
MATERIALIZATION_CAP = 4096

SYMMETRY_TOL = 1e-10
IDEMPOTENCE_TOL = 1e-8


class MaterializationError(RuntimeError):
    """Full Kronecker projector would exceed the materialization cap."""


def centering_matrix(k: int) -> np.ndarray:
    """Return ``I_k - J_k / k``, the projector onto the contrast space."""
    if k < 1:
        raise ValueError(f"dimension must be >= 1, got {k}")
    return np.eye(k) - np.full((k, k), 1.0 / k)


def averaging_matrix(k: int) -> np.ndarray:
    """Return ``J_k / k``, the rank-one projector onto the constant vector."""
    if k < 1:
        raise ValueError(f"dimension must be >= 1, got {k}")
    return np.full((k, k), 1.0 / k)


def unit_projector(k: int, level: int) -> np.ndarray:
    """Return the k x k matrix with a single 1 at the (level, level) diagonal cell.

    ``level`` is 1-based, matching how factor levels are named elsewhere.
    """
    if not 1 <= level <= k:
        raise IndexError(f"level must be in 1..{k}, got {level}")
    out = np.zeros((k, k))
    out[level - 1, level - 1] = 1.0
    return out


def projector_from_hypothesis(h: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Orthogonal projector with the same kernel as the contrast matrix ``h``.

    Computes ``h^T (h h^T)^+ h`` with the pseudo-inverse taken through a
    symmetric eigendecomposition; eigenvalues below ``rel_tol`` times the
    largest one are treated as zero.  The result does not depend on which
    generalized inverse is used, so the pseudo-inverse is chosen for
    numerical stability.
    """
    h = np.asarray(h, dtype=float)
    if h.ndim != 2 or h.shape[0] < 1 or h.shape[1] < 1:
        raise ValueError(f"contrast matrix must be 2-D and non-empty, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("contrast matrix has non-finite entries")
    gram = h @ h.T
    eigvals, eigvecs = np.linalg.eigh(gram)
    lam_max = eigvals[-1]
    if lam_max <= 0.0:
        return np.zeros((h.shape[1], h.shape[1]))
    keep = eigvals > rel_tol * lam_max
    u = eigvecs[:, keep]
    t = h.T @ (u / eigvals[keep]) @ (u.T @ h)
    return (t + t.T) / 2.0


@dataclass(frozen=True)
class ProjectionPair:
    """Projector pair ``(T_W, T_S)`` for a Kronecker-structured hypothesis.

    ``t_whole`` acts on the a group means, ``t_sub`` on the d repeated
    measures.  Both must be symmetric and idempotent; this is checked at
    construction.
    """

    t_whole: np.ndarray
    t_sub: np.ndarray

    def __post_init__(self) -> None:
        for name, m in (("t_whole", self.t_whole), ("t_sub", self.t_sub)):
            m = np.asarray(m, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got shape {m.shape}")
            if np.abs(m - m.T).max() > SYMMETRY_TOL:
                raise ValueError(f"{name} is not symmetric")
            if np.abs(m @ m - m).max() > IDEMPOTENCE_TOL:
                raise ValueError(f"{name} is not idempotent")
            object.__setattr__(self, name, m)

    @property
    def a(self) -> int:
        return self.t_whole.shape[0]

    @property
    def d(self) -> int:
        return self.t_sub.shape[0]

    def full(self, cap: int = MATERIALIZATION_CAP) -> np.ndarray:
        """Materialize ``T_W (x) T_S``; refuses above the row cap."""
        rows = self.a * self.d
        if rows > cap:
            raise MaterializationError(
                f"full projector has {rows} rows, above the cap of {cap}; "
                "use the blockwise formulas instead"
            )
        return np.kron(self.t_whole, self.t_sub)


def kron_pair_projector(h_whole: np.ndarray, h_sub: np.ndarray) -> ProjectionPair:
    """Project each contrast block separately; equals projecting the Kronecker product."""
    return ProjectionPair(
        t_whole=projector_from_hypothesis(h_whole),
        t_sub=projector_from_hypothesis(h_sub),
    )


def standard_hypothesis(
    kind: str,
    a: int,
    d: int | None = None,
    structure: tuple[int, int] | None = None,
) -> ProjectionPair:
    """Build the projector pair for one of the canonical split-plot hypotheses.

    Supported kinds:

    - ``"group"``        no group effect
    - ``"time"``         no time effect
    - ``"interaction"``  no group-time interaction
    - ``"time_within:L"``   no time effect within sub-plot factor level L
      (requires ``structure=(q, s)`` with d = q*s)
    - ``"between:L,K"``     no effect between sub-plot factor levels L and K
      (requires ``structure``; the raw contrast block is not symmetric and is
      passed through :func:`projector_from_hypothesis`)

    ``structure=(q, s)`` describes a crossed sub-plot layout with q levels of
    the first factor and s of the second, laid out first-factor-major.
    """
    base, _, arg = kind.partition(":")
    if structure is not None:
        q, s = structure
        if q < 1 or s < 1:
            raise ValueError(f"invalid sub-plot structure {structure}")
        if d is None:
            d = q * s
        elif d != q * s:
            raise ValueError(f"d={d} does not match sub-plot structure {q}x{s}")
    if d is None:
        raise ValueError("either d or structure must be given")
    if base in ("group", "interaction") and a < 2:
        raise ValueError(f"{base} hypothesis requires a >= 2 groups, got a={a}")

    if base == "group":
        return ProjectionPair(centering_matrix(a), averaging_matrix(d))
    if base == "time":
        return ProjectionPair(averaging_matrix(a), centering_matrix(d))
    if base == "interaction":
        return ProjectionPair(centering_matrix(a), centering_matrix(d))
    if base == "time_within":
        if structure is None:
            raise ValueError("time_within requires a sub-plot structure")
        level = int(arg)
        block = np.kron(unit_projector(q, level), centering_matrix(s))
        return ProjectionPair(centering_matrix(a), block)
    if base == "between":
        if structure is None:
            raise ValueError("between requires a sub-plot structure")
        lev, _, other = arg.partition(",")
        level, other_level = int(lev), int(other)
        for value in (level, other_level):
            if not 1 <= value <= q:
                raise IndexError(f"level must be in 1..{q}, got {value}")
        if level == other_level:
            raise ValueError("between requires two distinct levels")
        e_l = np.zeros((q, 1))
        e_l[level - 1] = 1.0
        e_k = np.zeros((q, 1))
        e_k[other_level - 1] = 1.0
        contrast = np.kron(e_l @ e_l.T - e_l @ e_k.T, averaging_matrix(s))
        return ProjectionPair(centering_matrix(a), projector_from_hypothesis(contrast))
    raise ValueError(f"unknown hypothesis kind {kind!r}")


@dataclass(frozen=True)
class EffectDecomposition:
    """Additive decomposition of an a x d mean matrix.

    ``mu[i, t] = grand_mean + group_effects[i] + time_effects[t]
    + interactions[i, t]`` with each effect family summing to zero.
    """

    grand_mean: float
    group_effects: np.ndarray
    time_effects: np.ndarray
    interactions: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (
            self.grand_mean
            + self.group_effects[:, None]
            + self.time_effects[None, :]
            + self.interactions
        )


def decompose_effects(mu: np.ndarray) -> EffectDecomposition:
    """Split a mean matrix into grand mean, group, time and interaction effects."""
    mu = np.asarray(mu, dtype=float)
    if mu.ndim != 2:
        raise ValueError(f"mean matrix must be 2-D, got shape {mu.shape}")
    if not np.all(np.isfinite(mu)):
        raise ValueError("mean matrix has non-finite entries")
    grand = float(mu.mean())
    group = mu.mean(axis=1) - grand
    time = mu.mean(axis=0) - grand
    inter = mu - grand - group[:, None] - time[None, :]
    return EffectDecomposition(grand, group, time, inter)
