"""Symmetrized U-statistic estimators of covariance traces.

All estimators are built from within-group differences of observation pairs,
which removes the unknown group means.  For a sample with groups
``X_i`` (n_i x d), projector pair ``(T_W, T_S)`` and ``V = diag_i (N/n_i)
Sigma_i``, the module estimates without bias:

==============================================  =============================
``trace_sigma(X_i, T_S)``                       tr(T_S Sigma_i)
``trace_sigma_pair(X_i, X_r, T_S)``             tr(T_S Sigma_i T_S Sigma_r)
``trace_sigma_sq(X_i, T_S)``                    tr((T_S Sigma_i)^2)
``trace_tv_sq(sample, pair)``                   tr((T V)^2)
``trace_tv_cube*(...)``                         tr((T V)^3)
``trace_tv_quartic*(...)``                      tr((T V)^4)
``null_mean_estimate(sample, pair)``            null mean of the quadratic form
==============================================  =============================

Each pairwise estimator has two implementations: the definitional sum over
index tuples (kept as a slow oracle) and an algebraically identical closed
form used by default.  The tuple-product estimators additionally come in
subsampled versions that average the kernel over random index draws; those
are deterministic given a seed.  Random draws use one substream per call and
a fixed reduction order (numpy pairwise summation), so results do not depend
on evaluation chunking.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator

import numpy as np

from .model import (
    SplitPlotSample,
    TAG_PAIR_SUB,
    TAG_PERM,
    TAG_QUAD_SUB,
    TAG_SUITE,
    substream,
)
from .projections import ProjectionPair

#: Default cap on kernel evaluations for the exact tuple-product estimators.
DEFAULT_WORK_CAP = 10_000_000

_CHUNK = 200_000
_BROADCAST_LIMIT = 200  # above this group size the cubic term falls back to a row loop


class InsufficientSampleError(ValueError):
    """A group is too small for the requested estimator."""


class WorkCapExceededError(RuntimeError):
    """Exact tuple enumeration would be too large; use the subsampled form."""


class DegenerateVarianceError(ArithmeticError):
    """The estimated null variance is zero; the studentized test is undefined."""


def _as_matrix(group: np.ndarray) -> np.ndarray:
    g = np.atleast_2d(np.asarray(group, dtype=float))
    return g


def _check_n(n: int, minimum: int, what: str) -> None:
    if n < minimum:
        raise InsufficientSampleError(f"{what} needs at least {minimum} observations, got {n}")


# ---------------------------------------------------------------------------
# pairwise-difference estimators
# ---------------------------------------------------------------------------


def trace_sigma(group: np.ndarray, t_sub: np.ndarray) -> float:
    """Average of (X_l1 - X_l2)' T_S (X_l1 - X_l2) / 2 over all pairs.

    Equals tr(T_S S_hat) with S_hat the usual unbiased sample covariance;
    computed in that closed form.
    """
    g = _as_matrix(group)
    n = g.shape[0]
    _check_n(n, 2, "trace_sigma")
    c = g - g.mean(axis=0)
    m = c @ t_sub @ c.T
    return float(np.trace(m)) / (n - 1)


def trace_sigma_definitional(group: np.ndarray, t_sub: np.ndarray) -> float:
    """Literal pair sum; quadratic in the group size, test oracle only."""
    g = _as_matrix(group)
    n = g.shape[0]
    _check_n(n, 2, "trace_sigma")
    total = 0.0
    for l1, l2 in itertools.combinations(range(n), 2):
        y = g[l1] - g[l2]
        total += y @ t_sub @ y
    return total / (2.0 * math.comb(n, 2))


def trace_sigma_pair(
    group_i: np.ndarray,
    group_r: np.ndarray,
    t_sub: np.ndarray,
    method: str = "hadamard",
) -> float:
    """Squared cross bilinear forms of difference pairs from two groups.

    The default Hadamard form squares the doubly centered cross Gram matrix
    entrywise and sums, which equals the definitional quadruple sum exactly.
    Only meaningful for independent groups.
    """
    gi, gr = _as_matrix(group_i), _as_matrix(group_r)
    ni, nr = gi.shape[0], gr.shape[0]
    _check_n(ni, 2, "trace_sigma_pair")
    _check_n(nr, 2, "trace_sigma_pair")
    if method == "hadamard":
        ci = gi - gi.mean(axis=0)
        cr = gr - gr.mean(axis=0)
        m = ci @ t_sub @ cr.T
        return float((m * m).sum()) / ((ni - 1) * (nr - 1))
    if method == "definitional":
        total = 0.0
        for l1, l2 in itertools.combinations(range(ni), 2):
            y = (gi[l1] - gi[l2]) @ t_sub
            for k1, k2 in itertools.combinations(range(nr), 2):
                total += (y @ (gr[k1] - gr[k2])) ** 2
        return total / (4.0 * math.comb(ni, 2) * math.comb(nr, 2))
    raise ValueError(f"unknown method {method!r}")


@lru_cache(maxsize=32)
def _distinct_triple_mask(n: int) -> np.ndarray:
    idx = np.arange(n)
    mask = np.ones((n, n, n), dtype=bool)
    mask[idx, idx, :] = False
    mask[idx, :, idx] = False
    mask[:, idx, idx] = False
    return mask


def _sq_terms_from_gram(g: np.ndarray) -> tuple[float, float, float]:
    """The three partial sums of the expanded fourth-order pair statistic.

    ``g`` must be the Gram matrix of *centered* observations under T_S.
    Returns (s0, s1, s2): the unconstrained double-pair sum, the
    one-shared-index sum and the two-shared-indices sum.
    """
    n = g.shape[0]
    diag = np.diag(g)
    s0 = 4.0 * n * n * float((g * g).sum())
    if n <= _BROADCAST_LIMIT:
        f = diag[:, None, None] - g[:, None, :] - g[:, :, None] + g[None, :, :]
        s1 = 4.0 * float((np.where(_distinct_triple_mask(n), f, 0.0) ** 2).sum())
    else:
        s1 = 0.0
        for j in range(n):
            f = diag[j] - g[j][None, :] - g[j][:, None] + g
            f[j, :] = 0.0
            f[:, j] = 0.0
            np.fill_diagonal(f, 0.0)
            s1 += float((f * f).sum())
        s1 *= 4.0
    q = diag[:, None] - 2.0 * g + diag[None, :]
    np.fill_diagonal(q, 0.0)
    s2 = 2.0 * float((q * q).sum())
    return s0, s1, s2


def trace_sigma_sq(group: np.ndarray, t_sub: np.ndarray, method: str = "expanded") -> float:
    """Fourth-order pair statistic targeting tr((T_S Sigma_i)^2).

    The definitional form sums squared bilinear forms of two disjoint
    difference pairs over all index quadruples with four distinct entries.
    The expanded form removes the one- and two-shared-index configurations
    from the unconstrained double sum; it is cubic in the group size and
    agrees with the definition exactly.
    """
    g = _as_matrix(group)
    n = g.shape[0]
    _check_n(n, 4, "trace_sigma_sq")
    if method == "expanded":
        c = g - g.mean(axis=0)
        gram = c @ t_sub @ c.T
        s0, s1, s2 = _sq_terms_from_gram(gram)
        m4 = n * (n - 1) * (n - 2) * (n - 3)
        return (s0 - s1 - s2) / (4.0 * m4)
    if method == "definitional":
        total = 0.0
        count = 0
        for l1 in range(n):
            for l2 in range(l1):
                for k1 in range(n):
                    if k1 in (l1, l2):
                        continue
                    for k2 in range(k1):
                        if k2 in (l1, l2):
                            continue
                        y = g[l1] - g[l2]
                        z = g[k1] - g[k2]
                        total += (y @ t_sub @ z) ** 2
                        count += 1
        assert count == 6 * math.comb(n, 4)
        return total / (4.0 * 6.0 * math.comb(n, 4))
    raise ValueError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# gram tables shared by the combined estimators
# ---------------------------------------------------------------------------


@dataclass
class GramTables:
    """Centered cross-Gram matrices ``G[i][r][j,k] = (x_ij - xbar_i)' T_S (x_rk - xbar_r)``.

    Centering leaves every difference-based estimator unchanged and improves
    conditioning when the data carry large means.
    """

    tables: list[list[np.ndarray]]
    n: tuple[int, ...]
    t_whole: np.ndarray
    scale: np.ndarray  # sqrt(N / n_i)
    total: int

    @classmethod
    def build(cls, s: SplitPlotSample, pair: ProjectionPair) -> "GramTables":
        if pair.a != s.a or pair.d != s.d:
            raise ValueError(
                f"projection pair is ({pair.a}, {pair.d}) but sample is ({s.a}, {s.d})"
            )
        centered = [g - g.mean(axis=0) for g in s.groups]
        half = [c @ pair.t_sub for c in centered]
        tables: list[list[np.ndarray]] = [[None] * s.a for _ in range(s.a)]  # type: ignore
        for i in range(s.a):
            for r in range(i, s.a):
                g = half[i] @ centered[r].T
                tables[i][r] = g
                if r != i:
                    tables[r][i] = g.T
        scale = np.sqrt(s.total / np.asarray(s.n, dtype=float))
        return cls(tables, s.n, pair.t_whole, scale, s.total)

    @property
    def a(self) -> int:
        return len(self.n)


def pairwise_from_grams(grams: GramTables) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """All pairwise-difference estimates from prebuilt Gram tables.

    Returns (a1, a2, a3, a4); the fast path shared by the test driver and
    the simulation harness.  Requires every group size >= 4.
    """
    a = grams.a
    for ni in grams.n:
        _check_n(ni, 4, "pairwise_from_grams")
    a1 = np.zeros(a)
    a3 = np.zeros(a)
    a2 = np.zeros((a, a))
    for i in range(a):
        n = grams.n[i]
        g = grams.tables[i][i]
        a1[i] = float(np.trace(g)) / (n - 1)
        s0, s1, s2 = _sq_terms_from_gram(g)
        m4 = n * (n - 1) * (n - 2) * (n - 3)
        a3[i] = (s0 - s1 - s2) / (4.0 * m4)
        for r in range(i):
            gir = grams.tables[i][r]
            a2[i, r] = a2[r, i] = float((gir * gir).sum()) / (
                (n - 1) * (grams.n[r] - 1)
            )
    tw = grams.t_whole
    nn = np.asarray(grams.n, dtype=float)
    big_n = grams.total
    a4 = 0.0
    for i in range(a):
        a4 += (big_n / nn[i]) ** 2 * tw[i, i] ** 2 * a3[i]
        for r in range(i):
            a4 += 2.0 * big_n**2 / (nn[i] * nn[r]) * tw[i, r] ** 2 * a2[i, r]
    return a1, a2, a3, float(a4)


def cube_subsampled_from_grams(
    grams: GramTables, b_draws: int, rng: np.random.Generator
) -> float:
    """Subsampled cube estimate from prebuilt Gram tables and an open stream."""
    total = 0.0
    for start in range(0, b_draws, _CHUNK):
        m = min(_CHUNK, b_draws - start)
        sel = [_draw_tuples(rng, ni, m, 6) for ni in grams.n]
        total += float(_cube_kernel(grams, sel).sum())
    return total / (8.0 * b_draws)


def _bilinear(
    grams: GramTables,
    sel: list[np.ndarray],
    slot_a: tuple[int, int],
    slot_b: tuple[int, int],
) -> np.ndarray:
    """Bilinear forms Z_a' (T_W (x) T_S) Z_b for a batch of index selections.

    ``sel[i]`` holds per-group index tuples, one row per kernel evaluation;
    ``slot_a``/``slot_b`` pick which tuple columns form each difference pair.
    """
    pa, pb = slot_a
    qa, qb = slot_b
    tw = grams.t_whole
    c = grams.scale
    out: np.ndarray | float = 0.0
    for i in range(grams.a):
        si = sel[i]
        for r in range(grams.a):
            w = tw[i, r]
            if w == 0.0:
                continue
            sr = sel[r]
            g = grams.tables[i][r]
            val = (
                g[si[:, pa], sr[:, qa]]
                - g[si[:, pa], sr[:, qb]]
                - g[si[:, pb], sr[:, qa]]
                + g[si[:, pb], sr[:, qb]]
            )
            out = out + (w * c[i] * c[r]) * val
    return np.asarray(out)


def _cube_kernel(grams: GramTables, sel: list[np.ndarray]) -> np.ndarray:
    l1 = _bilinear(grams, sel, (0, 1), (2, 3))
    l2 = _bilinear(grams, sel, (2, 3), (4, 5))
    l3 = _bilinear(grams, sel, (4, 5), (0, 1))
    return l1 * l2 * l3


def _quartic_kernel(grams: GramTables, sel: list[np.ndarray]) -> np.ndarray:
    l1 = _bilinear(grams, sel, (0, 1), (2, 3))
    l2 = _bilinear(grams, sel, (4, 5), (6, 7))
    return l1**4 / 6.0 - l1**2 * l2**2 / 2.0


@lru_cache(maxsize=16)
def _ordered_tuples(n: int, m: int) -> np.ndarray:
    """All ordered m-tuples of distinct indices from range(n), shape (perm(n,m), m)."""
    return np.array(list(itertools.permutations(range(n), m)), dtype=np.intp)


def _product_selections(
    tuple_sets: list[np.ndarray], chunk: int = _CHUNK
) -> Iterator[list[np.ndarray]]:
    """Iterate over the product of per-group tuple sets in vectorized chunks."""
    sizes = [t.shape[0] for t in tuple_sets]
    total = math.prod(sizes)
    for start in range(0, total, chunk):
        lin = np.arange(start, min(start + chunk, total), dtype=np.int64)
        sel: list[np.ndarray] = []
        rem = lin
        for t, s in zip(reversed(tuple_sets), reversed(sizes)):
            sel.append(t[rem % s])
            rem = rem // s
        yield sel[::-1]


def _draw_tuples(rng: np.random.Generator, n: int, draws: int, m: int) -> np.ndarray:
    """``draws`` independent ordered m-subsamples without replacement from range(n).

    Small m relative to n uses rejection sampling (uniform over ordered
    distinct tuples); otherwise each draw shuffles a full index row.
    """
    if 2 * m > n:
        base = np.tile(np.arange(n, dtype=np.intp), (draws, 1))
        rng.permuted(base, axis=1, out=base)
        return np.ascontiguousarray(base[:, :m])

    def collisions(block: np.ndarray) -> np.ndarray:
        out = np.zeros(block.shape[0], dtype=bool)
        for a in range(m):
            for b in range(a + 1, m):
                out |= block[:, a] == block[:, b]
        return out

    idx = rng.integers(0, n, size=(draws, m))
    bad_rows = np.flatnonzero(collisions(idx))
    while bad_rows.size:
        redraw = rng.integers(0, n, size=(bad_rows.size, m))
        idx[bad_rows] = redraw
        bad_rows = bad_rows[collisions(redraw)]
    return idx


def _require_all(s: SplitPlotSample, minimum: int, what: str) -> None:
    for ni in s.n:
        _check_n(ni, minimum, what)


# ---------------------------------------------------------------------------
# combined estimators across groups
# ---------------------------------------------------------------------------


def null_mean_estimate(s: SplitPlotSample, pair: ProjectionPair) -> float:
    """Unbiased estimate of the null mean of the quadratic form statistic."""
    weights = s.total / np.asarray(s.n, dtype=float)
    diag = np.diag(pair.t_whole)
    return float(
        sum(
            weights[i] * diag[i] * trace_sigma(s.groups[i], pair.t_sub)
            for i in range(s.a)
            if diag[i] != 0.0
        )
    )


def trace_tv_sq(s: SplitPlotSample, pair: ProjectionPair) -> float:
    """Unbiased estimate of tr((T V)^2), the half null variance."""
    _require_all(s, 4, "trace_tv_sq")
    n = np.asarray(s.n, dtype=float)
    big_n = s.total
    tw = pair.t_whole
    total = 0.0
    for i in range(s.a):
        if tw[i, i] != 0.0:
            total += (big_n / n[i]) ** 2 * tw[i, i] ** 2 * trace_sigma_sq(
                s.groups[i], pair.t_sub
            )
        for r in range(i):
            if tw[i, r] != 0.0:
                total += (
                    2.0
                    * big_n**2
                    / (n[i] * n[r])
                    * tw[i, r] ** 2
                    * trace_sigma_pair(s.groups[i], s.groups[r], pair.t_sub)
                )
    return total


def _exact_tuple_sum(
    s: SplitPlotSample,
    pair: ProjectionPair,
    m: int,
    kernel,
    norm_per_eval: float,
    work_cap: int,
    what: str,
) -> float:
    grams = GramTables.build(s, pair)
    evals = math.prod(math.perm(ni, m) for ni in s.n)
    if evals > work_cap:
        raise WorkCapExceededError(
            f"{what} needs {evals} kernel evaluations (cap {work_cap}); "
            "use the subsampled estimator"
        )
    tuple_sets = [_ordered_tuples(ni, m) for ni in s.n]
    total = 0.0
    for sel in _product_selections(tuple_sets):
        total += float(kernel(grams, sel).sum())
    return total / (norm_per_eval * evals)


def trace_tv_cube(
    s: SplitPlotSample, pair: ProjectionPair, work_cap: int = DEFAULT_WORK_CAP
) -> float:
    """Exact symmetrized estimate of tr((T V)^3) over all per-group 6-tuples."""
    _require_all(s, 6, "trace_tv_cube")
    return _exact_tuple_sum(s, pair, 6, _cube_kernel, 8.0, work_cap, "trace_tv_cube")


def trace_tv_cube_subsampled(
    s: SplitPlotSample, pair: ProjectionPair, b_draws: int, seed: int
) -> float:
    """Subsampled estimate of tr((T V)^3): kernel averaged over b random 6-tuples."""
    _require_all(s, 6, "trace_tv_cube_subsampled")
    if b_draws < 1:
        raise ValueError(f"b_draws must be >= 1, got {b_draws}")
    grams = GramTables.build(s, pair)
    return cube_subsampled_from_grams(grams, b_draws, substream(seed, TAG_PAIR_SUB))


def trace_tv_quartic(
    s: SplitPlotSample, pair: ProjectionPair, work_cap: int = DEFAULT_WORK_CAP
) -> float:
    """Exact symmetrized estimate of tr((T V)^4) over all per-group 8-tuples."""
    _require_all(s, 8, "trace_tv_quartic")
    return _exact_tuple_sum(s, pair, 8, _quartic_kernel, 16.0, work_cap, "trace_tv_quartic")


def trace_tv_quartic_subsampled(
    s: SplitPlotSample, pair: ProjectionPair, b_draws: int, seed: int
) -> float:
    """Subsampled estimate of tr((T V)^4) from random per-group 8-tuples."""
    _require_all(s, 8, "trace_tv_quartic_subsampled")
    if b_draws < 1:
        raise ValueError(f"b_draws must be >= 1, got {b_draws}")
    grams = GramTables.build(s, pair)
    rng = substream(seed, TAG_QUAD_SUB)
    total = 0.0
    for start in range(0, b_draws, _CHUNK):
        m = min(_CHUNK, b_draws - start)
        sel = [_draw_tuples(rng, ni, m, 8) for ni in s.n]
        total += float(_quartic_kernel(grams, sel).sum())
    return total / (16.0 * b_draws)


def _common_index_cube(
    grams: GramTables, perms: list[np.ndarray], base_sel: np.ndarray
) -> float:
    sel = [p[base_sel] for p in perms]
    return float(_cube_kernel(grams, sel).sum())


def trace_tv_cube_common(
    s: SplitPlotSample,
    pair: ProjectionPair,
    n_perms: int = 1,
    seed: int = 0,
    work_cap: int = DEFAULT_WORK_CAP,
    _identity_perms: bool = False,
) -> float:
    """Common-index estimate of tr((T V)^3).

    Every group uses the same 6-tuple of positions, bounded by the smallest
    group; independent random relabelings of each group's observations are
    averaged over ``n_perms`` rounds so that all index combinations remain
    reachable.  Valid for any relation between group count and sizes.
    """
    n_min = min(s.n)
    _check_n(n_min, 6, "trace_tv_cube_common")
    if n_perms < 1:
        raise ValueError(f"n_perms must be >= 1, got {n_perms}")
    evals = math.perm(n_min, 6) * n_perms
    if evals > work_cap:
        raise WorkCapExceededError(
            f"trace_tv_cube_common needs {evals} kernel evaluations (cap {work_cap}); "
            "use the subsampled estimator"
        )
    grams = GramTables.build(s, pair)
    rng = substream(seed, TAG_PERM)
    base = _ordered_tuples(n_min, 6)
    total = 0.0
    for _ in range(n_perms):
        if _identity_perms:
            perms = [np.arange(ni, dtype=np.intp) for ni in s.n]
        else:
            perms = [rng.permutation(ni).astype(np.intp) for ni in s.n]
        total += _common_index_cube(grams, perms, base)
    return total / (8.0 * base.shape[0] * n_perms)


def trace_tv_cube_common_subsampled(
    s: SplitPlotSample,
    pair: ProjectionPair,
    n_perms: int,
    b_draws: int,
    seed: int,
) -> float:
    """Subsampled common-index estimate of tr((T V)^3)."""
    n_min = min(s.n)
    _check_n(n_min, 6, "trace_tv_cube_common_subsampled")
    if n_perms < 1 or b_draws < 1:
        raise ValueError("n_perms and b_draws must be >= 1")
    grams = GramTables.build(s, pair)
    rng = substream(seed, TAG_PERM)
    total = 0.0
    for _ in range(n_perms):
        perms = [rng.permutation(ni).astype(np.intp) for ni in s.n]
        base = _draw_tuples(rng, n_min, b_draws, 6)
        total += _common_index_cube(grams, perms, base)
    return total / (8.0 * b_draws * n_perms)


# ---------------------------------------------------------------------------
# estimate records and drivers
# ---------------------------------------------------------------------------


@dataclass
class TraceEstimates:
    """Bundle of trace estimates with provenance metadata.

    ``a1[i]`` estimates tr(T_S Sigma_i); the off-diagonal ``a2[i, r]``
    estimate tr(T_S Sigma_i T_S Sigma_r) (diagonal entries are zero);
    ``a3[i]`` estimates tr((T_S Sigma_i)^2); ``a4`` estimates tr((T V)^2);
    ``c5``/``c7`` estimate tr((T V)^3) and ``c6`` tr((T V)^4).
    """

    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray | None
    a4: float | None
    c5: float | None = None
    c6: float | None = None
    c7: float | None = None
    tau_p_hat: float | None = None
    f_p_hat: float | None = None
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        """Flat dict for CSV/JSON logging."""
        rec: dict = {}
        for i, v in enumerate(self.a1):
            rec[f"a1_{i + 1}"] = v
        a = len(self.a1)
        for i in range(a):
            for r in range(i):
                rec[f"a2_{r + 1}_{i + 1}"] = self.a2[i, r]
        if self.a3 is not None:
            for i, v in enumerate(self.a3):
                rec[f"a3_{i + 1}"] = v
        rec["a4"] = self.a4
        rec["c5"] = self.c5
        rec["c6"] = self.c6
        rec["c7"] = self.c7
        rec["tau_p_hat"] = self.tau_p_hat
        rec["f_p_hat"] = self.f_p_hat
        rec.update({k: self.meta.get(k) for k in ("mode", "B", "w", "seed")})
        return rec


def subsampled_suite(
    s: SplitPlotSample, pair: ProjectionPair, b_draws: int, seed: int
) -> TraceEstimates:
    """Subsampled analogues of the pairwise estimators, sharing one draw table.

    Each group contributes ``b_draws`` random 4-tuples; the first two slots
    feed the first- and cross-moment estimators, all four the squared one.
    With fewer than 4 observations in some group only 2-tuples are drawn and
    the squared estimator (hence the combined one) is unavailable.
    """
    _require_all(s, 2, "subsampled_suite")
    if b_draws < 1:
        raise ValueError(f"b_draws must be >= 1, got {b_draws}")
    with_square = min(s.n) >= 4
    grams = GramTables.build(s, pair)
    rng = substream(seed, TAG_SUITE)
    m = 4 if with_square else 2
    sel = [_draw_tuples(rng, ni, b_draws, m) for ni in s.n]
    a = s.a
    a1 = np.zeros(a)
    a3 = np.zeros(a) if with_square else None
    a2 = np.zeros((a, a))
    for i in range(a):
        g = grams.tables[i][i]
        si = sel[i]
        first = g[si[:, 0], si[:, 0]] - 2.0 * g[si[:, 0], si[:, 1]] + g[si[:, 1], si[:, 1]]
        a1[i] = first.sum() / (2.0 * b_draws)
        if with_square:
            cross = (
                g[si[:, 0], si[:, 2]]
                - g[si[:, 0], si[:, 3]]
                - g[si[:, 1], si[:, 2]]
                + g[si[:, 1], si[:, 3]]
            )
            a3[i] = (cross**2).sum() / (4.0 * b_draws)
        for r in range(i):
            gir = grams.tables[i][r]
            sr = sel[r]
            val = (
                gir[si[:, 0], sr[:, 0]]
                - gir[si[:, 0], sr[:, 1]]
                - gir[si[:, 1], sr[:, 0]]
                + gir[si[:, 1], sr[:, 1]]
            )
            a2[i, r] = a2[r, i] = (val**2).sum() / (4.0 * b_draws)
    a4 = _combine_tv_sq(s, pair, a2, a3) if with_square else None
    return TraceEstimates(
        a1=a1,
        a2=a2,
        a3=a3,
        a4=a4,
        meta={"mode": "subsampled", "B": b_draws, "w": None, "seed": seed},
    )


def _combine_tv_sq(
    s: SplitPlotSample, pair: ProjectionPair, a2: np.ndarray, a3: np.ndarray
) -> float:
    n = np.asarray(s.n, dtype=float)
    big_n = s.total
    tw = pair.t_whole
    total = 0.0
    for i in range(s.a):
        total += (big_n / n[i]) ** 2 * tw[i, i] ** 2 * a3[i]
        for r in range(i):
            total += 2.0 * big_n**2 / (n[i] * n[r]) * tw[i, r] ** 2 * a2[i, r]
    return float(total)


def tau_f_hat(
    estimates: TraceEstimates, rank_cap: int, source: str = "c5"
) -> tuple[float, float]:
    """Degrees-of-freedom estimate from a cube and a squared-trace estimate.

    tau_hat is the squared cube estimate over the cubed squared-trace
    estimate, clamped into [0, 1]; f_hat = 1 / max(tau_hat, 1/rank_cap) is
    the matched chi-square degrees of freedom, capped by the statistic's
    maximal rank ``rank_cap = a * d``.
    """
    if estimates.a4 is None:
        raise ValueError("estimates carry no squared-trace value")
    if estimates.a4 <= 0.0:
        raise DegenerateVarianceError("estimated null variance is zero")
    cube = getattr(estimates, source)
    if cube is None:
        raise ValueError(f"estimates carry no {source!r} value")
    tau = min(max(cube**2 / estimates.a4**3, 0.0), 1.0)
    f = 1.0 / max(tau, 1.0 / rank_cap)
    return tau, f


def estimate_traces(
    s: SplitPlotSample,
    pair: ProjectionPair,
    mode: str = "efficient",
    b_draws: int | None = None,
    n_perms: int = 1,
    seed: int = 0,
    dof_estimator: str = "c5",
    with_dof: bool = True,
    work_cap: int = DEFAULT_WORK_CAP,
) -> TraceEstimates:
    """Compute the full estimate bundle used by the studentized test.

    mode
        ``"efficient"`` (closed forms for the pairwise estimators, subsampled
        cube), ``"exact"`` (closed forms plus the exact cube, subject to the
        work cap) or ``"subsampled"`` (everything subsampled).
    b_draws
        Subsample count; defaults to 500 * N.
    dof_estimator
        ``"c5"`` for the per-group-tuple cube or ``"c7"`` for the
        common-index variant (useful when groups are many but small).
    """
    if mode not in ("efficient", "exact", "subsampled"):
        raise ValueError(f"unknown mode {mode!r}")
    if dof_estimator not in ("c5", "c7"):
        raise ValueError(f"unknown dof estimator {dof_estimator!r}")
    if b_draws is None:
        b_draws = 500 * s.total

    grams = None
    if mode == "subsampled":
        est = subsampled_suite(s, pair, b_draws, seed)
    else:
        _require_all(s, 4, "estimate_traces")
        grams = GramTables.build(s, pair)
        a1, a2, a3, a4 = pairwise_from_grams(grams)
        est = TraceEstimates(
            a1=a1,
            a2=a2,
            a3=a3,
            a4=a4,
            meta={"mode": mode, "B": None, "w": None, "seed": seed},
        )

    if with_dof:
        if dof_estimator == "c5":
            if mode == "exact":
                est.c5 = trace_tv_cube(s, pair, work_cap=work_cap)
            else:
                _require_all(s, 6, "trace_tv_cube_subsampled")
                if grams is None:
                    grams = GramTables.build(s, pair)
                est.c5 = cube_subsampled_from_grams(
                    grams, b_draws, substream(seed, TAG_PAIR_SUB)
                )
                est.meta["B"] = b_draws
        else:
            if mode == "exact":
                est.c7 = trace_tv_cube_common(
                    s, pair, n_perms=n_perms, seed=seed, work_cap=work_cap
                )
            else:
                est.c7 = trace_tv_cube_common_subsampled(
                    s, pair, n_perms, b_draws, seed
                )
                est.meta["B"] = b_draws
            est.meta["w"] = n_perms
        est.tau_p_hat, est.f_p_hat = tau_f_hat(
            est, rank_cap=s.a * s.d, source=dof_estimator
        )
    return est
