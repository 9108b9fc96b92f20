"""Ground-truth quantities for a known design and hypothesis.

Everything here is computed from the declared covariances, never estimated:
traces of powers of the weighted covariance under the projector, null
moments of the quadratic form, the eigenvalue spectrum behind the
weighted-chi-square representation, moments of Gaussian quadratic and
bilinear forms, and the asymptotic levels of the fixed-critical-value tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import chi2_cdf, chi2_quantile, normal_cdf, normal_quantile
from .model import SplitPlotDesign, TAG_REPRESENTATION, substream
from .projections import (
    MATERIALIZATION_CAP,
    MaterializationError,
    ProjectionPair,
    projector_from_hypothesis,
)


def _check_dims(pair: ProjectionPair, design: SplitPlotDesign) -> None:
    if pair.a != design.a or pair.d != design.d:
        raise ValueError(
            f"projection pair is ({pair.a}, {pair.d}) "
            f"but design is ({design.a}, {design.d})"
        )


def v_matrix(design: SplitPlotDesign, cap: int = MATERIALIZATION_CAP) -> np.ndarray:
    """Block-diagonal matrix with blocks (N / n_i) Sigma_i."""
    rows = design.a * design.d
    if rows > cap:
        raise MaterializationError(
            f"combined covariance has {rows} rows, above the cap of {cap}"
        )
    big_n = design.total
    out = np.zeros((rows, rows))
    d = design.d
    for i in range(design.a):
        out[i * d : (i + 1) * d, i * d : (i + 1) * d] = (
            big_n / design.n[i]
        ) * design.covariances[i]
    return out


def _tv_product(pair: ProjectionPair, design: SplitPlotDesign, cap: int) -> np.ndarray:
    return pair.full(cap) @ v_matrix(design, cap)


def trace_powers(
    pair: ProjectionPair,
    design: SplitPlotDesign,
    k: int,
    cap: int = MATERIALIZATION_CAP,
) -> float:
    """Exact tr((T V)^k) for k in 1..4.

    k = 1, 2 use the blockwise expansions and never materialize the full
    Kronecker product; k = 3, 4 require materialization within the cap.
    """
    _check_dims(pair, design)
    if k not in (1, 2, 3, 4):
        raise ValueError(f"supported powers are 1..4, got {k}")
    if k <= 2:
        return _trace_power_blockwise(pair, design, k)
    tv = _tv_product(pair, design, cap)
    return float(np.trace(np.linalg.matrix_power(tv, k)))


def _trace_power_blockwise(pair: ProjectionPair, design: SplitPlotDesign, k: int) -> float:
    big_n = design.total
    tw = pair.t_whole
    ts = pair.t_sub
    if k == 1:
        return float(
            sum(
                (big_n / design.n[i]) * tw[i, i] * np.trace(ts @ design.covariances[i])
                for i in range(design.a)
            )
        )
    total = 0.0
    ts_sig = [ts @ design.covariances[i] for i in range(design.a)]
    for i in range(design.a):
        for r in range(design.a):
            if tw[i, r] == 0.0:
                continue
            total += (
                big_n**2
                / (design.n[i] * design.n[r])
                * tw[i, r] ** 2
                * float(np.trace(ts_sig[i] @ ts_sig[r]))
            )
    return total


@dataclass(frozen=True)
class MomentPair:
    """Null mean and variance of the quadratic form statistic."""

    mean_q: float
    var_q: float


def exact_moments(
    pair: ProjectionPair, design: SplitPlotDesign, cap: int = MATERIALIZATION_CAP
) -> MomentPair:
    """Null moments from the blockwise trace expansions.

    The grouped and the full-matrix evaluations are cross-checked against
    each other whenever the full product fits the materialization cap.
    """
    mean_q = trace_powers(pair, design, 1, cap)
    var_q = 2.0 * trace_powers(pair, design, 2, cap)
    if design.a * design.d <= cap:
        tv = _tv_product(pair, design, cap)
        mean_full = float(np.trace(tv))
        var_full = 2.0 * float(np.trace(tv @ tv))
        if not (
            math.isclose(mean_q, mean_full, rel_tol=1e-9, abs_tol=1e-12)
            and math.isclose(var_q, var_full, rel_tol=1e-9, abs_tol=1e-12)
        ):
            raise AssertionError("blockwise and full-matrix moments disagree")
    return MomentPair(mean_q=mean_q, var_q=var_q)


def tau_p(pair: ProjectionPair, design: SplitPlotDesign, cap: int = MATERIALIZATION_CAP) -> float:
    """tr^2((TV)^3) / tr^3((TV)^2): 1 under a dominant eigenvalue, 0 in the normal limit."""
    tr2 = trace_powers(pair, design, 2, cap)
    tr3 = trace_powers(pair, design, 3, cap)
    return tr3**2 / tr2**3


def tau_cq(pair: ProjectionPair, design: SplitPlotDesign, cap: int = MATERIALIZATION_CAP) -> float:
    """tr((TV)^4) / tr^2((TV)^2), the two-moment analogue of tau_p."""
    tr2 = trace_powers(pair, design, 2, cap)
    tr4 = trace_powers(pair, design, 4, cap)
    return tr4 / tr2**2


@dataclass(frozen=True)
class EigenSpectrum:
    """Eigenvalues of T V T sorted descending, plus their normalized weights."""

    lambdas: np.ndarray
    betas: np.ndarray


def eigen_spectrum(
    pair: ProjectionPair, design: SplitPlotDesign, cap: int = MATERIALIZATION_CAP
) -> EigenSpectrum:
    """Spectrum of the projected weighted covariance.

    Analytically positive semi-definite; tiny negative eigenvalues from
    rounding are clipped to zero after symmetrization.
    """
    _check_dims(pair, design)
    t = pair.full(cap)
    m = t @ v_matrix(design, cap) @ t
    m = (m + m.T) / 2.0
    lam = np.linalg.eigvalsh(m)[::-1].copy()
    lam_max = lam[0] if lam.size else 0.0
    lam[(lam < 0.0) & (lam > -1e-10 * max(lam_max, 1.0))] = 0.0
    lam = np.clip(lam, 0.0, None)
    norm = math.sqrt(float((lam**2).sum()))
    if norm == 0.0:
        raise ValueError("projected covariance is zero; the hypothesis is degenerate")
    return EigenSpectrum(lambdas=lam, betas=lam / norm)


def asymptotic_level(test: str, alpha: float, regime: str) -> float:
    """Limiting size of a fixed-critical-value test in the two boundary regimes.

    ``regime`` is ``"beta1_to_0"`` (normal limit) or ``"beta1_to_1"``
    (standardized chi-square(1) limit).
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if regime not in ("beta1_to_0", "beta1_to_1"):
        raise ValueError(f"unknown regime {regime!r}")
    if test == "psi_z":
        if regime == "beta1_to_0":
            return alpha
        z = normal_quantile(1.0 - alpha)
        return float(1.0 - chi2_cdf(1.0, math.sqrt(2.0) * z + 1.0))
    if test == "psi_chi":
        if regime == "beta1_to_1":
            return alpha
        c = (chi2_quantile(1.0, 1.0 - alpha) - 1.0) / math.sqrt(2.0)
        return float(1.0 - normal_cdf(c))
    raise ValueError(f"unknown test {test!r}")


# ---------------------------------------------------------------------------
# Gaussian quadratic/bilinear form moments
# ---------------------------------------------------------------------------


def quadratic_form_moment(
    t: np.ndarray, sigma: np.ndarray, mu: np.ndarray, r: int
) -> float:
    """E[(X' t X)^r] for X ~ N(mu, sigma) and symmetric t, r in 1..4.

    Uses the cumulant-style recursion
    ``m_r = sum_k C(r-1, k) g_(r-1-k) m_k`` with
    ``g_k = 2^k k! [tr((t sigma)^(k+1)) + (k+1) mu' (t sigma)^k t mu]``.
    """
    if r not in (1, 2, 3, 4):
        raise ValueError(f"supported orders are 1..4, got {r}")
    t = np.asarray(t, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    ts = t @ sigma
    power = np.eye(t.shape[0])
    g = []
    for k in range(r):
        # power == (t sigma)^k here
        g.append(
            2.0**k
            * math.factorial(k)
            * (float(np.trace(power @ ts)) + (k + 1) * float(mu @ power @ t @ mu))
        )
        power = power @ ts
    m = [1.0]
    for order in range(1, r + 1):
        m.append(
            sum(
                math.comb(order - 1, k) * g[order - 1 - k] * m[k]
                for k in range(order)
            )
        )
    return m[r]


def bilinear_form_moment(
    t: np.ndarray, sigma_x: np.ndarray, sigma_y: np.ndarray, k: int
) -> float:
    """E[(X' t Y)^k] for independent centered Gaussians, k in 1..4."""
    if k not in (1, 2, 3, 4):
        raise ValueError(f"supported orders are 1..4, got {k}")
    if k % 2 == 1:
        return 0.0
    m = t @ sigma_x @ t @ sigma_y
    cross = float(np.trace(m))
    if k == 2:
        return cross
    return 6.0 * float(np.trace(m @ m)) + 3.0 * cross**2


def representation_sampler(
    spectrum: EigenSpectrum, reps: int, seed: int, chunk: int = 100_000
) -> np.ndarray:
    """Draws of sum_s beta_s (C_s - 1)/sqrt(2) with C_s iid chi-square(1).

    This is the exact finite-sample law of the standardized quadratic form
    under Gaussian data, so the draws double as a distributional oracle.
    """
    if reps < 1:
        raise ValueError(f"reps must be >= 1, got {reps}")
    betas = spectrum.betas[spectrum.betas > 0.0]
    if betas.size == 0:
        return np.zeros(reps)
    rng = substream(seed, TAG_REPRESENTATION)
    out = np.empty(reps)
    block = max(1, min(reps, max(1, chunk // max(1, betas.size))))
    done = 0
    while done < reps:
        m = min(block, reps - done)
        c = rng.chisquare(1.0, size=(m, betas.size))
        out[done : done + m] = (c - 1.0) @ betas / math.sqrt(2.0)
        done += m
    return out


# ---------------------------------------------------------------------------
# property sweeps
# ---------------------------------------------------------------------------


@dataclass
class InequalityReport:
    instances: int
    violations: int
    min_slack: float

    @property
    def passed(self) -> bool:
        return self.violations == 0


def trace_inequality_checks(
    instances: int = 500, seed: int = 0, max_dim: int = 20, slack_tol: float = -1e-9
) -> InequalityReport:
    """Random sweep of the trace inequalities used as variance bounds.

    Checks, for random SPD matrices and random projectors:
    tr^2(A^(a+b)) <= tr(A^(2a)) tr(A^(2b)); tr((T S)^(2k)) <= tr^2((T S)^k);
    and tr((T S_i T S_r)^2) <= tr^2(T S_i T S_r).
    """
    rng = substream(seed, 0xDEAD)
    violations = 0
    min_slack = math.inf
    checked = 0

    def record(lhs: float, rhs: float) -> None:
        nonlocal violations, min_slack, checked
        scale = max(abs(lhs), abs(rhs), 1.0)
        slack = (rhs - lhs) / scale
        min_slack = min(min_slack, slack)
        if slack < slack_tol:
            violations += 1
        checked += 1

    for _ in range(instances):
        d = int(rng.integers(2, max_dim + 1))
        root = rng.normal(size=(d, d))
        spd = root @ root.T + 0.05 * np.eye(d)
        eigval, eigvec = np.linalg.eigh(spd)

        def spd_power(p: float) -> np.ndarray:
            return (eigvec * eigval**p) @ eigvec.T

        pa, pb = rng.uniform(0.25, 2.0, size=2)
        lhs = float(np.trace(spd_power(pa + pb))) ** 2
        rhs = float(np.trace(spd_power(2 * pa))) * float(np.trace(spd_power(2 * pb)))
        record(lhs, rhs)

        h = rng.normal(size=(int(rng.integers(1, d + 1)), d))
        t = projector_from_hypothesis(h)
        ts = t @ spd
        for k in (1, 2):
            lhs = float(np.trace(np.linalg.matrix_power(ts, 2 * k)))
            rhs = float(np.trace(np.linalg.matrix_power(ts, k))) ** 2
            record(lhs, rhs)

        root2 = rng.normal(size=(d, d))
        spd2 = root2 @ root2.T + 0.05 * np.eye(d)
        m = t @ spd @ t @ spd2
        record(float(np.trace(m @ m)), float(np.trace(m)) ** 2)

    return InequalityReport(instances=checked, violations=violations, min_slack=min_slack)


def oracle_report(
    pair: ProjectionPair,
    design: SplitPlotDesign,
    quantities: tuple[str, ...] = ("tau_p", "moments", "traces"),
    alpha: float = 0.05,
    cap: int = MATERIALIZATION_CAP,
) -> list[tuple[str, float, str]]:
    """Rows (quantity, value, method) for the oracle CSV output."""
    rows: list[tuple[str, float, str]] = []
    for quantity in quantities:
        if quantity == "tau_p":
            rows.append(("tau_p", tau_p(pair, design, cap), "trace_powers"))
        elif quantity == "tau_cq":
            rows.append(("tau_cq", tau_cq(pair, design, cap), "trace_powers"))
        elif quantity == "moments":
            mom = exact_moments(pair, design, cap)
            rows.append(("mean_q", mom.mean_q, "blockwise"))
            rows.append(("var_q", mom.var_q, "blockwise"))
        elif quantity == "traces":
            for k in (1, 2, 3, 4):
                rows.append((f"trace_tv_{k}", trace_powers(pair, design, k, cap), "exact"))
        elif quantity == "levels":
            for test in ("psi_z", "psi_chi"):
                for regime in ("beta1_to_0", "beta1_to_1"):
                    rows.append(
                        (
                            f"level_{test}_{regime}",
                            asymptotic_level(test, alpha, regime),
                            "closed_form",
                        )
                    )
        elif quantity == "spectrum":
            spec = eigen_spectrum(pair, design, cap)
            rows.append(("lambda_max", float(spec.lambdas[0]), "eigendecomposition"))
            rows.append(("beta_max", float(spec.betas[0]), "eigendecomposition"))
        else:
            raise ValueError(f"unknown oracle quantity {quantity!r}")
    return rows
