"""The studentized quadratic-form test and its decision rules.

The statistic is ``w = (q - e_hat) / sqrt(var_hat)`` where ``q`` is the
scaled quadratic form of the pooled group means under the hypothesis
projector, ``e_hat`` the estimated null mean and ``var_hat`` twice the
estimated squared trace.  Three decisions are reported:

- ``phi_star``: compare against the upper quantile of the standardized
  chi-square family with estimated degrees of freedom (three-moment match),
- ``psi_z``: compare against the standard normal quantile,
- ``psi_chi``: compare against the standardized chi-square(1) quantile.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import __version__
from .estimators import (
    DegenerateVarianceError,
    InsufficientSampleError,
    TraceEstimates,
    estimate_traces,
)
from .model import SplitPlotSample
from .projections import ProjectionPair

#: Multiplier rule for subsample draws when analysing a single dataset.
ANALYSIS_B_MULTIPLIER = 50_000


# ---------------------------------------------------------------------------
# reference distributions
# ---------------------------------------------------------------------------


def chi2_cdf(f: float, x: float):
    """Chi-square CDF with (possibly non-integer) f > 0 degrees of freedom."""
    if f <= 0.0:
        raise ValueError(f"degrees of freedom must be positive, got {f}")
    return special.gammainc(f / 2.0, np.maximum(np.asarray(x, dtype=float), 0.0) / 2.0)


def chi2_quantile(f, p):
    """Inverse chi-square CDF via the regularized incomplete gamma function."""
    f = np.asarray(f, dtype=float)
    p = np.asarray(p, dtype=float)
    if np.any(f <= 0.0):
        raise ValueError("degrees of freedom must be positive")
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("probability must lie strictly between 0 and 1")
    out = 2.0 * special.gammaincinv(f / 2.0, p)
    return float(out) if out.ndim == 0 else out


def normal_cdf(x):
    return special.ndtr(x)


def normal_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("probability must lie strictly between 0 and 1")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def standardized_chi2_quantile(f, p):
    """p-quantile of (chi2_f - f) / sqrt(2 f)."""
    f = np.asarray(f, dtype=float)
    if np.any(f < 1.0):
        raise ValueError("degrees of freedom below 1 are not meaningful here")
    out = (chi2_quantile(f, p) - f) / np.sqrt(2.0 * f)
    return float(out) if np.ndim(out) == 0 else out


def p_value_from(w: float, f: float) -> float:
    """Upper tail probability of the standardized chi-square family at ``w``."""
    if f < 1.0:
        raise ValueError("degrees of freedom below 1 are not meaningful here")
    x = math.sqrt(2.0 * f) * w + f
    if x <= 0.0:
        return 1.0
    return float(1.0 - chi2_cdf(f, x))


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------


def q_statistic(s: SplitPlotSample, pair: ProjectionPair) -> float:
    """N times the quadratic form of the pooled group means, blockwise."""
    if pair.a != s.a or pair.d != s.d:
        raise ValueError(
            f"projection pair is ({pair.a}, {pair.d}) but sample is ({s.a}, {s.d})"
        )
    means = s.group_means
    cross = (means @ pair.t_sub) @ means.T
    return float(s.total * (pair.t_whole * cross).sum())


def w_statistic(
    s: SplitPlotSample,
    pair: ProjectionPair,
    estimates: TraceEstimates,
    correct: bool = True,
) -> float:
    """Studentized quadratic form, optionally with the sqrt(N/(N-1)) factor."""
    if estimates.a4 is None or estimates.a4 <= 0.0:
        raise DegenerateVarianceError("estimated null variance is zero")
    w = (q_statistic(s, pair) - null_mean(s, pair, estimates)) / math.sqrt(
        2.0 * estimates.a4
    )
    if correct:
        w *= math.sqrt(s.total / (s.total - 1.0))
    return w


def null_mean(s: SplitPlotSample, pair: ProjectionPair, estimates: TraceEstimates) -> float:
    weights = s.total / np.asarray(s.n, dtype=float)
    return float((weights * np.diag(pair.t_whole) * estimates.a1).sum())


# ---------------------------------------------------------------------------
# full test
# ---------------------------------------------------------------------------


@dataclass
class TestResult:
    """Everything the test produced, ready for serialization."""

    q: float
    e_hat: float
    var_hat: float
    w: float
    f_hat: float | None
    p_value: float | None
    decisions: dict[str, bool | None]
    alpha: float
    correction_applied: bool
    estimator_meta: dict = field(default_factory=dict)

    CSV_FIELDS = (
        "q",
        "e_hat",
        "var_hat",
        "w",
        "f_hat",
        "p_value",
        "reject_phi_star",
        "reject_psi_z",
        "reject_psi_chi",
        "alpha",
        "seed",
        "B",
    )

    def flat(self) -> dict:
        def fmt(v):
            return "" if v is None else v

        return {
            "q": self.q,
            "e_hat": self.e_hat,
            "var_hat": self.var_hat,
            "w": self.w,
            "f_hat": fmt(self.f_hat),
            "p_value": fmt(self.p_value),
            "reject_phi_star": fmt(self.decisions.get("phi_star")),
            "reject_psi_z": self.decisions["psi_z"],
            "reject_psi_chi": self.decisions["psi_chi"],
            "alpha": self.alpha,
            "seed": fmt(self.estimator_meta.get("seed")),
            "B": fmt(self.estimator_meta.get("B")),
        }

    def to_csv(self) -> str:
        flat = self.flat()
        header = ",".join(self.CSV_FIELDS)
        row = ",".join(str(flat[k]) for k in self.CSV_FIELDS)
        return f"# hdsplitplot={__version__}\n{header}\n{row}\n"

    def to_json(self) -> str:
        payload = self.flat()
        payload = {k: (None if v == "" else v) for k, v in payload.items()}
        payload["version"] = __version__
        return json.dumps(payload, indent=2)


def run_test(
    s: SplitPlotSample,
    pair: ProjectionPair,
    alpha: float = 0.05,
    b_draws: int | None = None,
    seed: int = 0,
    correction: bool = True,
    mode: str = "efficient",
    dof_estimator: str = "c5",
    n_perms: int = 1,
) -> TestResult:
    """Run all three tests on one sample.

    ``b_draws`` defaults to 50000 * N, the single-dataset analysis rule.
    When the smallest group has fewer than 6 observations the degrees of
    freedom cannot be estimated; the result then carries only the two
    fixed-critical-value decisions and a warning is emitted.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if b_draws is None:
        b_draws = ANALYSIS_B_MULTIPLIER * s.total

    dof_feasible = min(s.n) >= 6
    if not dof_feasible:
        warnings.warn(
            "smallest group has fewer than 6 observations; degrees of freedom "
            "cannot be estimated and only the fixed-critical-value tests are run",
            stacklevel=2,
        )
    est = estimate_traces(
        s,
        pair,
        mode=mode,
        b_draws=b_draws,
        n_perms=n_perms,
        seed=seed,
        dof_estimator=dof_estimator,
        with_dof=dof_feasible,
    )
    q = q_statistic(s, pair)
    e_hat = null_mean(s, pair, est)
    if est.a4 is None or est.a4 <= 0.0:
        raise DegenerateVarianceError("estimated null variance is zero")
    var_hat = 2.0 * est.a4
    w = (q - e_hat) / math.sqrt(var_hat)
    if correction:
        w *= math.sqrt(s.total / (s.total - 1.0))

    decisions: dict[str, bool | None] = {
        "psi_z": bool(w > normal_quantile(1.0 - alpha)),
        "psi_chi": bool(w > standardized_chi2_quantile(1.0, 1.0 - alpha)),
    }
    f_hat = est.f_p_hat
    if dof_feasible:
        p = p_value_from(w, f_hat)
        decisions["phi_star"] = bool(w > standardized_chi2_quantile(f_hat, 1.0 - alpha))
    else:
        p = None
        decisions["phi_star"] = None
    return TestResult(
        q=q,
        e_hat=e_hat,
        var_hat=var_hat,
        w=w,
        f_hat=f_hat,
        p_value=p,
        decisions=decisions,
        alpha=alpha,
        correction_applied=correction,
        estimator_meta=dict(est.meta),
    )


def factorial_battery(
    s: SplitPlotSample,
    structure: tuple[int, int],
    alpha: float = 0.05,
    b_draws: int | None = None,
    seed: int = 0,
    correction: bool = True,
    mode: str = "efficient",
) -> list[tuple[str, TestResult]]:
    """Run the full hypothesis battery for a crossed sub-plot layout.

    For a q x s sub-plot structure this covers the group, time and
    interaction hypotheses, the within-level time hypotheses for each of the
    q first-factor levels, and the pairwise between-level hypotheses.
    """
    from .projections import standard_hypothesis

    q_levels, _ = structure
    kinds = ["group", "time", "interaction"]
    kinds += [f"time_within:{lev}" for lev in range(1, q_levels + 1)]
    kinds += [
        f"between:{lev},{other}"
        for lev in range(1, q_levels + 1)
        for other in range(lev + 1, q_levels + 1)
    ]
    results = []
    for offset, kind in enumerate(kinds):
        pair = standard_hypothesis(kind, a=s.a, d=s.d, structure=structure)
        res = run_test(
            s,
            pair,
            alpha=alpha,
            b_draws=b_draws,
            seed=seed + offset,
            correction=correction,
            mode=mode,
        )
        results.append((kind, res))
    return results
