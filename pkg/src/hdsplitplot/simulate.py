"""Monte Carlo studies: type-I error, power, and subsampling overlap checks.

Replications are the unit of work: each one derives its own seed from
(study seed, cell index, replication index), so results are identical no
matter how replications are ordered or distributed.  Studies append one CSV
row per finished cell and can resume from a partial output file, reproducing
the same counts.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .engine import chi2_quantile, normal_quantile, standardized_chi2_quantile
from .estimators import (
    GramTables,
    cube_subsampled_from_grams,
    pairwise_from_grams,
)
from .model import (
    SplitPlotDesign,
    TAG_OVERLAP,
    TAG_PAIR_SUB,
    ar1_covariance,
    derive_seed,
    sample,
    substream,
)
from .projections import ProjectionPair, standard_hypothesis

#: Dimension grid of the reference study and the desk-scale subset.
FULL_D_GRID = (5, 10, 20, 40, 70, 100, 150, 200, 300, 450, 600, 800)
DESK_D_GRID = (5, 10, 40, 100)

#: Cap on the total number of subsampled kernel evaluations per study.
DEFAULT_STUDY_CAP = 10_000_000_000

STUDY_CSV_FIELDS = (
    "hypothesis",
    "d",
    "n1",
    "n2",
    "delta",
    "test",
    "rejections",
    "n_sim",
    "rate",
    "se",
    "seed",
    "b_multiplier",
)

ALL_TESTS = ("phi_star", "psi_z", "psi_chi")


def parse_covariance(spec: str, d: int) -> np.ndarray:
    """Build one group covariance from a spec string: ``ar:RHO`` or ``csv:PATH``."""
    kind, _, arg = spec.partition(":")
    if kind == "ar":
        return ar1_covariance(d, float(arg))
    if kind == "csv":
        from .dataio import read_matrix_csv

        m = read_matrix_csv(arg)
        if m.shape != (d, d):
            raise ValueError(f"covariance in {arg} has shape {m.shape}, expected ({d}, {d})")
        return m
    raise ValueError(f"unknown covariance spec {spec!r}")


@dataclass
class SimConfig:
    """One study: hypothesis, design template and replication plan."""

    hypothesis: str = "time"
    n: tuple[int, ...] = (20, 30)
    d_grid: tuple[int, ...] = DESK_D_GRID
    cov_specs: tuple[str, ...] = ("ar:0.6", "ar:0.65")
    alpha: float = 0.05
    n_sim: int = 10_000
    b_multiplier: float = 500.0
    alternative: str = "null"  # null | trend | shift | one_point
    delta_grid: tuple[float, ...] = (0.0,)
    seed: int = 0
    tests: tuple[str, ...] = ALL_TESTS
    correction: bool = True
    study_cap: int = DEFAULT_STUDY_CAP

    def __post_init__(self) -> None:
        self.n = tuple(int(v) for v in self.n)
        self.d_grid = tuple(int(v) for v in self.d_grid)
        self.delta_grid = tuple(float(v) for v in self.delta_grid)
        self.tests = tuple(self.tests)
        if self.n_sim < 1:
            raise ValueError("n_sim must be >= 1")
        if len(self.n) != len(self.cov_specs):
            raise ValueError("need one covariance spec per group")
        if list(self.delta_grid) != sorted(self.delta_grid):
            raise ValueError("delta grid must be sorted ascending")
        if self.alternative not in ("null", "trend", "shift", "one_point"):
            raise ValueError(f"unknown alternative {self.alternative!r}")
        unknown = set(self.tests) - set(ALL_TESTS)
        if unknown:
            raise ValueError(f"unknown tests {sorted(unknown)}")


@dataclass(frozen=True)
class CellResult:
    """Rejection count for one (d, delta, test) cell."""

    hypothesis: str
    d: int
    n: tuple[int, ...]
    delta: float
    test: str
    rejections: int
    n_sim: int
    seed: int
    b_multiplier: float
    wall_time: float

    @property
    def rate(self) -> float:
        return self.rejections / self.n_sim

    @property
    def se(self) -> float:
        r = self.rate
        return math.sqrt(r * (1.0 - r) / self.n_sim)


@dataclass
class SimResult:
    rows: list[CellResult] = field(default_factory=list)

    def rate(self, d: int, test: str, delta: float = 0.0) -> float:
        for row in self.rows:
            if row.d == d and row.test == test and row.delta == delta:
                return row.rate
        raise KeyError(f"no cell (d={d}, delta={delta}, test={test})")

    def cell(self, d: int, test: str, delta: float = 0.0) -> CellResult:
        for row in self.rows:
            if row.d == d and row.test == test and row.delta == delta:
                return row
        raise KeyError(f"no cell (d={d}, delta={delta}, test={test})")


def _mean_for(alternative: str, delta: float, d: int) -> np.ndarray:
    """First-group mean under the configured alternative; other groups stay at zero."""
    if alternative == "null" or delta == 0.0:
        return np.zeros(d)
    if alternative == "shift":
        return np.full(d, delta)
    if alternative == "trend":
        return np.arange(1, d + 1) * (delta / d)
    if alternative == "one_point":
        out = np.zeros(d)
        out[0] = delta
        return out
    raise ValueError(f"unknown alternative {alternative!r}")


def _simulate_cell(
    design: SplitPlotDesign,
    pair: ProjectionPair,
    config: SimConfig,
    cell_index: int,
    b_draws: int,
) -> dict[str, int]:
    """Rejection counts for each requested test over n_sim replications."""
    need_f = "phi_star" in config.tests
    n_sim = config.n_sim
    ws = np.empty(n_sim)
    fh = np.empty(n_sim) if need_f else None
    big_n = design.total
    weights = big_n / np.asarray(design.n, dtype=float)
    diag_tw = np.diag(pair.t_whole)
    corr = math.sqrt(big_n / (big_n - 1.0)) if config.correction else 1.0
    rank_cap = design.a * design.d

    for rep in range(n_sim):
        rep_seed = derive_seed(config.seed, cell_index, rep)
        smp = sample(design, rep_seed)
        grams = GramTables.build(smp, pair)
        a1, _, _, a4 = pairwise_from_grams(grams)
        means = smp.group_means
        q = big_n * float((pair.t_whole * ((means @ pair.t_sub) @ means.T)).sum())
        e_hat = float((weights * diag_tw * a1).sum())
        ws[rep] = (q - e_hat) / math.sqrt(2.0 * a4) * corr
        if need_f:
            c5 = cube_subsampled_from_grams(
                grams, b_draws, substream(rep_seed, TAG_PAIR_SUB)
            )
            tau = min(max(c5**2 / a4**3, 0.0), 1.0)
            fh[rep] = 1.0 / max(tau, 1.0 / rank_cap)

    counts: dict[str, int] = {}
    if config.alpha >= 1.0:  # degenerate level: every test rejects
        return {t: n_sim for t in config.tests}
    for test in config.tests:
        if test == "psi_z":
            crit = normal_quantile(1.0 - config.alpha)
            counts[test] = int((ws > crit).sum())
        elif test == "psi_chi":
            crit = standardized_chi2_quantile(1.0, 1.0 - config.alpha)
            counts[test] = int((ws > crit).sum())
        else:
            crit = (chi2_quantile(fh, 1.0 - config.alpha) - fh) / np.sqrt(2.0 * fh)
            counts[test] = int((ws > crit).sum())
    return counts


def _read_done_cells(path: Path) -> set[tuple[str, int, float, str]]:
    done = set()
    if not path.exists():
        return done
    with open(path) as fh:
        header: list[str] | None = None
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if header is None:
                header = parts
                continue
            row = dict(zip(header, parts))
            done.add((row["hypothesis"], int(row["d"]), float(row["delta"]), row["test"]))
    return done


def _append_rows(path: Path, rows: list[CellResult]) -> None:
    new_file = not path.exists()
    with open(path, "a") as fh:
        if new_file:
            fh.write(f"# hdsplitplot={__version__}\n")
            fh.write(",".join(STUDY_CSV_FIELDS) + "\n")
        for row in rows:
            n1 = row.n[0]
            n2 = row.n[1] if len(row.n) > 1 else ""
            fh.write(
                f"{row.hypothesis},{row.d},{n1},{n2},{row.delta},{row.test},"
                f"{row.rejections},{row.n_sim},{row.rate},{row.se},"
                f"{row.seed},{row.b_multiplier}\n"
            )


def run_study(config: SimConfig, out_path: str | Path | None = None) -> SimResult:
    """Execute every (d, delta) cell of the study, appending rows as cells finish."""
    big_n = sum(config.n)
    b_draws = int(round(config.b_multiplier * big_n))
    need_f = "phi_star" in config.tests
    total_draws = len(config.d_grid) * len(config.delta_grid) * config.n_sim * (
        b_draws if need_f else 0
    )
    if total_draws > config.study_cap:
        raise ValueError(
            f"study would evaluate {total_draws} subsampled kernels, above the cap "
            f"of {config.study_cap}; shrink the grids or raise study_cap"
        )
    path = Path(out_path) if out_path is not None else None
    done = _read_done_cells(path) if path is not None else set()

    result = SimResult()
    for d_index, d in enumerate(config.d_grid):
        covs = np.stack([parse_covariance(cs, d) for cs in config.cov_specs])
        pair = standard_hypothesis(config.hypothesis, a=len(config.n), d=d)
        for delta_index, delta in enumerate(config.delta_grid):
            pending = [
                t for t in config.tests
                if (config.hypothesis, d, delta, t) not in done
            ]
            if not pending:
                continue
            means = np.zeros((len(config.n), d))
            means[0] = _mean_for(config.alternative, delta, d)
            design = SplitPlotDesign(means=means, covariances=covs, n=config.n)
            cell_index = d_index * 10_000 + delta_index
            started = time.time()
            cell_config = replace(config, tests=tuple(pending))
            counts = _simulate_cell(design, pair, cell_config, cell_index, b_draws)
            elapsed = time.time() - started
            rows = [
                CellResult(
                    hypothesis=config.hypothesis,
                    d=d,
                    n=config.n,
                    delta=delta,
                    test=test,
                    rejections=counts[test],
                    n_sim=config.n_sim,
                    seed=config.seed,
                    b_multiplier=config.b_multiplier,
                    wall_time=elapsed,
                )
                for test in pending
            ]
            result.rows.extend(rows)
            if path is not None:
                _append_rows(path, rows)
    return result


def type_one_error_study(config: SimConfig, out_path: str | Path | None = None) -> SimResult:
    """Null rejection rates across the dimension grid."""
    if config.alternative != "null":
        raise ValueError("type-I error study requires the null alternative")
    return run_study(config, out_path)


def power_study(config: SimConfig, out_path: str | Path | None = None) -> SimResult:
    """Rejection rates across a delta grid; delta 0 reproduces the null rate."""
    if config.alternative == "null":
        raise ValueError("power study requires a non-null alternative")
    if 0.0 not in config.delta_grid:
        raise ValueError("delta grid must include 0")
    return run_study(config, out_path)


# ---------------------------------------------------------------------------
# subsampling overlap
# ---------------------------------------------------------------------------


def overlap_expected(n: tuple[int, ...], m: int, b_draws: int) -> float:
    """Expected fraction of draw pairs that share at least one index somewhere.

    Closed form: 1 - (1 - 1/B) prod_i C(n_i - m, m) / C(n_i, m); pairs (b, b)
    always share indices, hence the 1/B term.
    """
    for ni in n:
        if m > ni:
            raise ValueError(f"subsample length {m} exceeds group size {ni}")
    prod = 1.0
    for ni in n:
        prod *= math.comb(ni - m, m) / math.comb(ni, m)
    return 1.0 - (1.0 - 1.0 / b_draws) * prod


@dataclass(frozen=True)
class OverlapReport:
    empirical: float
    expected: float
    se: float
    reps: int

    @property
    def within_3se(self) -> bool:
        return abs(self.empirical - self.expected) <= 3.0 * self.se


def subsample_overlap_study(
    n: tuple[int, ...], m: int, b_draws: int, reps: int, seed: int
) -> OverlapReport:
    """Empirically check the overlap fraction of independent subsample draws."""
    expected = overlap_expected(tuple(n), m, b_draws)
    rng = substream(seed, TAG_OVERLAP)
    fractions = np.empty(reps)
    for rep in range(reps):
        disjoint = np.ones((b_draws, b_draws), dtype=bool)
        for ni in n:
            if ni > 63:
                raise ValueError("empirical overlap check supports group sizes up to 63")
            draws = _draw_masks(rng, ni, b_draws, m)
            disjoint &= (draws[:, None] & draws[None, :]) == 0
        np.fill_diagonal(disjoint, False)
        fractions[rep] = 1.0 - disjoint.sum() / (b_draws * b_draws)
    se = float(fractions.std(ddof=1) / math.sqrt(reps)) if reps > 1 else float("inf")
    return OverlapReport(
        empirical=float(fractions.mean()), expected=expected, se=se, reps=reps
    )


def _draw_masks(rng: np.random.Generator, n: int, b_draws: int, m: int) -> np.ndarray:
    base = np.tile(np.arange(n), (b_draws, 1))
    rng.permuted(base, axis=1, out=base)
    masks = np.zeros(b_draws, dtype=np.uint64)
    for col in range(m):
        masks |= np.uint64(1) << base[:, col].astype(np.uint64)
    return masks


# ---------------------------------------------------------------------------
# named presets mirroring the reference study layout
# ---------------------------------------------------------------------------


def preset(name: str) -> SimConfig:
    """Benchmark scenarios: fig1-dD (group null), fig2-dD (time null),
    fig3-trend-group / fig3-trend-time, fig4-shift / fig4-onepoint."""
    base = SimConfig()
    if name.startswith("fig1-d") or name.startswith("fig2-d"):
        d = int(name.split("-d")[1])
        return replace(
            base,
            hypothesis="group" if name.startswith("fig1") else "time",
            d_grid=(d,),
            alternative="null",
            delta_grid=(0.0,),
        )
    power_grid = tuple(np.linspace(0.0, 3.0, 7))
    if name == "fig3-trend-group":
        return replace(base, hypothesis="group", d_grid=(10, 40, 100),
                       alternative="trend", delta_grid=power_grid, n_sim=2000)
    if name == "fig3-trend-time":
        return replace(base, hypothesis="time", d_grid=(10, 40, 100),
                       alternative="trend", delta_grid=power_grid, n_sim=2000)
    if name == "fig4-shift":
        return replace(base, hypothesis="group", d_grid=(10, 40, 100),
                       alternative="shift", delta_grid=power_grid, n_sim=2000)
    if name == "fig4-onepoint":
        return replace(base, hypothesis="time", d_grid=(10, 40, 100),
                       alternative="one_point", delta_grid=power_grid, n_sim=2000)
    raise ValueError(f"unknown preset {name!r}")
