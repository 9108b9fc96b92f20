"""Split-plot designs, observed samples, and synthetic Gaussian data.

A design holds ``a`` independent groups of ``d``-variate normal observations
with group-specific means and covariances.  Sampling uses a counter-based
(Philox) generator with substreams derived by hashing the user seed together
with a stream path, so replications and groups can be drawn in any order
without affecting the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_U64 = 0xFFFFFFFFFFFFFFFF

# Stream tags keeping the sampling, estimator and harness substreams apart.
TAG_SAMPLE = 1
TAG_PAIR_SUB = 2
TAG_QUAD_SUB = 3
TAG_PERM = 4
TAG_SUITE = 5
TAG_REPRESENTATION = 6
TAG_REPLICATION = 7
TAG_OVERLAP = 8


class NotPositiveDefiniteError(ValueError):
    """A covariance matrix has no Cholesky factorization."""


def substream(seed: int, *path: int) -> np.random.Generator:
    """Philox generator keyed by hashing ``(seed, *path)``."""
    return np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed & _U64, *path]))
    )


def derive_seed(seed: int, *path: int) -> int:
    """Fold ``(seed, *path)`` into a fresh 64-bit seed for child computations."""
    state = np.random.SeedSequence([seed & _U64, *path]).generate_state(2)
    return int(state[0]) | (int(state[1]) << 32)


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    """First-order autoregressive covariance: entry (i, j) equals rho**|i-j|."""
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if not abs(rho) < 1.0:
        raise ValueError(f"autoregression parameter must satisfy |rho| < 1, got {rho}")
    idx = np.arange(d)
    return float(rho) ** np.abs(idx[:, None] - idx[None, :])


@dataclass
class SplitPlotDesign:
    """Generative truth: group means, covariances and sample sizes.

    means        (a, d) matrix of group mean vectors
    covariances  (a, d, d) stack of symmetric positive definite matrices
    n            group sizes, each at least 2
    """

    means: np.ndarray
    covariances: np.ndarray
    n: tuple[int, ...]
    _chol: list[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None, :, :]
        self.n = tuple(int(v) for v in self.n)
        a, d = self.means.shape
        if a < 1 or d < 1:
            raise ValueError("design needs at least one group and one coordinate")
        if self.covariances.shape != (a, d, d):
            raise ValueError(
                f"covariance stack must have shape {(a, d, d)}, got {self.covariances.shape}"
            )
        if len(self.n) != a:
            raise ValueError(f"need {a} group sizes, got {len(self.n)}")
        if any(ni < 2 for ni in self.n):
            raise ValueError(f"every group needs at least 2 subjects, got n={self.n}")
        self._chol = []
        for i, sigma in enumerate(self.covariances):
            if np.abs(sigma - sigma.T).max() > 1e-10:
                raise ValueError(f"covariance of group {i + 1} is not symmetric")
            try:
                self._chol.append(np.linalg.cholesky(sigma))
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    f"covariance of group {i + 1} is not positive definite"
                ) from exc

    @property
    def a(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def total(self) -> int:
        return sum(self.n)

    @property
    def weights(self) -> np.ndarray:
        """Group-size fractions n_i / N."""
        return np.asarray(self.n, dtype=float) / self.total


@dataclass
class SplitPlotSample:
    """Observed data: one (n_i, d) observation matrix per group."""

    groups: list[np.ndarray]

    def __post_init__(self) -> None:
        if not self.groups:
            raise ValueError("sample needs at least one group")
        self.groups = [np.atleast_2d(np.asarray(g, dtype=float)) for g in self.groups]
        d = self.groups[0].shape[1]
        for i, g in enumerate(self.groups):
            if g.shape[1] != d:
                raise ValueError(
                    f"group {i + 1} has {g.shape[1]} coordinates, expected {d}"
                )
            if not np.all(np.isfinite(g)):
                raise ValueError(f"group {i + 1} contains non-finite values")

    @property
    def a(self) -> int:
        return len(self.groups)

    @property
    def d(self) -> int:
        return self.groups[0].shape[1]

    @property
    def n(self) -> tuple[int, ...]:
        return tuple(g.shape[0] for g in self.groups)

    @property
    def total(self) -> int:
        return sum(self.n)

    @property
    def group_means(self) -> np.ndarray:
        """(a, d) matrix whose rows are the group mean vectors."""
        return np.vstack([g.mean(axis=0) for g in self.groups])


def sample(design: SplitPlotDesign, seed: int) -> SplitPlotSample:
    """Draw one sample from the design, deterministically in ``seed``.

    Each group uses its own substream keyed by (seed, group index), so groups
    are independent and may be generated concurrently.
    """
    groups = []
    for i in range(design.a):
        rng = substream(seed, TAG_SAMPLE, i)
        z = rng.standard_normal((design.n[i], design.d))
        groups.append(design.means[i] + z @ design._chol[i].T)
    return SplitPlotSample(groups)


def pooled_mean(s: SplitPlotSample) -> np.ndarray:
    """Concatenated group means as one vector of length a*d."""
    return s.group_means.reshape(-1)
