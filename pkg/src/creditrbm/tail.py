"""Portfolio losses, Monte Carlo tail functions P(L > x) and VaR."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError, InsufficientTailDepthError
from .rbm import RbmParameters, binary_states, exact_visible_marginal, gibbs_steps, uniform_visible
from .rng import RngLike, as_generator

Z95 = 1.959963984540054

# sampler(M, generator) -> array of M losses
LossSampler = Callable[[int, np.random.Generator], np.ndarray]


def portfolio_loss(defaults, recoveries=None, exposures=None):
    """sum_i e_i d_i (1 - r_i); vectorised over rows of ``defaults``."""
    d = np.asarray(defaults, dtype=np.float64)
    lgd = np.ones(d.shape[-1])
    if recoveries is not None:
        r = np.asarray(recoveries, dtype=np.float64)
        if r.shape[-1] != d.shape[-1]:
            raise DataError("recoveries and defaults differ in length")
        if np.any((r < 0) | (r > 1)):
            raise DataError("recovery rates must lie in [0, 1]")
        lgd = 1.0 - r
    if exposures is not None:
        e = np.asarray(exposures, dtype=np.float64)
        if e.shape[-1] != d.shape[-1]:
            raise DataError("exposures and defaults differ in length")
        lgd = lgd * e
    return (d * lgd).sum(axis=-1)


def sample_recoveries(n: int, rng: RngLike, size=None) -> np.ndarray:
    """i.i.d. Beta(1/2, 1/2) recovery rates; ``size`` prepends a batch shape."""
    if n < 1:
        raise ValueError("n must be >= 1")
    shape = (n,) if size is None else (size, n)
    return as_generator(rng).beta(0.5, 0.5, size=shape)


def default_thresholds(n: int) -> np.ndarray:
    """Relative-loss grid {0, 1/n, ..., 1}."""
    return np.arange(n + 1) / n


def wilson_interval(k, m, z=Z95):
    k = np.asarray(k, dtype=np.float64)
    p = k / m
    denom = 1.0 + z * z / m
    centre = (p + z * z / (2 * m)) / denom
    half = z * np.sqrt(p * (1 - p) / m + z * z / (4 * m * m)) / denom
    return np.clip(centre - half, 0.0, 1.0), np.clip(centre + half, 0.0, 1.0)


@dataclass
class TailCurve:
    thresholds: np.ndarray
    estimates: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    method: str
    samples: int
    # smallest probability the estimator can resolve (1/M for plain MC)
    resolution: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        for name in ("estimates", "ci_low", "ci_high"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if np.any(np.diff(self.thresholds) <= 0):
            raise DataError("tail curve thresholds must be strictly increasing")

    def is_monotone(self) -> bool:
        """Non-increasing estimates, tolerating wiggles inside overlapping CIs."""
        for k in np.flatnonzero(np.diff(self.estimates) > 0):
            if self.ci_high[k] < self.ci_low[k + 1]:
                return False
        return True

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["threshold", "estimate", "ci_low", "ci_high", "method", "M"])
            for row in zip(self.thresholds, self.estimates, self.ci_low, self.ci_high):
                out.writerow([repr(float(x)) for x in row] + [self.method, self.samples])

    @classmethod
    def read_csv(cls, path) -> "TailCurve":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise DataError(f"{path}: empty tail curve")
        col = lambda k: np.array([float(r[k]) for r in rows])  # noqa: E731
        method, m = rows[0]["method"], int(rows[0]["M"])
        est = col("estimate")
        positive = est[est > 0]
        resolution = 1.0 / m if method == "mc" else (positive.min() if positive.size else 0.0)
        return cls(col("threshold"), est, col("ci_low"), col("ci_high"), method, m, float(resolution))


def tail_from_losses(losses, thresholds, method: str = "mc", metadata=None) -> TailCurve:
    """Empirical exceedance frequencies with Wilson 95% intervals.

    Thresholds with no exceedances report 0 with the rule-of-three upper
    bound 3/M.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    m = losses.size
    thresholds = np.asarray(thresholds, dtype=np.float64)
    counts = (losses[None, :] > thresholds[:, None]).sum(axis=1)
    est = counts / m
    lo, hi = wilson_interval(counts, m)
    zero = counts == 0
    lo[zero] = 0.0
    hi[zero] = 3.0 / m
    return TailCurve(thresholds, est, lo, hi, method, m, 1.0 / m, dict(metadata or {}))


def mc_tail(sampler: LossSampler, thresholds, M: int, rng: RngLike, metadata=None) -> TailCurve:
    if M < 100:
        raise ValueError("M must be >= 100")
    losses = np.asarray(sampler(M, as_generator(rng)), dtype=np.float64)
    if losses.shape != (M,):
        raise DataError(f"sampler returned shape {losses.shape}, expected ({M},)")
    return tail_from_losses(losses, thresholds, "mc", metadata)


def rbm_loss_sampler(
    params: RbmParameters,
    burn_in: int = 1000,
    recoveries: bool = False,
    relative: bool = False,
    obligors=None,
) -> LossSampler:
    """Losses from independent Gibbs chains (one per sample) after ``burn_in``."""
    idx = np.arange(params.n_visible) if obligors is None else np.asarray(obligors)

    def sample(m, gen):
        v, _ = gibbs_steps(params, uniform_visible(params.n_visible, m, gen), burn_in, gen)
        d = v[:, idx]
        rec = sample_recoveries(idx.size, gen, size=m) if recoveries else None
        loss = portfolio_loss(d, rec)
        return loss / idx.size if relative else loss

    return sample


def exact_loss_pmf(params: RbmParameters, obligors=None) -> np.ndarray:
    """P(L = k), k = 0..n, by enumeration (tiny models only)."""
    states = binary_states(params.n_visible)
    idx = np.arange(params.n_visible) if obligors is None else np.asarray(obligors)
    counts = states[:, idx].sum(axis=1).astype(np.int64)
    return np.bincount(counts, weights=exact_visible_marginal(params), minlength=idx.size + 1)


def exact_tail(pmf, thresholds, support=None) -> TailCurve:
    """Tail curve of a known discrete loss distribution (CI collapses to the value)."""
    pmf = np.asarray(pmf, dtype=np.float64)
    support = np.arange(pmf.size, dtype=np.float64) if support is None else np.asarray(support, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    est = np.array([pmf[support > x].sum() for x in thresholds])
    return TailCurve(thresholds, est, est.copy(), est.copy(), "exact", 0, 0.0)


@dataclass(frozen=True)
class VarEstimate:
    alpha: float
    value: float
    ci_low: float
    ci_high: float
    method: str = ""


def _first_below(thresholds, values, level):
    hit = np.flatnonzero(values <= level)
    return float(thresholds[hit[0]]) if hit.size else np.inf


def var_from_tail(curve: TailCurve, alpha: float) -> VarEstimate:
    """Smallest threshold whose tail estimate is <= 1 - alpha.

    The interval inverts the CI envelopes at the same level: the lower VaR
    bound comes from ``ci_low``, the upper from ``ci_high`` (infinite when the
    upper envelope never drops to 1 - alpha on the grid).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    level = 1.0 - alpha
    if level < curve.resolution:
        raise InsufficientTailDepthError(
            f"insufficient tail depth: 1 - alpha = {level:.3g} is below the curve resolution "
            f"{curve.resolution:.3g}; deepest resolvable confidence level is {1 - curve.resolution:.6g}",
            deepest_level=1.0 - curve.resolution,
        )
    value = _first_below(curve.thresholds, curve.estimates, level)
    if not np.isfinite(value):
        deepest = 1.0 - float(curve.estimates.min())
        raise InsufficientTailDepthError(
            f"insufficient tail depth: no threshold has tail probability <= {level:.3g}; "
            f"deepest resolvable confidence level is {deepest:.6g}",
            deepest_level=deepest,
        )
    lo = _first_below(curve.thresholds, curve.ci_low, level)
    hi = _first_below(curve.thresholds, curve.ci_high, level)
    return VarEstimate(alpha, value, min(lo, value), max(hi, value), curve.method)


def write_var_table(estimates, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["alpha", "var", "ci_low", "ci_high", "method"])
        for e in estimates:
            out.writerow([repr(e.alpha), repr(e.value), repr(e.ci_low), repr(e.ci_high), e.method])


def curve_provenance(curve: TailCurve) -> str:
    return json.dumps({"method": curve.method, "M": curve.samples, **curve.metadata}, sort_keys=True, default=float)
