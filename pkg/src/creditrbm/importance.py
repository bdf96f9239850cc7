"""Exponential tilting of the visible layer, partition-ratio estimation and
importance-sampled tail curves.

Tilting by t multiplies the visible marginal by exp(t * sum_i v_i), which for
an RBM is the same as adding t to the visible biases of the tilted units. The
moment generating function of the loss count is then the partition ratio
Z_t / Z.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DataError, NumericalError, TargetUnreachableError
from .rbm import (
    RbmParameters,
    binary_states,
    exact_partition,
    exact_visible_marginal,
    gibbs_steps,
    uniform_visible,
)
from .rng import RngLike, RngStream, as_generator
from .tail import Z95, TailCurve, rbm_loss_sampler

log = logging.getLogger(__name__)

DEFAULT_T_MAX = 10.0


def _unit_mask(n_visible: int, units) -> np.ndarray:
    if units is None:
        return np.ones(n_visible)
    mask = np.zeros(n_visible)
    idx = np.asarray(units, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n_visible):
        raise DataError("tilted unit index out of range")
    mask[idx] = 1.0
    return mask


@dataclass(frozen=True)
class TiltedRbm:
    """Base model with visible biases shifted by t on ``units`` (all by default)."""

    base: RbmParameters
    t: float
    units: tuple | None = None

    def __post_init__(self):
        if not self.t >= 0:
            raise ValueError(f"tilt must be non-negative, got {self.t}")

    @property
    def mask(self) -> np.ndarray:
        return _unit_mask(self.base.n_visible, self.units)

    @property
    def params(self) -> RbmParameters:
        if self.t == 0:
            return self.base
        return self.base.replace(visible_bias=self.base.visible_bias + self.t * self.mask)


def tilt(params: RbmParameters, t: float, units=None) -> TiltedRbm:
    return TiltedRbm(params, float(t), None if units is None else tuple(int(i) for i in units))


def mgf_exact(params: RbmParameters, t: float, units=None) -> float:
    """log Gamma(t) = log E[exp(t * L)], by enumeration."""
    tilted = tilt(params, t, units).params
    if tilted is params:
        return 0.0
    return exact_partition(tilted) - exact_partition(params)


def tilted_mean_loss(params: RbmParameters, t: float, units=None) -> float:
    """Exact E_t[sum of tilted units] by enumeration."""
    tilted = tilt(params, t, units)
    counts = binary_states(params.n_visible) @ tilted.mask
    return float(counts @ exact_visible_marginal(tilted.params))


@dataclass(frozen=True)
class RatioEstimate:
    """Estimate of Z_t / Z carried in the log domain.

    ``std_dev`` is the standard error of the linear-domain mean;
    ``relative_stderr`` = std_dev / ratio is kept separately so it stays finite
    when the ratio itself would overflow.
    """

    log_ratio: float
    std_dev: float
    temperatures: int
    runs: int
    relative_stderr: float = 0.0

    @property
    def ratio(self) -> float:
        return float(np.exp(self.log_ratio))

    @classmethod
    def exact(cls, log_ratio: float) -> "RatioEstimate":
        return cls(float(log_ratio), 0.0, 0, 0, 0.0)

    @classmethod
    def from_log_weights(cls, log_weights, temperatures: int) -> "RatioEstimate":
        lw = np.asarray(log_weights, dtype=np.float64)
        m = lw.size
        if m < 2:
            raise ValueError("need at least 2 runs")
        bad = np.flatnonzero(~np.isfinite(lw))
        if bad.size:
            raise NumericalError(f"non-finite importance weight in run {int(bad[0])}")
        log_mean = float(logsumexp(lw) - np.log(m))
        rel = np.exp(lw - log_mean)  # weights divided by their mean
        rel_se = float(np.std(rel, ddof=1) / np.sqrt(m))
        return cls(log_mean, float(np.exp(log_mean) * rel_se), temperatures, m, rel_se)


def ais_ratio(
    params: RbmParameters,
    tstar: float,
    temperatures: int = 20_000,
    runs: int = 100,
    rng: RngLike = 0,
    burn_in: int = 1000,
    units=None,
) -> RatioEstimate:
    """Annealed importance sampling estimate of Z_{t*} / Z.

    Runs start from base-model samples (``burn_in`` Gibbs steps from fair
    coins) and move through a uniform grid t_1 = 0 < ... < t_T = t*. At each
    rung the run picks up exp((t_k - t_{k-1}) * S(v)) evaluated on its current
    state, then takes one blocked Gibbs step under the model tilted by t_k.
    """
    if temperatures < 2 or runs < 2:
        raise ValueError("need temperatures >= 2 and runs >= 2")
    if tstar < 0:
        raise ValueError("tstar must be non-negative")
    if tstar == 0:
        return RatioEstimate(0.0, 0.0, temperatures, runs, 0.0)
    gen = as_generator(rng)
    mask = _unit_mask(params.n_visible, units)
    w, b, c = params.weights, params.visible_bias, params.hidden_bias
    grid = np.linspace(0.0, tstar, temperatures)
    v, _ = gibbs_steps(params, uniform_visible(params.n_visible, runs, gen), burn_in, gen)
    log_w = np.zeros(runs)
    for k in range(1, temperatures):
        log_w += (grid[k] - grid[k - 1]) * (v @ mask)
        if k == temperatures - 1:
            break
        bk = b + grid[k] * mask
        h = (gen.random((runs, w.shape[0])) < expit(v @ w.T + c)).astype(np.float64)
        v = (gen.random((runs, w.shape[1])) < expit(h @ w + bk)).astype(np.float64)
    return RatioEstimate.from_log_weights(log_w, temperatures)


def naive_ratio(
    params: RbmParameters, tstar: float, runs: int, rng: RngLike = 0, burn_in: int = 1000, units=None
) -> RatioEstimate:
    """Plain Monte Carlo mean of exp(t* S) over base-model samples."""
    if runs < 2:
        raise ValueError("need runs >= 2")
    if tstar == 0:
        return RatioEstimate(0.0, 0.0, 1, runs, 0.0)
    gen = as_generator(rng)
    mask = _unit_mask(params.n_visible, units)
    v, _ = gibbs_steps(params, uniform_visible(params.n_visible, runs, gen), burn_in, gen)
    return RatioEstimate.from_log_weights(tstar * (v @ mask), 1)


@dataclass(frozen=True)
class TiltSolution:
    t: float
    mean_loss: float
    evaluations: int


def _stream(rng: RngLike) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng))
    return RngStream(int(as_generator(rng).integers(2**63)))


def find_tstar(
    params: RbmParameters,
    target: float,
    tolerance: float = 0.1,
    mc_budget: int = 2000,
    rng: RngLike = 0,
    burn_in: int = 500,
    t_max: float = DEFAULT_T_MAX,
    units=None,
    exact: bool = False,
) -> TiltSolution:
    """Bisection for t with E_t[S] = target, S the tilted-unit count.

    Means are Monte Carlo estimates from ``mc_budget`` chains that reuse the
    same random stream at every t (common random numbers), or enumeration
    when ``exact`` is set.
    """
    n_units = int(_unit_mask(params.n_visible, units).sum())
    if not 0 < target < n_units:
        raise ValueError(f"target mean loss must lie in (0, {n_units})")
    stream = _stream(rng)
    evaluations = 0

    def mean_at(t):
        nonlocal evaluations
        evaluations += 1
        if exact:
            return tilted_mean_loss(params, t, units)
        sampler = rbm_loss_sampler(tilt(params, t, units).params, burn_in=burn_in, obligors=units)
        return float(np.mean(sampler(mc_budget, stream.generator())))

    base_mean = mean_at(0.0)
    if abs(base_mean - target) <= tolerance:
        return TiltSolution(0.0, base_mean, evaluations)
    if target < base_mean:
        raise TargetUnreachableError(target, base_mean)
    top = mean_at(t_max)
    if top < target - tolerance:
        raise TargetUnreachableError(target, top)
    lo, hi = 0.0, t_max
    best = (t_max, top)
    while hi - lo >= 1e-4:
        mid = 0.5 * (lo + hi)
        m = mean_at(mid)
        if abs(m - target) < abs(best[1] - target):
            best = (mid, m)
        if abs(m - target) <= tolerance:
            return TiltSolution(mid, m, evaluations)
        if m < target:
            lo = mid
        else:
            hi = mid
    return TiltSolution(best[0], best[1], evaluations)


def is_tail(
    params: RbmParameters,
    tstar: float,
    ratio: RatioEstimate,
    thresholds,
    M: int,
    rng: RngLike,
    burn_in: int = 1000,
    relative: bool = False,
    units=None,
    metadata=None,
) -> TailCurve:
    """Importance-sampled P(S > x) from the model tilted by t*.

    Each tilted sample contributes 1{S > x} exp(-t* S) Z_{t*}/Z. The 95%
    interval is log-normal with variance from the sample variance of the
    weights plus the ratio's relative error (independent, delta method).
    With t* = 0 and ratio 1 the estimates equal ``mc_tail`` on the same seed.
    """
    if M < 100:
        raise ValueError("M must be >= 100")
    tilted = tilt(params, tstar, units)
    n_units = int(tilted.mask.sum())
    gen = as_generator(rng)
    counts = rbm_loss_sampler(tilted.params, burn_in=burn_in, obligors=units)(M, gen)
    scale = n_units if relative else 1.0
    thresholds = np.asarray(thresholds, dtype=np.float64)
    log_w = -tstar * counts + ratio.log_ratio
    hit = counts[None, :] > thresholds[:, None] * scale
    weights = np.where(hit, np.exp(log_w)[None, :], 0.0)
    est = weights.mean(axis=1)
    se = weights.std(axis=1, ddof=1) / np.sqrt(M)
    lo = np.zeros_like(est)
    hi = np.empty_like(est)
    pos = est > 0
    rel = np.sqrt((se[pos] / est[pos]) ** 2 + ratio.relative_stderr**2)
    lo[pos] = est[pos] * np.exp(-Z95 * rel)
    hi[pos] = est[pos] * np.exp(Z95 * rel)
    # no exceedances: every exceeding sample would weigh at most exp(-t* x) Z_t/Z
    hi[~pos] = 3.0 / M * np.exp(-tstar * thresholds[~pos] * scale + ratio.log_ratio)
    meta = dict(metadata or {})
    meta.update(tstar=float(tstar), log_ratio=ratio.log_ratio, ratio_rel_stderr=ratio.relative_stderr)
    if ratio.relative_stderr > 0.5:
        meta["ratio_warning"] = True
        log.warning("partition ratio relative stderr %.2f exceeds 0.5", ratio.relative_stderr)
    return TailCurve(thresholds, est, lo, hi, "is", M, 0.0, meta)


def poorly_covered(thresholds, tilted_losses):
    """Thresholds beyond the tilted mean + 3 sd, where a single t* covers poorly."""
    losses = np.asarray(tilted_losses, dtype=np.float64)
    limit = losses.mean() + 3 * losses.std()
    return [float(x) for x in np.asarray(thresholds, dtype=np.float64) if x > limit]
