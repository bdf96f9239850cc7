"""One-factor Gaussian and t copulas: panel generators, closed-form likelihood
and maximum-likelihood loadings.

The latent correlation matrix of the one-factor model is
Sigma = a a^T + diag(1 - a^2), a diagonal-plus-rank-one matrix, so its
inverse and determinant are available in O(n).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import gammaln, ndtr, ndtri

from .data_io import PD_CEIL, PD_FLOOR, PortfolioPanel
from .errors import ConvergenceError, DataError, NumericalError
from .rng import RngLike, as_generator

LOADING_BOUND = 0.999  # 1 - 1e-3 keeps Sigma away from singularity


def _loadings(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if np.any(np.abs(a) >= 1):
        raise NumericalError("factor loadings must satisfy |a_i| < 1 (Sigma is singular otherwise)")
    return a


@dataclass(frozen=True)
class GaussianFactorModel:
    loadings: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        a = _loadings(self.loadings)
        d = np.asarray(self.thresholds, dtype=np.float64)
        if a.shape != d.shape or a.ndim != 1:
            raise DataError("loadings and thresholds must be vectors of equal length")
        object.__setattr__(self, "loadings", a)
        object.__setattr__(self, "thresholds", d)

    @classmethod
    def from_mean_pds(cls, loadings, mean_pds) -> "GaussianFactorModel":
        return cls(loadings, ndtri(np.asarray(mean_pds, dtype=np.float64)))

    @property
    def n(self) -> int:
        return self.loadings.size

    def covariance(self) -> np.ndarray:
        a = self.loadings
        return np.outer(a, a) + np.diag(1 - a**2)


def conditional_pd(model: GaussianFactorModel, z) -> np.ndarray:
    """P(X_i <= dbar_i | Z = z) = Phi((dbar_i - a_i z) / sqrt(1 - a_i^2)).

    ``z`` may be a scalar or a vector of factor draws (one row per draw).
    """
    a, d = model.loadings, model.thresholds
    z = np.asarray(z, dtype=np.float64)
    return ndtr((d - np.multiply.outer(z, a)) / np.sqrt(1 - a**2))


def sample_latent(a, days: int, rng: RngLike, nu: float | None = None) -> np.ndarray:
    """Latent asset values a_i Z + sqrt(1 - a_i^2) eps_i; t-distributed when ``nu`` is given."""
    a = _loadings(a)
    gen = as_generator(rng)
    z = gen.standard_normal((days, 1))
    eps = gen.standard_normal((days, a.size))
    x = z * a + eps * np.sqrt(1 - a**2)
    if nu is not None:
        x *= np.sqrt(nu / gen.chisquare(nu, size=(days, 1)))
    return x


def _day_ids(days):
    return list(range(days))


def _obligor_ids(n):
    width = len(str(n - 1))
    return [f"obligor_{i:0{width}d}" for i in range(n)]


@dataclass
class SyntheticPanel:
    """Generated panel plus the ground truth used to build it."""

    panel: PortfolioPanel
    mean_pds: np.ndarray
    latent: np.ndarray  # per-day latent asset values, panel column order
    model: GaussianFactorModel | None = None
    sectors: np.ndarray | None = None  # true sector label per panel column
    permutation: np.ndarray | None = None  # panel column j = original obligor permutation[j]
    factors: np.ndarray | None = field(default=None, repr=False)


def gen_one_factor_panel(n: int, pd_range, rho: float, days: int, rng: RngLike) -> SyntheticPanel:
    """Daily conditional PDs under an equicorrelated one-factor Gaussian copula.

    Mean PDs are uniform on ``pd_range``; every obligor loads sqrt(rho) on a
    single daily factor draw. The latent asset values for the same factor
    draws (with idiosyncratic noise) are returned alongside.
    """
    if not 0 <= rho < 1:
        raise ValueError("rho must lie in [0, 1)")
    lo, hi = pd_range
    if not 0 < lo <= hi < 1:
        raise ValueError("pd_range must satisfy 0 < min <= max < 1")
    gen = as_generator(rng)
    mean_pds = gen.uniform(lo, hi, n)
    model = GaussianFactorModel.from_mean_pds(np.full(n, np.sqrt(rho)), mean_pds)
    z = gen.standard_normal(days)
    eps = gen.standard_normal((days, n))
    pd = np.clip(conditional_pd(model, z), PD_FLOOR, PD_CEIL)
    latent = z[:, None] * model.loadings + eps * np.sqrt(1 - rho)
    panel = PortfolioPanel(_obligor_ids(n), _day_ids(days), pd)
    return SyntheticPanel(panel, mean_pds, latent, model=model, factors=z)


@dataclass(frozen=True)
class SectorCopulaSpec:
    """Global/sector/idiosyncratic loadings per sector, normalised to unit variance.

    Daily PDs are Phi(d_i - pd_scale * X_i) with d_i chosen so the mean PD of
    obligor i equals its drawn mean PD.
    """

    sizes: tuple
    global_loadings: tuple
    sector_loadings: tuple
    idiosyncratic: tuple
    pd_range: tuple = (0.02, 0.10)
    pd_scale: float = 0.5

    def __post_init__(self):
        k = len(self.sizes)
        if k == 0 or any(int(s) < 1 for s in self.sizes):
            raise DataError("every sector needs at least one obligor")
        if not (len(self.global_loadings) == len(self.sector_loadings) == len(self.idiosyncratic) == k):
            raise DataError("one loading triple per sector required")
        g = np.asarray(self.global_loadings, dtype=np.float64)
        s = np.asarray(self.sector_loadings, dtype=np.float64)
        e = np.asarray(self.idiosyncratic, dtype=np.float64)
        norm = np.sqrt(g**2 + s**2 + e**2)
        if np.any(norm == 0):
            raise DataError("a sector has all-zero loadings")
        object.__setattr__(self, "sizes", tuple(int(x) for x in self.sizes))
        object.__setattr__(self, "global_loadings", tuple((g / norm).tolist()))
        object.__setattr__(self, "sector_loadings", tuple((s / norm).tolist()))
        object.__setattr__(self, "idiosyncratic", tuple((e / norm).tolist()))
        object.__setattr__(self, "pd_range", tuple(float(x) for x in self.pd_range))
        object.__setattr__(self, "pd_scale", float(self.pd_scale))
        if self.pd_scale <= 0:
            raise DataError("pd_scale must be positive")

    @classmethod
    def uniform(cls, sectors=5, size=20, global_loading=0.4, sector_loading=0.7, **kw) -> "SectorCopulaSpec":
        idio = np.sqrt(max(0.0, 1 - global_loading**2 - sector_loading**2))
        return cls((size,) * sectors, (global_loading,) * sectors, (sector_loading,) * sectors, (idio,) * sectors, **kw)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    def labels(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.sizes)), self.sizes)

    def to_text(self) -> str:
        lines = [
            f"pd_min = {self.pd_range[0]!r}",
            f"pd_max = {self.pd_range[1]!r}",
            f"pd_scale = {self.pd_scale!r}",
        ]
        for size, g, s, e in zip(self.sizes, self.global_loadings, self.sector_loadings, self.idiosyncratic):
            lines.append(f"sector = {size} {g!r} {s!r} {e!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SectorCopulaSpec":
        """``key = value`` lines; each ``sector = size global sector idiosyncratic``."""
        scalars = {}
        sectors = []
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise DataError("expected 'key = value'", line=line_no)
            key = key.strip()
            if key != "sector" and key not in ("pd_min", "pd_max", "pd_scale"):
                raise DataError(f"unknown key {key!r}", line=line_no)
            try:
                if key == "sector":
                    size, g, s, e = value.split()
                    sectors.append((int(size), float(g), float(s), float(e)))
                else:
                    scalars[key] = float(value)
            except ValueError:
                raise DataError(f"malformed value for {key!r}", line=line_no) from None
        if not sectors:
            raise DataError("no sector lines")
        size, g, s, e = zip(*sectors)
        pd_range = (scalars.get("pd_min", 0.02), scalars.get("pd_max", 0.10))
        return cls(size, g, s, e, pd_range, scalars.get("pd_scale", 0.5))


def gen_sector_panel(spec: SectorCopulaSpec, days: int, rng: RngLike, shuffle: bool = True) -> SyntheticPanel:
    gen = as_generator(rng)
    labels = spec.labels()
    n, k = spec.n, len(spec.sizes)
    g = np.asarray(spec.global_loadings)[labels]
    s = np.asarray(spec.sector_loadings)[labels]
    e = np.asarray(spec.idiosyncratic)[labels]
    lo, hi = spec.pd_range
    mean_pds = gen.uniform(lo, hi, n)
    factors = gen.standard_normal((days, 1 + k))
    eps = gen.standard_normal((days, n))
    latent = factors[:, :1] * g + factors[:, 1 + labels] * s + eps * e
    kappa = spec.pd_scale
    # E[Phi(d - kappa X)] = Phi(d / sqrt(1 + kappa^2)) for X ~ N(0, 1)
    d = ndtri(mean_pds) * np.sqrt(1 + kappa**2)
    pd = np.clip(ndtr(d - kappa * latent), PD_FLOOR, PD_CEIL)
    perm = gen.permutation(n) if shuffle else np.arange(n)
    panel = PortfolioPanel(_obligor_ids(n), _day_ids(days), pd[:, perm])
    return SyntheticPanel(panel, mean_pds[perm], latent[:, perm], sectors=labels[perm], permutation=perm, factors=factors)


# ---------------------------------------------------------------------------
# Closed-form linear algebra for Sigma = a a^T + diag(1 - a^2)

def _sm_terms(a):
    a = _loadings(a)
    d = 1 - a**2
    u = a / d
    k = 1.0 / (1.0 + a @ u)
    return d, u, k


def sigma_inverse_times(a, x) -> np.ndarray:
    """Sigma^{-1} x by Sherman-Morrison; ``x`` is a vector or rows of vectors."""
    d, u, k = _sm_terms(a)
    x = np.asarray(x, dtype=np.float64)
    return x / d - k * np.multiply.outer(x @ u, u)


def sigma_logdet(a) -> float:
    """log det Sigma = sum log(1 - a_i^2) + log(1 + sum a_i^2 / (1 - a_i^2))."""
    d, u, k = _sm_terms(a)
    return float(np.log(d).sum() - np.log(k))


def sigma_inverse_diag(a) -> np.ndarray:
    d, u, k = _sm_terms(a)
    return 1.0 / d - k * u**2


def copula_loglik(a, samples) -> float:
    """-1/2 sum_l x_l^T Sigma^{-1} x_l - (m/2) log det Sigma (constants dropped)."""
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    a = np.asarray(a, dtype=np.float64)
    if x.shape[1] != a.size:
        raise DataError(f"samples have {x.shape[1]} columns, expected {a.size}")
    quad = np.einsum("ij,ij->", x, sigma_inverse_times(a, x))
    return -0.5 * quad - 0.5 * x.shape[0] * sigma_logdet(a)


def copula_loglik_grad(a, samples) -> np.ndarray:
    """Gradient of ``copula_loglik`` in a, O(n m).

    With Y = X Sigma^{-1} and dSigma/da_i = e_i a^T + a e_i^T - 2 a_i e_i e_i^T:
    g_i = (Y^T Y a)_i - a_i (Y^T Y)_ii - m [(Sigma^{-1} a)_i - a_i (Sigma^{-1})_ii].
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    a = _loadings(a)
    m = x.shape[0]
    y = sigma_inverse_times(a, x)
    data_term = y.T @ (y @ a) - a * (y * y).sum(axis=0)
    model_term = sigma_inverse_times(a, a) - a * sigma_inverse_diag(a)
    return data_term - m * model_term


def latent_from_pd(pd) -> np.ndarray:
    """Phi^{-1}(pd) with per-column standardisation."""
    y = ndtri(np.asarray(pd, dtype=np.float64))
    sd = y.std(axis=0)
    sd[sd == 0] = 1.0
    return (y - y.mean(axis=0)) / sd


def fit_loadings(latent, init=0.3, bound=LOADING_BOUND, tol=1e-6, max_iter=5000) -> np.ndarray:
    """Maximise ``copula_loglik`` over the box [-bound, bound]^n.

    Projected gradient ascent; steps start from a Barzilai-Borwein guess and
    are halved until the objective increases. Stops when the projected
    gradient (per sample) is below ``tol``.
    """
    x = np.atleast_2d(np.asarray(latent, dtype=np.float64))
    m, n = x.shape
    if n == 1:
        # Sigma = 1 for every a: the likelihood is flat, 0 is the symmetric choice
        return np.zeros(1)
    a = np.full(n, float(init))

    def proj(v):
        return np.clip(v, -bound, bound)

    f = copula_loglik(a, x) / m
    g = copula_loglik_grad(a, x) / m
    step = 1.0
    for _ in range(max_iter):
        pg = proj(a + g) - a
        if np.abs(pg).max() <= tol:
            break
        while True:
            cand = proj(a + step * g)
            fc = copula_loglik(cand, x) / m
            # slack absorbs rounding in f, which is O(n) in magnitude
            if fc >= f + 1e-4 * g @ (cand - a) - 1e-13 * abs(f) or step < 1e-12:
                break
            step *= 0.5
        if step < 1e-12:
            break
        gc = copula_loglik_grad(cand, x) / m
        s, yv = cand - a, gc - g
        a, f, g = cand, fc, gc
        sy = s @ yv
        step = float(np.clip(-(s @ s) / sy, 1e-6, 1e3)) if sy < 0 else 1.0
    else:
        raise ConvergenceError(
            f"loading fit did not converge in {max_iter} iterations "
            f"(projected gradient norm {np.linalg.norm(proj(a + g) - a):.3g})",
            last_iterate=a,
            residual=float(np.linalg.norm(proj(a + g) - a)),
        )
    return -a if a.sum() < 0 else a


def fit_gaussian_copula(panel) -> np.ndarray:
    """MLE loadings from a PD panel via the Phi^{-1} + standardisation bridge."""
    pd = panel.pd if isinstance(panel, PortfolioPanel) else np.asarray(panel, dtype=np.float64)
    if pd.shape[0] < 2 * pd.shape[1]:
        raise DataError(f"need at least {2 * pd.shape[1]} rows to fit {pd.shape[1]} loadings")
    return fit_loadings(latent_from_pd(pd))


def pseudo_observations(data) -> np.ndarray:
    """Column ranks scaled to (0, 1): rank / (m + 1)."""
    x = np.asarray(data, dtype=np.float64)
    return stats.rankdata(x, axis=0) / (x.shape[0] + 1)


def t_copula_loglik(a, nu: float, u) -> float:
    """Sum over rows of log c(u) for the one-factor t copula with ``nu`` dof."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    m, n = u.shape
    y = stats.t.ppf(u, nu)
    quad = np.einsum("ij,ij->i", y, sigma_inverse_times(a, y))
    joint = (
        gammaln((nu + n) / 2) - gammaln(nu / 2) - 0.5 * n * np.log(nu * np.pi)
        - 0.5 * sigma_logdet(a) - 0.5 * (nu + n) * np.log1p(quad / nu)
    )
    marginals = stats.t.logpdf(y, nu).sum(axis=1)
    return float((joint - marginals).sum())


@dataclass(frozen=True)
class TCopulaFit:
    loadings: np.ndarray
    nu: float
    profile: tuple  # (nu, loglik) per grid point


def fit_t_copula(panel, nu_grid=(4, 10, 50, 200)) -> TCopulaFit:
    """Profile likelihood over ``nu_grid``.

    Margins are made uniform by ranks; for each nu the t-quantiles of the
    pseudo-observations are standardised and fitted with the Gaussian
    objective, and the loadings are scored by the full t-copula likelihood.
    """
    grid = [float(v) for v in nu_grid]
    if not grid or any(v <= 2 for v in grid):
        raise ValueError("nu_grid must be non-empty with entries > 2")
    data = panel.pd if isinstance(panel, PortfolioPanel) else np.asarray(panel, dtype=np.float64)
    u = pseudo_observations(data)
    profile = []
    for nu in grid:
        y = stats.t.ppf(u, nu)
        a = fit_loadings((y - y.mean(axis=0)) / y.std(axis=0))
        profile.append((nu, t_copula_loglik(a, nu, u), a))
    best = max(profile, key=lambda p: p[1])
    return TCopulaFit(best[2], best[0], tuple((nu, ll) for nu, ll, _ in profile))
