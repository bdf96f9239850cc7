"""Default-probability panels, chronological splits and Merton-model PDs."""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import ConvergenceError, DataError

PD_FLOOR = 1e-6
PD_CEIL = 1.0 - 1e-6
TRADING_DAYS = 252


def _date_key(text: str):
    try:
        return (0, int(text))
    except ValueError:
        pass
    try:
        return (1, dt.date.fromisoformat(text))
    except ValueError:
        raise DataError(f"unrecognised date {text!r} (expected ISO date or integer index)") from None


@dataclass
class IngestionReport:
    rows_read: int = 0
    rows_dropped: int = 0
    values_clamped: int = 0


@dataclass
class PortfolioPanel:
    """PD matrix (dates x obligors) with entries strictly inside (0, 1)."""

    obligor_ids: list
    dates: list
    pd: np.ndarray
    report: IngestionReport = field(default_factory=IngestionReport, compare=False)

    def __post_init__(self):
        self.obligor_ids = [str(x) for x in self.obligor_ids]
        self.dates = [str(x) for x in self.dates]
        self.pd = np.asarray(self.pd, dtype=np.float64)
        if self.pd.shape != (len(self.dates), len(self.obligor_ids)):
            raise DataError(
                f"PD matrix shape {self.pd.shape} does not match "
                f"{len(self.dates)} dates x {len(self.obligor_ids)} obligors"
            )
        if len(set(self.obligor_ids)) != len(self.obligor_ids):
            raise DataError("duplicate obligor ids")
        keys = [_date_key(d) for d in self.dates]
        if len({k[0] for k in keys}) > 1:
            raise DataError("dates mix integer indices and calendar dates")
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise DataError("dates must be strictly increasing")
        if self.pd.size and not np.all((self.pd > 0) & (self.pd < 1)):
            raise DataError("PD entries must lie strictly inside (0, 1)")

    @property
    def n_obligors(self) -> int:
        return len(self.obligor_ids)

    def __len__(self) -> int:
        return len(self.dates)

    def rows(self, index) -> "PortfolioPanel":
        idx = np.arange(len(self))[index]
        return PortfolioPanel(self.obligor_ids, [self.dates[i] for i in idx], self.pd[idx])

    def columns(self, index) -> "PortfolioPanel":
        idx = np.arange(self.n_obligors)[index]
        return PortfolioPanel([self.obligor_ids[i] for i in idx], self.dates, self.pd[:, idx])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["date", *self.obligor_ids])
            for d, row in zip(self.dates, self.pd):
                out.writerow([d, *(repr(float(x)) for x in row)])


def load_panel(path) -> PortfolioPanel:
    """Read a panel CSV: header ``date,<id>,...``, one row per date.

    Rows with a blank cell are dropped; values in [0, 1] outside
    (1e-6, 1 - 1e-6) are clamped. Both are counted in ``panel.report``.
    """
    report = IngestionReport()
    dates, rows = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip().lower() != "date" or len(header) < 2:
            raise DataError("header must start with 'date' followed by obligor ids", line=1)
        ids = [h.strip() for h in header[1:]]
        if any(not i for i in ids) or len(set(ids)) != len(ids):
            raise DataError("obligor ids must be non-empty and unique", line=1)
        prev = None
        for line_no, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise DataError(f"expected {len(header)} cells, found {len(cells)}", line=line_no)
            report.rows_read += 1
            date = cells[0].strip()
            key = _date_key(date)
            if prev is not None and key <= prev:
                raise DataError(f"date {date} is not after the previous date", line=line_no)
            prev = key
            if any(not c.strip() for c in cells[1:]):
                report.rows_dropped += 1
                continue
            try:
                values = [float(c) for c in cells[1:]]
            except ValueError as exc:
                raise DataError(f"non-numeric cell ({exc})", line=line_no) from None
            if any(not 0.0 <= x <= 1.0 for x in values):
                raise DataError("PD outside [0, 1]", line=line_no)
            dates.append(date)
            rows.append(values)
    pd = np.array(rows, dtype=np.float64).reshape(len(rows), len(ids))
    clipped = np.clip(pd, PD_FLOOR, PD_CEIL)
    report.values_clamped = int(np.count_nonzero(clipped != pd))
    return PortfolioPanel(ids, dates, clipped, report)


def split_panel(panel: PortfolioPanel, train_fraction: float = 0.8):
    """Chronological split: the first ceil(fraction * rows) rows train."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(panel)
    # round away float noise such as 0.7 * 10 = 7.000000000000001
    cut = math.ceil(round(train_fraction * n, 9))
    if cut == 0 or cut == n:
        raise DataError(f"train fraction {train_fraction} leaves an empty side of a {n}-row panel")
    return panel.rows(slice(0, cut)), panel.rows(slice(cut, n))


# ---------------------------------------------------------------------------
# Merton firm-value model

@dataclass
class MertonInputs:
    dates: list
    equity_value: np.ndarray
    current_liabilities: np.ndarray
    long_term_liabilities: np.ndarray
    rate: np.ndarray
    horizon: float = 1.0
    vol_window: int = TRADING_DAYS

    def __post_init__(self):
        for name in ("equity_value", "current_liabilities", "long_term_liabilities", "rate"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (len(self.dates),):
                raise DataError(f"{name} has {arr.size} entries, expected {len(self.dates)}")
            setattr(self, name, arr)
        if np.any(self.equity_value <= 0):
            raise DataError("equity values must be positive")
        if np.any(self.current_liabilities < 0) or np.any(self.long_term_liabilities < 0):
            raise DataError("liabilities must be non-negative")
        if self.horizon <= 0:
            raise DataError("horizon must be positive")
        if self.vol_window < 30:
            raise DataError("volatility window must cover at least 30 observations")

    def strike(self, kmv: bool = False) -> np.ndarray:
        weight = 0.5 if kmv else 1.0
        return self.current_liabilities + weight * self.long_term_liabilities


def load_merton_inputs(path, horizon: float = 1.0, vol_window: int = TRADING_DAYS) -> MertonInputs:
    """CSV with columns date, equity_value, lctq, lltq, rate."""
    cols = ("date", "equity_value", "lctq", "lltq", "rate")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in cols):
            raise DataError(f"header must contain {', '.join(cols)}", line=1)
        records = []
        for line_no, row in enumerate(reader, start=2):
            try:
                records.append([row["date"]] + [float(row[c]) for c in cols[1:]])
            except (TypeError, ValueError):
                raise DataError("non-numeric or missing value", line=line_no) from None
    if not records:
        raise DataError("no data rows")
    dates = [r[0] for r in records]
    arr = np.array([r[1:] for r in records])
    return MertonInputs(dates, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], horizon, vol_window)


def black_scholes_call(v, sigma, strike, rate, horizon):
    """Equity as a call on assets; returns (value, d1, d2)."""
    sq = sigma * np.sqrt(horizon)
    d1 = (np.log(v / strike) + (rate + 0.5 * sigma**2) * horizon) / sq
    d2 = d1 - sq
    return v * ndtr(d1) - strike * np.exp(-rate * horizon) * ndtr(d2), d1, d2


def default_probability(v, sigma, strike, rate, horizon):
    """P(V_T < strike) = Phi(-d2) under drift ``rate``."""
    _, _, d2 = black_scholes_call(v, sigma, strike, rate, horizon)
    return ndtr(-d2)


@dataclass(frozen=True)
class MertonSolution:
    asset_value: np.ndarray
    asset_vol: np.ndarray
    pd: np.ndarray
    iterations: int


def _asset_value(e, sigma, k, r, horizon, iters=100):
    """Invert the call price for V by Newton from the upper bound E + K e^{-rT}.

    The call is increasing and convex in V, so the iterates decrease
    monotonically to the root.
    """
    v = e + k * np.exp(-r * horizon)
    for _ in range(iters):
        call, d1, _ = black_scholes_call(v, sigma, k, r, horizon)
        step = (call - e) / np.maximum(ndtr(d1), 1e-300)
        v = np.maximum(v - step, e)
        if np.all(np.abs(step) <= 1e-14 * v):
            break
    return v


def solve_merton(equity, equity_vol, strike, rate, horizon=1.0, damping=1.0, tol=1e-9, max_iter=500):
    """Solve the equity-price and equity-volatility equations for (V, sigma_V).

    Damped fixed point on the asset volatility, sigma <- sigma_E E / (V Phi(d1)),
    with V re-solved from the price equation at each step. Vectorised over
    dates; zero strikes give PD 0 without iterating. The map's slope lies in
    (0, 1) on realistic inputs, so the default is undamped; ``damping`` < 1
    is for inputs where the iteration oscillates.
    """
    e, se, k, r = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64) for x in (equity, equity_vol, strike, rate)))
    riskless = k == 0
    ok = ~riskless
    v = e.astype(np.float64, copy=True)
    s = se.astype(np.float64, copy=True)
    pd = np.zeros_like(v)
    s[ok] = se[ok] * e[ok] / (e[ok] + k[ok] * np.exp(-r[ok] * horizon))
    active = ok.copy()
    resid = np.zeros_like(v)
    it = 0
    while active.any():
        if it == max_iter:
            bad = int(np.flatnonzero(active.ravel())[0])
            raise ConvergenceError(
                f"Merton fixed point not converged after {max_iter} iterations at position {bad} "
                f"(relative volatility residual {resid[active].max():.3g})",
                last_iterate=(float(v.ravel()[bad]), float(s.ravel()[bad])),
                residual=float(resid[active].max()),
            )
        it += 1
        a = active
        v[a] = _asset_value(e[a], s[a], k[a], r[a], horizon)
        _, d1, _ = black_scholes_call(v[a], s[a], k[a], r[a], horizon)
        target = se[a] * e[a] / (v[a] * ndtr(d1))
        resid[a] = np.abs(target - s[a]) / s[a]
        s[a] = (1 - damping) * s[a] + damping * target
        active = a & (resid > tol)
    v[ok] = _asset_value(e[ok], s[ok], k[ok], r[ok], horizon)
    pd[ok] = default_probability(v[ok], s[ok], k[ok], r[ok], horizon)
    return MertonSolution(v, s, pd, it)


@dataclass
class MertonResult:
    dates: list
    pd: np.ndarray
    asset_value: np.ndarray
    asset_vol: np.ndarray
    zero_liability: np.ndarray


def equity_volatility(equity, window: int) -> np.ndarray:
    """Annualised trailing std of daily log returns; NaN until ``window`` returns exist."""
    r = np.diff(np.log(np.asarray(equity, dtype=np.float64)))
    out = np.full(len(equity), np.nan)
    if r.size >= window:
        # out[t] uses returns r[t - window : t]
        windows = np.lib.stride_tricks.sliding_window_view(r, window)
        out[window:] = windows.std(axis=1, ddof=1) * np.sqrt(TRADING_DAYS)
    return out


def merton_pd(inputs: MertonInputs, kmv: bool = False, damping: float = 1.0) -> MertonResult:
    """One PD per date once the volatility window is filled."""
    vol = equity_volatility(inputs.equity_value, inputs.vol_window)
    strike = inputs.strike(kmv)
    keep = np.flatnonzero(np.isfinite(vol))
    if keep.size == 0:
        raise DataError(f"need more than {inputs.vol_window} observations to estimate equity volatility")
    sol = solve_merton(inputs.equity_value[keep], vol[keep], strike[keep], inputs.rate[keep], inputs.horizon, damping)
    return MertonResult([inputs.dates[t] for t in keep], sol.pd, sol.asset_value, sol.asset_vol, strike[keep] == 0)
