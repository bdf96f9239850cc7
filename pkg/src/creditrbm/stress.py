"""Stress testing with a joint macro + obligor RBM.

Macro series are min-max scaled into [0, 1] and appended to the PD columns;
the trained joint model is then sampled with the macro units clamped to a
scenario, which draws obligor states from their conditional distribution.
"""
from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, ndtr, ndtri

from .data_io import PortfolioPanel, _date_key
from .errors import DataError, InsufficientTailDepthError
from .importance import _stream, ais_ratio, find_tstar, is_tail
from .rbm import RbmParameters, _bernoulli, uniform_visible
from .rng import RngLike, as_generator
from .tail import TailCurve, VarEstimate, default_thresholds, portfolio_loss, tail_from_losses, var_from_tail

DEFAULT_BURN_IN = 1000


@dataclass
class MacroSeries:
    dates: list
    names: list
    values: np.ndarray  # dates x variables, original units

    def __post_init__(self):
        self.dates = [str(d) for d in self.dates]
        self.names = [str(n) for n in self.names]
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.dates), len(self.names)):
            raise DataError("macro matrix shape does not match dates x variables")
        if len(set(self.names)) != len(self.names):
            raise DataError("duplicate macro variable names")
        keys = [_date_key(d) for d in self.dates]
        if any(a >= b for a, b in zip(keys, keys[1:])):
            raise DataError("macro dates must be strictly increasing")
        if not np.all(np.isfinite(self.values)):
            raise DataError("macro values must be finite")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["date", *self.names])
            for d, row in zip(self.dates, self.values):
                out.writerow([d, *(repr(float(x)) for x in row)])


def load_macro(path) -> MacroSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0].strip().lower() != "date" or len(rows[0]) < 2:
        raise DataError("line 1: header must be 'date,<variable>,...'")
    names = [c.strip() for c in rows[0][1:]]
    dates, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(names) + 1:
            raise DataError(f"expected {len(names) + 1} cells, found {len(row)}", line=lineno)
        try:
            values.append([float(c) for c in row[1:]])
        except ValueError:
            raise DataError("non-numeric macro value", line=lineno) from None
        dates.append(row[0].strip())
    try:
        return MacroSeries(dates, names, np.array(values).reshape(len(dates), len(names)))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class MinMaxScaler:
    low: float
    high: float

    @property
    def degenerate(self) -> bool:
        return self.high <= self.low

    def scale(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.degenerate:
            return np.full_like(x, 0.5)
        return (x - self.low) / (self.high - self.low)

    def unscale(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.degenerate:
            return np.full_like(u, self.low)
        return self.low + u * (self.high - self.low)


@dataclass(frozen=True)
class JointLayout:
    """Column roles of a joint model: obligors first, then macro variables."""

    obligor_ids: tuple
    macro_names: tuple
    scalers: tuple  # one MinMaxScaler per macro variable

    @property
    def n_obligors(self) -> int:
        return len(self.obligor_ids)

    @property
    def obligor_indices(self) -> np.ndarray:
        return np.arange(self.n_obligors)

    def macro_index(self, name: str) -> int:
        try:
            return self.n_obligors + self.macro_names.index(name)
        except ValueError:
            raise DataError(f"unknown macro variable {name!r}; trained variables: {list(self.macro_names)}") from None

    @property
    def roles(self) -> list:
        return ["obligor"] * self.n_obligors + ["macro"] * len(self.macro_names)

    def to_json(self) -> str:
        return json.dumps(
            {
                "obligor_ids": list(self.obligor_ids),
                "macro_names": list(self.macro_names),
                "scalers": [[s.low, s.high] for s in self.scalers],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "JointLayout":
        d = json.loads(text)
        return cls(tuple(d["obligor_ids"]), tuple(d["macro_names"]), tuple(MinMaxScaler(*s) for s in d["scalers"]))


@dataclass
class AlignmentReport:
    rows_dropped: int = 0  # panel dates before the first macro observation
    forward_filled: int = 0  # panel dates without a same-day macro observation


@dataclass
class JointPanel:
    dates: list
    data: np.ndarray  # dates x (obligors + macros), all entries in [0, 1]
    layout: JointLayout
    report: AlignmentReport = field(default_factory=AlignmentReport)

    @property
    def macro_raw(self) -> np.ndarray:
        n = self.layout.n_obligors
        return np.column_stack([s.unscale(self.data[:, n + j]) for j, s in enumerate(self.layout.scalers)])


def assemble_joint(panel: PortfolioPanel, macro: MacroSeries) -> JointPanel:
    """Align macro observations to panel dates by forward fill, then scale."""
    if panel.dates and macro.dates and _date_key(panel.dates[0])[0] != _date_key(macro.dates[0])[0]:
        raise DataError("panel and macro dates use different date kinds")
    macro_keys = [_date_key(d) for d in macro.dates]
    rows, keep, filled = [], [], 0
    for i, d in enumerate(panel.dates):
        key = _date_key(d)
        pos = bisect.bisect_right(macro_keys, key) - 1
        if pos < 0:
            continue
        filled += macro_keys[pos] != key
        rows.append(pos)
        keep.append(i)
    if not keep:
        raise DataError("panel and macro series share no overlapping dates")
    aligned = macro.values[rows]
    scalers = tuple(MinMaxScaler(float(c.min()), float(c.max())) for c in aligned.T)
    scaled = np.column_stack([s.scale(c) for s, c in zip(scalers, aligned.T)])
    data = np.hstack([panel.pd[keep], scaled])
    layout = JointLayout(tuple(panel.obligor_ids), tuple(macro.names), scalers)
    report = AlignmentReport(len(panel) - len(keep), int(filled))
    return JointPanel([panel.dates[i] for i in keep], data, layout, report)


@dataclass(frozen=True)
class Scenario:
    name: str
    values: dict  # macro name -> value in original units
    normalized: dict  # macro name -> value in [0, 1]
    clipped: tuple  # names whose scaled value fell outside [0, 1]
    clamp: dict  # visible index -> clamp value

    @property
    def was_clipped(self) -> bool:
        return bool(self.clipped)


def make_scenario(name: str, values: dict, layout: JointLayout) -> Scenario:
    normalized, clipped, clamp = {}, [], {}
    for var, x in values.items():
        idx = layout.macro_index(var)
        u = float(layout.scalers[idx - layout.n_obligors].scale(float(x)))
        if not 0.0 <= u <= 1.0:
            clipped.append(var)
            u = min(max(u, 0.0), 1.0)
        normalized[var] = u
        clamp[idx] = u
    return Scenario(name, dict(values), normalized, tuple(clipped), clamp)


def load_scenario(path, layout: JointLayout, name: str | None = None) -> Scenario:
    """Read ``variable = value`` lines (``#`` comments and blank lines ignored)."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip():
                raise DataError("expected 'variable = value'", line=lineno)
            try:
                values[key.strip()] = float(val)
            except ValueError:
                raise DataError(f"non-numeric value {val.strip()!r}", line=lineno) from None
    if not values:
        raise DataError(f"{path}: scenario defines no variables")
    return make_scenario(name or Path(path).stem, values, layout)


def _check_clamp(params: RbmParameters, clamp: dict):
    idx = np.array(sorted(clamp), dtype=int)
    if idx.size and (idx.min() < 0 or idx.max() >= params.n_visible):
        raise DataError(f"clamp index out of range for {params.n_visible} visible units")
    if idx.size == params.n_visible:
        raise DataError("every visible unit is clamped; nothing to sample")
    vals = np.array([clamp[i] for i in idx], dtype=np.float64)
    if np.any((vals < 0) | (vals > 1)):
        raise DataError("clamp values must lie in [0, 1]")
    free = np.setdiff1d(np.arange(params.n_visible), idx)
    return idx, vals, free


def clamped_gibbs_steps(params, v, idx, vals, steps, gen):
    """Blocked Gibbs with ``v[:, idx]`` reset to ``vals`` after every visible update."""
    w, b, c = params.weights, params.visible_bias, params.hidden_bias
    v = v.copy()
    v[:, idx] = vals
    for _ in range(steps):
        h = _bernoulli(gen, expit(v @ w.T + c))
        v = _bernoulli(gen, expit(h @ w + b))
        v[:, idx] = vals
    return v


def conditional_gibbs(params: RbmParameters, clamp: dict, steps: int, M: int, rng: RngLike) -> np.ndarray:
    """M independent clamped chains run for ``steps`` sweeps from uniform starts.

    Returns the final unclamped visible coordinates (M x free units) in
    increasing index order. With no clamps the draws coincide with
    ``gibbs_sample(params, steps, rng=rng, chains=M)``.
    """
    if steps < 1 or M < 1:
        raise ValueError("steps and M must be >= 1")
    idx, vals, free = _check_clamp(params, clamp)
    gen = as_generator(rng)
    v = uniform_visible(params.n_visible, M, gen)
    return clamped_gibbs_steps(params, v, idx, vals, steps, gen)[:, free]


def clamped_model(params: RbmParameters, clamp: dict) -> tuple[RbmParameters, np.ndarray]:
    """The RBM over unclamped units equivalent to clamping; returns (model, free indices).

    Clamped values enter only through the hidden bias, c + W[:, clamped] m.
    """
    idx, vals, free = _check_clamp(params, clamp)
    c = params.hidden_bias + params.weights[:, idx] @ vals
    reduced = RbmParameters(params.weights[:, free], params.visible_bias[free], c, params.visible_mode)
    return reduced, free


def _obligor_positions(free: np.ndarray, obligors) -> np.ndarray:
    pos = np.flatnonzero(np.isin(free, np.asarray(obligors)))
    if pos.size != len(obligors):
        raise DataError("obligor units may not be clamped")
    return pos


def stressed_losses(params, scenario: Scenario, layout: JointLayout, steps, M, rng, relative: bool = True):
    """Obligor losses (default fraction, or count when ``relative`` is off) under the scenario."""
    free_v = conditional_gibbs(params, scenario.clamp, steps, M, rng)
    free = _check_clamp(params, scenario.clamp)[2]
    loss = portfolio_loss(free_v[:, _obligor_positions(free, layout.obligor_indices)])
    return loss / layout.n_obligors if relative else loss


def stressed_tail(
    params: RbmParameters,
    scenario: Scenario,
    layout: JointLayout,
    thresholds=None,
    steps: int = DEFAULT_BURN_IN,
    M: int = 10_000,
    rng: RngLike = 0,
) -> TailCurve:
    """Tail of the relative obligor loss under the scenario, from clamped chains."""
    if M < 100:
        raise ValueError("M must be >= 100")
    if thresholds is None:
        thresholds = default_thresholds(layout.n_obligors)
    losses = stressed_losses(params, scenario, layout, steps, M, rng)
    meta = {"scenario": scenario.name, "clipped": list(scenario.clipped)}
    return tail_from_losses(losses, thresholds, "mc", meta)


def loss_histogram(losses, n_obligors: int) -> np.ndarray:
    """Counts of each default count 0..n."""
    return np.bincount(np.asarray(losses, dtype=np.int64), minlength=n_obligors + 1)


def stressed_var(
    params: RbmParameters,
    scenario: Scenario,
    layout: JointLayout,
    alphas,
    steps: int = DEFAULT_BURN_IN,
    M: int = 10_000,
    rng: RngLike = 0,
    deep: bool = True,
    ais_temperatures: int = 2000,
    ais_runs: int = 100,
) -> list[VarEstimate]:
    """VaR per alpha from the clamped-chain curve.

    Levels finer than 1/M go through importance sampling on the clamped model,
    tilting obligor units only, with the tilt chosen so the tilted mean equals
    the largest loss seen in the plain sample. Without ``deep`` such levels
    raise ``InsufficientTailDepthError``.
    """
    stream = _stream(rng)
    thresholds = default_thresholds(layout.n_obligors)
    losses = stressed_losses(params, scenario, layout, steps, M, stream.child(0).generator())
    curve = tail_from_losses(losses, thresholds, "mc", {"scenario": scenario.name})
    out, deep_alphas = [], []
    for a in alphas:
        try:
            out.append(var_from_tail(curve, a))
        except InsufficientTailDepthError:
            if not deep:
                raise
            out.append(None)
            deep_alphas.append(a)
    if deep_alphas:
        reduced, free = clamped_model(params, scenario.clamp)
        units = _obligor_positions(free, layout.obligor_indices)
        target = min(float(losses.max()) * layout.n_obligors, layout.n_obligors - 0.5)
        sol = find_tstar(reduced, target, rng=stream.child(1).generator(), burn_in=min(steps, 500), units=units)
        ratio = ais_ratio(reduced, sol.t, ais_temperatures, ais_runs, stream.child(2).generator(), steps, units)
        is_curve = is_tail(
            reduced, sol.t, ratio, thresholds, M, stream.child(3).generator(), steps, relative=True, units=units
        )
        for i, a in enumerate(alphas):
            if out[i] is None:
                out[i] = var_from_tail(is_curve, a)
    return out


@dataclass
class CoupledPanel:
    panel: PortfolioPanel
    macro: MacroSeries
    factor: np.ndarray


def gen_coupled_panel(
    n: int,
    k: int,
    days: int,
    rng: RngLike,
    pd_range=(0.02, 0.10),
    coupling: float = 1.0,
    macro_noise: float = 0.3,
) -> CoupledPanel:
    """Synthetic joint data: one latent factor Z drives both the macro series
    (level 5 + 2 Z + noise) and the PDs, Phi(Phi^-1(p) sqrt(1 + kappa^2) + kappa Z).

    Large Z is adverse: macro values and PDs rise together.
    """
    gen = as_generator(rng)
    p = gen.uniform(*pd_range, n)
    z = gen.standard_normal(days)
    d = ndtri(p) * math.sqrt(1 + coupling**2)
    pd = np.clip(ndtr(d[None, :] + coupling * z[:, None]), 1e-6, 1 - 1e-6)
    macro = 5.0 + 2.0 * z[:, None] + macro_noise * gen.standard_normal((days, k))
    dates = list(range(days))
    panel = PortfolioPanel([f"o{i}" for i in range(n)], dates, pd)
    return CoupledPanel(panel, MacroSeries(dates, [f"m{j}" for j in range(k)], macro), z)
