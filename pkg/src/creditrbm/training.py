"""Persistent Contrastive Divergence training on probability-valued data,
plus the evaluation metrics used for model selection."""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import DataError, TrainingDivergedError
from .rbm import (
    RbmParameters,
    binary_states,
    exact_partition,
    exact_visible_marginal,
    gibbs_steps,
    log_unnormalized_visible,
    uniform_visible,
    _guard,
)
from .rng import RngLike, RngStream, as_generator

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "linear")


@dataclass(frozen=True)
class TrainConfig:
    hidden_units: int = 250
    gibbs_steps_k: int = 100
    epochs: int = 5000
    initial_learning_rate: float = 2e-3
    schedule: str = "linear"
    minibatch_size: int = 250
    seed: int = 0
    weight_init_std: float = 0.01
    # "zero" keeps all biases at 0; "logit-mean" starts visible biases at the
    # logit of the column means (Hinton's practical-guide heuristic).
    visible_bias_init: str = "zero"

    def __post_init__(self):
        if self.hidden_units < 1 or self.gibbs_steps_k < 1 or self.minibatch_size < 1:
            raise ValueError("hidden_units, gibbs_steps_k and minibatch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.initial_learning_rate <= 0:
            raise ValueError("initial_learning_rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.visible_bias_init not in ("zero", "logit-mean"):
            raise ValueError("visible_bias_init must be 'zero' or 'logit-mean'")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"expected 'key = value', got {line!r}", line=lineno)
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise DataError(f"unknown key {key!r}", line=lineno)
            kind = types[key]
            try:
                kwargs[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
            except ValueError:
                raise DataError(f"bad value for {key}: {value!r}", line=lineno) from None
        return cls(**kwargs)


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """eta_t = eta_0 * (1 - t/T) for the linear schedule; 0 at t = T."""
    if config.schedule == "constant":
        return config.initial_learning_rate
    return config.initial_learning_rate * (1.0 - epoch / config.epochs)


@dataclass
class TrainReport:
    config: TrainConfig
    params: RbmParameters
    reconstruction_error: list = field(default_factory=list)
    learning_rates: list = field(default_factory=list)
    initial_reconstruction_error: float = float("nan")
    wall_clock: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.reconstruction_error)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["epoch", "learning_rate", "reconstruction_error"])
            for i, (lr, err) in enumerate(zip(self.learning_rates, self.reconstruction_error)):
                out.writerow([i, repr(lr), repr(err)])


class Gradient(NamedTuple):
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray

    def max_abs(self) -> float:
        return max(float(np.abs(a).max()) for a in self)


def _check_unit_interval(data, name="data"):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[None, :]
    if data.ndim != 2 or data.shape[0] == 0:
        raise DataError(f"{name} must be a non-empty matrix")
    if not np.all(np.isfinite(data)) or np.any((data < 0) | (data > 1)):
        raise DataError(f"{name} entries must lie in [0, 1]")
    return data


def _weighted_mean(x, weights):
    if weights is None:
        return x.mean(axis=0)
    return weights @ x


def pcd_gradient(params, positive, negative, positive_weights=None, negative_weights=None) -> Gradient:
    """Ascent direction <-dE/dtheta>_positive - <-dE/dtheta>_negative, with the
    hidden layer integrated out through E[H|V] in both phases."""
    w, c = params.weights, params.hidden_bias
    ph = expit(positive @ w.T + c)
    nh = expit(negative @ w.T + c)
    if positive_weights is None:
        pos_w = ph.T @ positive / positive.shape[0]
    else:
        pos_w = (ph * positive_weights[:, None]).T @ positive
    if negative_weights is None:
        neg_w = nh.T @ negative / negative.shape[0]
    else:
        neg_w = (nh * negative_weights[:, None]).T @ negative
    return Gradient(
        pos_w - neg_w,
        _weighted_mean(positive, positive_weights) - _weighted_mean(negative, negative_weights),
        _weighted_mean(ph, positive_weights) - _weighted_mean(nh, negative_weights),
    )


def exact_loglik(params: RbmParameters, batch, weights=None) -> float:
    """Mean log-likelihood of a batch under the free-energy form, which extends
    to probability-valued rows."""
    _guard(params)
    batch = _check_unit_interval(batch, "batch")
    lp = log_unnormalized_visible(params, batch) - exact_partition(params)
    return float(_weighted_mean(lp, weights))


def loglik_gradient_exact(params: RbmParameters, batch, weights=None) -> Gradient:
    """Gradient of ``exact_loglik`` with the model term computed by enumeration."""
    _guard(params)
    batch = _check_unit_interval(batch, "batch")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    states = binary_states(params.n_visible)
    return pcd_gradient(params, batch, states, weights, exact_visible_marginal(params))


def reconstruction_error(params: RbmParameters, batch) -> float:
    """Mean squared L2 distance between rows and their mean-field reconstruction."""
    batch = _check_unit_interval(batch, "batch")
    h = expit(batch @ params.weights.T + params.hidden_bias)
    recon = expit(h @ params.weights + params.visible_bias)
    return float(((batch - recon) ** 2).sum(axis=1).mean())


def initial_parameters(n_visible: int, config: TrainConfig, data=None) -> RbmParameters:
    gen = RngStream(config.seed, 1).generator()
    w = config.weight_init_std * gen.standard_normal((config.hidden_units, n_visible))
    b = np.zeros(n_visible)
    if config.visible_bias_init == "logit-mean" and data is not None:
        p = np.clip(np.asarray(data).mean(axis=0), 1e-4, 1 - 1e-4)
        b = np.log(p / (1 - p))
    return RbmParameters(w, b, np.zeros(config.hidden_units), "probability")


def train_pcd(data, config: TrainConfig, init: RbmParameters | None = None):
    """k-step PCD with persistent fantasy chains, one per minibatch slot.

    Positive statistics use the (probability-valued) data rows directly; the
    fantasy chains start at the first minibatch and are carried across updates.
    Returns ``(params, report)``.
    """
    data = _check_unit_interval(data)
    n_rows, n_visible = data.shape
    if config.minibatch_size > n_rows:
        raise DataError(f"minibatch_size {config.minibatch_size} exceeds dataset size {n_rows}")
    params = init if init is not None else initial_parameters(n_visible, config, data)
    if params.n_visible != n_visible:
        raise DataError(f"initial parameters have {params.n_visible} visible units, data has {n_visible}")
    report = TrainReport(config=config, params=params)
    report.initial_reconstruction_error = reconstruction_error(params, data)
    if config.epochs == 0:
        return params, report

    gen = RngStream(config.seed, 2).generator()
    started = time.perf_counter()
    w = params.weights.copy()
    b = params.visible_bias.copy()
    c = params.hidden_bias.copy()
    batch = config.minibatch_size
    chains = None

    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        order = gen.permutation(n_rows)
        if chains is None:
            chains = data[order[:batch]].copy()
        for start in range(0, n_rows, batch):
            x = data[order[start:start + batch]]
            r = x.shape[0]
            v = chains[:r]
            for _ in range(config.gibbs_steps_k):
                h = (gen.random((r, w.shape[0])) < expit(v @ w.T + c)).astype(np.float64)
                v = (gen.random((r, n_visible)) < expit(h @ w + b)).astype(np.float64)
            chains[:r] = v
            ph = expit(x @ w.T + c)
            nh = expit(v @ w.T + c)
            w += lr * (ph.T @ x - nh.T @ v) / r
            b += lr * (x.sum(axis=0) - v.sum(axis=0)) / r
            c += lr * (ph.sum(axis=0) - nh.sum(axis=0)) / r
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise TrainingDivergedError(epoch)
        current = RbmParameters(w, b, c, "probability")
        report.learning_rates.append(lr)
        report.reconstruction_error.append(reconstruction_error(current, data))
        if epoch % 100 == 0:
            log.debug("epoch %d lr %.3g recon %.5f", epoch, lr, report.reconstruction_error[-1])

    params = RbmParameters(w, b, c, "probability")
    report.params = params
    report.wall_clock = time.perf_counter() - started
    return params, report


def sample_visible(params: RbmParameters, count: int, burn_in: int, rng: RngLike) -> np.ndarray:
    """``count`` binary visible samples from independent chains started uniformly."""
    gen = as_generator(rng)
    v, _ = gibbs_steps(params, uniform_visible(params.n_visible, count, gen), burn_in, gen)
    return v


def generate_pd_samples(params: RbmParameters, count: int, burn_in: int, rng: RngLike) -> np.ndarray:
    """Model-generated default-probability vectors P(V | H = h), h drawn by Gibbs."""
    gen = as_generator(rng)
    _, h = gibbs_steps(params, uniform_visible(params.n_visible, count, gen), burn_in, gen)
    return expit(h @ params.weights + params.visible_bias)


def gaussian_kernel(x, y, bandwidth):
    sq = (x * x).sum(1)[:, None] + (y * y).sum(1)[None, :] - 2.0 * x @ y.T
    return np.exp(-np.maximum(sq, 0.0) / (2.0 * bandwidth**2))


def mmd(sample_a, sample_b, bandwidth: float) -> float:
    """Unbiased squared MMD with a Gaussian kernel (diagonals of K_aa, K_bb excluded)."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DataError("samples must be matrices with equal column counts")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise DataError("each sample needs at least 2 rows")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    na, nb = a.shape[0], b.shape[0]
    kaa = gaussian_kernel(a, a, bandwidth)
    kbb = gaussian_kernel(b, b, bandwidth)
    kab = gaussian_kernel(a, b, bandwidth)
    term_a = (kaa.sum() - np.trace(kaa)) / (na * (na - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1))
    return float(term_a + term_b - 2.0 * kab.mean())


def median_bandwidth(x) -> float:
    """Median pairwise Euclidean distance (the usual MMD heuristic)."""
    x = np.asarray(x, dtype=np.float64)
    sq = (x * x).sum(1)[:, None] + (x * x).sum(1)[None, :] - 2.0 * x @ x.T
    d = np.sqrt(np.maximum(sq[np.triu_indices(x.shape[0], 1)], 0.0))
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


@dataclass
class CrossValidationResult:
    selected_hidden: int
    table: list  # rows of dicts: hidden, fold, mmd, reconstruction_error
    mean_mmd: dict

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.DictWriter(fh, fieldnames=["hidden", "fold", "mmd", "reconstruction_error"])
            out.writeheader()
            out.writerows(self.table)


def cross_validate(data, hidden_grid, folds: int, config: TrainConfig, sample_burn_in: int = 200) -> CrossValidationResult:
    """k-fold selection of the hidden-layer size.

    Each fold's held-out rows are compared with the same number of
    model-generated PD vectors by MMD (median-heuristic bandwidth fixed per
    fold, so grid points are scored on a common scale). The grid point with
    the smallest mean MMD wins; ties go to the smaller hidden count.
    """
    data = _check_unit_interval(data)
    grid = sorted(set(int(h) for h in hidden_grid))
    if not grid:
        raise ValueError("hidden_grid is empty")
    if folds < 2 or folds > data.shape[0]:
        raise ValueError("folds must be between 2 and the number of rows")
    splits = np.array_split(np.arange(data.shape[0]), folds)
    table = []
    for fold, test_idx in enumerate(splits):
        train_idx = np.setdiff1d(np.arange(data.shape[0]), test_idx)
        train, test = data[train_idx], data[test_idx]
        held = test if test.shape[0] >= 2 else np.vstack([test, test])
        bandwidth = median_bandwidth(np.vstack([held, train[: max(2, held.shape[0])]]))
        for hidden in grid:
            cfg = dataclasses.replace(
                config,
                hidden_units=hidden,
                minibatch_size=min(config.minibatch_size, train.shape[0]),
                seed=config.seed + 1000 * fold,
            )
            params, _ = train_pcd(train, cfg)
            generated = generate_pd_samples(params, max(held.shape[0], 2), sample_burn_in, RngStream(cfg.seed, 7))
            table.append(
                dict(
                    hidden=hidden,
                    fold=fold,
                    mmd=mmd(held, generated, bandwidth),
                    reconstruction_error=reconstruction_error(params, test),
                )
            )
    mean_mmd = {h: float(np.mean([r["mmd"] for r in table if r["hidden"] == h])) for h in grid}
    selected = min(grid, key=lambda h: (mean_mmd[h], h))
    return CrossValidationResult(selected, table, mean_mmd)
