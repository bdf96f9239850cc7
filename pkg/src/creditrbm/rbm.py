"""Binary Restricted Boltzmann Machine: parameters, energy, conditionals,
blocked Gibbs sampling and exact enumeration oracles for small models.

Conventions
-----------
``weights`` has shape ``(m, n)`` (hidden x visible). Batched inputs are row
matrices: visible batches are ``(B, n)`` and hidden batches ``(B, m)``. Every
function also accepts a single 1-D configuration.

Enumeration order for ``binary_states(k)`` is lexicographic with unit 0 as the
most significant bit, i.e. the order of ``itertools.product((0, 1), repeat=k)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp

from .errors import DataError, DimensionError, OracleTooLargeError
from .rng import RngLike, as_generator

MAX_ENUMERATION_UNITS = 24
FORMAT_MAGIC = b"CREDITRBM\n"
FORMAT_VERSION = 1
VISIBLE_MODES = ("binary", "probability")


def _frozen(x, ndim, name):
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RbmParameters:
    weights: np.ndarray
    visible_bias: np.ndarray
    hidden_bias: np.ndarray
    visible_mode: str = "binary"

    def __post_init__(self):
        w = _frozen(self.weights, 2, "weights")
        b = _frozen(self.visible_bias, 1, "visible_bias")
        c = _frozen(self.hidden_bias, 1, "hidden_bias")
        m, n = w.shape
        if m < 1 or n < 1:
            raise DimensionError("an RBM needs at least one visible and one hidden unit")
        if b.shape[0] != n:
            raise DimensionError(f"visible axis: weights have {n} columns, visible_bias has {b.shape[0]}")
        if c.shape[0] != m:
            raise DimensionError(f"hidden axis: weights have {m} rows, hidden_bias has {c.shape[0]}")
        if self.visible_mode not in VISIBLE_MODES:
            raise ValueError(f"visible_mode must be one of {VISIBLE_MODES}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "visible_bias", b)
        object.__setattr__(self, "hidden_bias", c)

    @property
    def n_visible(self) -> int:
        return self.weights.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, n_visible: int, n_hidden: int, visible_mode: str = "binary") -> "RbmParameters":
        return cls(np.zeros((n_hidden, n_visible)), np.zeros(n_visible), np.zeros(n_hidden), visible_mode)

    @classmethod
    def random(cls, n_visible, n_hidden, rng: RngLike, scale=1.0, visible_mode="binary"):
        """Gaussian random parameters, mostly for tests and examples."""
        gen = as_generator(rng)
        return cls(
            scale * gen.standard_normal((n_hidden, n_visible)),
            scale * gen.standard_normal(n_visible),
            scale * gen.standard_normal(n_hidden),
            visible_mode,
        )

    def replace(self, **changes) -> "RbmParameters":
        fields = dict(
            weights=self.weights,
            visible_bias=self.visible_bias,
            hidden_bias=self.hidden_bias,
            visible_mode=self.visible_mode,
        )
        fields.update(changes)
        return RbmParameters(**fields)

    def same_as(self, other: "RbmParameters") -> bool:
        return (
            self.visible_mode == other.visible_mode
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.visible_bias, other.visible_bias)
            and np.array_equal(self.hidden_bias, other.hidden_bias)
        )


@dataclass(frozen=True)
class Configuration:
    """Final state of a sampler. Arrays are 1-D for one chain, 2-D for many."""

    visible: np.ndarray
    hidden: np.ndarray


def _check_axis(x, size, axis_name):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != size:
        raise DimensionError(f"{axis_name} axis: expected trailing dimension {size}, got shape {x.shape}")
    return x


def _check_binary(x, what):
    if not np.all((x == 0.0) | (x == 1.0)):
        raise DataError(f"{what} must be binary (entries in {{0, 1}})")


def energy(params: RbmParameters, v, h):
    """E(v, h) = -h^T W v - b^T v - c^T h; vectorised over matching batch rows."""
    v = _check_axis(v, params.n_visible, "visible")
    h = _check_axis(h, params.n_hidden, "hidden")
    coupling = np.einsum("...j,ji,...i->...", h, params.weights, v)
    return -coupling - v @ params.visible_bias - h @ params.hidden_bias


def cond_visible(params: RbmParameters, h) -> np.ndarray:
    """P(V_i = 1 | H = h) for every visible unit."""
    h = _check_axis(h, params.n_hidden, "hidden")
    _check_binary(h, "hidden configuration")
    return expit(h @ params.weights + params.visible_bias)


def cond_hidden(params: RbmParameters, v, mode: str = "probability") -> np.ndarray:
    """P(H_j = 1 | V = v). In ``probability`` mode v may take values in [0, 1]."""
    v = _check_axis(v, params.n_visible, "visible")
    if mode == "binary":
        _check_binary(v, "visible configuration")
    elif np.any((v < 0.0) | (v > 1.0)):
        raise DataError("visible activations must lie in [0, 1]")
    return expit(v @ params.weights.T + params.hidden_bias)


def _bernoulli(gen, p):
    return (gen.random(p.shape) < p).astype(np.float64)


def gibbs_steps(params: RbmParameters, v: np.ndarray, steps: int, gen: np.random.Generator):
    """Advance chains in place-free fashion; returns the final (v, h).

    No validation: this is the inner loop shared by training, AIS and the
    conditional samplers.
    """
    w, b, c = params.weights, params.visible_bias, params.hidden_bias
    h = None
    for _ in range(steps):
        h = _bernoulli(gen, expit(v @ w.T + c))
        v = _bernoulli(gen, expit(h @ w + b))
    return v, h


def uniform_visible(n_visible: int, chains, gen: np.random.Generator) -> np.ndarray:
    shape = (n_visible,) if chains is None else (chains, n_visible)
    return gen.integers(0, 2, size=shape).astype(np.float64)


def gibbs_sample(params: RbmParameters, steps: int, init="uniform", rng: RngLike = 0, chains=None) -> Configuration:
    """Blocked Gibbs sampling: ``steps`` alternations of h|v then v|h.

    ``init`` is either ``"uniform"`` (independent fair coins) or an explicit
    visible vector / batch; probability-valued starting points are accepted.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    gen = as_generator(rng)
    if isinstance(init, str):
        if init != "uniform":
            raise ValueError(f"unknown init {init!r}")
        v0 = uniform_visible(params.n_visible, chains, gen)
    else:
        v0 = _check_axis(init, params.n_visible, "visible")
        if np.any((v0 < 0) | (v0 > 1)):
            raise DataError("initial visible state must lie in [0, 1]")
        if chains is not None and v0.ndim == 1:
            v0 = np.tile(v0, (chains, 1))
    v, h = gibbs_steps(params, v0, steps, gen)
    return Configuration(v, h)


# ---------------------------------------------------------------------------
# Exact oracles


def binary_states(k: int) -> np.ndarray:
    r = np.arange(2**k, dtype=np.int64)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)
    return ((r[:, None] >> shifts) & 1).astype(np.float64)


def _guard(params: RbmParameters):
    total = params.n_visible + params.n_hidden
    if total > MAX_ENUMERATION_UNITS:
        raise OracleTooLargeError(
            f"oracle too large: n + m = {total} exceeds {MAX_ENUMERATION_UNITS}"
        )


def log_unnormalized_visible(params: RbmParameters, v) -> np.ndarray:
    """log sum_h exp(-E(v, h)) = b.v + sum_j softplus((Wv + c)_j)."""
    v = np.asarray(v, dtype=np.float64)
    return v @ params.visible_bias + np.logaddexp(0.0, v @ params.weights.T + params.hidden_bias).sum(axis=-1)


def log_unnormalized_hidden(params: RbmParameters, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    return h @ params.hidden_bias + np.logaddexp(0.0, h @ params.weights + params.visible_bias).sum(axis=-1)


def _chunked_states(k, chunk_bits=16):
    if k <= chunk_bits:
        yield binary_states(k)
        return
    low = binary_states(chunk_bits)
    for hi in binary_states(k - chunk_bits):
        yield np.hstack([np.broadcast_to(hi, (low.shape[0], hi.size)), low])


def exact_partition(params: RbmParameters) -> float:
    """log Z by enumerating the smaller layer and summing the other analytically."""
    _guard(params)
    if params.n_hidden <= params.n_visible:
        k, logf = params.n_hidden, log_unnormalized_hidden
    else:
        k, logf = params.n_visible, log_unnormalized_visible
    acc = -np.inf
    for states in _chunked_states(k):
        acc = np.logaddexp(acc, logsumexp(logf(params, states)))
    return float(acc)


def exact_visible_log_marginal(params: RbmParameters) -> np.ndarray:
    _guard(params)
    log_z = exact_partition(params)
    return np.concatenate(
        [log_unnormalized_visible(params, s) for s in _chunked_states(params.n_visible)]
    ) - log_z


def exact_visible_marginal(params: RbmParameters) -> np.ndarray:
    """P(V = v) for every v in ``binary_states(n)`` order."""
    return np.exp(exact_visible_log_marginal(params))


def exact_hidden_marginal(params: RbmParameters) -> np.ndarray:
    _guard(params)
    states = binary_states(params.n_hidden)
    return np.exp(log_unnormalized_hidden(params, states) - exact_partition(params))


def exact_joint(params: RbmParameters) -> np.ndarray:
    """Joint table of shape (2^n, 2^m); only sensible for tiny models."""
    _guard(params)
    vs, hs = binary_states(params.n_visible), binary_states(params.n_hidden)
    neg_e = hs @ params.weights @ vs.T + (hs @ params.hidden_bias)[:, None] + (vs @ params.visible_bias)[None, :]
    return np.exp(neg_e.T - exact_partition(params))


def state_index(v) -> np.ndarray:
    """Row index into ``binary_states`` for binary configurations."""
    v = np.asarray(v, dtype=np.int64)
    k = v.shape[-1]
    return v @ (1 << np.arange(k - 1, -1, -1, dtype=np.int64))


# ---------------------------------------------------------------------------
# Persistence


def save_params(params: RbmParameters, path) -> None:
    """Write the single-file model format: magic line, JSON header line, raw
    little-endian float64 arrays (weights row-major, visible bias, hidden bias)."""
    header = {
        "format_version": FORMAT_VERSION,
        "n_visible": params.n_visible,
        "n_hidden": params.n_hidden,
        "visible_mode": params.visible_mode,
        "dtype": "<f8",
        "arrays": ["weights", "visible_bias", "hidden_bias"],
        "order": "row-major",
    }
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (params.weights, params.visible_bias, params.hidden_bias)
    )
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)


def load_params(path) -> RbmParameters:
    raw = Path(path).read_bytes()
    if not raw.startswith(FORMAT_MAGIC):
        raise DataError(f"{path}: not a model file")
    rest = raw[len(FORMAT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    n, m = header["n_visible"], header["n_hidden"]
    flat = np.frombuffer(rest[nl + 1:], dtype="<f8")
    if flat.size != m * n + n + m:
        raise DataError(f"{path}: payload has {flat.size} values, expected {m * n + n + m}")
    return RbmParameters(
        flat[: m * n].reshape(m, n),
        flat[m * n: m * n + n],
        flat[m * n + n:],
        header["visible_mode"],
    )
