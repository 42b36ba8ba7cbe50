"""Shapley attribution over arbitrary characteristic functions.

A characteristic function ``value_fn`` maps a :class:`Coalition` to a vector
with one entry per model output, or to an :class:`McValue` when the value is a
Monte Carlo estimate. Values are memoised per coalition mask in a
:class:`CharacteristicCache`, which is shared by every output and by both
estimators, so exact and kernel results computed from the same cache are
noise-free comparisons of each other.
"""
from dataclasses import dataclass, field, replace
from fractions import Fraction
from functools import partial
from math import comb, factorial
from typing import NamedTuple
import logging
import threading

import numpy as np

from src.errors import (ConfigError, DomainError, EnumerationLimitError,
                        EstimationError, NumericError, SchemaError)
from src.utils import parallel_map

MAX_EXACT_FEATURES = 20
METHODS = ("marginal", "conditional", "causal", "exact-game")
ESTIMATORS = ("exact", "kernel")


# ── Domain types ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FeatureSpace:
    names: tuple
    units: tuple = None

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        units = tuple("" for _ in names) if self.units is None else tuple(str(u) for u in self.units)
        if not names:
            raise SchemaError("FeatureSpace needs at least one feature")
        if any(not n for n in names):
            raise SchemaError("Feature names must be non-empty")
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"Duplicate feature names: {dupes}")
        if len(units) != len(names):
            raise SchemaError(f"Got {len(units)} units for {len(names)} features")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "units", units)

    @property
    def n(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise SchemaError(f"Unknown feature {name!r}; expected one of {list(self.names)}") from None

    def check_compatible(self, other: "FeatureSpace"):
        if self.names != other.names:
            raise SchemaError(f"Feature spaces differ: {list(self.names)} vs {list(other.names)}")


@dataclass(frozen=True, order=True)
class Coalition:
    """Fixed-width bit set; bit i set means feature i is present."""
    mask: int
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"Coalition width must be >= 1, got {self.n}")
        if not 0 <= self.mask < (1 << self.n):
            raise DomainError(f"Mask {self.mask} does not fit in {self.n} bits")

    @classmethod
    def empty(cls, n):
        return cls(0, n)

    @classmethod
    def full(cls, n):
        return cls((1 << n) - 1, n)

    @classmethod
    def from_indices(cls, indices, n):
        mask = 0
        for i in indices:
            if not 0 <= i < n:
                raise DomainError(f"Feature index {i} out of range for N={n}")
            mask |= 1 << i
        return cls(mask, n)

    def __contains__(self, i):
        return bool(self.mask >> i & 1)

    def __len__(self):
        return bin(self.mask).count("1")

    def members(self):
        return [i for i in range(self.n) if self.mask >> i & 1]

    def absent(self):
        return [i for i in range(self.n) if not self.mask >> i & 1]

    def with_feature(self, i):
        return Coalition(self.mask | (1 << i), self.n)

    def indicator(self) -> np.ndarray:
        return np.array([self.mask >> i & 1 for i in range(self.n)], dtype="float64")

    @property
    def is_full(self):
        return self.mask == (1 << self.n) - 1


class McValue(NamedTuple):
    """Monte Carlo estimate of v(S) with its standard error per output."""
    value: np.ndarray
    sigma: np.ndarray


def _split_value(result):
    if isinstance(result, McValue):
        value, sigma = result
    else:
        value, sigma = result, None
    value = np.atleast_1d(np.asarray(value, dtype="float64"))
    if sigma is not None:
        sigma = np.broadcast_to(np.asarray(sigma, dtype="float64"), value.shape).copy()
    return value, sigma


class CharacteristicCache:
    """Coalition mask -> value vector v(S), with the MC standard error when known.

    Keys are written once; re-storing a key with a different vector is an error.
    """

    def __init__(self, n_features, output_dim=None):
        self.n_features = n_features
        self.output_dim = output_dim
        self.table = {}
        self.sigma = {}
        self._lock = threading.Lock()

    def __contains__(self, coalition):
        return coalition.mask in self.table

    def __len__(self):
        return len(self.table)

    def store(self, coalition, value, sigma=None):
        if coalition.n != self.n_features:
            raise SchemaError(f"Coalition width {coalition.n} != cache width {self.n_features}")
        value = np.atleast_1d(np.asarray(value, dtype="float64"))
        with self._lock:
            if self.output_dim is None:
                self.output_dim = value.shape[0]
            if value.shape != (self.output_dim,):
                raise SchemaError(f"v(S) has shape {value.shape}, expected ({self.output_dim},)")
            existing = self.table.setdefault(coalition.mask, value)
            if existing is not value and not np.array_equal(existing, value):
                raise NumericError(f"Divergent values stored for coalition mask {coalition.mask}")
            if sigma is not None:
                self.sigma.setdefault(coalition.mask, sigma)
        return existing

    def get(self, coalition):
        return self.table[coalition.mask]

    def evaluate(self, coalitions, value_fn, max_workers=None) -> np.ndarray:
        """Fill missing coalitions (possibly in parallel) and return the stacked values."""
        coalitions = list(coalitions)
        missing, seen = [], set()
        for c in coalitions:
            if c.mask not in self.table and c.mask not in seen:
                missing.append(c)
                seen.add(c.mask)
        if missing:
            logging.debug(f"Evaluating {len(missing)} coalitions ({len(self.table)} cached)")
            results = parallel_map(value_fn, missing, max_workers=max_workers)
            for c, res in zip(missing, results):
                value, sigma = _split_value(res)
                self.store(c, value, sigma)
        return np.stack([self.table[c.mask] for c in coalitions])

    def total_sigma(self):
        """Conservative MC error: per-coalition standard errors summed."""
        if not self.sigma:
            return np.zeros(self.output_dim or 0)
        return np.sum([self.sigma[m] for m in sorted(self.sigma)], axis=0)


@dataclass(frozen=True, eq=False)
class Explanation:
    base_values: np.ndarray
    phi: np.ndarray
    method: str
    mc_samples: int = 0
    seed: int = None
    instance: np.ndarray = None
    prediction: np.ndarray = None
    sigma_mc: np.ndarray = None
    estimator: str = "exact"
    feature_names: tuple = ()
    output_names: tuple = ()
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method {self.method!r}; expected one of {METHODS}")
        base = np.atleast_1d(np.asarray(self.base_values, dtype="float64"))
        phi = np.atleast_2d(np.asarray(self.phi, dtype="float64"))
        if phi.shape[0] != base.shape[0]:
            raise SchemaError(f"phi has {phi.shape[0]} output rows but {base.shape[0]} base values")
        object.__setattr__(self, "base_values", base)
        object.__setattr__(self, "phi", phi)
        if self.sigma_mc is None:
            object.__setattr__(self, "sigma_mc", np.zeros_like(base))
        if not self.feature_names:
            object.__setattr__(self, "feature_names", tuple(f"x{i + 1}" for i in range(phi.shape[1])))
        if not self.output_names:
            object.__setattr__(self, "output_names", tuple(f"a{k + 1}" for k in range(phi.shape[0])))

    @property
    def output_dim(self):
        return self.phi.shape[0]

    @property
    def n_features(self):
        return self.phi.shape[1]

    def additivity_residual(self) -> np.ndarray:
        """base + sum(phi) - f(x*), per output."""
        if self.prediction is None:
            raise ConfigError("Explanation has no recorded prediction")
        return self.base_values + self.phi.sum(axis=1) - np.asarray(self.prediction, dtype="float64")

    def additivity_tolerance(self) -> np.ndarray:
        return 4.0 * np.asarray(self.sigma_mc, dtype="float64")

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "estimator": self.estimator,
            "base_values": [float(v) for v in self.base_values],
            "phi": [[float(v) for v in row] for row in self.phi],
            "feature_names": list(self.feature_names),
            "output_names": list(self.output_names),
            "mc_samples": int(self.mc_samples),
            "seed": None if self.seed is None else int(self.seed),
            "sigma_mc": [float(v) for v in self.sigma_mc],
        }
        if self.instance is not None:
            out["instance"] = [float(v) for v in self.instance]
        if self.prediction is not None:
            out["prediction"] = [float(v) for v in self.prediction]
            out["additivity_residual"] = [float(v) for v in self.additivity_residual()]
        out.update(self.extras)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Explanation":
        known = {"method", "estimator", "base_values", "phi", "feature_names", "output_names",
                 "mc_samples", "seed", "sigma_mc", "instance", "prediction", "additivity_residual"}
        try:
            return cls(
                base_values=np.asarray(d["base_values"], dtype="float64"),
                phi=np.asarray(d["phi"], dtype="float64"),
                method=d["method"],
                mc_samples=d.get("mc_samples", 0),
                seed=d.get("seed"),
                instance=None if d.get("instance") is None else np.asarray(d["instance"], dtype="float64"),
                prediction=None if d.get("prediction") is None else np.asarray(d["prediction"], dtype="float64"),
                sigma_mc=None if d.get("sigma_mc") is None else np.asarray(d["sigma_mc"], dtype="float64"),
                estimator=d.get("estimator", "exact"),
                feature_names=tuple(d.get("feature_names", ())),
                output_names=tuple(d.get("output_names", ())),
                extras={k: v for k, v in d.items() if k not in known},
            )
        except KeyError as e:
            raise SchemaError(f"Report is missing field {e.args[0]!r}") from None
        except SchemaError:
            raise
        except (TypeError, ValueError) as e:
            raise SchemaError(f"Report has malformed fields ({e})") from None


# ── Weights ──────────────────────────────────────────────────────────────────

def shapley_weight(s_size: int, n: int) -> Fraction:
    """|S|!(N-|S|-1)!/N! as an exact rational."""
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    if not 0 <= s_size <= n - 1:
        raise DomainError(f"Coalition size {s_size} outside [0, {n - 1}] for N={n}")
    return Fraction(factorial(s_size) * factorial(n - s_size - 1), factorial(n))


def _weight_table(n):
    return np.array([float(shapley_weight(s, n)) for s in range(n)])


def kernel_weight(s_size, n):
    """KernelSHAP regression weight (N-1)/(C(N,|S|)|S|(N-|S|)); infinite at the empty/full coalition."""
    if s_size <= 0 or s_size >= n:
        return np.inf
    return (n - 1) / (comb(n, s_size) * s_size * (n - s_size))


def _popcount(masks: np.ndarray) -> np.ndarray:
    return np.array([bin(int(m)).count("1") for m in masks], dtype="int64")


# ── Estimators ───────────────────────────────────────────────────────────────

def _shapley_from_table(table: np.ndarray, n: int) -> np.ndarray:
    """table[mask] = v(S) of shape (2^n, K) -> phi of shape (K, n)."""
    masks = np.arange(1 << n)
    sizes = _popcount(masks)
    weights = _weight_table(n)
    phi = np.zeros((table.shape[1], n))
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        diff = table[without | bit] - table[without]
        phi[:, i] = weights[sizes[without]] @ diff
    return phi


def exact_shapley(value_fn, n: int, cache: CharacteristicCache = None, max_workers=None) -> Explanation:
    """Shapley values by full enumeration of the 2^N coalitions."""
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    if n > MAX_EXACT_FEATURES:
        raise EnumerationLimitError(f"Exact enumeration is limited to N <= {MAX_EXACT_FEATURES}, got N={n}")
    cache = CharacteristicCache(n) if cache is None else cache
    coalitions = [Coalition(m, n) for m in range(1 << n)]
    table = cache.evaluate(coalitions, value_fn, max_workers=max_workers)
    phi = _shapley_from_table(table, n)
    return Explanation(base_values=table[0], phi=phi, method="exact-game", estimator="exact",
                       prediction=table[-1])


def _sample_coalitions(n, budget, seed):
    """Paired kernel sampling: sizes drawn with probability proportional to
    (N-1)/(s(N-s)), each draw followed by its complement. Returns distinct masks
    and their draw counts, which serve as regression weights."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0x6B65726E,)))
    sizes = np.arange(1, n)
    size_p = np.array([(n - 1) / (s * (n - s)) for s in sizes])
    size_p /= size_p.sum()
    full = (1 << n) - 1
    drawn = []
    while len(drawn) < budget:
        s = int(rng.choice(sizes, p=size_p))
        members = rng.choice(n, size=s, replace=False)
        mask = int(np.sum(1 << members.astype("int64")))
        drawn.append(mask)
        if len(drawn) < budget:
            drawn.append(full ^ mask)
    masks, counts = np.unique(np.array(drawn, dtype="int64"), return_counts=True)
    return masks, counts.astype("float64")


def _constrained_wls(Z, Y, w, total):
    """min sum_r w_r ||Y_r - Z_r phi||^2  s.t.  sum(phi) = total, solved per output column.

    The constraint is eliminated by substituting phi_N = total - sum(phi_1..N-1).
    """
    n = Z.shape[1]
    A = Z[:, :-1] - Z[:, [-1]]
    B = Y - np.outer(Z[:, -1], total)
    sw = np.sqrt(w)[:, None]
    A_w, B_w = A * sw, B * sw
    rank = np.linalg.matrix_rank(A_w)
    if rank < n - 1:
        raise EstimationError(
            f"Kernel design matrix is rank deficient (rank {rank} < {n - 1}) with "
            f"{Z.shape[0]} distinct coalitions; increase coalition_budget"
        )
    beta, *_ = np.linalg.lstsq(A_w, B_w, rcond=None)
    last = total - beta.sum(axis=0)
    return np.vstack([beta, last[None, :]]).T


def kernel_shapley(value_fn, n: int, coalition_budget="all", seed=0,
                   cache: CharacteristicCache = None, max_workers=None) -> Explanation:
    """KernelSHAP: weighted least squares over coalition indicators with the
    intercept pinned to v(empty) and the coefficient sum pinned to v(full)-v(empty)."""
    if n < 2:
        raise DomainError(f"Kernel regression needs N >= 2, got {n}")
    cache = CharacteristicCache(n) if cache is None else cache

    if coalition_budget in (None, "all"):
        if n > MAX_EXACT_FEATURES:
            raise EnumerationLimitError(f"Full coalition enumeration is limited to N <= {MAX_EXACT_FEATURES}, got N={n}")
        masks = np.arange(1, (1 << n) - 1)
        weights = np.array([kernel_weight(s, n) for s in _popcount(masks)])
    else:
        budget = int(coalition_budget)
        if budget < n + 2:
            raise EstimationError(f"coalition_budget={budget} is too small; need at least N+2={n + 2}")
        masks, weights = _sample_coalitions(n, budget, seed)

    edge = [Coalition.empty(n), Coalition.full(n)]
    inner = [Coalition(int(m), n) for m in masks]
    values = cache.evaluate(edge + inner, value_fn, max_workers=max_workers)
    v0, v1 = values[0], values[1]
    Z = np.stack([c.indicator() for c in inner])
    phi = _constrained_wls(Z, values[2:] - v0, weights, v1 - v0)
    logging.debug(f"Kernel regression over {len(inner)} coalitions for N={n}")
    return Explanation(base_values=v0, phi=phi, method="exact-game", estimator="kernel", prediction=v1)


def explain_instance(model, x_star, sampler, estimator="exact", mc_samples=None, seed=None,
                     coalition_budget="all", max_workers=None) -> Explanation:
    """Attribute every output of ``model`` at ``x_star`` using ``sampler`` for v(S)."""
    fs = sampler.dataset.feature_space
    x_star = np.asarray(x_star, dtype="float64").ravel()
    if x_star.shape[0] != fs.n:
        raise SchemaError(f"Instance has {x_star.shape[0]} values, feature space has {fs.n}")
    if model.input_dim != fs.n:
        raise SchemaError(f"Model expects {model.input_dim} inputs, feature space has {fs.n}")
    if estimator not in ESTIMATORS:
        raise ConfigError(f"Unknown estimator {estimator!r}; expected one of {ESTIMATORS}")

    updates = {}
    if mc_samples is not None:
        updates["mc_samples"] = int(mc_samples)
    if seed is not None:
        updates["seed"] = int(seed)
    sampler = replace(sampler, **updates) if updates else sampler

    cache = CharacteristicCache(fs.n, model.output_dim)
    value_fn = partial(sampler.value, model, x_star)
    if estimator == "exact":
        game = exact_shapley(value_fn, fs.n, cache=cache, max_workers=max_workers)
    else:
        game = kernel_shapley(value_fn, fs.n, coalition_budget=coalition_budget, seed=sampler.seed,
                              cache=cache, max_workers=max_workers)

    logging.info(f"{sampler.kind}/{estimator}: {len(cache)} coalitions, M={sampler.mc_samples}, seed={sampler.seed}")
    return Explanation(
        base_values=game.base_values,
        phi=game.phi,
        method=sampler.kind,
        mc_samples=sampler.mc_samples,
        seed=sampler.seed,
        instance=x_star,
        prediction=cache.get(Coalition.full(fs.n)),
        sigma_mc=cache.total_sigma(),
        estimator=estimator,
        feature_names=fs.names,
        output_names=tuple(getattr(model, "output_names", ()) or ()),
    )
