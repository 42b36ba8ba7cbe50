"""Characteristic-function estimation over a background dataset.

Three ways of filling in the absent features of a coalition S:

- marginal:    absent features copied from uniformly drawn background rows
- conditional: absent features drawn from the fitted Gaussian given x_S = x*_S
- causal:      absent features drawn component by component along a causal
               ordering, with the present features fixed by intervention

Every coalition gets its own RNG stream derived from (seed, coalition mask), so
values do not depend on evaluation order or thread count.
"""
from dataclasses import dataclass
from pathlib import Path
import json
import logging

import numpy as np
import pandas as pd

from src.errors import ConfigError, DataError, DomainError, LoadError, NumericError, SchemaError
from src.shapley import Coalition, FeatureSpace, McValue
from src.utils import atomic_write_json, atomic_write_text, read_json

SAMPLER_KINDS = ("marginal", "conditional", "causal")
DEFAULT_MC_SAMPLES = 1000
RIDGE_FACTOR = 1e-6          # ridge = RIDGE_FACTOR * trace(cov) / N
SYMMETRY_TOL = 1e-12
EIGEN_SLACK = 1e-10
CSV_FLOAT_FORMAT = "%.17g"


# ── Background data ──────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class BackgroundDataset:
    rows: np.ndarray
    feature_space: FeatureSpace
    source_episodes: tuple = ()

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype="float64")
        if rows.ndim != 2 or rows.shape[1] != self.feature_space.n:
            raise SchemaError(f"Background rows have shape {rows.shape}, expected (R, {self.feature_space.n})")
        if rows.shape[0] < 2:
            raise DataError(f"Background dataset needs at least 2 rows, got {rows.shape[0]}")
        bad = ~np.isfinite(rows).all(axis=0)
        if bad.any():
            cols = [self.feature_space.names[i] for i in np.flatnonzero(bad)]
            raise DataError(f"Background dataset has non-finite values in {cols}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "source_episodes", tuple(self.source_episodes))

    @property
    def n_rows(self):
        return self.rows.shape[0]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=list(self.feature_space.names))


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_background(dataset: BackgroundDataset, path, meta=None) -> Path:
    path = Path(path)
    atomic_write_text(path, dataset.to_frame().to_csv(index=False, float_format=CSV_FLOAT_FORMAT))
    sidecar = {"source_episodes": list(dataset.source_episodes), "units": list(dataset.feature_space.units)}
    sidecar.update(meta or {})
    atomic_write_json(_meta_path(path), sidecar)
    return path


def load_background(path, feature_space: FeatureSpace = None) -> BackgroundDataset:
    """Read a background CSV (header = feature names) and its optional sidecar."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Background dataset not found: {path}")
    df = pd.read_csv(path, float_precision="round_trip")
    header = tuple(str(c) for c in df.columns)
    try:
        meta = read_json(_meta_path(path)) if _meta_path(path).exists() else {}
    except json.JSONDecodeError as e:
        raise DataError(f"{_meta_path(path).name}: invalid JSON ({e})") from None
    if feature_space is None:
        feature_space = FeatureSpace(header, meta.get("units"))
    elif header != feature_space.names:
        raise SchemaError(f"{path.name}: header {list(header)} != expected {list(feature_space.names)}")
    try:
        rows = df.to_numpy(dtype="float64")
    except (TypeError, ValueError) as e:
        raise DataError(f"{path.name}: non-numeric background data ({e})") from None
    logging.debug(f"Loaded {rows.shape[0]} background rows from {path}")
    return BackgroundDataset(rows, feature_space, tuple(meta.get("source_episodes", ())))


# ── Causal ordering ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class CausalOrdering:
    """Chain of components; ``confounded[j]`` marks component j's internal
    dependence as a hidden common cause rather than mutual interaction."""
    components: tuple
    confounded: tuple
    n_features: int

    def __post_init__(self):
        comps = tuple(tuple(int(i) for i in c) for c in self.components)
        flags = tuple(bool(f) for f in self.confounded)
        if any(len(c) == 0 for c in comps):
            raise SchemaError("Causal ordering has an empty component")
        flat = [i for c in comps for i in c]
        if sorted(flat) != list(range(self.n_features)):
            missing = sorted(set(range(self.n_features)) - set(flat))
            repeated = sorted({i for i in flat if flat.count(i) > 1})
            raise SchemaError(f"Causal ordering must partition all {self.n_features} features "
                              f"(missing {missing}, repeated {repeated})")
        if len(flags) != len(comps):
            raise SchemaError(f"Got {len(flags)} confounding flags for {len(comps)} components")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "confounded", flags)

    def to_names(self, feature_space: FeatureSpace) -> dict:
        return {
            "ordering": [[feature_space.names[i] for i in c] for c in self.components],
            "confounding": list(self.confounded),
        }


def ordering_from_names(ordering, confounding, feature_space: FeatureSpace) -> CausalOrdering:
    components = [[feature_space.index(name) for name in comp] for comp in ordering]
    if confounding is None:
        confounding = [False] * len(components)
    return CausalOrdering(components, confounding, feature_space.n)


def load_ordering(path, feature_space: FeatureSpace) -> CausalOrdering:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Ordering config not found: {path}")
    try:
        cfg = read_json(path)
    except json.JSONDecodeError as e:
        raise LoadError(f"{path.name}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict) or not isinstance(cfg.get("ordering"), list):
        raise LoadError(f"{path.name}: expected an object with an 'ordering' list")
    return ordering_from_names(cfg["ordering"], cfg.get("confounding"), feature_space)


# ── Gaussian machinery ───────────────────────────────────────────────────────

def _psd_factor(cov: np.ndarray) -> np.ndarray:
    """F with F @ F.T == cov; eigenvalues in [-EIGEN_SLACK, 0) are clamped to zero."""
    lam, vec = np.linalg.eigh(cov)
    if lam.size and lam.min() < -EIGEN_SLACK:
        raise NumericError(f"Covariance is indefinite (min eigenvalue {lam.min():.3e})")
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def _psd_clamp(cov: np.ndarray) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    if lam.size == 0 or lam.min() >= 0:
        return cov
    if lam.min() < -EIGEN_SLACK:
        raise NumericError(f"Conditional covariance is indefinite (min eigenvalue {lam.min():.3e})")
    return (vec * np.clip(lam, 0.0, None)) @ vec.T


@dataclass(frozen=True, eq=False)
class GaussianModel:
    mean: np.ndarray
    covariance: np.ndarray
    indices: tuple = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype="float64"))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype="float64"))
        if cov.shape != (mean.size, mean.size):
            raise SchemaError(f"Covariance shape {cov.shape} does not match mean length {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=SYMMETRY_TOL):
            raise NumericError("Covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "covariance", cov)
        indices = tuple(range(mean.size)) if self.indices is None else tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", indices)

    @property
    def dim(self):
        return self.mean.size

    def sample(self, rng, size: int) -> np.ndarray:
        z = rng.standard_normal((size, self.dim))
        return self.mean + z @ _psd_factor(self.covariance).T


def fit_gaussian(dataset: BackgroundDataset, ridge=None) -> GaussianModel:
    """Column means and sample covariance (divisor R-1) plus ridge * I.

    ``ridge=None`` uses RIDGE_FACTOR * trace(cov) / N.
    """
    X = np.asarray(dataset.rows, dtype="float64")
    if not np.isfinite(X).all():
        raise DataError("Cannot fit a Gaussian to non-finite data")
    if X.shape[0] < 2:
        raise DataError(f"Need at least 2 rows to fit a covariance, got {X.shape[0]}")
    mean = X.mean(axis=0)
    cov = np.atleast_2d(np.cov(X, rowvar=False, ddof=1))
    n = cov.shape[0]
    if ridge is None:
        ridge = RIDGE_FACTOR * np.trace(cov) / n
        if ridge <= 0:
            ridge = RIDGE_FACTOR
    if ridge < 0:
        raise DomainError(f"ridge must be non-negative, got {ridge}")
    cov = cov + ridge * np.eye(n)
    cov = 0.5 * (cov + cov.T)
    min_eig = np.linalg.eigvalsh(cov).min()
    if min_eig <= 0:
        logging.warning(f"Fitted covariance is singular (min eigenvalue {min_eig:.3e}, ridge={ridge})")
    return GaussianModel(mean, cov)


def _conditioning_terms(model: GaussianModel, a, b):
    """Gain K = S_ab S_bb^-1 and conditional covariance S_aa - K S_ba."""
    cov = model.covariance
    s_bb = cov[np.ix_(b, b)]
    s_ab = cov[np.ix_(a, b)]
    try:
        np.linalg.cholesky(s_bb)
        gain = np.linalg.solve(s_bb, s_ab.T).T
    except np.linalg.LinAlgError:
        raise NumericError(f"Conditioning block for features {list(b)} is singular") from None
    cond_cov = _psd_clamp(cov[np.ix_(a, a)] - gain @ s_ab.T)
    return gain, cond_cov


def gaussian_conditional(model: GaussianModel, given) -> GaussianModel:
    """Distribution of the remaining features given ``(index, value)`` pairs."""
    pairs = list(given.items()) if isinstance(given, dict) else [tuple(p) for p in given]
    b = [int(i) for i, _ in pairs]
    if len(set(b)) != len(b):
        raise DomainError(f"Conditioning indices must be distinct, got {b}")
    if len(b) >= model.dim:
        raise DomainError(f"Cannot condition on {len(b)} of {model.dim} features")
    if any(not 0 <= i < model.dim for i in b):
        raise DomainError(f"Conditioning index out of range in {b}")
    a = [i for i in range(model.dim) if i not in b]
    if not b:
        return GaussianModel(model.mean.copy(), model.covariance.copy(), indices=tuple(a))
    x_b = np.array([v for _, v in pairs], dtype="float64")
    gain, cond_cov = _conditioning_terms(model, a, b)
    mean = model.mean[a] + gain @ (x_b - model.mean[b])
    return GaussianModel(mean, cond_cov, indices=tuple(model.indices[i] for i in a))


def _conditional_draws(model: GaussianModel, a, b, x_b_rows, rng):
    """One joint draw of features ``a`` per row of ``x_b_rows`` (values of ``b``)."""
    m = x_b_rows.shape[0]
    if not b:
        means = np.broadcast_to(model.mean[a], (m, len(a)))
        cond_cov = model.covariance[np.ix_(a, a)]
    else:
        gain, cond_cov = _conditioning_terms(model, a, b)
        means = model.mean[a] + (x_b_rows - model.mean[b]) @ gain.T
    z = rng.standard_normal((m, len(a)))
    return means + z @ _psd_factor(cond_cov).T


def mahalanobis_distance(model: GaussianModel, x) -> float:
    d = np.asarray(x, dtype="float64") - model.mean
    try:
        return float(np.sqrt(max(d @ np.linalg.solve(model.covariance, d), 0.0)))
    except np.linalg.LinAlgError:
        raise NumericError("Covariance is singular; Mahalanobis distance undefined") from None


# ── Samplers ─────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ValueSampler:
    kind: str
    dataset: BackgroundDataset
    gaussian: GaussianModel = None
    ordering: CausalOrdering = None
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0
    exhaustive: bool = False

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"Unknown sampler kind {self.kind!r}; expected one of {SAMPLER_KINDS}")
        if int(self.mc_samples) < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.kind in ("conditional", "causal") and self.gaussian is None:
            raise ConfigError(f"{self.kind} sampler needs a fitted GaussianModel")
        if self.gaussian is not None and self.gaussian.dim != self.dataset.feature_space.n:
            raise SchemaError(f"Gaussian has {self.gaussian.dim} dims, dataset has {self.dataset.feature_space.n}")
        if self.kind == "causal":
            if self.ordering is None:
                raise ConfigError("causal sampler needs a causal ordering")
            if self.ordering.n_features != self.dataset.feature_space.n:
                raise SchemaError(f"Ordering covers {self.ordering.n_features} features, "
                                  f"dataset has {self.dataset.feature_space.n}")

    def rng_for(self, coalition: Coalition):
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(coalition.mask,)))

    def value(self, model, x_star, coalition: Coalition):
        return _VALUE_FUNCTIONS[self.kind](self, model, x_star, coalition)


def build_sampler(kind, dataset: BackgroundDataset, ordering: CausalOrdering = None,
                  mc_samples=DEFAULT_MC_SAMPLES, seed=0, ridge=None, exhaustive=False) -> ValueSampler:
    gaussian = fit_gaussian(dataset, ridge) if kind in ("conditional", "causal") else None
    return ValueSampler(kind, dataset, gaussian=gaussian, ordering=ordering if kind == "causal" else None,
                        mc_samples=int(mc_samples), seed=int(seed), exhaustive=exhaustive)


def _require(sampler, kind, x_star, coalition):
    if sampler.kind != kind:
        raise ConfigError(f"{kind}_value called with a {sampler.kind} sampler")
    x_star = np.asarray(x_star, dtype="float64").ravel()
    n = sampler.dataset.feature_space.n
    if x_star.shape[0] != n or coalition.n != n:
        raise SchemaError(f"Instance/coalition width ({x_star.shape[0]}, {coalition.n}) != N={n}")
    return x_star


def _exact(model, x_star):
    value = np.asarray(model.evaluate(x_star), dtype="float64")
    return McValue(value, np.zeros_like(value))


def _mc_estimate(preds: np.ndarray):
    m = preds.shape[0]
    mean = preds.mean(axis=0)
    if m < 2:
        return McValue(mean, np.zeros_like(mean))
    return McValue(mean, preds.std(axis=0, ddof=1) / np.sqrt(m))


def marginal_value(sampler: ValueSampler, model, x_star, coalition: Coalition):
    """v(S) with absent features taken from background rows drawn with replacement."""
    x_star = _require(sampler, "marginal", x_star, coalition)
    if coalition.is_full:
        return _exact(model, x_star)
    rows = sampler.dataset.rows
    if sampler.exhaustive:
        idx = np.arange(rows.shape[0])
    else:
        idx = sampler.rng_for(coalition).integers(0, rows.shape[0], size=sampler.mc_samples)
    absent = coalition.absent()
    X = np.repeat(x_star[None, :], idx.size, axis=0)
    X[:, absent] = rows[np.ix_(idx, absent)]
    return _mc_estimate(model.evaluate_batch(X))


def conditional_value(sampler: ValueSampler, model, x_star, coalition: Coalition):
    """v(S) = E[f(x) | x_S = x*_S] under the fitted Gaussian."""
    x_star = _require(sampler, "conditional", x_star, coalition)
    if coalition.is_full:
        return _exact(model, x_star)
    present = coalition.members()
    cond = gaussian_conditional(sampler.gaussian, [(i, x_star[i]) for i in present])
    X = np.repeat(x_star[None, :], sampler.mc_samples, axis=0)
    X[:, list(cond.indices)] = cond.sample(sampler.rng_for(coalition), sampler.mc_samples)
    return _mc_estimate(model.evaluate_batch(X))


def causal_value(sampler: ValueSampler, model, x_star, coalition: Coalition):
    """v(S) = E[f(x) | do(x_S = x*_S)], sampled along the causal ordering.

    For component j, absent features are drawn jointly given every feature of
    the earlier components (intervened at x*, absent at their sampled values)
    and, for mutual-interaction components, the intervened members of j.
    """
    x_star = _require(sampler, "causal", x_star, coalition)
    if coalition.is_full:
        return _exact(model, x_star)
    m = sampler.mc_samples
    rng = sampler.rng_for(coalition)
    present = coalition.members()
    X = np.empty((m, x_star.size))
    X[:, present] = x_star[present]
    upstream = []
    for comp, confounded in zip(sampler.ordering.components, sampler.ordering.confounded):
        absent = sorted(i for i in comp if i not in coalition)
        intervened = sorted(i for i in comp if i in coalition)
        if absent:
            cond = sorted(upstream + ([] if confounded else intervened))
            X[:, absent] = _conditional_draws(sampler.gaussian, absent, cond, X[:, cond], rng)
        upstream.extend(comp)
    return _mc_estimate(model.evaluate_batch(X))


_VALUE_FUNCTIONS = {
    "marginal": marginal_value,
    "conditional": conditional_value,
    "causal": causal_value,
}
