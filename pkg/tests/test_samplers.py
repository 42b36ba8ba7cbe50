"""Tests for the characteristic-function samplers and the Gaussian backend."""
import json

import numpy as np
import pytest

from conftest import exact_moment_rows, make_dataset
from src.errors import ConfigError, DataError, DomainError, LoadError, NumericError, SchemaError
from src.models import LinearModel
from src.samplers import (CausalOrdering, GaussianModel, ValueSampler, build_sampler, causal_value,
                          conditional_value, fit_gaussian, gaussian_conditional, load_background,
                          load_ordering, mahalanobis_distance, marginal_value, ordering_from_names,
                          save_background)
from src.shapley import Coalition, FeatureSpace, explain_instance


def sigma_sum(*results):
    return sum(np.asarray(s) for _, s in results)


# ── Background data and orderings ────────────────────────────────────────────

def test_background_validation():
    with pytest.raises(DataError, match="at least 2"):
        make_dataset([[1.0, 2.0]])
    with pytest.raises(DataError, match="x2"):
        make_dataset([[1.0, np.nan], [2.0, 3.0]])
    with pytest.raises(SchemaError):
        make_dataset(np.zeros((3, 2)), names=("a", "b", "c"))


def test_background_csv_roundtrip(tmp_path, rng):
    dataset = make_dataset(rng.normal(size=(200, 3)) * np.array([1e-7, 1.0, 1e5]))
    path = save_background(dataset, tmp_path / "bg.csv", meta={"seed": 7})
    back = load_background(path)
    np.testing.assert_array_equal(back.rows, dataset.rows)
    assert back.feature_space.names == ("x1", "x2", "x3")
    assert json.loads((tmp_path / "bg.csv.meta.json").read_text())["seed"] == 7


def test_load_background_header_mismatch(tmp_path, rng):
    path = save_background(make_dataset(rng.normal(size=(5, 2))), tmp_path / "bg.csv")
    with pytest.raises(SchemaError, match="header"):
        load_background(path, FeatureSpace(("a", "b")))
    with pytest.raises(FileNotFoundError):
        load_background(tmp_path / "missing.csv")


def test_load_background_non_numeric(tmp_path):
    path = tmp_path / "bg.csv"
    path.write_text("x1,x2\n1,2\nfoo,3\n")
    with pytest.raises(DataError):
        load_background(path)


def test_load_background_corrupt_sidecar(tmp_path, rng):
    path = save_background(make_dataset(rng.normal(size=(5, 2))), tmp_path / "bg.csv")
    (tmp_path / "bg.csv.meta.json").write_text("{\"units\": [")
    with pytest.raises(DataError, match="meta"):
        load_background(path)


def test_ordering_must_partition():
    fs = FeatureSpace(("a", "b", "c"))
    ordering = ordering_from_names([["c"], ["a", "b"]], None, fs)
    assert ordering.components == ((2,), (0, 1))
    assert ordering.confounded == (False, False)
    assert ordering.to_names(fs) == {"ordering": [["c"], ["a", "b"]], "confounding": [False, False]}
    with pytest.raises(SchemaError, match="missing"):
        CausalOrdering([[0], [1]], [False, False], 3)
    with pytest.raises(SchemaError):
        CausalOrdering([[0, 1], [1, 2]], [False, False], 3)
    with pytest.raises(SchemaError, match="flags"):
        CausalOrdering([[0, 1, 2]], [False, True], 3)
    with pytest.raises(SchemaError, match="Unknown feature"):
        ordering_from_names([["a", "z"]], None, fs)


def test_load_ordering_files(tmp_path):
    fs = FeatureSpace(("a", "b"))
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"ordering": [["b"], ["a"]], "confounding": [False, True]}))
    assert load_ordering(good, fs).confounded == (False, True)
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(LoadError):
        load_ordering(bad, fs)
    with pytest.raises(FileNotFoundError):
        load_ordering(tmp_path / "nope.json", fs)


def test_shipped_ordering_matches_lever_features():
    from conftest import REPO
    from src.lever_env import LEVER_FEATURES

    ordering = load_ordering(REPO / "config" / "lever_ordering.json", LEVER_FEATURES)
    assert ordering.to_names(LEVER_FEATURES)["ordering"] == [
        ["theta_target"], ["q1", "q2", "q3"], ["q4", "dx", "dz"], ["theta_lever"]]
    assert ordering.confounded == (False, False, False, False)


# ── Gaussian fitting and conditioning ────────────────────────────────────────

def test_fit_two_point_sample():
    g = fit_gaussian(make_dataset([[0.0, 0.0], [2.0, 2.0]]), ridge=0.0)
    np.testing.assert_allclose(g.mean, [1.0, 1.0])
    np.testing.assert_allclose(g.covariance, [[2.0, 2.0], [2.0, 2.0]])


def test_fit_ridge_bound(rng):
    g = fit_gaussian(make_dataset(np.repeat(rng.normal(size=(10, 1)), 3, axis=1)), ridge=1e-6)
    assert np.linalg.eigvalsh(g.covariance).min() >= 1e-6 - 1e-12
    with pytest.raises(DomainError):
        fit_gaussian(make_dataset(rng.normal(size=(10, 2))), ridge=-1.0)


def test_fit_recovers_known_gaussian(rng):
    mu = np.array([1.0, -2.0, 3.0])
    a = rng.normal(size=(3, 3))
    sigma = a @ a.T + 0.5 * np.eye(3)
    g = fit_gaussian(make_dataset(rng.multivariate_normal(mu, sigma, size=10_000)))
    assert np.linalg.norm(g.mean - mu) <= 0.05 * np.linalg.norm(mu)
    assert np.linalg.norm(g.covariance - sigma) <= 0.05 * np.linalg.norm(sigma)


def test_conditional_textbook_case():
    g = GaussianModel(np.zeros(2), np.array([[1.0, 0.5], [0.5, 1.0]]))
    cond = gaussian_conditional(g, {0: 2.0})
    np.testing.assert_allclose(cond.mean, [1.0], atol=1e-12)
    np.testing.assert_allclose(cond.covariance, [[0.75]], atol=1e-12)
    assert cond.indices == (1,)


def test_conditional_diagonal_leaves_marginals():
    g = GaussianModel(np.array([1.0, 2.0, 3.0]), np.diag([1.0, 4.0, 9.0]))
    cond = gaussian_conditional(g, [(1, 10.0)])
    np.testing.assert_allclose(cond.mean, [1.0, 3.0])
    np.testing.assert_allclose(cond.covariance, np.diag([1.0, 9.0]))


def test_conditional_mean_matches_regression_oracle(rng):
    a = rng.normal(size=(5, 5))
    sigma = a @ a.T + np.eye(5)
    mu = rng.normal(size=5)
    draws = rng.multivariate_normal(mu, sigma, size=100_000)
    b, rest = [0, 3], [1, 2, 4]
    design = np.column_stack([np.ones(len(draws)), draws[:, b]])
    coef, *_ = np.linalg.lstsq(design, draws[:, rest], rcond=None)
    x_b = np.array([0.7, -1.2])
    oracle = np.concatenate([[1.0], x_b]) @ coef
    cond = gaussian_conditional(GaussianModel(mu, sigma), list(zip(b, x_b)))
    np.testing.assert_allclose(cond.mean, oracle, rtol=0.02, atol=0.02)


def test_conditional_preconditions():
    g = GaussianModel(np.zeros(2), np.eye(2))
    with pytest.raises(DomainError):
        gaussian_conditional(g, [(0, 1.0), (0, 2.0)])
    with pytest.raises(DomainError):
        gaussian_conditional(g, [(0, 1.0), (1, 2.0)])


def test_conditioning_on_singular_block():
    g = GaussianModel(np.zeros(3), np.array([[1.0, 1.0, 0.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]))
    with pytest.raises(NumericError):
        gaussian_conditional(g, [(0, 1.0), (1, 1.0)])


def test_asymmetric_covariance_rejected():
    with pytest.raises(NumericError):
        GaussianModel(np.zeros(2), np.array([[1.0, 0.5], [0.4, 1.0]]))


def test_mahalanobis():
    g = GaussianModel(np.zeros(2), np.diag([4.0, 1.0]))
    assert mahalanobis_distance(g, [2.0, 0.0]) == pytest.approx(1.0)


# ── Value functions ──────────────────────────────────────────────────────────

def test_sampler_validation(chain_dataset):
    with pytest.raises(ConfigError):
        ValueSampler("bogus", chain_dataset)
    with pytest.raises(ConfigError):
        ValueSampler("conditional", chain_dataset)
    with pytest.raises(ConfigError, match="ordering"):
        build_sampler("causal", chain_dataset)
    with pytest.raises(ConfigError):
        build_sampler("marginal", chain_dataset, mc_samples=0)
    with pytest.raises(ConfigError):
        marginal_value(build_sampler("conditional", chain_dataset), LinearModel([[1.0, 1.0]]),
                       [0.0, 0.0], Coalition(0, 2))


@pytest.mark.parametrize("kind", ["marginal", "conditional", "causal"])
def test_full_coalition_is_exact(kind, chain_dataset):
    ordering = CausalOrdering([[0], [1]], [False, False], 2)
    sampler = build_sampler(kind, chain_dataset, ordering=ordering, mc_samples=10)
    model = LinearModel([[0.3, 0.7]], [0.1])
    x = np.array([1.0, 0.9])
    value, sigma = sampler.value(model, x, Coalition.full(2))
    np.testing.assert_array_equal(value, model.evaluate(x))
    np.testing.assert_array_equal(sigma, [0.0])


@pytest.mark.parametrize("kind", ["marginal", "conditional", "causal"])
def test_empty_coalition_ignores_instance_and_is_deterministic(kind, chain_dataset):
    ordering = CausalOrdering([[0], [1]], [False, False], 2)
    sampler = build_sampler(kind, chain_dataset, ordering=ordering, mc_samples=200, seed=5)
    model = LinearModel([[1.0, -1.0]])
    v1, _ = sampler.value(model, [1.0, 0.9], Coalition.empty(2))
    v2, _ = sampler.value(model, [-3.0, 8.0], Coalition.empty(2))
    np.testing.assert_array_equal(v1, v2)


def test_marginal_additive_oracle(rng):
    rows = rng.normal(loc=[1.0, -1.0, 0.5], scale=[1.0, 2.0, 0.5], size=(300, 3))
    dataset = make_dataset(rows)
    w = np.array([1.5, -0.5, 2.0])
    model = LinearModel([w])
    x = np.array([0.2, 0.4, -1.0])
    sampler = build_sampler("marginal", dataset, mc_samples=2000, seed=1)
    mu = rows.mean(axis=0)
    for mask in range(7):
        s = Coalition(mask, 3)
        value, sigma = marginal_value(sampler, model, x, s)
        oracle = sum(w[i] * (x[i] if i in s else mu[i]) for i in range(3))
        assert abs(value[0] - oracle) <= 4 * sigma[0]


def test_marginal_sampled_phi_on_additive_model():
    rng = np.random.default_rng(21)
    rows = rng.normal(loc=np.linspace(-1, 1, 8), scale=np.linspace(0.5, 2.0, 8), size=(2000, 8))
    w = np.array([1.0, -2.0, 0.5, 3.0, -1.5, 2.5, 0.25, -0.75])
    model = LinearModel([w], [0.1])
    x = np.array([2.0, -1.0, 0.5, 1.5, -2.0, 1.0, 3.0, -0.5])
    sampler = build_sampler("marginal", make_dataset(rows), mc_samples=10_000, seed=5)
    exp = explain_instance(model, x, sampler)
    expected = w * (x - rows.mean(axis=0))
    scale = np.abs(expected).sum()
    assert np.max(np.abs(exp.phi[0] - expected)) <= 0.02 * scale


def test_marginal_exhaustive_sweep(rng):
    rows = rng.normal(size=(40, 2))
    dataset = make_dataset(rows)
    model = LinearModel([[2.0, 1.0]])
    sampler = build_sampler("marginal", dataset, exhaustive=True)
    value, _ = marginal_value(sampler, model, [9.0, 9.0], Coalition.empty(2))
    assert value[0] == pytest.approx(model.evaluate_batch(rows).mean(), abs=1e-12)


def test_conditional_mean_oracle():
    dataset = make_dataset(exact_moment_rows([0.5, -0.2], [[1.0, 0.9], [0.9, 1.0]], 3000, seed=2))
    sampler = build_sampler("conditional", dataset, mc_samples=5000, seed=3)
    value, sigma = conditional_value(sampler, LinearModel([[0.0, 1.0]]), [1.0, 0.0], Coalition(1, 2))
    assert abs(value[0] - (0.9 * (1.0 - 0.5) - 0.2)) <= 4 * sigma[0]


def test_conditional_empty_coalition_mean():
    mean = np.array([0.3, -0.7, 1.1])
    cov = np.array([[1.0, 0.3, 0.1], [0.3, 2.0, -0.4], [0.1, -0.4, 0.5]])
    dataset = make_dataset(exact_moment_rows(mean, cov, 2000, seed=4))
    w = np.array([1.0, 2.0, -1.0])
    sampler = build_sampler("conditional", dataset, mc_samples=20_000, seed=8)
    value, sigma = conditional_value(sampler, LinearModel([w]), np.zeros(3), Coalition.empty(3))
    assert abs(value[0] - w @ mean) <= max(4 * sigma[0], 0.02 * abs(w @ mean))


@pytest.mark.slow
def test_independence_collapse():
    sds = np.array([0.5, 1.0, 2.0, 0.3, 1.5, 0.8, 1.2, 0.6])
    dataset = make_dataset(exact_moment_rows(np.linspace(-1, 1, 8), np.diag(sds ** 2), 5000, seed=21))
    model = LinearModel(np.random.default_rng(0).normal(size=(2, 8)), [0.5, -0.5])
    x = np.random.default_rng(1).normal(size=8)
    ordering = CausalOrdering([[3, 0], [1, 2, 4], [5, 6, 7]], [False, True, False], 8)
    samplers = {kind: build_sampler(kind, dataset, ordering=ordering, mc_samples=500, seed=2)
                for kind in ("marginal", "conditional", "causal")}
    for mask in range(1 << 8):
        s = Coalition(mask, 8)
        results = {kind: sp.value(model, x, s) for kind, sp in samplers.items()}
        ref = results["marginal"]
        for kind in ("conditional", "causal"):
            tol = 4 * sigma_sum(ref, results[kind]) + 1e-12
            assert np.all(np.abs(results[kind][0] - ref[0]) <= tol), (kind, mask)


def test_confounded_component_equals_marginal(rng):
    a = rng.normal(size=(6, 6))
    cov = a @ a.T / 6 + 0.2 * np.eye(6)
    dataset = make_dataset(exact_moment_rows(rng.normal(size=6), cov, 4000, seed=6))
    model = LinearModel(rng.normal(size=(3, 6)))
    x = rng.normal(size=6)
    causal = build_sampler("causal", dataset, ordering=CausalOrdering([range(6)], [True], 6),
                           mc_samples=1000, seed=3)
    marginal = build_sampler("marginal", dataset, mc_samples=1000, seed=3)
    for mask in rng.choice(1 << 6, size=50, replace=True):
        s = Coalition(int(mask), 6)
        rc, rm = causal_value(causal, model, x, s), marginal_value(marginal, model, x, s)
        assert np.all(np.abs(rc[0] - rm[0]) <= 4 * sigma_sum(rc, rm) + 1e-12)


def test_permuting_within_component_is_harmless(rng):
    cov = np.array([[1.0, 0.4, 0.2], [0.4, 1.0, 0.5], [0.2, 0.5, 1.0]])
    dataset = make_dataset(exact_moment_rows(np.zeros(3), cov, 3000, seed=9))
    model = LinearModel([[1.0, 2.0, 3.0]])
    x = np.array([0.5, -1.0, 1.5])
    a = build_sampler("causal", dataset, ordering=CausalOrdering([[0], [1, 2]], [False, False], 3),
                      mc_samples=2000, seed=1)
    b = build_sampler("causal", dataset, ordering=CausalOrdering([[0], [2, 1]], [False, False], 3),
                      mc_samples=2000, seed=1)
    for mask in range(8):
        s = Coalition(mask, 3)
        ra, rb = a.value(model, x, s), b.value(model, x, s)
        assert np.all(np.abs(ra[0] - rb[0]) <= 4 * sigma_sum(ra, rb) + 1e-12)


# ── Chain SCM: indirect effects ──────────────────────────────────────────────

def test_chain_scm_causal_vs_marginal(chain_dataset):
    model = LinearModel([[0.0, 1.0]])
    x = np.array([1.0, 0.9])
    ordering = CausalOrdering([[0], [1]], [False, False], 2)
    causal = explain_instance(model, x, build_sampler("causal", chain_dataset, ordering=ordering),
                              mc_samples=10_000, seed=0)
    marginal = explain_instance(model, x, build_sampler("marginal", chain_dataset),
                                mc_samples=10_000, seed=0)

    assert causal.phi[0, 0] == pytest.approx(0.4, rel=0.05)
    assert causal.phi[0, 1] == pytest.approx(0.5, abs=0.02)
    assert abs(marginal.phi[0, 0]) <= 0.02
    for exp in (causal, marginal):
        assert exp.prediction[0] == pytest.approx(0.9)
        assert abs(exp.base_values[0] + exp.phi[0].sum() - 0.9) <= 4 * exp.sigma_mc[0] + 1e-12
        assert exp.mc_samples == 10_000


def test_first_component_without_cross_covariance(rng):
    cov = np.eye(5)
    cov[1:, 1:] = np.array([[1.0, 0.6, 0.3, 0.1], [0.6, 1.0, 0.5, 0.2],
                            [0.3, 0.5, 1.0, 0.4], [0.1, 0.2, 0.4, 1.0]])
    dataset = make_dataset(exact_moment_rows(np.zeros(5), cov, 4000, seed=12))
    model = LinearModel(rng.normal(size=(4, 5)))
    x = np.array([1.2, -0.5, 0.8, 0.3, -1.0])
    ordering = CausalOrdering([[0], [1, 2], [3, 4]], [False, False, False], 5)
    causal = explain_instance(model, x, build_sampler("causal", dataset, ordering=ordering, mc_samples=2000))
    marginal = explain_instance(model, x, build_sampler("marginal", dataset, mc_samples=2000))
    tol = 4 * (causal.sigma_mc + marginal.sigma_mc)
    assert np.all(np.abs(causal.phi[:, 0] - marginal.phi[:, 0]) <= tol)


def test_explain_instance_thread_count_invariance(chain_dataset):
    model = LinearModel([[0.3, 1.0], [1.0, -1.0]])
    ordering = CausalOrdering([[0], [1]], [False, False], 2)
    sampler = build_sampler("causal", chain_dataset, ordering=ordering, mc_samples=300, seed=4)
    serial = explain_instance(model, [1.0, 0.9], sampler)
    threaded = explain_instance(model, [1.0, 0.9], sampler, max_workers=4)
    np.testing.assert_array_equal(serial.phi, threaded.phi)
    np.testing.assert_array_equal(serial.sigma_mc, threaded.sigma_mc)


def test_explain_instance_mean_instance(rng):
    rows = rng.normal(size=(200, 4))
    dataset = make_dataset(rows)
    model = LinearModel([[1.0, -2.0, 0.5, 3.0]])
    exp = explain_instance(model, rows.mean(axis=0), build_sampler("marginal", dataset, exhaustive=True))
    np.testing.assert_allclose(exp.phi, 0.0, atol=1e-10)


def test_explain_instance_dimension_mismatch(chain_dataset):
    sampler = build_sampler("marginal", chain_dataset)
    with pytest.raises(SchemaError):
        explain_instance(LinearModel([[1.0, 1.0]]), [1.0, 2.0, 3.0], sampler)
    with pytest.raises(SchemaError):
        explain_instance(LinearModel([[1.0, 1.0, 1.0]]), [1.0, 2.0], sampler)
    with pytest.raises(ConfigError):
        explain_instance(LinearModel([[1.0, 1.0]]), [1.0, 2.0], sampler, estimator="permutation")


def test_kernel_estimator_through_sampler(chain_dataset):
    model = LinearModel([[0.5, 1.0]])
    sampler = build_sampler("marginal", chain_dataset, mc_samples=100)
    exact = explain_instance(model, [1.0, 0.9], sampler)
    kernel = explain_instance(model, [1.0, 0.9], sampler, estimator="kernel")
    np.testing.assert_allclose(kernel.phi, exact.phi, atol=1e-8)
    assert kernel.estimator == "kernel"
