import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import REPO
from src import lever_env
from src.errors import ConfigError, LoadError, SchemaError
from src.models import (LinearModel, MlpPolicy, ScriptedLeverPolicy, load_mlp, mlp_from_dict, resolve_model,
                        save_mlp, scripted_lever_policy)


def write_mlp(path, layers, n_in, n_out):
    path.write_text(json.dumps({"layers": layers, "input": n_in, "output": n_out}))
    return path


def reference_forward(cfg, x):
    """Row-by-row forward pass with plain Python sums."""
    h = list(x)
    for layer in cfg["layers"]:
        z = [sum(wij * hj for wij, hj in zip(row, h)) + bi for row, bi in zip(layer["w"], layer["b"])]
        act = {"tanh": np.tanh, "relu": lambda v: max(v, 0.0), "identity": lambda v: v}[layer["act"]]
        h = [float(act(v)) for v in z]
    return np.array(h)


def random_mlp_cfg(rng, sizes, act="tanh"):
    layers = []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        layers.append({"w": (rng.normal(size=(n_out, n_in)) / np.sqrt(n_in)).tolist(),
                       "b": rng.normal(size=n_out).tolist(), "act": act})
    return {"layers": layers, "input": sizes[0], "output": sizes[-1]}


# ── MLP loading ──────────────────────────────────────────────────────────────

def test_identity_network(tmp_path):
    path = write_mlp(tmp_path / "m.json", [{"w": [[1, 0], [0, 1]], "b": [0, 0], "act": "identity"}], 2, 2)
    model = load_mlp(path)
    np.testing.assert_array_equal(model.evaluate([3.0, -4.0]), [3.0, -4.0])


def test_relu_clamp(tmp_path):
    model = load_mlp(write_mlp(tmp_path / "m.json", [{"w": [[1]], "b": [-1], "act": "relu"}], 1, 1))
    assert model.evaluate([0.5])[0] == 0.0


def test_matches_reference_forward_pass(rng):
    cfg = random_mlp_cfg(rng, [8, 64, 64, 4])
    model = mlp_from_dict(cfg)
    for x in rng.normal(size=(20, 8)):
        np.testing.assert_allclose(model.evaluate(x), reference_forward(cfg, x), rtol=0, atol=1e-12)


def test_save_load_roundtrip_is_bit_exact(tmp_path, rng):
    model = mlp_from_dict(random_mlp_cfg(rng, [8, 16, 4]))
    back = load_mlp(save_mlp(model, tmp_path / "w.json"))
    X = rng.normal(size=(50, 8))
    np.testing.assert_array_equal(back.evaluate_batch(X), model.evaluate_batch(X))
    for a, b in zip(model.spec.layers, back.spec.layers):
        np.testing.assert_array_equal(a.w, b.w)
        assert a.act == b.act


def test_layer_shape_errors_name_the_layer(tmp_path):
    layers = [{"w": [[1, 0], [0, 1]], "b": [0, 0], "act": "tanh"},
              {"w": [[1, 2, 3]], "b": [0], "act": "identity"}]
    with pytest.raises(LoadError, match="layer 1"):
        load_mlp(write_mlp(tmp_path / "m.json", layers, 2, 1))


@pytest.mark.parametrize("layers, n_in, n_out, match", [
    ([{"w": [[1]], "b": [0], "act": "sigmoid"}], 1, 1, "activation"),
    ([{"w": [[1]], "b": [0, 1], "act": "relu"}], 1, 1, "bias"),
    ([{"w": [[1]], "b": [0], "act": "relu"}], 1, 2, "declared output"),
    ([{"b": [0], "act": "relu"}], 1, 1, "layer 0"),
    ([], 1, 1, "no layers"),
])
def test_schema_violations(tmp_path, layers, n_in, n_out, match):
    with pytest.raises(LoadError, match=match):
        load_mlp(write_mlp(tmp_path / "m.json", layers, n_in, n_out))


def test_missing_and_invalid_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mlp(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2")
    with pytest.raises(LoadError):
        load_mlp(bad)


def test_shipped_additive_model():
    model = load_mlp(REPO / "config" / "additive_model.json")
    assert (model.input_dim, model.output_dim) == (8, 1)
    assert model.output_names == ("y",)
    x = np.arange(8, dtype="float64")
    w = np.asarray(model.spec.layers[0].w[0])
    assert model.evaluate(x)[0] == pytest.approx(w @ x + 0.1)


def test_wrong_input_width():
    with pytest.raises(SchemaError):
        LinearModel([[1.0, 2.0]]).evaluate_batch(np.zeros((3, 3)))


# ── Scripted lever policy ────────────────────────────────────────────────────

def lever_state_vector(q=lever_env.Q_HOME, q4=0.0, dx=0.0, dz=0.0, theta=0.3, target=0.3):
    return np.array([*q, q4, dx, dz, theta, target], dtype="float64")


def test_scripted_fixed_point():
    a = scripted_lever_policy().evaluate(lever_state_vector())
    np.testing.assert_allclose(a[:3], 0.0, atol=1e-12)


def test_scripted_closes_gripper_while_pushing():
    a = scripted_lever_policy().evaluate(lever_state_vector(dx=0.002, dz=-0.001, theta=0.1, target=0.6))
    assert a[3] < 0


def test_scripted_opens_gripper_far_from_handle():
    x = lever_env.initial_state(-0.5, 0.5).as_array()
    assert scripted_lever_policy().evaluate(x)[3] > 0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-3.0, 3.0), min_size=3, max_size=3),
       st.floats(-0.1, 0.1), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0),
       st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
def test_scripted_outputs_bounded(q, q4, dx, dz, theta, target):
    a = scripted_lever_policy().evaluate(lever_state_vector(q, q4, dx, dz, theta, target))
    assert np.all(np.isfinite(a))
    assert np.all(np.abs(a) <= 1.0)


def test_scripted_batch_matches_rows(rng):
    policy = scripted_lever_policy()
    X = np.column_stack([rng.uniform(-2, 2, size=(30, 3)), rng.uniform(0, 0.04, 30),
                         rng.uniform(-0.1, 0.1, size=(30, 2)), rng.uniform(-1, 1, size=(30, 2))])
    batch = policy.evaluate_batch(X)
    for x, row in zip(X, batch):
        np.testing.assert_allclose(policy.evaluate(x), row, rtol=1e-9, atol=1e-12)


# ── Resolution ───────────────────────────────────────────────────────────────

def test_resolve_model(tmp_path):
    assert isinstance(resolve_model("builtin:scripted"), ScriptedLeverPolicy)
    with pytest.raises(ConfigError, match="available"):
        resolve_model("builtin:ddpg")
    path = write_mlp(tmp_path / "m.json", [{"w": [[2.0]], "b": [0.0], "act": "identity"}], 1, 1)
    assert isinstance(resolve_model(str(path)), MlpPolicy)
