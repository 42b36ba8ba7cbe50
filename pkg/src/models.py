"""Deterministic policy models to be explained.

All models map a feature vector of length ``input_dim`` to an action vector of
length ``output_dim`` in float64, and are immutable after construction.
"""
from dataclasses import dataclass
from pathlib import Path
import json
import logging

import numpy as np

from src import lever_env as env
from src.errors import ConfigError, LoadError, SchemaError
from src.utils import atomic_write_json, read_json

ACTIVATIONS = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "identity": lambda z: z,
}

# scripted controller tuning
LEVER_STEP = 0.05            # rad of lever travel requested per step
ENGAGE_INNER = 0.005         # m, handle offset below which the lever is fully driven
ENGAGE_OUTER = 0.015         # m, handle offset above which the tip only approaches
CLOSE_RADIUS = 0.03          # m, gripper closes inside this offset
CLOSE_SOFTNESS = 0.005       # m
DAMPING = 0.01               # m, damped least-squares regulariser


class PolicyModel:
    input_dim = None
    output_dim = None
    output_names = ()

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype="float64").ravel()
        return self.evaluate_batch(x[None, :])[0]

    def evaluate_batch(self, X) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(x)

    def _check_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype="float64")
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise SchemaError(f"{type(self).__name__} expects (M, {self.input_dim}) inputs, got {X.shape}")
        return X


# ── Analytic models ──────────────────────────────────────────────────────────

class LinearModel(PolicyModel):
    """f(x) = W x + b, the closed-form oracle for additive attributions."""

    def __init__(self, weights, bias=None, output_names=()):
        W = np.atleast_2d(np.asarray(weights, dtype="float64"))
        self.weights = W
        self.bias = np.zeros(W.shape[0]) if bias is None else np.asarray(bias, dtype="float64").ravel()
        if self.bias.shape != (W.shape[0],):
            raise SchemaError(f"Bias of length {self.bias.size} for {W.shape[0]} outputs")
        self.input_dim, self.output_dim = W.shape[1], W.shape[0]
        self.output_names = tuple(output_names)

    def evaluate_batch(self, X):
        X = self._check_batch(X)
        return np.einsum("mi,oi->mo", X, self.weights) + self.bias


# ── MLP from weights ─────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class MlpLayer:
    w: np.ndarray       # (out, in), row-major in the JSON file
    b: np.ndarray       # (out,)
    act: str


@dataclass(frozen=True, eq=False)
class MlpSpec:
    layers: tuple
    input_dim: int
    output_dim: int

    def __post_init__(self):
        if not self.layers:
            raise LoadError("MLP has no layers")
        width = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.act not in ACTIVATIONS:
                raise LoadError(f"layer {i}: unknown activation {layer.act!r}; expected one of {sorted(ACTIVATIONS)}")
            if layer.w.ndim != 2 or layer.w.shape[1] != width:
                raise LoadError(f"layer {i}: weight shape {layer.w.shape} does not accept {width} inputs")
            if layer.b.shape != (layer.w.shape[0],):
                raise LoadError(f"layer {i}: bias shape {layer.b.shape} != ({layer.w.shape[0]},)")
            if not (np.isfinite(layer.w).all() and np.isfinite(layer.b).all()):
                raise LoadError(f"layer {i}: non-finite parameters")
            width = layer.w.shape[0]
        if width != self.output_dim:
            raise LoadError(f"layer {len(self.layers) - 1}: produces {width} outputs, declared output is {self.output_dim}")


class MlpPolicy(PolicyModel):
    def __init__(self, spec: MlpSpec, output_names=()):
        self.spec = spec
        self.input_dim, self.output_dim = spec.input_dim, spec.output_dim
        self.output_names = tuple(output_names)

    def evaluate_batch(self, X):
        h = self._check_batch(X)
        for layer in self.spec.layers:
            # einsum keeps a fixed summation order independent of BLAS threading
            h = ACTIVATIONS[layer.act](np.einsum("mi,oi->mo", h, layer.w) + layer.b)
        return h


def mlp_from_dict(cfg: dict, source="<dict>") -> MlpPolicy:
    if not isinstance(cfg, dict) or "layers" not in cfg:
        raise LoadError(f"{source}: expected an object with 'layers', 'input' and 'output'")
    layers = []
    for i, raw in enumerate(cfg["layers"]):
        try:
            w = np.asarray(raw["w"], dtype="float64")
            b = np.asarray(raw["b"], dtype="float64").ravel()
            act = str(raw.get("act", "identity"))
        except (KeyError, TypeError, ValueError) as e:
            raise LoadError(f"{source}: layer {i}: cannot read weights ({e})") from None
        layers.append(MlpLayer(np.atleast_2d(w), b, act))
    try:
        spec = MlpSpec(tuple(layers), int(cfg["input"]), int(cfg["output"]))
    except KeyError as e:
        raise LoadError(f"{source}: missing {e.args[0]!r}") from None
    return MlpPolicy(spec, output_names=cfg.get("output_names", ()))


def load_mlp(path) -> MlpPolicy:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Model weights not found: {path}")
    try:
        cfg = read_json(path)
    except json.JSONDecodeError as e:
        raise LoadError(f"{path.name}: invalid JSON ({e})") from None
    model = mlp_from_dict(cfg, source=path.name)
    logging.debug(f"Loaded MLP {model.input_dim}->{model.output_dim} with {len(model.spec.layers)} layers from {path}")
    return model


def mlp_to_dict(model: MlpPolicy) -> dict:
    out = {
        "layers": [{"w": layer.w.tolist(), "b": layer.b.tolist(), "act": layer.act} for layer in model.spec.layers],
        "input": model.input_dim,
        "output": model.output_dim,
    }
    if model.output_names:
        out["output_names"] = list(model.output_names)
    return out


def save_mlp(model: MlpPolicy, path) -> Path:
    return atomic_write_json(Path(path), mlp_to_dict(model))


# ── Scripted lever controller ────────────────────────────────────────────────

class ScriptedLeverPolicy(PolicyModel):
    """Damped least-squares Cartesian controller over the eight lever features.

    Far from the handle the tip is steered onto it; once on the handle the
    target point slides along the lever arc towards theta_target (pulling
    waits for the gripper to close). a4 opens the gripper away from the
    handle and closes it near the handle.
    """
    input_dim = env.LEVER_FEATURES.n
    output_dim = len(env.ACTION_NAMES)
    output_names = env.ACTION_NAMES

    def evaluate_batch(self, X):
        X = self._check_batch(X)
        q, q4, offset = X[:, :3], X[:, 3], X[:, 4:6]
        theta, target = X[:, 6], X[:, 7]
        dist = np.hypot(offset[:, 0], offset[:, 1])

        delta = np.clip(target - theta, -LEVER_STEP, LEVER_STEP)
        engage = np.clip((ENGAGE_OUTER - dist) / (ENGAGE_OUTER - ENGAGE_INNER), 0.0, 1.0)
        closed = np.clip((2 * env.GRASP_THRESHOLD - q4) / env.GRASP_THRESHOLD, 0.0, 1.0)
        engage = np.where(delta < 0, engage * closed, engage)
        arc = env.LEVER_LENGTH * np.stack([np.sin(theta + delta) - np.sin(theta),
                                           np.cos(theta + delta) - np.cos(theta)], axis=1)
        err = offset + engage[:, None] * arc

        J = env.jacobian(q)
        JJt = np.einsum("mij,mkj->mik", J, J) + DAMPING ** 2 * np.eye(2)
        y = np.linalg.solve(JJt, err[..., None])[..., 0]
        a = np.einsum("mji,mj->mi", J, y) / env.DELTA_MAX
        a = a / np.maximum(np.max(np.abs(a), axis=1, keepdims=True), 1.0)

        a4 = np.tanh((dist - CLOSE_RADIUS) / CLOSE_SOFTNESS)
        return np.column_stack([a, a4])


def scripted_lever_policy() -> ScriptedLeverPolicy:
    return ScriptedLeverPolicy()


BUILTIN_MODELS = {"scripted": scripted_lever_policy}


def resolve_model(spec: str) -> PolicyModel:
    """``builtin:<name>`` or a path to an MLP weights JSON."""
    spec = str(spec)
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUILTIN_MODELS:
            raise ConfigError(f"Unknown builtin model {name!r}; available: {sorted(BUILTIN_MODELS)}")
        return BUILTIN_MODELS[name]()
    return load_mlp(spec)
