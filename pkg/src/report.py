"""Explanation reports: JSON per method, stacked force plots as SVG, and
causal-vs-marginal comparison tables."""
from dataclasses import dataclass, field
from pathlib import Path
import io
import json
import logging

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from src import lever_env  # noqa: E402
from src.errors import ComparisonError, ConfigError, LoadError, NumericError, SchemaError  # noqa: E402
from src.models import resolve_model  # noqa: E402
from src.samplers import (DEFAULT_MC_SAMPLES, SAMPLER_KINDS, ValueSampler, fit_gaussian,  # noqa: E402
                          load_background, load_ordering, mahalanobis_distance)
from src.shapley import ESTIMATORS, MAX_EXACT_FEATURES, Explanation, explain_instance  # noqa: E402
from src.utils import (atomic_write_json, atomic_write_text, markdown_table,  # noqa: E402
                       parallel_map, read_json)

POSITIVE_COLOR = "#FF0051"
NEGATIVE_COLOR = "#1E88E5"
SVG_HASHSALT = "levershap"
MAHALANOBIS_WARNING = 5.0       # instance is far outside the background support beyond this

LEVER_GROUPS = {
    "joints": ("q1", "q2", "q3"),
    "gripper": ("q4",),
    "distances": ("dx", "dz"),
    "lever": ("theta_lever",),
    "target": ("theta_target",),
}
EVENTS = ("push", "grasp", "pull")


# ── Configuration ────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ReportConfig:
    dataset: Path
    instance: str
    out: Path
    model: str = "builtin:scripted"
    ordering: Path = None
    methods: tuple = ("causal", "marginal")
    estimator: str = "exact"
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0
    coalition_budget: object = "all"
    episodes: Path = None          # default: episodes.json next to the dataset
    ridge: float = None
    exhaustive: bool = False
    max_workers: int = None

    def validate(self):
        if not self.methods:
            raise ConfigError("At least one method is required")
        unknown = [m for m in self.methods if m not in SAMPLER_KINDS]
        if unknown:
            raise ConfigError(f"Unknown methods {unknown}; expected a subset of {SAMPLER_KINDS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError(f"Duplicate methods in {list(self.methods)}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"Unknown estimator {self.estimator!r}; expected one of {ESTIMATORS}")
        if "causal" in self.methods and self.ordering is None:
            raise ConfigError("The causal method needs --ordering")
        if int(self.mc_samples) < 1:
            raise ConfigError(f"mc_samples must be >= 1, got {self.mc_samples}")
        if self.max_workers is not None and int(self.max_workers) < 1:
            raise ConfigError(f"max_workers must be >= 1, got {self.max_workers}")
        return self


def parse_methods(text: str) -> tuple:
    return tuple(m.strip() for m in str(text).split(",") if m.strip())


# ── Instance selection ───────────────────────────────────────────────────────

def parse_selector(selector: str):
    """``inline:v1,..,vN`` -> ("inline", values); ``ep<ID>:<STEP>`` -> ("step", id, step);
    ``ep<ID>:<push|grasp|pull>`` -> ("event", id, event)."""
    selector = str(selector).strip()
    head, sep, tail = selector.partition(":")
    if not sep or not tail:
        raise ConfigError(f"Bad instance selector {selector!r}; use ep<ID>:<STEP|event> or inline:v1,..,vN")
    if head == "inline":
        try:
            return ("inline", np.array([float(v) for v in tail.split(",")], dtype="float64"))
        except ValueError:
            raise ConfigError(f"Inline instance {tail!r} is not a list of numbers") from None
    if not head.startswith("ep") or not head[2:].isdigit():
        raise ConfigError(f"Bad instance selector {selector!r}; use ep<ID>:<STEP|event> or inline:v1,..,vN")
    episode_id = int(head[2:])
    if tail in EVENTS:
        return ("event", episode_id, tail)
    if not tail.isdigit():
        raise ConfigError(f"Step {tail!r} is neither an index nor one of {EVENTS}")
    return ("step", episode_id, int(tail))


def resolve_instance(selector: str, feature_space, episodes_path: Path = None):
    """Instance vector plus a short description of where it came from."""
    parsed = parse_selector(selector)
    if parsed[0] == "inline":
        x = parsed[1]
        if x.size != feature_space.n:
            raise SchemaError(f"Inline instance has {x.size} values, feature space has {feature_space.n}")
        return x, {"selector": selector}

    if episodes_path is None:
        raise ConfigError(f"Selector {selector!r} needs an episode log")
    episodes = lever_env.load_episodes(episodes_path)
    _, episode_id, which = parsed
    if episode_id not in episodes:
        raise ConfigError(f"Episode {episode_id} not in {Path(episodes_path).name} (ids {sorted(episodes)})")
    episode = episodes[episode_id]
    if parsed[0] == "event":
        step_idx = lever_env.find_event(episode, which)
        if step_idx is None:
            raise ConfigError(f"Episode {episode_id} has no {which} event")
        logging.info(f"Episode {episode_id}: {which} event at step {step_idx}")
    else:
        step_idx = which
        if step_idx >= len(episode.steps):
            raise ConfigError(f"Episode {episode_id} has {len(episode.steps)} steps, step {step_idx} requested")
    state, _ = episode.steps[step_idx]
    feature_space.check_compatible(lever_env.LEVER_FEATURES)
    return state.as_array(), {"selector": selector, "episode": episode_id, "step": int(step_idx),
                              "phase": lever_env.classify_phase(state)}


# ── Force plots ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ForceBar:
    feature: str
    value: float
    phi: float
    start: float
    end: float

    @property
    def length(self):
        return self.end - self.start


@dataclass(frozen=True)
class ForcePanel:
    output: str
    base_value: float
    prediction: float
    bars: tuple = field(default_factory=tuple)

    @property
    def end_point(self):
        """base + sum(phi); the point where positive and negative bars meet."""
        return self.base_value + sum(b.phi for b in self.bars)

    @property
    def extent(self):
        points = [self.base_value, self.prediction] + [p for b in self.bars for p in (b.start, b.end)]
        return min(points), max(points)


def bar_order(phi, names) -> list:
    """Feature indices by |phi| descending, ties by name ascending."""
    return sorted(range(len(names)), key=lambda i: (-abs(float(phi[i])), names[i]))


def force_panel(output, base_value, phi, prediction, names, values) -> ForcePanel:
    """Positive bars stack leftwards from f = base + sum(phi), negative bars
    rightwards, the largest |phi| of each sign touching f."""
    f = float(base_value) + float(np.sum(phi))
    bars = []
    left = right = f
    for i in bar_order(phi, names):
        p = float(phi[i])
        if p >= 0:
            bars.append(ForceBar(names[i], float(values[i]), p, left - p, left))
            left -= p
        else:
            bars.append(ForceBar(names[i], float(values[i]), p, right, right - p))
            right -= p
    return ForcePanel(str(output), float(base_value), float(prediction), tuple(bars))


def force_panels(explanation: Explanation) -> list:
    values = explanation.instance if explanation.instance is not None else np.full(explanation.n_features, np.nan)
    prediction = explanation.prediction if explanation.prediction is not None else (
        explanation.base_values + explanation.phi.sum(axis=1))
    return [force_panel(explanation.output_names[k], explanation.base_values[k], explanation.phi[k],
                        prediction[k], explanation.feature_names, values)
            for k in range(explanation.output_dim)]


def render_force_plot(panels, title="") -> str:
    """One horizontal force panel per output, stacked vertically; returns SVG text."""
    with plt.rc_context({"svg.hashsalt": SVG_HASHSALT, "svg.fonttype": "path"}):
        fig, axes = plt.subplots(len(panels), 1, figsize=(10, 1.6 * len(panels) + 0.6), squeeze=False)
        for ax, panel in zip(axes[:, 0], panels):
            ax.set_gid(f"panel-{panel.output}")
            lo, hi = panel.extent
            pad = 0.05 * (hi - lo) if hi > lo else 1.0
            for bar in panel.bars:
                color = POSITIVE_COLOR if bar.phi >= 0 else NEGATIVE_COLOR
                rect = ax.barh(0, bar.length, left=bar.start, height=0.5, color=color,
                               edgecolor="white", linewidth=0.5)[0]
                rect.set_gid(f"bar-{panel.output}-{bar.feature}")
                if bar.length >= 0.04 * (hi - lo + 2 * pad):
                    ax.text(0.5 * (bar.start + bar.end), -0.4, f"{bar.feature} = {bar.value:.3g}",
                            ha="center", va="top", fontsize=6, rotation=20)
            ax.axvline(panel.base_value, color="0.4", linestyle="--", linewidth=0.8)
            ax.plot([panel.prediction], [0.3], marker="v", color="black", markersize=6)
            ax.set_xlim(lo - pad, hi + pad)
            ax.set_ylim(-1.0, 0.6)
            ax.set_yticks([])
            ax.set_title(f"{panel.output}: f(x) = {panel.prediction:.4f}   base value = {panel.base_value:.4f}",
                         fontsize=8, loc="left")
            ax.tick_params(axis="x", labelsize=7)
        if title:
            fig.suptitle(title, fontsize=9)
        fig.tight_layout()
        buf = io.StringIO()
        fig.savefig(buf, format="svg", metadata={"Date": None})
        plt.close(fig)
    return buf.getvalue()


# ── Explain ──────────────────────────────────────────────────────────────────

def _phi_table(explanation: Explanation) -> pd.DataFrame:
    df = pd.DataFrame(explanation.phi.T, columns=list(explanation.output_names))
    df.insert(0, "feature", list(explanation.feature_names))
    return df


def explain(config: ReportConfig) -> dict:
    """Run every requested method on one instance; write <method>.json,
    <method>.svg and summary.md into ``config.out``. Returns method -> Explanation."""
    config.validate()
    model = resolve_model(config.model)
    dataset = load_background(config.dataset)
    fs = dataset.feature_space
    if model.input_dim != fs.n:
        raise SchemaError(f"Model expects {model.input_dim} inputs, dataset has {fs.n} features {list(fs.names)}")
    if fs.n > MAX_EXACT_FEATURES and config.estimator == "exact":
        raise ConfigError(f"Exact estimator needs N <= {MAX_EXACT_FEATURES}; use --estimator kernel")
    ordering = load_ordering(config.ordering, fs) if "causal" in config.methods else None

    episodes_path = config.episodes or Path(config.dataset).with_name("episodes.json")
    x_star, origin = resolve_instance(config.instance, fs, episodes_path)

    gaussian = fit_gaussian(dataset, config.ridge)
    try:
        distance = mahalanobis_distance(gaussian, x_star)
    except NumericError as e:
        logging.warning(f"Skipping the support note: {e}")
        distance = None
    if distance is not None and distance > MAHALANOBIS_WARNING:
        logging.warning(f"Instance is far from the background data (Mahalanobis distance {distance:.2f})")

    def run(method):
        sampler = ValueSampler(method, dataset, gaussian=gaussian if method != "marginal" else None,
                               ordering=ordering if method == "causal" else None,
                               mc_samples=int(config.mc_samples), seed=int(config.seed),
                               exhaustive=config.exhaustive)
        return explain_instance(model, x_star, sampler, estimator=config.estimator,
                                coalition_budget=config.coalition_budget, max_workers=config.max_workers)

    results = dict(zip(config.methods, parallel_map(run, config.methods, max_workers=config.max_workers)))

    out = Path(config.out)
    for method, exp in results.items():
        residual = np.abs(exp.additivity_residual())
        if np.any(residual > np.maximum(exp.additivity_tolerance(), 1e-9)):
            logging.warning(f"{method}: additivity residual {residual.max():.3e} exceeds 4 sigma_MC")
        report = exp.to_dict()
        report["feature_units"] = list(fs.units)
        report["instance_origin"] = origin
        report["mahalanobis"] = distance
        if method == "causal":
            report["ordering"] = ordering.to_names(fs)
        atomic_write_json(out / f"{method}.json", report)
        atomic_write_text(out / f"{method}.svg",
                          render_force_plot(force_panels(exp), title=f"{method} explanation of {origin['selector']}"))
        logging.info(f"Saved {out / f'{method}.json'} and {method}.svg")

    atomic_write_text(out / "summary.md", summary_markdown(results, config, origin, distance))
    return results


def summary_markdown(results: dict, config: ReportConfig, origin: dict, distance=None) -> str:
    lines = ["# Explanation summary", ""]
    lines.append(f"- Dataset: {config.dataset}")
    lines.append(f"- Model: {config.model}")
    lines.append(f"- Instance: {origin['selector']}" + (f" (phase {origin['phase']})" if "phase" in origin else ""))
    lines.append(f"- Estimator: {config.estimator}, M = {config.mc_samples}, seed = {config.seed}")
    if distance is not None:
        lines.append(f"- Mahalanobis distance to background: {distance:.3f}")
    lines.append("")
    for method, exp in results.items():
        lines.append(f"## {method}")
        lines.append("")
        lines.append(markdown_table(_phi_table(exp)))
        lines.append("")
        lines.append("base: " + ", ".join(f"{n} = {v:.4f}" for n, v in zip(exp.output_names, exp.base_values)))
        lines.append("")
        lines.append(f"![{method}]({method}.svg)")
        lines.append("")
    if "causal" in results and "marginal" in results:
        lines.append("## causal - marginal by feature group")
        lines.append("")
        cmp = compare(results["marginal"].to_dict(), results["causal"].to_dict())
        lines.append(markdown_table(_group_frame(cmp)))
        lines.append("")
    return "\n".join(lines)


# ── Compare ──────────────────────────────────────────────────────────────────

def feature_groups(names) -> dict:
    if set(names) == {f for g in LEVER_GROUPS.values() for f in g}:
        return dict(LEVER_GROUPS)
    return {n: (n,) for n in names}


def _as_report(report) -> dict:
    if isinstance(report, Explanation):
        return report.to_dict()
    if isinstance(report, (str, Path)):
        path = Path(report)
        if not path.exists():
            raise FileNotFoundError(f"Report not found: {path}")
        try:
            report = read_json(path)
        except json.JSONDecodeError as e:
            raise LoadError(f"{path.name}: invalid JSON ({e})") from None
        if not isinstance(report, dict):
            raise LoadError(f"{path.name}: expected a report object")
    return report


def compare(report_a, report_b) -> dict:
    """Delta phi = b - a per output and feature, plus grouped sums and |phi| shares."""
    a = Explanation.from_dict(_as_report(report_a))
    b = Explanation.from_dict(_as_report(report_b))
    if a.feature_names != b.feature_names:
        raise ComparisonError(f"Feature names differ: {list(a.feature_names)} vs {list(b.feature_names)}")
    if a.output_names != b.output_names:
        raise ComparisonError(f"Outputs differ: {list(a.output_names)} vs {list(b.output_names)}")
    if (a.instance is None) != (b.instance is None) or (
            a.instance is not None and not np.array_equal(a.instance, b.instance)):
        raise ComparisonError("Reports explain different instances")

    delta = b.phi - a.phi
    names = list(a.feature_names)
    total_a = np.abs(a.phi).sum(axis=1)
    total_b = np.abs(b.phi).sum(axis=1)
    groups = []
    for group, members in feature_groups(names).items():
        idx = [names.index(f) for f in members]
        sum_a, sum_b = a.phi[:, idx].sum(axis=1), b.phi[:, idx].sum(axis=1)
        share_a = np.divide(np.abs(a.phi[:, idx]).sum(axis=1), total_a, out=np.zeros_like(total_a), where=total_a > 0)
        share_b = np.divide(np.abs(b.phi[:, idx]).sum(axis=1), total_b, out=np.zeros_like(total_b), where=total_b > 0)
        groups.append({
            "group": group,
            "features": list(members),
            "sum_a": sum_a.tolist(),
            "sum_b": sum_b.tolist(),
            "delta": (sum_b - sum_a).tolist(),
            "share_a": share_a.tolist(),
            "share_b": share_b.tolist(),
        })
    return {
        "method_a": a.method,
        "method_b": b.method,
        "feature_names": names,
        "output_names": list(a.output_names),
        "delta_phi": delta.tolist(),
        "sigma_mc_a": a.sigma_mc.tolist(),
        "sigma_mc_b": b.sigma_mc.tolist(),
        "groups": groups,
    }


def _delta_frame(result: dict) -> pd.DataFrame:
    df = pd.DataFrame(np.asarray(result["delta_phi"]).T, columns=result["output_names"])
    df.insert(0, "feature", result["feature_names"])
    return df


def _group_frame(result: dict) -> pd.DataFrame:
    rows = []
    for g in result["groups"]:
        for k, out in enumerate(result["output_names"]):
            rows.append({
                "group": g["group"],
                "output": out,
                f"sum {result['method_a']}": g["sum_a"][k],
                f"sum {result['method_b']}": g["sum_b"][k],
                "delta": g["delta"][k],
                f"share {result['method_a']}": g["share_a"][k],
                f"share {result['method_b']}": g["share_b"][k],
            })
    return pd.DataFrame(rows)


def comparison_markdown(result: dict) -> str:
    lines = [f"# {result['method_b']} - {result['method_a']}", ""]
    lines.append("## delta phi per feature")
    lines.append("")
    lines.append(markdown_table(_delta_frame(result)))
    lines.append("")
    lines.append("## feature groups")
    lines.append("")
    lines.append(markdown_table(_group_frame(result)))
    lines.append("")
    return "\n".join(lines)
