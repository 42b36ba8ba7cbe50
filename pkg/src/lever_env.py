"""Planar lever-manipulation simulator.

The arm works in the vertical plane that contains the lever: base yaw is
solved analytically (``base_yaw``), leaving shoulder/elbow/wrist (q1..q3) and
the gripper opening q4. Coordinates are (x forward, z up) with the shoulder at
the origin. The lever rotates about ``LEVER_PIVOT``; theta = 0 is upright and
positive theta tilts the handle away from the arm.
"""
from dataclasses import dataclass, field, astuple
from pathlib import Path
import json
import logging

import numpy as np

from src.errors import DataError, DomainError
from src.samplers import BackgroundDataset, save_background
from src.shapley import FeatureSpace
from src.utils import atomic_write_json, parallel_map, read_json

# ---------- CONFIG (edit) ----------
LINK_LENGTHS = (0.130, 0.124, 0.126)        # m, shoulder -> elbow -> wrist -> gripper tip
JOINT_LIMITS = (-2.6, 2.6)                  # rad, all three joints
DELTA_MAX = 0.05                            # rad per step at |a_k| = 1
Q4_MAX = 0.04                               # m, fully open
GRIPPER_SPEED = 0.01                        # m per step
GRASP_THRESHOLD = 0.01                      # q4 below this counts as closed
CAPTURE_RADIUS = 0.02                       # m, pushing contact
GRASP_RADIUS = 0.03                         # m, closed gripper keeps hold of the handle
LEVER_PIVOT = (0.22, -0.10)                 # m, (x, z)
LEVER_LENGTH = 0.08                         # m, pivot -> handle
LEVER_LIMIT = 1.5                           # rad
Q_HOME = (1.2, -1.2, -0.6)                  # rad, start posture (gripper above the lever)
TASK_RANGE = 1.0                            # rad, start/target drawn from [-TASK_RANGE, TASK_RANGE]
MIN_SEPARATION = 0.4                        # rad
REWARD_TOLERANCE = 0.025                    # rad
MAX_STEPS = 300
# -----------------------------------

LEVER_FEATURES = FeatureSpace(
    ("q1", "q2", "q3", "q4", "dx", "dz", "theta_lever", "theta_target"),
    ("rad", "rad", "rad", "m", "m", "m", "rad", "rad"),
)
ACTION_NAMES = ("a1", "a2", "a3", "a4")
PHASES = ("approach", "grasp", "push", "pull", "done")


@dataclass(frozen=True)
class LeverState:
    q1: float
    q2: float
    q3: float
    q4: float
    dx: float
    dz: float
    theta_lever: float
    theta_target: float

    def __post_init__(self):
        values = np.array(astuple(self), dtype="float64")
        if not np.isfinite(values).all():
            raise DomainError(f"Non-finite lever state: {values.tolist()}")
        if not 0.0 <= self.q4 <= Q4_MAX:
            raise DomainError(f"q4={self.q4} outside [0, {Q4_MAX}]")
        for name in ("theta_lever", "theta_target"):
            if abs(getattr(self, name)) > LEVER_LIMIT:
                raise DomainError(f"{name}={getattr(self, name)} outside [-{LEVER_LIMIT}, {LEVER_LIMIT}]")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype="float64")

    @classmethod
    def from_array(cls, x) -> "LeverState":
        return cls(*(float(v) for v in np.asarray(x, dtype="float64").ravel()))

    @property
    def joints(self) -> np.ndarray:
        return np.array([self.q1, self.q2, self.q3])

    @property
    def handle_offset(self) -> float:
        return float(np.hypot(self.dx, self.dz))


@dataclass(frozen=True)
class LeverAction:
    a1: float
    a2: float
    a3: float
    a4: float

    def __post_init__(self):
        for name, v in zip(ACTION_NAMES, astuple(self)):
            if not -1.0 <= v <= 1.0:
                raise DomainError(f"{name}={v} outside [-1, 1]")

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype="float64")

    @classmethod
    def from_array(cls, a) -> "LeverAction":
        return cls(*(float(v) for v in np.clip(np.asarray(a, dtype="float64").ravel(), -1.0, 1.0)))


@dataclass
class Episode:
    id: int
    theta_start: float
    theta_target: float
    steps: list = field(default_factory=list)   # (LeverState, LeverAction) pairs
    terminal_reward_reached: bool = False

    def __post_init__(self):
        if max(abs(self.theta_start), abs(self.theta_target)) > TASK_RANGE:
            raise DomainError(f"Episode {self.id}: task angles outside [-{TASK_RANGE}, {TASK_RANGE}]")
        if abs(self.theta_start - self.theta_target) <= MIN_SEPARATION:
            raise DomainError(f"Episode {self.id}: start and target closer than {MIN_SEPARATION} rad")

    def states(self) -> np.ndarray:
        return np.stack([s.as_array() for s, _ in self.steps]) if self.steps else np.empty((0, LEVER_FEATURES.n))

    def to_dict(self) -> dict:
        return {
            "id": int(self.id),
            "theta_start": float(self.theta_start),
            "theta_target": float(self.theta_target),
            "terminal_reward_reached": bool(self.terminal_reward_reached),
            "steps": [{"state": s.as_array().tolist(), "action": a.as_array().tolist()} for s, a in self.steps],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        steps = [(LeverState.from_array(s["state"]), LeverAction.from_array(s["action"])) for s in d["steps"]]
        return cls(int(d["id"]), float(d["theta_start"]), float(d["theta_target"]), steps,
                   bool(d.get("terminal_reward_reached", False)))


# ── Geometry ─────────────────────────────────────────────────────────────────

def base_yaw(lever_xy) -> float:
    """Base joint angle that turns the arm plane onto the lever."""
    x, y = (float(v) for v in lever_xy)
    if x == 0.0 and y == 0.0:
        raise DomainError("Lever at the manipulator origin has no defined yaw")
    return float(np.arctan2(y, x))


def forward_kinematics(q) -> np.ndarray:
    """Gripper tip (x, z) for joint angles q1..q3 (each relative to the previous link).

    Accepts a single posture of shape (3,) or a batch of shape (M, 3).
    """
    phi = np.cumsum(np.asarray(q, dtype="float64")[..., :3], axis=-1)
    lengths = np.asarray(LINK_LENGTHS)
    return np.stack([np.sum(lengths * np.cos(phi), axis=-1), np.sum(lengths * np.sin(phi), axis=-1)], axis=-1)


def jacobian(q) -> np.ndarray:
    """d(tip)/dq, shape (2, 3) or (M, 2, 3)."""
    phi = np.cumsum(np.asarray(q, dtype="float64")[..., :3], axis=-1)
    lengths = np.asarray(LINK_LENGTHS)
    # column j sums the contributions of links j..3
    jx = np.flip(np.cumsum(np.flip(-lengths * np.sin(phi), -1), axis=-1), -1)
    jz = np.flip(np.cumsum(np.flip(lengths * np.cos(phi), -1), axis=-1), -1)
    return np.stack([jx, jz], axis=-2)


def lever_handle(theta: float) -> np.ndarray:
    return np.asarray(LEVER_PIVOT) + LEVER_LENGTH * np.array([np.sin(theta), np.cos(theta)])


def lever_angle_at(point) -> float:
    """Angle about the pivot of a point in the arm plane, measured like theta_lever."""
    rel = np.asarray(point, dtype="float64") - np.asarray(LEVER_PIVOT)
    return float(np.arctan2(rel[0], rel[1]))


def in_contact(state: LeverState) -> bool:
    """Pushing (tip at the handle) or grasping (closed gripper near the handle)."""
    d = state.handle_offset
    return d <= CAPTURE_RADIUS or (state.q4 < GRASP_THRESHOLD and d <= GRASP_RADIUS)


def make_state(q, q4, theta_lever, theta_target) -> LeverState:
    dx, dz = lever_handle(theta_lever) - forward_kinematics(q)
    return LeverState(float(q[0]), float(q[1]), float(q[2]), float(q4), float(dx), float(dz),
                      float(theta_lever), float(theta_target))


def initial_state(theta_start, theta_target) -> LeverState:
    return make_state(Q_HOME, Q4_MAX, theta_start, theta_target)


# ── Task, reward, dynamics ───────────────────────────────────────────────────

def sample_task(rng):
    """(theta_start, theta_target), uniform on the task range, rejection-resampled
    until they are more than MIN_SEPARATION apart."""
    while True:
        start, target = (float(v) for v in rng.uniform(-TASK_RANGE, TASK_RANGE, size=2))
        if abs(start - target) > MIN_SEPARATION:
            return start, target


def sparse_reward(theta_lever, theta_target) -> int:
    return 0 if abs(theta_lever - theta_target) < REWARD_TOLERANCE else -1


def step(state: LeverState, action) -> LeverState:
    a = action.as_array() if isinstance(action, LeverAction) else np.asarray(action, dtype="float64")
    a = np.clip(a, -1.0, 1.0)
    q = np.clip(state.joints + a[:3] * DELTA_MAX, *JOINT_LIMITS)
    if a[3] >= 0:
        q4 = min(state.q4 + GRIPPER_SPEED, Q4_MAX)
    else:
        q4 = max(state.q4 - GRIPPER_SPEED, 0.0)
    theta = state.theta_lever
    if in_contact(state):
        tip = forward_kinematics(q)
        theta = float(np.clip(lever_angle_at(tip), -LEVER_LIMIT, LEVER_LIMIT))
    return make_state(q, q4, theta, state.theta_target)


def classify_phase(state: LeverState) -> str:
    if sparse_reward(state.theta_lever, state.theta_target) == 0:
        return "done"
    if not in_contact(state):
        return "approach"
    if state.q4 >= GRASP_THRESHOLD:
        return "grasp"
    return "push" if state.theta_target > state.theta_lever else "pull"


def find_event(episode: Episode, event: str):
    """Step index of an interesting event, or None.

    grasp: first step holding the handle with a closed gripper.
    push / pull: middle step of the first run of that phase.
    """
    phases = [classify_phase(s) for s, _ in episode.steps]
    if event == "grasp":
        return next((i for i, (s, _) in enumerate(episode.steps)
                     if in_contact(s) and s.q4 < GRASP_THRESHOLD), None)
    if event not in ("push", "pull"):
        raise DomainError(f"Unknown event {event!r}; expected grasp, push or pull")
    start = next((i for i, p in enumerate(phases) if p == event), None)
    if start is None:
        return None
    end = start
    while end + 1 < len(phases) and phases[end + 1] == event:
        end += 1
    return (start + end) // 2


# ── Episodes and datasets ────────────────────────────────────────────────────

def rollout(policy, episode_id, theta_start, theta_target, max_steps=MAX_STEPS) -> Episode:
    state = initial_state(theta_start, theta_target)
    episode = Episode(episode_id, theta_start, theta_target)
    for _ in range(max_steps):
        if sparse_reward(state.theta_lever, state.theta_target) == 0:
            episode.terminal_reward_reached = True
            break
        action = LeverAction.from_array(policy.evaluate(state.as_array()))
        episode.steps.append((state, action))
        state = step(state, action)
    else:
        episode.terminal_reward_reached = sparse_reward(state.theta_lever, state.theta_target) == 0
    return episode


def run_episodes(policy, count, seed, max_steps=MAX_STEPS, max_workers=None) -> list:
    """``count`` episodes with ids 1..count; tasks are drawn sequentially from ``seed``."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    tasks = [(i + 1, *sample_task(rng)) for i in range(count)]
    episodes = parallel_map(lambda t: rollout(policy, *t, max_steps=max_steps), tasks, max_workers=max_workers)
    solved = sum(e.terminal_reward_reached for e in episodes)
    logging.info(f"Ran {count} episodes (seed={seed}): {solved} reached the target")
    return episodes


def save_episodes(episodes, path) -> Path:
    return atomic_write_json(Path(path), {"episodes": [e.to_dict() for e in episodes]})


def load_episodes(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Episode log not found: {path}")
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise DataError(f"{path.name}: invalid JSON ({e})") from None
    try:
        episodes = [Episode.from_dict(d) for d in data["episodes"]]
    except DataError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path.name}: malformed episode log ({e!r})") from None
    return {e.id: e for e in episodes}


def export_background(episodes, holdout, path) -> BackgroundDataset:
    """Write every step of the non-held-out episodes as a background CSV."""
    holdout = {int(h) for h in holdout}
    ids = [e.id for e in episodes]
    unknown = sorted(holdout - set(ids))
    if unknown:
        raise DataError(f"Holdout ids {unknown} are not among the episodes {ids}")
    kept = [e for e in episodes if e.id not in holdout and e.steps]
    if not kept:
        raise DataError("No background rows left after removing the held-out episodes")
    rows = np.vstack([e.states() for e in kept])
    dataset = BackgroundDataset(rows, LEVER_FEATURES, tuple(e.id for e in kept))
    save_background(dataset, path, meta={"holdout": sorted(holdout)})
    logging.info(f"Saved {rows.shape[0]} background rows from episodes {list(dataset.source_episodes)} to {path}")
    return dataset
