"""Deterministic 2D point-robot task families.

Two families share a 2D position state and a 2D action box:

* ``sparse-point-robot``: goals on the unit circle; reward ``1 - d`` inside a
  radius-0.2 disc around the goal and 0 elsewhere.
* ``point-robot-wind``: a fixed goal at (0, 1); each task drifts the robot by
  its own wind vector every step.  Reward is the negative distance to the goal.

The agent never sees goal or wind; it has to infer the task from context.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPARSE = "sparse-point-robot"
WIND = "point-robot-wind"
FAMILIES = (SPARSE, WIND)

ACTION_BOUND = 0.1
WIND_BOUND = 0.05
GOAL_RADIUS = 0.2
MAX_EPISODE_LENGTH = 20
STATE_DIM = 2
ACTION_DIM = 2
WIND_GOAL = (0.0, 1.0)


class ConfigError(ValueError):
    pass


class EpisodeFinished(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    family: str
    goal: tuple[float, float]
    wind: tuple[float, float] = (0.0, 0.0)
    goal_radius: float = GOAL_RADIUS
    max_episode_length: int = MAX_EPISODE_LENGTH
    task_id: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown task family {self.family!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TaskSpec:
        return cls(family=d["family"], goal=tuple(d["goal"]), wind=tuple(d["wind"]),
                   goal_radius=float(d["goal_radius"]),
                   max_episode_length=int(d["max_episode_length"]), task_id=int(d["task_id"]))


@dataclass(frozen=True)
class EnvState:
    position: tuple[float, float] = (0.0, 0.0)
    steps_taken: int = 0


@dataclass(frozen=True)
class Transition:
    state: tuple[float, float]
    action: tuple[float, float]
    next_state: tuple[float, float]
    reward: float

    def as_row(self) -> np.ndarray:
        return np.array([*self.state, *self.action, *self.next_state, self.reward])


def sample_tasks(family: str, count: int, seed, goal_radius: float = GOAL_RADIUS,
                 max_episode_length: int = MAX_EPISODE_LENGTH) -> list[TaskSpec]:
    """Draw ``count`` tasks; task ids run 0..count-1."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown task family {family!r}")
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = np.random.default_rng(seed)
    tasks = []
    if family == SPARSE:
        angles = rng.uniform(0.0, 2.0 * np.pi, size=count)
        for i, th in enumerate(angles):
            tasks.append(TaskSpec(SPARSE, (float(np.cos(th)), float(np.sin(th))),
                                  goal_radius=goal_radius,
                                  max_episode_length=max_episode_length, task_id=i))
    else:
        winds = rng.uniform(-WIND_BOUND, WIND_BOUND, size=(count, 2))
        for i, w in enumerate(winds):
            tasks.append(TaskSpec(WIND, WIND_GOAL, (float(w[0]), float(w[1])),
                                  goal_radius=0.0,
                                  max_episode_length=max_episode_length, task_id=i))
    return tasks


def reset(task: TaskSpec) -> EnvState:
    return EnvState((0.0, 0.0), 0)


def transition_batch(family: str, goals: np.ndarray, winds: np.ndarray, radius,
                     positions: np.ndarray, actions: np.ndarray):
    """Vectorised dynamics and reward: rows are independent (task, state, action) triples.

    Returns ``(next_positions, rewards)``.  :func:`step` goes through this
    function too, so batched rollouts and single steps agree bit for bit.
    """
    a = np.clip(actions, -ACTION_BOUND, ACTION_BOUND)
    nxt = positions + a + winds
    dx = nxt[..., 0] - goals[..., 0]
    dy = nxt[..., 1] - goals[..., 1]
    dist = np.sqrt(dx * dx + dy * dy)
    if family == SPARSE:
        reward = np.where(dist < radius, 1.0 - dist, 0.0)
    else:
        reward = -dist
    return nxt, reward


def step(task: TaskSpec, state: EnvState, action) -> tuple[EnvState, float, bool]:
    if state.steps_taken >= task.max_episode_length:
        raise EpisodeFinished(f"task {task.task_id}: episode already has "
                              f"{state.steps_taken} steps")
    nxt, r = transition_batch(task.family, np.array([task.goal]), np.array([task.wind]),
                              task.goal_radius, np.array([state.position], dtype=np.float64),
                              np.asarray(action, dtype=np.float64).reshape(1, 2))
    steps = state.steps_taken + 1
    new = EnvState((float(nxt[0, 0]), float(nxt[0, 1])), steps)
    return new, float(r[0]), steps == task.max_episode_length


def task_arrays(tasks) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    goals = np.array([t.goal for t in tasks], dtype=np.float64)
    winds = np.array([t.wind for t in tasks], dtype=np.float64)
    radii = np.array([t.goal_radius for t in tasks], dtype=np.float64)
    return goals, winds, radii


@dataclass
class CorrespondenceReport:
    """Pairwise distinguishability of tasks on a set of probe (s, a) pairs."""

    probe_count: int
    task_ids: list[int]
    # (i, j) -> number of probes on which the two tasks produce different (s', r)
    distinguishing: dict[tuple[int, int], int] = field(default_factory=dict)

    @property
    def violations(self) -> list[tuple[int, int]]:
        return [pair for pair, n in self.distinguishing.items() if n == 0]

    @property
    def satisfied(self) -> bool:
        return not self.violations

    def ambiguous_fraction(self, i: int, j: int) -> float:
        return 1.0 - self.distinguishing[(i, j)] / self.probe_count

    def lines(self) -> list[str]:
        out = ["task_i,task_j,distinguishing_probes,ambiguous_fraction"]
        for (i, j), n in sorted(self.distinguishing.items()):
            out.append(f"{i},{j},{n},{1.0 - n / self.probe_count:.6f}")
        verdict = "holds" if self.satisfied else f"fails for {len(self.violations)} pair(s)"
        out.append(f"# task-transition correspondence {verdict} on {self.probe_count} probes")
        return out


def check_task_transition_correspondence(tasks, probe_count: int, seed,
                                         states=None, actions=None) -> CorrespondenceReport:
    """Probe whether distinct tasks can be told apart from single transitions.

    Probes are uniform states in [-1.5, 1.5]^2 and uniform actions in the
    action box unless ``states``/``actions`` are given.  Every ordered pair
    ``i < j`` (including a task listed twice) gets a count of probes on which
    the two tasks yield a different next state or reward.
    """
    tasks = list(tasks)
    if len(tasks) < 2:
        raise ConfigError("need at least two tasks")
    rng = np.random.default_rng(seed)
    if states is None:
        states = rng.uniform(-1.5, 1.5, size=(probe_count, 2))
    if actions is None:
        actions = rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=(probe_count, 2))
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    probe_count = len(states)
    outcomes = []
    for t in tasks:
        g, w, r = task_arrays([t])
        nxt, rew = transition_batch(t.family, g, w, r[0], states, actions)
        outcomes.append((nxt, rew))
    report = CorrespondenceReport(probe_count, [t.task_id for t in tasks])
    for (a, ta), (b, tb) in itertools.combinations(enumerate(tasks), 2):
        (na, ra), (nb, rb) = outcomes[a], outcomes[b]
        differs = np.any(na != nb, axis=1) | (ra != rb)
        report.distinguishing[(a, b)] = int(differs.sum())
    return report


def write_task_set(path, tasks, seed) -> None:
    tasks = list(tasks)
    doc = {"family": tasks[0].family if tasks else None, "seed": seed,
           "tasks": [t.to_dict() for t in tasks]}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_task_set(path) -> tuple[list[TaskSpec], object]:
    doc = json.loads(Path(path).read_text())
    return [TaskSpec.from_dict(d) for d in doc["tasks"]], doc.get("seed")
