"""Offline per-task datasets from scripted behaviour policies.

On disk a dataset is a directory ``task_<id>/`` holding

* ``manifest.json``: family, task parameters, quality, seed and record count;
* ``transitions.bin``: records ``(s1, s2, a1, a2, s'1, s'2, r)`` as
  little-endian float64, one record per transition.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .envs import ACTION_BOUND, ConfigError, EnvState, TaskSpec, Transition

QUALITIES = ("expert", "medium", "random", "mixed")
DEFAULT_NOISE = {"expert": 0.02, "medium": 0.08, "random": 0.0, "mixed": 0.0}
BUFFER_SIZE = 10_000
RECORD_WIDTH = 7
RECORD_BYTES = RECORD_WIDTH * 8
COLUMNS = ["s1", "s2", "a1", "a2", "next_s1", "next_s2", "r"]
DATASET_FORMAT = "focal-dataset/1"


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorPolicy:
    quality: str
    noise_std: float | None = None
    gain: float = 1.0
    # noise levels used by the "mixed" quality for its expert/medium episodes
    mixed_noise: tuple[float, float] = (DEFAULT_NOISE["expert"], DEFAULT_NOISE["medium"])

    def __post_init__(self):
        if self.quality not in QUALITIES:
            raise ConfigError(f"unknown quality {self.quality!r}; expected one of {QUALITIES}")
        if self.noise_std is None:
            object.__setattr__(self, "noise_std", DEFAULT_NOISE[self.quality])
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")


def _controller(gain, noise_std, task: TaskSpec, position, rng) -> np.ndarray:
    goal = np.asarray(task.goal)
    a = np.clip(gain * (goal - np.asarray(position)), -ACTION_BOUND, ACTION_BOUND)
    if noise_std > 0:
        a = a + rng.normal(0.0, noise_std, size=2)
    return np.clip(a, -ACTION_BOUND, ACTION_BOUND)


def scripted_action(policy: BehaviorPolicy, task: TaskSpec, state: EnvState, rng,
                    episode_quality: str | None = None) -> np.ndarray:
    """Action of the scripted behaviour policy at ``state``.

    ``expert`` and ``medium`` run a clipped proportional controller toward the
    goal plus Gaussian noise; ``random`` samples the action box uniformly.
    For ``mixed`` the caller passes the quality drawn for the current episode.
    """
    quality = policy.quality
    noise = policy.noise_std
    if quality == "mixed":
        quality = episode_quality or "random"
        if quality != "random":
            noise = policy.mixed_noise[0] if quality == "expert" else policy.mixed_noise[1]
    if quality == "random":
        return rng.uniform(-ACTION_BOUND, ACTION_BOUND, size=2)
    return _controller(policy.gain, noise, task, state.position, rng)


@dataclass
class TaskDataset:
    task: TaskSpec
    records: np.ndarray  # (n, 7) float64
    quality: str
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def transitions(self) -> list[Transition]:
        return [Transition((r[0], r[1]), (r[2], r[3]), (r[4], r[5]), r[6]) for r in self.records]

    @property
    def states(self) -> np.ndarray:
        return self.records[:, 0:2]

    @property
    def actions(self) -> np.ndarray:
        return self.records[:, 2:4]

    @property
    def next_states(self) -> np.ndarray:
        return self.records[:, 4:6]

    @property
    def rewards(self) -> np.ndarray:
        return self.records[:, 6]

    def episode_returns(self) -> np.ndarray:
        n = self.task.max_episode_length
        return self.rewards[: len(self) // n * n].reshape(-1, n).sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (self.task == other.task and self.quality == other.quality
                and self.seed == other.seed and self.records.shape == other.records.shape
                and bool(np.array_equal(self.records, other.records)))


def generate_dataset(task: TaskSpec, policy: BehaviorPolicy, episodes: int, seed,
                     buffer_size: int = BUFFER_SIZE) -> TaskDataset:
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    total = episodes * task.max_episode_length
    if total > buffer_size:
        raise ConfigError(f"{episodes} episodes x {task.max_episode_length} steps = {total} "
                          f"exceeds buffer size {buffer_size}")
    rng = np.random.default_rng(seed)
    rows = np.empty((total, RECORD_WIDTH))
    k = 0
    for _ in range(episodes):
        episode_quality = None
        if policy.quality == "mixed":
            episode_quality = ("expert", "medium", "random")[rng.integers(3)]
        state = envs.reset(task)
        done = False
        while not done:
            a = scripted_action(policy, task, state, rng, episode_quality)
            nxt, r, done = envs.step(task, state, a)
            rows[k] = (*state.position, a[0], a[1], *nxt.position, r)
            state = nxt
            k += 1
    meta = {"episodes": episodes, "noise_std": policy.noise_std, "gain": policy.gain}
    return TaskDataset(task, rows, policy.quality, seed, meta)


def replay_errors(dataset: TaskDataset) -> int:
    """Number of records whose (next_state, reward) differ from a fresh env step."""
    t = dataset.task
    g, w, r = envs.task_arrays([t])
    nxt, rew = envs.transition_batch(t.family, g, w, r[0], dataset.states, dataset.actions)
    bad = np.any(nxt != dataset.next_states, axis=1) | (rew != dataset.rewards)
    return int(bad.sum())


def write_dataset(dataset: TaskDataset, path) -> Path:
    """Write ``dataset`` into directory ``path`` (created if missing)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "family": dataset.task.family,
        "task": dataset.task.to_dict(),
        "quality": dataset.quality,
        "seed": dataset.seed,
        "count": len(dataset),
        "columns": COLUMNS,
        "dtype": "<f8",
        "meta": dataset.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / "transitions.bin").write_bytes(
        np.ascontiguousarray(dataset.records, dtype="<f8").tobytes())
    return path


def read_dataset(path) -> TaskDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"{path}: missing manifest.json") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}/manifest.json: malformed JSON at byte offset {exc.pos}") from exc
    for key in ("format", "task", "quality", "count"):
        if key not in manifest:
            raise DatasetError(f"{path}/manifest.json: missing field {key!r}")
    if manifest["format"] != DATASET_FORMAT:
        raise DatasetError(f"{path}/manifest.json: field 'format' is {manifest['format']!r}")
    task = TaskSpec.from_dict(manifest["task"])
    m = re.fullmatch(r"task_(\d+)", path.name)
    if m and int(m.group(1)) != task.task_id:
        raise DatasetError(f"{path}: manifest task_id {task.task_id} does not match "
                           f"directory name {path.name!r}")
    raw = (path / "transitions.bin").read_bytes()
    if len(raw) % RECORD_BYTES:
        offset = len(raw) // RECORD_BYTES * RECORD_BYTES
        raise DatasetError(f"{path}/transitions.bin: truncated record at byte offset {offset} "
                           f"({len(raw) - offset} of {RECORD_BYTES} bytes)")
    records = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(-1, RECORD_WIDTH)
    if len(records) != manifest["count"]:
        raise DatasetError(f"{path}: field 'count' says {manifest['count']} records, "
                           f"file holds {len(records)}")
    if not np.all(np.isfinite(records)):
        bad = int(np.argmax(~np.all(np.isfinite(records), axis=1)))
        raise DatasetError(f"{path}/transitions.bin: non-finite value in record at byte "
                           f"offset {bad * RECORD_BYTES}")
    return TaskDataset(task, records, manifest["quality"], manifest.get("seed"),
                       manifest.get("meta", {}))


def write_dataset_split(datasets, root) -> list[Path]:
    root = Path(root)
    return [write_dataset(d, root / f"task_{d.task.task_id}") for d in datasets]


def read_dataset_split(root) -> list[TaskDataset]:
    root = Path(root)
    dirs = sorted((p for p in root.iterdir() if p.is_dir() and p.name.startswith("task_")),
                  key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise DatasetError(f"{root}: no task_<id> directories")
    return [read_dataset(d) for d in dirs]


def generate_split(family: str, n_train: int, n_test: int, quality: str, episodes: int,
                   seed: int, noise_std: float | None = None):
    """Disjoint train/test task sets and their datasets.

    Train and test tasks come from independent seed streams; each task's data
    seed is derived from the root seed and the task index.
    """
    ss = np.random.SeedSequence(seed)
    train_seed, test_seed, data_seed = ss.spawn(3)
    train_tasks = envs.sample_tasks(family, n_train, train_seed)
    test_tasks = envs.sample_tasks(family, n_test, test_seed) if n_test else []
    policy = BehaviorPolicy(quality, noise_std)
    seeds = data_seed.generate_state(n_train + n_test, dtype=np.uint32)
    train = [generate_dataset(t, policy, episodes, int(s)) for t, s in zip(train_tasks, seeds)]
    test = [generate_dataset(t, policy, episodes, int(s))
            for t, s in zip(test_tasks, seeds[n_train:])]
    return train, test
