"""Offline meta-training and meta-testing.

Training alternates three decoupled updates on every step:

1. the context encoder descends the distance-metric loss over a meta-batch
   of tasks;
2. the critics descend the TD loss with the task embedding held constant;
3. the actor descends its regularised policy loss, again with a constant
   embedding.

Training reads only the fixed per-task datasets.  The environment is touched
only by evaluation rollouts (checkpoints and :func:`meta_test`).
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import brac, envs, nn
from .brac import Actor, Critic, DivergenceEstimator, RegularizationMode
from .datagen import BUFFER_SIZE, TaskDataset
from .encoder import (ContextEncoder, DmlConfig, dml_loss_from_embeddings, embed_contexts, esr,
                      rms_distance)
from .envs import ConfigError

log = logging.getLogger(__name__)

STREAMS = ("dml", "actor", "critic")


@dataclass
class TrainConfig:
    """Every knob of a training run.  Defaults follow the Sparse-Point-Robot setup."""

    reward_scale: float = 100.0
    dml_variant: str = "inverse-square"
    dml_weight: float | None = None  # None: the variant's default weight
    dml_epsilon: float = 0.1
    reg_strength: float = 0.0
    reg_mode: str = brac.POLICY_REGULARIZATION
    mmd_samples_per_state: int = 1
    buffer_size: int = BUFFER_SIZE
    batch_size: int = 256
    meta_batch_size: int = 16
    dml_lr: float = 1e-3
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.9
    n_train_tasks: int = 80
    n_test_tasks: int = 20
    latent_dim: int = 5
    encoder_width: int = 200
    encoder_depth: int = 3
    net_width: int = 300
    net_depth: int = 3
    max_episode_length: int = envs.MAX_EPISODE_LENGTH
    training_steps: int = 100_000
    eval_interval: int = 500
    eval_episodes: int = 1
    eval_deterministic: bool = True
    embedding_batches: int = 4
    temperature: float = 0.1
    actor_mean_reg: float = 0.0
    tau: float = 0.005
    seed: int = 0
    streams: tuple = STREAMS

    @classmethod
    def desk_scale(cls, **overrides) -> TrainConfig:
        """Small networks and batches that train in minutes on one CPU core.

        With eight narrow expert datasets the unregularized actor drifts into
        states the data never covers, so desk scale turns on policy
        regularization (alpha = 100) against the logged actions.
        """
        base = dict(batch_size=64, meta_batch_size=8, n_train_tasks=8, n_test_tasks=4,
                    encoder_width=64, encoder_depth=2, net_width=64, net_depth=2,
                    training_steps=3000, eval_interval=500, eval_episodes=1,
                    reg_mode="policy-regularization", reg_strength=100.0)
        base.update(overrides)
        return cls(**base)

    def dml_config(self) -> DmlConfig:
        return DmlConfig.for_variant(self.dml_variant, self.latent_dim, self.dml_weight,
                                     self.dml_epsilon)

    def regularization(self) -> RegularizationMode:
        return RegularizationMode(self.reg_mode, self.reg_strength)

    def divergence(self) -> DivergenceEstimator:
        return DivergenceEstimator("mmd-rbf", self.mmd_samples_per_state)

    def violations(self, n_train: int | None = None) -> list[str]:
        """Human-readable list of violated constraints (empty when valid)."""
        out = []
        positive = ["batch_size", "meta_batch_size", "latent_dim", "encoder_width",
                    "encoder_depth", "net_width", "net_depth", "max_episode_length",
                    "buffer_size", "embedding_batches"]
        for name in positive:
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        for name in ("dml_lr", "actor_lr", "critic_lr", "reg_strength", "temperature",
                     "training_steps", "eval_interval", "eval_episodes", "reward_scale"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if not 0 <= self.gamma < 1:
            out.append("gamma must lie in [0, 1)")
        if not 0 <= self.tau <= 1:
            out.append("tau must lie in [0, 1]")
        if self.meta_batch_size < 2:
            out.append("meta_batch_size must be >= 2 (the DML loss needs task pairs)")
        if n_train is not None:
            if n_train < 2:
                out.append("need at least 2 training tasks")
            if self.meta_batch_size > n_train:
                out.append(f"meta_batch_size exceeds task count ({self.meta_batch_size} > {n_train})")
        unknown = set(self.streams) - set(STREAMS)
        if unknown:
            out.append(f"unknown update streams {sorted(unknown)}")
        try:
            self.dml_config()
            self.regularization()
        except ValueError as exc:
            out.append(str(exc))
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["streams"] = list(self.streams)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "streams" in d:
            d["streams"] = tuple(d["streams"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one root seed."""
    names = ("data", "init", "sampling", "noise", "eval")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


class ContextBuffer:
    """Fixed-capacity ring buffer of transition records for one task."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1")
        self.capacity = capacity
        self._data = np.empty((capacity, 7))
        self._size = 0
        self._next = 0

    def __len__(self):
        return self._size

    def add(self, records: np.ndarray) -> None:
        for row in np.asarray(records, dtype=np.float64).reshape(-1, 7):
            self._data[self._next] = row
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def extend(self, records: np.ndarray) -> None:
        records = np.asarray(records, dtype=np.float64).reshape(-1, 7)
        if len(records) >= self.capacity:
            self._data[:] = records[-self.capacity:]
            self._size, self._next = self.capacity, 0
            return
        self.add(records)

    @property
    def records(self) -> np.ndarray:
        return self._data[: self._size]

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self._size == 0:
            raise ConfigError("cannot sample from an empty buffer")
        idx = rng.integers(0, self._size, size=shape)
        return self._data[idx]


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("report steps must be strictly increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> TrainReport:
        return cls([json.loads(line) for line in text.splitlines() if line.strip()])

    def summary_table(self) -> str:
        cols = ["step", "train_return", "test_return", "esr", "rms", "mean_q",
                "dml_loss", "critic_loss", "actor_loss"]
        lines = [" ".join(f"{c:>12}" for c in cols)]
        for r in self.records:
            cells = []
            for c in cols:
                v = r.get(c)
                if v is None:
                    cells.append(f"{'-':>12}")
                elif c == "step":
                    cells.append(f"{v:>12d}")
                else:
                    cells.append(f"{v:>12.4f}")
            lines.append(" ".join(cells))
        return "\n".join(lines) + "\n"


@dataclass
class Agent:
    encoder: ContextEncoder
    actor: Actor
    critic: Critic

    @classmethod
    def build(cls, cfg: TrainConfig, rng) -> Agent:
        enc = ContextEncoder.build(cfg.latent_dim, cfg.encoder_width, cfg.encoder_depth, rng)
        actor = Actor.build(cfg.latent_dim, cfg.net_width, cfg.net_depth, rng)
        critic = Critic.build(cfg.latent_dim, cfg.net_width, cfg.net_depth, rng)
        return cls(enc, actor, critic)

    def networks(self) -> dict[str, nn.Mlp]:
        c = self.critic
        return {"encoder": self.encoder.net, "actor": self.actor.net, "q1": c.q1, "q2": c.q2,
                "q1_target": c.q1_target, "q2_target": c.q2_target}

    @classmethod
    def from_networks(cls, nets: dict[str, nn.Mlp]) -> Agent:
        critic = Critic(nets["q1"], nets["q2"], nets["q1_target"], nets["q2_target"])
        return cls(ContextEncoder(nets["encoder"]), Actor(nets["actor"]), critic)


class MetaTrainer:
    """Stateful driver for meta-training; :func:`meta_train` wraps it."""

    def __init__(self, datasets, cfg: TrainConfig, test_datasets=None, agent: Agent | None = None):
        datasets = list(datasets)
        problems = cfg.violations(len(datasets))
        if any(len(d) == 0 for d in datasets):
            problems.append("every training dataset must be nonempty")
        if problems:
            raise ConfigError("; ".join(problems))
        self.cfg = cfg
        self.datasets = datasets
        self.test_datasets = list(test_datasets or [])
        self.rng = rng_streams(cfg.seed)
        self.agent = agent or Agent.build(cfg, self.rng["init"])
        self.buffers = []
        for d in datasets:
            buf = ContextBuffer(cfg.buffer_size)
            buf.extend(d.records)
            self.buffers.append(buf)
        self.opt = {
            "dml": nn.AdamState(cfg.dml_lr),
            "actor": nn.AdamState(cfg.actor_lr),
            "critic": nn.AdamState(cfg.critic_lr),
        }
        self.dml_cfg = cfg.dml_config()
        self.reg = cfg.regularization()
        self.div = cfg.divergence()
        self.step_count = 0
        self.report = TrainReport()
        self._trace: dict[str, list[float]] = {}

    def sample_meta_batch(self) -> tuple[np.ndarray, np.ndarray]:
        """Task indices (M,) and contexts (M, 2, B, 7): a main and an independent second batch."""
        cfg = self.cfg
        rng = self.rng["sampling"]
        tasks = rng.choice(len(self.buffers), size=cfg.meta_batch_size, replace=False)
        ctx = np.stack([self.buffers[t].sample(rng, (2, cfg.batch_size)) for t in tasks])
        return tasks, ctx

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        agent = self.agent
        _, ctx = self.sample_meta_batch()
        noise = self.rng["noise"]

        dml_tape = nn.GradTape()
        z_pair = embed_contexts(agent.encoder, ctx, dml_tape)
        main, second = z_pair[:, 0], z_pair[:, 1]
        dml = dml_loss_from_embeddings(main, second, self.dml_cfg)
        z = main.value  # constant from here on: no gradient path into the encoder
        batch = ctx[:, 0]

        info: dict[str, float] = {"dml_loss": float(dml.value)}
        # losses of inactive streams are skipped entirely
        if "critic" in cfg.streams:
            critic_tape = nn.GradTape()
            lc = brac.critic_loss(agent.critic, agent.actor, z, batch, self.div, self.reg,
                                  cfg.gamma, cfg.temperature, noise, critic_tape,
                                  cfg.reward_scale)
            info["critic_loss"] = float(lc.value)
        if "actor" in cfg.streams:
            actor_tape = nn.GradTape()
            la = brac.actor_loss(agent.actor, agent.critic, z, batch, self.div, self.reg,
                                 cfg.temperature, noise, actor_tape,
                                 mean_reg=cfg.actor_mean_reg)
            info["actor_loss"] = float(la.value)

        if "dml" in cfg.streams:
            nn.adam_step(agent.encoder.params, nn.backward(dml_tape, dml), self.opt["dml"])
        if "actor" in cfg.streams:
            nn.adam_step(agent.actor.params, nn.backward(actor_tape, la), self.opt["actor"])
        if "critic" in cfg.streams:
            nn.adam_step(agent.critic.params, nn.backward(critic_tape, lc), self.opt["critic"])
            brac.update_critic_targets(agent.critic, cfg.tau)
        if "critic" in cfg.streams or "actor" in cfg.streams:
            q = brac.q_values(agent.critic.q1, batch[..., 0:2], z, batch[..., 2:4]).value
            info["mean_q"] = float(np.mean(q))
        self.step_count += 1
        return info

    def checkpoint(self) -> dict:
        cfg = self.cfg
        rng = self.rng["eval"]
        record: dict = {"step": self.step_count}
        for key, values in sorted(self._trace.items()):
            record[key] = float(np.mean(values)) if values else None
        self._trace = {}
        ids, zs = task_embeddings(self.agent.encoder, self.datasets, cfg.batch_size,
                                  cfg.embedding_batches, rng)
        record["esr"] = esr((ids, zs), cfg.latent_dim)
        record["rms"] = rms_distance((ids, zs))
        train_returns = meta_test(self.agent.encoder, self.agent.actor, self.datasets, cfg, rng)
        record["train_return"] = float(np.mean(train_returns))
        if self.test_datasets:
            test_returns = meta_test(self.agent.encoder, self.agent.actor, self.test_datasets,
                                     cfg, rng)
            record["test_return"] = float(np.mean(test_returns))
        else:
            record["test_return"] = None
        return record

    def run(self, steps: int | None = None, callback=None) -> TrainReport:
        steps = self.cfg.training_steps if steps is None else steps
        interval = self.cfg.eval_interval
        for _ in range(steps):
            info = self.train_step()
            for k, v in info.items():
                self._trace.setdefault(k, []).append(v)
            if interval and self.step_count % interval == 0:
                record = self.checkpoint()
                self.report.append(record)
                log.info("step %d train %.3f test %s esr %.3f", record["step"],
                         record["train_return"], record["test_return"], record["esr"])
                if callback is not None:
                    callback(record)
        return self.report


def meta_train(datasets, cfg: TrainConfig, test_datasets=None, callback=None):
    """Train encoder, actor and critic on fixed task datasets.

    Returns ``(encoder, actor, critic, report)``.
    """
    trainer = MetaTrainer(datasets, cfg, test_datasets)
    report = trainer.run(callback=callback)
    a = trainer.agent
    return a.encoder, a.actor, a.critic, report


def task_embeddings(enc: ContextEncoder, datasets, batch_size: int, batches_per_task: int,
                    rng) -> tuple[np.ndarray, np.ndarray]:
    """Embeddings of ``batches_per_task`` random context batches per dataset."""
    ids, ctx = [], []
    for d in datasets:
        idx = rng.integers(0, len(d), size=(batches_per_task, batch_size))
        ctx.append(d.records[idx])
        ids.extend([d.task.task_id] * batches_per_task)
    z = embed_contexts(enc, np.stack(ctx)).value.reshape(-1, enc.latent_dim)
    return np.array(ids), z


def _policy_actions(actor, positions, z, rng, deterministic):
    if isinstance(actor, Actor):
        a, _ = brac.sample_action(actor, positions, z, rng, deterministic=deterministic)
        return a.value
    return np.asarray(actor(positions, z, rng), dtype=np.float64)


def rollout_returns(actor, tasks, z, rng, deterministic: bool = True) -> np.ndarray:
    """Undiscounted raw-reward returns of one episode per row.

    ``tasks[k]`` is rolled out with embedding ``z[k]``; all rows advance in
    lockstep through the environment's own transition function.  ``actor``
    is an :class:`Actor` or a callable ``(positions, z, rng) -> actions``.
    """
    tasks = list(tasks)
    if not tasks:
        return np.zeros(0)
    family = tasks[0].family
    if any(t.family != family for t in tasks):
        raise ConfigError("rollout rows must share one task family")
    horizon = tasks[0].max_episode_length
    goals, winds, radii = envs.task_arrays(tasks)
    pos = np.zeros((len(tasks), 2))
    total = np.zeros(len(tasks))
    z = np.asarray(z, dtype=np.float64)
    for _ in range(horizon):
        a = _policy_actions(actor, pos, z, rng, deterministic)
        pos, r = envs.transition_batch(family, goals, winds, radii, pos, a)
        total += r
    return total


def evaluate_return(actor, z, task, episodes: int, rng, deterministic_policy: bool = True) -> float:
    """Mean undiscounted return of ``episodes`` rollouts on ``task`` with embedding ``z``."""
    zs = np.repeat(np.asarray(z, dtype=np.float64).reshape(1, -1), episodes, axis=0)
    return float(np.mean(rollout_returns(actor, [task] * episodes, zs, rng, deterministic_policy)))


def infer_task_embeddings(enc: ContextEncoder, datasets, batch_size: int, count: int,
                          rng) -> np.ndarray:
    """(n_tasks, count, l) embeddings, each from a fresh context batch of its dataset."""
    ctx = np.stack([d.records[rng.integers(0, len(d), size=(count, batch_size))]
                    for d in datasets])
    return embed_contexts(enc, ctx).value


def meta_test(enc: ContextEncoder, actor, test_datasets, cfg: TrainConfig, rng=None,
              contexts=None) -> list[float]:
    """Mean test return per task; no parameters change.

    For each task and each evaluation episode a context batch is drawn from
    ``contexts[i]`` (default: the task's own dataset), embedded, and the
    policy is rolled out on ``test_datasets[i].task``.  Returns use raw
    environment rewards.
    """
    test_datasets = list(test_datasets)
    if not test_datasets:
        return []
    if rng is None:
        rng = rng_streams(cfg.seed)["eval"]
    contexts = test_datasets if contexts is None else list(contexts)
    if len(contexts) != len(test_datasets):
        raise ConfigError("contexts must pair one-to-one with test datasets")
    episodes = cfg.eval_episodes
    z = infer_task_embeddings(enc, contexts, cfg.batch_size, episodes, rng)
    tasks = [d.task for d in test_datasets for _ in range(episodes)]
    returns = rollout_returns(actor, tasks, z.reshape(-1, z.shape[-1]), rng,
                              cfg.eval_deterministic)
    return [float(v) for v in returns.reshape(len(test_datasets), episodes).mean(axis=1)]
