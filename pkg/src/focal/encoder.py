"""Deterministic context encoder and distance-metric losses on its embeddings.

The encoder maps each transition ``(s, a, s', r)`` to a point in
``(-1, 1)^l`` and mean-pools over a context batch.  A context's rows are put
in lexicographic order before the forward pass (BLAS results for a row can
depend on its position in the matrix by an ulp), and pooling sorts each
coordinate before summing, so the task embedding is bit-for-bit independent
of the order of the context.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .nn import ContractError, GradTape, Mlp, Tensor

TRANSITION_DIM = 7

VARIANTS = ("inverse-square", "inverse", "linear", "square")
_DEFAULT_BETA = {"inverse-square": 1.0, "inverse": 2.0, "linear": 8.0, "square": 16.0}
_POWER = {"inverse-square": 2, "inverse": 1, "linear": 1, "square": 2}


@dataclass
class ContextEncoder:
    net: Mlp

    @classmethod
    def build(cls, latent_dim: int, width: int, depth: int, rng) -> ContextEncoder:
        widths = [TRANSITION_DIM] + [width] * depth + [latent_dim]
        return cls(Mlp(widths, rng, "relu", "tanh", name="encoder"))

    @property
    def latent_dim(self) -> int:
        return self.net.out_dim

    @property
    def params(self):
        return self.net.params


@dataclass
class LatentEmbedding:
    z: np.ndarray
    task_id: int = -1
    node: Tensor | None = None  # differentiable handle when built on a tape


@dataclass(frozen=True)
class DmlConfig:
    variant: str = "inverse-square"
    beta: float = 1.0
    epsilon: float = 0.1
    margin: float = 0.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown DML variant {self.variant!r}; expected one of {VARIANTS}")
        if self.beta <= 0 or self.epsilon <= 0 or self.margin < 0:
            raise ValueError("need beta > 0, epsilon > 0 and margin >= 0")

    @classmethod
    def for_variant(cls, variant: str, latent_dim: int = 5, beta: float | None = None,
                    epsilon: float = 0.1) -> DmlConfig:
        """Default weights matched so every variant is equal at per-dimension distance 0.5."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown DML variant {variant!r}")
        return cls(variant, _DEFAULT_BETA[variant] if beta is None else beta, epsilon,
                   esr_threshold(latent_dim))

    @property
    def power(self) -> int:
        return _POWER[self.variant]

    @property
    def inverse(self) -> bool:
        return self.variant.startswith("inverse")


def _as_rows(transitions) -> np.ndarray:
    if isinstance(transitions, np.ndarray):
        rows = transitions
    else:
        rows = np.array([t.as_row() if hasattr(t, "as_row") else t for t in transitions])
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != TRANSITION_DIM or len(rows) == 0:
        raise ContractError(f"context must be a nonempty (n, {TRANSITION_DIM}) batch, "
                            f"got shape {rows.shape}")
    return rows


def embed_batch(enc: ContextEncoder, transitions, tape: GradTape | None = None) -> Tensor:
    """Per-transition embeddings, shape (n, l)."""
    return nn.forward(enc.net, _as_rows(transitions), tape)


def pool_mean(x: Tensor, axis: int = -2) -> Tensor:
    """Order-independent mean over ``axis``.

    Values are sorted along the pooled axis before summation, so any
    permutation of the rows gives the identical floating-point result.
    """
    x = nn.as_tensor(x)
    n = x.value.shape[axis]
    shape = x.value.shape
    value = np.sum(np.sort(x.value, axis=axis), axis=axis) / n

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape),)

    return nn._make(value, (x,), bw)


def canonical_order(contexts: np.ndarray) -> np.ndarray:
    """Rows of each context, shape (..., B, 7), sorted lexicographically."""
    keys = np.moveaxis(contexts, -1, 0)[::-1]  # last key is the primary one
    idx = np.lexsort(keys, axis=-1)
    return np.take_along_axis(contexts, idx[..., None], axis=-2)


def embed_task(enc: ContextEncoder, context, tape: GradTape | None = None,
               task_id: int = -1) -> LatentEmbedding:
    node = pool_mean(embed_batch(enc, canonical_order(_as_rows(context)), tape))
    return LatentEmbedding(node.value, task_id, node)


def embed_contexts(enc: ContextEncoder, contexts: np.ndarray,
                   tape: GradTape | None = None) -> Tensor:
    """Mean embeddings of a stack of equal-size contexts, shape (..., B, 7) -> (..., l)."""
    contexts = canonical_order(np.asarray(contexts, dtype=np.float64))
    lead = contexts.shape[:-1]
    rows = embed_batch(enc, contexts.reshape(-1, TRANSITION_DIM), tape)
    return pool_mean(rows.reshape(*lead, enc.latent_dim), axis=-2)


def _node(z) -> Tensor:
    if isinstance(z, LatentEmbedding):
        return z.node if z.node is not None else Tensor(z.z)
    return nn.as_tensor(z)


def _push(dist_sq: Tensor, cfg: DmlConfig) -> Tensor:
    """Different-task term as a function of squared distance (elementwise)."""
    if cfg.variant == "inverse-square":
        return cfg.beta / (dist_sq + cfg.epsilon)
    d = nn.sqrt(dist_sq + 1e-30)
    if cfg.variant == "inverse":
        return cfg.beta / (d + cfg.epsilon)
    gap = nn.relu(cfg.margin - d)
    return cfg.beta * (gap if cfg.variant == "linear" else gap * gap)


def dml_pair_loss(z_i, z_j, same_task: bool, cfg: DmlConfig) -> Tensor:
    a, b = _node(z_i), _node(z_j)
    if a.value.shape != b.value.shape:
        raise ContractError(f"embedding shapes differ: {a.value.shape} vs {b.value.shape}")
    diff = a - b
    dist_sq = (diff * diff).sum()
    if same_task:
        return dist_sq
    return _push(dist_sq, cfg)


def dml_meta_loss(enc: ContextEncoder, batches, cfg: DmlConfig,
                  tape: GradTape | None = None) -> Tensor:
    """Distance-metric loss over a meta-batch of tasks.

    ``batches`` holds, per task, a pair ``(c, c2)`` of independent context
    mini-batches.  The loss sums the pull term ``|z(c_i) - z(c2_i)|^2`` over
    tasks and the push term over all ordered pairs ``i != j`` of ``z(c_i)``.
    """
    batches = [(np.asarray(c, dtype=np.float64), np.asarray(c2, dtype=np.float64))
               for c, c2 in batches]
    m = len(batches)
    if m < 2:
        raise ContractError("the DML loss needs at least two tasks")
    for k, (c, c2) in enumerate(batches):
        if len(c) == 0 or len(c2) == 0:
            raise ContractError(f"task {k} has an empty context batch")
    sizes = {len(c) for pair in batches for c in pair}
    if len(sizes) == 1:
        z = embed_contexts(enc, np.stack([np.stack(p) for p in batches]), tape)  # (m, 2, l)
        main, second = z[:, 0], z[:, 1]
    else:
        main = nn.concat([embed_task(enc, c, tape).node.reshape(1, -1) for c, _ in batches], 0)
        second = nn.concat([embed_task(enc, c2, tape).node.reshape(1, -1) for _, c2 in batches], 0)
    return dml_loss_from_embeddings(main, second, cfg)


def dml_loss_from_embeddings(main: Tensor, second: Tensor, cfg: DmlConfig) -> Tensor:
    """Vectorised meta-loss given per-task embeddings ``main`` and ``second`` of shape (m, l)."""
    m, l = main.value.shape
    pull_diff = main - second
    pull = (pull_diff * pull_diff).sum()
    diff = main.reshape(m, 1, l) - main.reshape(1, m, l)
    dist_sq = (diff * diff).sum(axis=-1)
    off_diag = 1.0 - np.eye(m)
    # the diagonal is masked out; shift it away from zero to keep sqrt finite
    push = _push(dist_sq + np.eye(m), cfg) * off_diag
    return pull + push.sum()


# --- variance identity and embedding metrics ---------------------------------

def contrastive_variance_check(x) -> tuple[float, float]:
    """Both sides of sum_{i != j} (x_i - x_j)^2 = 2 N^2 Var(X) (population variance)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two values")
    n = x.size
    d = x[:, None] - x[None, :]
    lhs = float(np.sum(d * d))
    rhs = 2.0 * n * n * float(np.var(x))
    return lhs, rhs


def esr_threshold(latent_dim: int) -> float:
    """Expected distance between two uniform points of (-1, 1)^l."""
    return math.sqrt(2.0 * latent_dim / 3.0)


def _unpack(embeddings):
    if isinstance(embeddings, tuple) and len(embeddings) == 2:
        ids, z = embeddings
        return np.asarray(ids), np.asarray(z, dtype=np.float64)
    ids = np.array([e.task_id for e in embeddings])
    z = np.array([np.asarray(e.z, dtype=np.float64) for e in embeddings])
    return ids, z


def _cross_task_distances(embeddings) -> np.ndarray:
    ids, z = _unpack(embeddings)
    if len(np.unique(ids)) < 2:
        raise ValueError("need embeddings from at least two tasks")
    i, j = np.triu_indices(len(ids), k=1)
    keep = ids[i] != ids[j]
    diff = z[i[keep]] - z[j[keep]]
    return np.sqrt(np.sum(diff * diff, axis=1))


def esr(embeddings, latent_dim: int | None = None) -> float:
    """Fraction of different-task pairs farther apart than the random-pair distance.

    ``embeddings`` is a list of :class:`LatentEmbedding` or a ``(task_ids, Z)`` tuple.
    """
    d = _cross_task_distances(embeddings)
    if latent_dim is None:
        latent_dim = _unpack(embeddings)[1].shape[1]
    return float(np.mean(d > esr_threshold(latent_dim)))


def rms_distance(embeddings) -> float:
    d = _cross_task_distances(embeddings)
    return float(np.sqrt(np.mean(d * d)))


def write_embeddings(path, task_ids, z) -> None:
    z = np.asarray(z, dtype=np.float64)
    header = "task_id," + ",".join(f"z{k}" for k in range(z.shape[1]))
    lines = [header] + [f"{int(t)}," + ",".join(repr(float(v)) for v in row)
                        for t, row in zip(task_ids, z)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("task_id"):
        raise ValueError(f"{path}: missing header")
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    ids = np.array([int(r[0]) for r in rows])
    z = np.array([[float(v) for v in r[1:]] for r in rows])
    return ids, z

