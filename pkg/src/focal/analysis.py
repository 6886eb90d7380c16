"""Embedding diagnostics and experiment post-processing.

PCA by deflated power iteration, per-variant ESR/RMS tables, and the
train-quality x test-quality distribution-shift matrix.  Outputs are plain
delimited text with a one-line header.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import pipeline
from .encoder import esr, rms_distance
from .envs import ConfigError

SHIFT_QUALITIES = ("expert", "medium", "random")


@dataclass
class EmbeddingTable:
    task_ids: np.ndarray
    z: np.ndarray  # (rows, l)
    source: str = ""

    def __post_init__(self):
        self.task_ids = np.asarray(self.task_ids)
        self.z = np.asarray(self.z, dtype=np.float64)
        if self.z.ndim != 2:
            raise ValueError(f"embedding rows must share one length, got array of shape {self.z.shape}")
        if len(self.task_ids) != len(self.z):
            raise ValueError("task_ids and z disagree on the row count")

    def __len__(self):
        return len(self.z)

    @classmethod
    def from_rows(cls, rows, source: str = "") -> EmbeddingTable:
        rows = list(rows)
        lengths = {len(v) for _, v in rows}
        if len(lengths) > 1:
            raise ValueError(f"embedding rows have differing lengths {sorted(lengths)}")
        return cls(np.array([t for t, _ in rows]), np.array([v for _, v in rows]), source)

    @classmethod
    def from_encoder(cls, enc, datasets, batch_size: int, batches_per_task: int, rng,
                     source: str = "") -> EmbeddingTable:
        ids, z = pipeline.task_embeddings(enc, datasets, batch_size, batches_per_task, rng)
        return cls(ids, z, source)


@dataclass
class Projection:
    coords: np.ndarray  # (rows, k)
    components: np.ndarray  # (k, l), unit rows
    eigenvalues: np.ndarray  # (k,), non-increasing
    total_variance: float
    rank_deficient: bool
    task_ids: np.ndarray
    iterations: list[int] = field(default_factory=list)

    @property
    def explained_ratio(self) -> np.ndarray:
        if self.total_variance == 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance


def _power_iteration(cov: np.ndarray, rng, tol: float, max_iter: int) -> tuple[np.ndarray, float, int]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(1, max_iter + 1):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v, 0.0, it
        w /= norm
        # sign-invariant convergence test
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            lam = float(v @ cov @ v)
            return v, lam, it
        v = w
    return v, float(v @ cov @ v), max_iter


def pca_project(table: EmbeddingTable, out_dims: int = 2, tol: float = 1e-10,
                max_iter: int = 10_000, seed: int = 0) -> Projection:
    """Center the rows and project onto the top ``out_dims`` covariance eigenvectors.

    Eigenvectors come from power iteration with Hotelling deflation.  If the
    data has fewer than ``out_dims`` directions of nonzero variance, only the
    available components are returned and ``rank_deficient`` is set.
    """
    if out_dims not in (2, 3):
        raise ValueError("out_dims must be 2 or 3")
    x = table.z
    if len(x) < out_dims + 1:
        raise ValueError(f"need at least {out_dims + 1} rows for a {out_dims}-D projection, "
                         f"got {len(x)}")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / len(xc)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    scale_tol = max(total, 1.0) * 1e-12
    comps, lams, iters = [], [], []
    deflated = cov.copy()
    for _ in range(min(out_dims, cov.shape[0])):
        v, lam, it = _power_iteration(deflated, rng, tol, max_iter)
        if lam <= scale_tol:
            break
        comps.append(v)
        lams.append(lam)
        iters.append(it)
        deflated = deflated - lam * np.outer(v, v)
    comps = np.array(comps).reshape(-1, x.shape[1])
    lams = np.array(lams)
    # deflation can leave near-ties out of order by rounding
    order = np.argsort(-lams, kind="stable")
    comps, lams = comps[order], lams[order]
    return Projection(xc @ comps.T, comps, lams, total, len(lams) < out_dims, table.task_ids,
                      [iters[k] for k in order])


def write_projection(path, proj: Projection) -> None:
    k = proj.coords.shape[1]
    header = "task_id," + ",".join(f"pc{j}" for j in range(k))
    lines = [header] + [f"{int(t)}," + ",".join(repr(float(v)) for v in row)
                        for t, row in zip(proj.task_ids, proj.coords)]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class VariantStats:
    variant: str
    esr: float
    rms: float
    n_tables: int


def embedding_report(tables: dict) -> list[VariantStats]:
    """ESR and RMS per DML variant, sorted by ESR descending.

    ``tables`` maps a variant name to one :class:`EmbeddingTable` or a list of
    them (one per seed); statistics are averaged over the list.
    """
    out = []
    for variant, ts in tables.items():
        ts = [ts] if isinstance(ts, EmbeddingTable) else list(ts)
        e, r = [], []
        for t in ts:
            if len(np.unique(t.task_ids)) < 2:
                raise ValueError(f"{variant}: ESR is undefined for a single-task table")
            e.append(esr((t.task_ids, t.z), t.z.shape[1]))
            r.append(rms_distance((t.task_ids, t.z)))
        out.append(VariantStats(variant, float(np.mean(e)), float(np.mean(r)), len(ts)))
    return sorted(out, key=lambda s: -s.esr)


def report_text(stats: list[VariantStats]) -> str:
    lines = ["variant,esr,rms,tables"]
    lines += [f"{s.variant},{s.esr:.6f},{s.rms:.6f},{s.n_tables}" for s in stats]
    return "\n".join(lines) + "\n"


# --- distribution shift ------------------------------------------------------

@dataclass
class ShiftMatrix:
    train_qualities: tuple
    test_qualities: tuple
    values: np.ndarray  # (seeds, train, test) mean test returns
    seeds: tuple = ()

    def __post_init__(self):
        bad = [q for q in (*self.train_qualities, *self.test_qualities)
               if q not in SHIFT_QUALITIES]
        if bad:
            raise ConfigError(f"shift qualities must come from {SHIFT_QUALITIES}, got {bad}")

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.values.std(axis=0)

    def cell(self, train_quality: str, test_quality: str, seed_index: int | None = None) -> float:
        i = self.train_qualities.index(train_quality)
        j = self.test_qualities.index(test_quality)
        if seed_index is None:
            return float(self.mean[i, j])
        return float(self.values[seed_index, i, j])

    def to_text(self) -> str:
        lines = ["train_quality,test_quality,mean_return,std_return,seeds"]
        for i, tq in enumerate(self.train_qualities):
            for j, eq in enumerate(self.test_qualities):
                lines.append(f"{tq},{eq},{self.mean[i, j]:.6f},{self.std[i, j]:.6f},"
                             f"{len(self.values)}")
        return "\n".join(lines) + "\n"


def distribution_shift_experiment(qualities, base_cfg: pipeline.TrainConfig, datasets,
                                  seeds=(0, 1, 2), test_qualities=None) -> ShiftMatrix:
    """Train one model per (train quality, seed) and test it on every test quality.

    ``datasets`` maps ``(quality, seed)`` to a ``(train, test)`` pair of
    dataset lists; all qualities of one seed must share the same task sets.
    The test tasks are rolled out with contexts drawn from the test-quality
    datasets.
    """
    qualities = tuple(qualities)
    test_qualities = qualities if test_qualities is None else tuple(test_qualities)
    seeds = tuple(seeds)
    needed = sorted({(q, s) for q in (*qualities, *test_qualities) for s in seeds})
    missing = [f"{q}/seed {s}" for q, s in needed if (q, s) not in datasets]
    if missing:
        raise ConfigError("missing dataset cells: " + ", ".join(missing))
    values = np.zeros((len(seeds), len(qualities), len(test_qualities)))
    for k, seed in enumerate(seeds):
        for i, tq in enumerate(qualities):
            train, _ = datasets[(tq, seed)]
            cfg = replace(base_cfg, seed=seed)
            enc, actor, _, _ = pipeline.meta_train(train, cfg)
            for j, eq in enumerate(test_qualities):
                _, test = datasets[(eq, seed)]
                values[k, i, j] = np.mean(pipeline.meta_test(enc, actor, test, cfg))
    return ShiftMatrix(qualities, test_qualities, values, seeds)
