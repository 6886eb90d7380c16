"""Command-line entry point: ``focal <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 validation
failure (every violated constraint is listed).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, datagen, envs, nn, pipeline
from .datagen import DatasetError
from .envs import ConfigError
from .pipeline import Agent, TrainConfig

log = logging.getLogger("focal")

EXIT_RUNTIME = 1
EXIT_VALIDATION = 3


class ValidationError(Exception):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


# --- run manifest -------------------------------------------------------------

def fingerprint(path) -> str:
    """sha256 over a dataset directory's manifest and transitions, in that order."""
    h = hashlib.sha256()
    for name in ("manifest.json", "transitions.bin"):
        h.update((Path(path) / name).read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    config: dict
    datasets: dict  # relative dataset path -> sha256
    data_root: str
    seeds: dict
    version: str = __version__
    created: str = field(default_factory=lambda: time.strftime("%Y-%m-%dT%H:%M:%S%z"))
    command: list = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text()))


def _split_fingerprints(root: Path) -> dict:
    out = {}
    for split in ("train", "test"):
        d = root / split
        if d.is_dir():
            for task_dir in sorted(p for p in d.iterdir() if p.name.startswith("task_")):
                out[f"{split}/{task_dir.name}"] = fingerprint(task_dir)
    return out


# --- config handling ------------------------------------------------------------

def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    if name not in kinds:
        raise ValidationError([f"unknown config key {name!r}"])
    kind = str(kinds[name])
    try:
        if name == "streams":
            return tuple(s for s in text.split(",") if s)
        if "None" in kind and text.lower() == "none":
            return None
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        return text
    except ValueError:
        raise ValidationError([f"{name}: cannot parse {text!r} as {kind}"]) from None


def load_config(path, overrides, desk: bool = False) -> TrainConfig:
    base = TrainConfig.desk_scale() if desk else TrainConfig()
    values = base.to_dict()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError([f"{path}: malformed JSON at byte offset {exc.pos}"]) from exc
        unknown = sorted(set(doc) - set(values))
        if unknown:
            raise ValidationError([f"unknown config key {k!r}" for k in unknown])
        values.update(doc)
    problems = []
    for item in overrides or []:
        key, sep, text = item.partition("=")
        if not sep:
            problems.append(f"--set expects key=value, got {item!r}")
            continue
        try:
            values[key] = _coerce(key, text)
        except ValidationError as exc:
            problems.extend(exc.problems)
    if problems:
        raise ValidationError(problems)
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ConfigError) as exc:
        raise ValidationError([str(exc)]) from exc


def _validate(cfg: TrainConfig, n_train: int | None) -> None:
    problems = cfg.violations(n_train)
    if problems:
        raise ValidationError(problems)


# --- subcommands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    problems = []
    if args.n_train < 1:
        problems.append("--n-train must be >= 1")
    if args.n_test < 0:
        problems.append("--n-test must be >= 0")
    if args.episodes < 1:
        problems.append("--episodes must be >= 1")
    if args.episodes * envs.MAX_EPISODE_LENGTH > datagen.BUFFER_SIZE:
        problems.append(f"--episodes x {envs.MAX_EPISODE_LENGTH} exceeds buffer size "
                        f"{datagen.BUFFER_SIZE}")
    if problems:
        raise ValidationError(problems)
    out = Path(args.out)
    train, test = datagen.generate_split(args.family, args.n_train, args.n_test, args.quality,
                                         args.episodes, args.seed, args.noise)
    datagen.write_dataset_split(train, out / "train")
    if test:
        datagen.write_dataset_split(test, out / "test")
    envs.write_task_set(out / "tasks.json", [d.task for d in train + test], args.seed)
    returns = [float(d.episode_returns().mean()) for d in train + test]
    print(f"wrote {len(train)} train and {len(test)} test datasets to {out} "
          f"(mean behavior return {np.mean(returns):.4f})")
    return 0


def _read_split(root: Path, split: str, required: bool = True):
    d = root / split
    if not d.is_dir():
        if required:
            raise DatasetError(f"{d}: no such dataset split")
        return []
    return datagen.read_dataset_split(d)


def _write_run(run: Path, agent: Agent, cfg: TrainConfig, report, data_root: Path, argv) -> None:
    run.mkdir(parents=True, exist_ok=True)
    nn.save_checkpoint(run / "checkpoint.bin", agent.networks(), {"config": cfg.to_dict()})
    (run / "config.json").write_text(cfg.to_json())
    (run / "report.jsonl").write_text(report.to_jsonl())
    (run / "summary.txt").write_text(report.summary_table())
    seeds = {"root": cfg.seed, "streams": ["data", "init", "sampling", "noise", "eval"]}
    RunManifest(cfg.to_dict(), _split_fingerprints(data_root), str(data_root.resolve()),
                seeds, command=list(argv)).write(run / "manifest.json")


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set, args.desk)
    if args.steps is not None:
        cfg = replace(cfg, training_steps=args.steps)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    data_root = Path(args.data)
    train = _read_split(data_root, "train")
    test = _read_split(data_root, "test", required=False)
    _validate(cfg, len(train))
    trainer = pipeline.MetaTrainer(train, cfg, test)
    trainer.run()
    run = Path(args.run)
    _write_run(run, trainer.agent, cfg, trainer.report, data_root, args.argv)
    sys.stdout.write(trainer.report.summary_table())
    print(f"run written to {run}")
    return 0


def _load_run(run: Path) -> tuple[Agent, TrainConfig]:
    nets, extra = nn.load_checkpoint(run / "checkpoint.bin")
    cfg = TrainConfig.from_dict(json.loads((run / "config.json").read_text()))
    return Agent.from_networks(nets), cfg


def cmd_eval(args) -> int:
    run = Path(args.run)
    agent, cfg = _load_run(run)
    if args.episodes is not None:
        cfg = replace(cfg, eval_episodes=args.episodes)
    data = _read_split(Path(args.data), args.split)
    contexts = data
    if args.context_data:
        contexts = _read_split(Path(args.context_data), args.split)
        if [d.task.task_id for d in contexts] != [d.task.task_id for d in data]:
            raise ValidationError(["--context-data task ids differ from --data task ids"])
    if args.shuffle_contexts:
        contexts = contexts[1:] + contexts[:1]
    returns = pipeline.meta_test(agent.encoder, agent.actor, data, cfg, contexts=contexts)
    lines = ["task_id,mean_return"]
    lines += [f"{d.task.task_id},{r:.6f}" for d, r in zip(data, returns)]
    lines.append(f"mean,{np.mean(returns):.6f}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_embed(args) -> int:
    agent, cfg = _load_run(Path(args.run))
    data = _read_split(Path(args.data), args.split)
    rng = pipeline.rng_streams(cfg.seed)["eval"]
    table = analysis.EmbeddingTable.from_encoder(agent.encoder, data, cfg.batch_size,
                                                args.batches, rng, source=str(args.run))
    from .encoder import write_embeddings
    write_embeddings(args.out, table.task_ids, table.z)
    msg = f"wrote {len(table)} embeddings to {args.out}"
    if args.pca:
        proj = analysis.pca_project(table, args.pca)
        pca_path = Path(args.out).with_suffix(".pca.csv")
        analysis.write_projection(pca_path, proj)
        msg += f"; PCA explained ratio {np.round(proj.explained_ratio, 4).tolist()} -> {pca_path}"
        if proj.rank_deficient:
            msg += " (rank deficient)"
    print(msg)
    return 0


def cmd_metrics(args) -> int:
    tables: dict[str, list] = {}
    for r in args.runs:
        run = Path(r)
        agent, cfg = _load_run(run)
        manifest = RunManifest.read(run / "manifest.json")
        data_root = Path(args.data) if args.data else Path(manifest.data_root)
        data = _read_split(data_root, "train")
        rng = pipeline.rng_streams(cfg.seed)["eval"]
        table = analysis.EmbeddingTable.from_encoder(agent.encoder, data, cfg.batch_size,
                                                    cfg.embedding_batches, rng, str(run))
        tables.setdefault(cfg.dml_variant, []).append(table)
    sys.stdout.write(analysis.report_text(analysis.embedding_report(tables)))
    return 0


def cmd_shift(args) -> int:
    qualities = [q for q in args.qualities.split(",") if q]
    bad = [q for q in qualities if q not in analysis.SHIFT_QUALITIES]
    if bad:
        raise ValidationError([f"unknown quality {q!r}" for q in bad])
    cfg = load_config(args.config, args.set, args.desk)
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    datasets = {}
    if args.data:
        # <root>/<quality>/{train,test}; the same data serves every training seed
        root = Path(args.data)
        for q in qualities:
            if (root / q / "train").is_dir():
                pair = (_read_split(root / q, "train"), _read_split(root / q, "test"))
                for s in seeds:
                    datasets[(q, s)] = pair
    else:
        for q in qualities:
            for s in seeds:
                datasets[(q, s)] = datagen.generate_split(
                    args.family, cfg.n_train_tasks, cfg.n_test_tasks, q, args.episodes, s)
    n_train = min((len(v[0]) for v in datasets.values()), default=None)
    _validate(cfg, n_train)
    matrix = analysis.distribution_shift_experiment(qualities, cfg, datasets, seeds)
    text = matrix.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_check_env(args) -> int:
    if args.n < 1 or args.probes < 1:
        raise ValidationError(["--n and --probes must be >= 1"])
    tasks = envs.sample_tasks(args.family, args.n, args.seed)
    report = envs.check_task_transition_correspondence(tasks, args.probes, args.seed)
    print("\n".join(report.lines()))
    return 0


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="focal", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"focal {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate per-task offline datasets")
    g.add_argument("--family", choices=(envs.SPARSE, envs.WIND), default=envs.SPARSE)
    g.add_argument("--quality", choices=datagen.QUALITIES, default="expert")
    g.add_argument("--n-train", type=int, default=8)
    g.add_argument("--n-test", type=int, default=4)
    g.add_argument("--episodes", type=int, default=50)
    g.add_argument("--noise", type=float, default=None, help="behavior noise std")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    def config_flags(sp):
        sp.add_argument("--config", help="JSON file whose keys mirror TrainConfig")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("--desk", action="store_true",
                        help="start from the desk-scale config instead of full scale")

    t = sub.add_parser("train", help="meta-train encoder, actor and critic")
    t.add_argument("--data", required=True, help="directory with train/ (and test/) splits")
    t.add_argument("--run", required=True, help="output run directory")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    config_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="meta-test a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--context-data", help="take contexts from another quality's datasets")
    e.add_argument("--shuffle-contexts", action="store_true",
                   help="control: embed each task with the next task's context")
    e.add_argument("--episodes", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="write task embeddings (and a PCA projection)")
    m.add_argument("--run", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--split", default="train", choices=("train", "test"))
    m.add_argument("--batches", type=int, default=4, help="context batches per task")
    m.add_argument("--pca", type=int, choices=(2, 3))
    m.set_defaults(func=cmd_embed)

    r = sub.add_parser("metrics", help="ESR/RMS per DML variant over run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--data", help="override the data root recorded in each manifest")
    r.set_defaults(func=cmd_metrics)

    s = sub.add_parser("shift", help="train-quality x test-quality return matrix")
    s.add_argument("--qualities", default="expert,medium,random")
    s.add_argument("--data", help="root with <quality>/train and <quality>/test")
    s.add_argument("--family", choices=(envs.SPARSE, envs.WIND), default=envs.SPARSE)
    s.add_argument("--episodes", type=int, default=50)
    s.add_argument("--seed", type=int, default=0, help="first seed")
    s.add_argument("--seeds", type=int, default=3, help="number of seeds")
    s.add_argument("--out")
    config_flags(s)
    s.set_defaults(func=cmd_shift)

    c = sub.add_parser("check-env", help="verify task-transition correspondence")
    c.add_argument("--family", choices=(envs.SPARSE, envs.WIND), required=True)
    c.add_argument("--n", type=int, default=4)
    c.add_argument("--probes", type=int, default=256)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check_env)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ValidationError as exc:
        print("invalid configuration: " + "; ".join(exc.problems), file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
