"""Command-line entry point.

Subcommands: gen, train, eval, shuffle-study, entropy-map.  Exit codes are a
stable contract: 0 ok, 2 I/O failure, 3 bad arguments, 4 divergence abort,
5 checkpoint/dataset incompatibility.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from swarmset import models as model_zoo
from swarmset.models import ArchCodeError
from swarmset.objectives import mog_param_dim, probe_cluster_probabilities
from swarmset.taskgen import (
    DatasetError,
    build_dataset,
    read_dataset,
    shuffle_entities,
    write_dataset,
)
from swarmset.training import (
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    rebuild_from_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_IO = 2
EXIT_BAD_ARGS = 3
EXIT_DIVERGED = 4
EXIT_INCOMPATIBLE = 5

DIRECT_CLUSTERS = 10  # output-head width for the direct task, the dataset-wide maximum


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


@dataclass
class EvalReport:
    per_task: list
    mean: float
    std: float
    param_count: int
    wall_s: float


def _objective_dims(objective: str):
    if objective == "direct":
        return 2, DIRECT_CLUSTERS
    if objective == "param":
        return 2, mog_param_dim(4, 2)
    raise CliError(f"unknown task objective {objective!r}", EXIT_BAD_ARGS)


def parse_config_file(path) -> dict:
    """Flat UTF-8 key=value file; blank lines and # comments allowed."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc}", EXIT_IO) from exc
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}", EXIT_BAD_ARGS)
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def _config_get(cfg: dict, key: str, cast, default=None, required=False):
    if key not in cfg:
        if required:
            raise CliError(f"config is missing required key {key!r}", EXIT_BAD_ARGS)
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as exc:
        raise CliError(f"config key {key!r}: {exc}", EXIT_BAD_ARGS) from exc


def _load_dataset(path):
    try:
        return read_dataset(path)
    except FileNotFoundError as exc:
        raise CliError(f"dataset not found: {path}", EXIT_IO) from exc
    except DatasetError as exc:
        raise CliError(f"bad dataset {path}: {exc}", EXIT_IO) from exc


def _load_model(path):
    try:
        return rebuild_from_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_IO) from exc


def _split_tasks(tasks, manifest, split: str):
    if split == "train":
        return tasks[: manifest.train_count]
    if split == "val":
        return tasks[manifest.train_count:]
    raise CliError(f"unknown split {split!r}", EXIT_BAD_ARGS)


def _check_compat(model, meta, tasks):
    objective = meta["model_spec"].get("objective", "direct")
    d_in, d_out = _objective_dims(objective)
    spec = meta["model_spec"]
    if spec["d_in"] != d_in or spec["d_out"] != d_out:
        raise CliError(
            f"checkpoint dims ({spec['d_in']}->{spec['d_out']}) do not fit objective "
            f"{objective!r} (expected {d_in}->{d_out})", EXIT_INCOMPATIBLE)
    if objective == "direct":
        for i, t in enumerate(tasks):
            if t.n_clust > d_out:
                raise CliError(f"task {i} has {t.n_clust} clusters, head width is {d_out}",
                               EXIT_INCOMPATIBLE)
    return objective


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    tasks, manifest = build_dataset(args.task, args.count, args.seed, val_count=args.val_count)
    try:
        write_dataset(args.out, tasks, manifest)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    sizes = [t.n_points for t in tasks]
    ks = [t.n_clust for t in tasks]
    print(f"wrote {manifest.task_count} {args.task} tasks to {args.out} "
          f"(train {manifest.train_count} / val {manifest.val_count}, seed {manifest.seed})")
    if tasks:
        hist = np.bincount(ks, minlength=11)[min(ks): max(ks) + 1]
        print(f"entities per task: {min(sizes)}..{max(sizes)}")
        print(f"cluster-count histogram {min(ks)}..{max(ks)}: {hist.tolist()}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    family = _config_get(cfg, "family", str, required=True)
    code = _config_get(cfg, "code", str, required=True)
    dataset_path = _config_get(cfg, "dataset", str, required=True)
    outdir = _config_get(cfg, "outdir", str, required=True)
    objective = _config_get(cfg, "task", str, default="direct")
    pooling = _config_get(cfg, "pooling", str, default="mean")
    d_in, d_out = _objective_dims(objective)

    train_cfg = TrainConfig(
        batch_size=_config_get(cfg, "batch_size", int, default=50),
        lr0=_config_get(cfg, "lr0", float, default=1e-3),
        alpha=_config_get(cfg, "alpha", float, default=0.9),
        beta=_config_get(cfg, "beta", float, default=0.2),
        warmup_epochs=_config_get(cfg, "warmup_epochs", int, default=5),
        max_epochs=_config_get(cfg, "max_epochs", int, default=10),
        time_budget_s=_config_get(cfg, "time_budget_s", float, default=None),
        precision=_config_get(cfg, "precision", int, default=32),
        seed=_config_get(cfg, "seed", int, default=0),
        lr_decay_at=_config_get(cfg, "lr_decay_at", float, default=None),
        lr_decay_factor=_config_get(cfg, "lr_decay_factor", float, default=0.1),
    )

    tasks, manifest = _load_dataset(dataset_path)
    train_tasks = tasks[: manifest.train_count]
    val_tasks = tasks[manifest.train_count:]
    try:
        model = model_zoo.build_model(family, code, d_in, d_out,
                                      np.random.default_rng(train_cfg.seed),
                                      dtype=train_cfg.dtype, pooling=pooling)
    except ArchCodeError as exc:
        raise CliError(str(exc), EXIT_BAD_ARGS) from exc

    counted = model_zoo.param_count(model)
    analytic = model_zoo.analytic_param_count(family, code, d_in, d_out)
    if counted != analytic:
        raise CliError(f"parameter count {counted} disagrees with formula {analytic}", EXIT_INCOMPATIBLE)

    model_spec = {"family": family, "code": code, "d_in": d_in, "d_out": d_out,
                  "pooling": pooling, "objective": objective}
    try:
        state = train(model, train_tasks, val_tasks, train_cfg, outdir,
                      objective=objective, model_spec=model_spec)
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained {family} ({code}), {counted} parameters")
    if state.val_history:
        print(f"final val loss {state.val_history[-1]:.6f}, best {state.best_loss:.6f} "
              f"at epoch {state.best_epoch}, {state.backtracks} backtracks")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint)
    tasks, manifest = _load_dataset(args.dataset)
    selected = _split_tasks(tasks, manifest, args.split)
    if not selected:
        raise CliError(f"split {args.split!r} of {args.dataset} is empty", EXIT_BAD_ARGS)
    objective = _check_compat(model, meta, selected)

    started = time.perf_counter()
    per_task = evaluate(model, selected, objective, batch_size=args.batch_size,
                        dtype=np.float32 if meta["config"]["precision"] == 32 else np.float64)
    report = EvalReport(
        per_task=per_task,
        mean=float(np.mean(per_task)),
        std=float(np.std(per_task)),
        param_count=model_zoo.param_count(model),
        wall_s=time.perf_counter() - started,
    )
    out_path = args.out or str(Path(args.checkpoint).parent / f"eval_{args.split}.csv")
    try:
        with open(out_path, "w") as fh:
            fh.write("task,loss\n")
            for i, loss in enumerate(report.per_task):
                fh.write(f"{i},{loss:.10g}\n")
    except OSError as exc:
        raise CliError(f"cannot write {out_path}: {exc}", EXIT_IO) from exc
    print(f"{len(report.per_task)} tasks: loss {report.mean:.6f} +/- {report.std:.6f} "
          f"({report.param_count} parameters, {report.wall_s:.2f}s) -> {out_path}")
    return EXIT_OK


def cmd_shuffle_study(args) -> int:
    model, meta = _load_model(args.checkpoint)
    tasks, manifest = _load_dataset(args.dataset)
    selected = _split_tasks(tasks, manifest, args.split)[: args.tasks]
    if not selected:
        raise CliError("no tasks to study", EXIT_BAD_ARGS)
    objective = _check_compat(model, meta, selected)
    if objective != "direct":
        raise CliError("shuffle study expects a direct-task model", EXIT_INCOMPATIBLE)

    rng = np.random.default_rng(args.seed)
    rows = []
    for index, task in enumerate(selected):
        variants = [shuffle_entities(task, rng) for _ in range(args.shuffles)]
        losses = evaluate(model, variants, "direct", batch_size=args.batch_size)
        mean = float(np.mean(losses))
        rel_std = float(np.std(losses) / mean) if mean != 0 else 0.0
        rows.append((index, mean, rel_std))
    try:
        with open(args.out, "w") as fh:
            fh.write("task,mean_loss,rel_std\n")
            for index, mean, rel in rows:
                fh.write(f"{index},{mean:.10g},{rel:.10g}\n")
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from exc
    rels = [r for _, _, r in rows]
    print(f"{len(rows)} tasks x {args.shuffles} shuffles: median rel std {np.median(rels):.3e}, "
          f"max {max(rels):.3e} -> {args.out}")
    return EXIT_OK


def _parse_grid(spec: str):
    try:
        gx, gy = (int(p) for p in spec.lower().split("x"))
        if gx < 1 or gy < 1:
            raise ValueError
        return gx, gy
    except ValueError:
        raise CliError(f"grid must look like 100x100, got {spec!r}", EXIT_BAD_ARGS) from None


def _parse_range(spec: str):
    try:
        lo, hi = (float(p) for p in spec.split(":"))
        if not lo < hi:
            raise ValueError
        return lo, hi
    except ValueError:
        raise CliError(f"range must look like -3:3, got {spec!r}", EXIT_BAD_ARGS) from None


def cmd_entropy_map(args) -> int:
    model, meta = _load_model(args.checkpoint)
    tasks, manifest = _load_dataset(args.dataset)
    if not 0 <= args.task_index < len(tasks):
        raise CliError(f"task index {args.task_index} outside 0..{len(tasks) - 1}", EXIT_BAD_ARGS)
    task = tasks[args.task_index]
    objective = _check_compat(model, meta, [task])
    if objective != "direct":
        raise CliError("entropy maps expect a direct-task model", EXIT_INCOMPATIBLE)

    gx, gy = _parse_grid(args.grid)
    lo, hi = _parse_range(args.range)
    xs = np.linspace(lo, hi, gx)
    ys = np.linspace(lo, hi, gy)
    # row-major over the grid: y varies over rows, x within a row
    grid = np.array([(x, y) for y in ys for x in xs])

    probs = probe_cluster_probabilities(model.forward, task, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    entropy = -plogp.sum(axis=1)

    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "entropy.csv", "w") as fh:
            fh.write("x,y,entropy\n")
            for (x, y), h in zip(grid, entropy):
                fh.write(f"{x:.10g},{y:.10g},{h:.10g}\n")
        for k in range(probs.shape[1]):
            with open(out_dir / f"cluster_{k:02d}.csv", "w") as fh:
                fh.write("x,y,p\n")
                for (x, y), p in zip(grid, probs[:, k]):
                    fh.write(f"{x:.10g},{y:.10g},{p:.10g}\n")
    except OSError as exc:
        raise CliError(f"cannot write into {args.out}: {exc}", EXIT_IO) from exc
    print(f"entropy map {gx}x{gy} for task {args.task_index} -> {out_dir} "
          f"(entropy range {entropy.min():.4f}..{entropy.max():.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swarmset",
                                     description="Set-equivariant layers and amortized clustering benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--task", choices=("direct", "param"), required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--val-count", type=int, default=None,
                   help="validation tasks (default: count // 10)")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model from a key=value config file")
    t.add_argument("--config", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("train", "val"), default="val")
    e.add_argument("--batch-size", type=int, default=50)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("shuffle-study", help="loss spread under entity reshuffling")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--split", choices=("train", "val"), default="val")
    s.add_argument("--tasks", type=int, default=100)
    s.add_argument("--shuffles", type=int, default=1000)
    s.add_argument("--batch-size", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="shuffle_study.csv")
    s.set_defaults(fn=cmd_shuffle_study)

    m = sub.add_parser("entropy-map", help="probe-entity assignment entropy grid")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--dataset", required=True)
    m.add_argument("--task-index", type=int, required=True)
    m.add_argument("--grid", default="100x100")
    m.add_argument("--range", default="-3:3")
    m.add_argument("--out", required=True)
    m.set_defaults(fn=cmd_entropy_map)
    return parser


def _merge_value_flags(argv):
    """Fold `--range -3:3` into `--range=-3:3` so argparse does not mistake a
    leading-dash value for an option."""
    out = []
    i = 0
    while i < len(argv):
        if argv[i] in ("--range", "--grid") and i + 1 < len(argv):
            out.append(f"{argv[i]}={argv[i + 1]}")
            i += 2
        else:
            out.append(argv[i])
            i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(_merge_value_flags(list(argv)))
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_BAD_ARGS
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ArchCodeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_ARGS


if __name__ == "__main__":
    sys.exit(main())
