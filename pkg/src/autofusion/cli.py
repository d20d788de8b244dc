"""Command-line front end: split, train, fuse, eval, sweep.

Exit codes: 0 success, 2 usage or validation error, 3 I/O error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_params, load_perms, save_params, save_perms
from .data import DataError, IdxFormatError, LabeledDataset, concat, draw_pool, load_idx
from .evaluate import RunResult, build_report, evaluate_tasks, format_table, perm_complexity, write_report_csv
from .fusion import FusionMethod, PermutationSet, fuse, sweep_interpolation, write_sweep_csv
from .nn import ArchDescriptor, DimensionError, TrainSchedule, TrainingDivergedError, train_base
from .sinkhorn import weight_match
from .trainer import FusionConfig, FusionDivergedError, train_permutations, write_training_log

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4

IDX_NAMES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}
METHOD_ALIASES = {"interp": "interpolate", "interpolate": "interpolate",
                  "rebasin": "rebasin", "autofusion": "autofusion"}


class UsageError(ValueError):
    pass


# --- configuration ----------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything a run needs besides the files named on the command line."""
    arch: dict = field(default_factory=lambda: {"kind": "mlp", "hidden": [512] * 6})
    train: dict = field(default_factory=dict)
    fusion: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    pool_fraction: float | None = None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        if path is None:
            return cls()
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise UsageError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(**{k: v for k, v in raw.items() if k != "arch"})
        if "arch" in raw:
            cfg.arch = raw["arch"]
        return cfg

    def arch_descriptor(self) -> ArchDescriptor:
        a = dict(self.arch)
        kind = a.pop("kind", "mlp")
        input_shape = tuple(a.pop("input_shape", (1, 28, 28)))
        class_count = a.pop("class_count", 10)
        if kind == "mlp":
            arch = ArchDescriptor.mlp(tuple(a.pop("hidden", (512,) * 6)), class_count, input_shape)
        else:
            arch = ArchDescriptor.cnn(tuple(a.pop("channels", (16, 32))), tuple(a.pop("hidden", (128,))),
                                      class_count, input_shape)
        if a:
            raise UsageError(f"unknown arch keys: {sorted(a)}")
        return arch

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(**self.train)

    def fusion_config(self) -> FusionConfig:
        return FusionConfig.from_dict(dict(self.fusion))


def _parse_ints(text):
    if text is None:
        return None
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from None


def _parse_hidden(text):
    # "512x6" or "256,128"
    if "x" in text:
        width, depth = text.split("x")
        return [int(width)] * int(depth)
    return _parse_ints(text)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except (OSError, FileExistsError) as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


# --- split manifests --------------------------------------------------------

def _dataset_files(data_dir: Path) -> dict:
    files = {}
    for key, stem in IDX_NAMES.items():
        for candidate in (data_dir / stem, data_dir / (stem + ".gz")):
            if candidate.exists():
                files[key] = str(candidate.resolve())
                break
        else:
            raise FileNotFoundError(f"{data_dir}: missing {stem}[.gz]")
    return files


@lru_cache(maxsize=8)
def _load_cached(images, labels):
    return load_idx(images, labels)


def _load_pair(files):
    return (_load_cached(files["train_images"], files["train_labels"]),
            _load_cached(files["test_images"], files["test_labels"]))


def cmd_split(args) -> int:
    """Write a JSON manifest describing the tasks (class subsets of datasets)."""
    dirs = [Path(d) for d in args.data_dir]
    names = args.name or [d.name for d in dirs]
    if len(names) != len(dirs):
        raise UsageError("give one --name per --data-dir")
    tasks = []
    if args.by_dataset:
        for d, name in zip(dirs, names):
            files = _dataset_files(d)
            train, test = _load_pair(files)
            tasks.append({"name": name, "dataset": name, **files,
                          "classes": list(range(train.class_count)),
                          "train_count": len(train), "test_count": len(test)})
        seed = args.seed if args.seed is not None else 0
    else:
        if len(dirs) != 1:
            raise UsageError("class splits take exactly one --data-dir (use --by-dataset for several)")
        files = _dataset_files(dirs[0])
        train, test = _load_pair(files)
        universe = list(range(train.class_count))
        seed = args.seed if args.seed is not None else 0
        classes_a = _parse_ints(args.classes_a)
        if classes_a is None:
            rng = np.random.default_rng(seed)
            classes_a = sorted(rng.choice(universe, size=len(universe) // 2, replace=False).tolist())
        classes_b = _parse_ints(args.classes_b)
        if classes_b is None:
            classes_b = [c for c in universe if c not in classes_a]
        overlap = sorted(set(classes_a) & set(classes_b))
        if overlap:
            raise UsageError(f"class lists overlap on {overlap}")
        bad = sorted((set(classes_a) | set(classes_b)) - set(universe))
        if bad:
            raise UsageError(f"classes {bad} not present in the dataset")
        if not classes_a or not classes_b:
            raise UsageError("each task needs at least one class")
        for tag, cls in (("a", classes_a), ("b", classes_b)):
            tasks.append({"name": tag, "dataset": names[0], **files, "classes": sorted(cls),
                          "train_count": int(np.isin(train.labels, cls).sum()),
                          "test_count": int(np.isin(test.labels, cls).sum())})
    manifest = {"version": 1, "seed": seed, "tasks": tasks}
    out = _out_dir(args)
    path = out / (args.manifest_name or "split.json")
    _write_json(path, manifest)
    print(f"wrote {path} ({len(tasks)} tasks)")
    return EXIT_OK


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    if "tasks" not in manifest or not manifest["tasks"]:
        raise UsageError(f"{path}: manifest lists no tasks")
    return manifest


def _pick_tasks(manifest, names):
    by_name = {t["name"]: t for t in manifest["tasks"]}
    if not names:
        return manifest["tasks"]
    missing = [n for n in names if n not in by_name]
    if missing:
        raise UsageError(f"tasks {missing} not in manifest (have {sorted(by_name)})")
    return [by_name[n] for n in names]


def task_data(task: dict, part: str) -> LabeledDataset:
    """Train or test portion of one manifest task, original labels kept."""
    ds = _load_cached(task[f"{part}_images"], task[f"{part}_labels"])
    mask = np.isin(ds.labels, task["classes"])
    return LabeledDataset(ds.images[mask], ds.labels[mask], max(10, ds.class_count), task["name"])


# --- commands ---------------------------------------------------------------

def _apply_arch_flags(cfg: ExperimentConfig, args):
    if getattr(args, "arch", None):
        cfg.arch = {"kind": args.arch}
    if getattr(args, "hidden", None):
        cfg.arch["hidden"] = _parse_hidden(args.hidden)
    if getattr(args, "channels", None):
        cfg.arch["channels"] = _parse_ints(args.channels)


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    _apply_arch_flags(cfg, args)
    for key in ("epochs", "lr", "batch_size", "momentum"):
        val = getattr(args, key)
        if val is not None:
            cfg.train[key] = val
    seed = args.seed if args.seed is not None else cfg.seeds.get("init", 0)
    arch = cfg.arch_descriptor()
    schedule = cfg.schedule()
    manifest = load_manifest(args.split)
    (task,) = _pick_tasks(manifest, [args.task])
    train = task_data(task, "train")
    test = task_data(task, "test")
    out = _out_dir(args)
    history = []
    params = train_base(train, arch, schedule, seed=seed, history=history)
    name = args.name or f"model_{task['name']}"
    save_params(out / f"{name}.pfck", params)
    with open(out / f"{name}_log.csv", "w", newline="") as fh:
        fh.write("epoch,loss,train_acc\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['loss']:.6f},{h['train_acc']:.6f}\n")
    acc = evaluate_tasks(params, [test])[0]
    _write_json(out / f"{name}.json", {
        "task": task["name"], "test_accuracy": round(acc, 6), "arch": asdict(arch),
        "schedule": asdict(schedule), "seeds": {"init": seed, "shuffle": seed},
        "digest": params.digest(), "version": __version__})
    print(f"wrote {out / (name + '.pfck')}: task {task['name']} test accuracy {acc:.2f}%")
    return EXIT_OK


def _pool_for(tasks, fcfg: FusionConfig, fraction, seed):
    trains = [task_data(t, "train") for t in tasks]
    if fraction:
        # a fixed fraction of every task's training set, drawn independently
        parts = [draw_pool(ds, int(round(fraction * len(ds))), seed + k).images
                 for k, ds in enumerate(trains)]
        return np.concatenate(parts), None
    joint = concat(trains, "pool")
    pool = draw_pool(joint, min(fcfg.pool_size, len(joint)), seed)
    return pool.images, joint.labels[pool.indices]


def _fusion_setup(args):
    cfg = ExperimentConfig.load(args.config)
    overrides = {}
    for key in ("gamma", "epochs", "strategy", "mode", "tau", "t", "zeta", "pool_size"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "labeled", False):
        overrides["labeled"] = True
    cfg.fusion.update(overrides)
    return cfg


def _seeds(args, cfg):
    if getattr(args, "fusion_seeds", None):
        return _parse_ints(args.fusion_seeds)
    if args.seed is not None:
        return [args.seed]
    return [cfg.seeds.get("fusion", 0)]


def _learn_perms(theta_a, theta_b, tasks, fcfg, fraction, seed, pool_seed):
    images, labels = _pool_for(tasks, fcfg, fraction, pool_seed)
    fcfg = FusionConfig.from_dict({**fcfg.to_dict(), "seed": seed})
    return train_permutations(theta_a, theta_b, images, fcfg, pool_labels=labels)


def cmd_fuse(args) -> int:
    cfg = _fusion_setup(args)
    fcfg = cfg.fusion_config()
    method = FusionMethod(METHOD_ALIASES[args.method], fcfg.gamma, fcfg.mode)
    theta_a, theta_b = load_params(args.checkpoints[0]), load_params(args.checkpoints[1])
    if theta_a.arch != theta_b.arch:
        raise UsageError("checkpoints have different architectures")
    manifest = load_manifest(args.split)
    tasks = _pick_tasks(manifest, _split_names(args.tasks))
    tests = [task_data(t, "test") for t in tasks]
    pool_tasks = _pick_tasks(manifest, _split_names(args.pool_tasks)) if args.pool_tasks else tasks
    out = _out_dir(args)
    runs = []
    seeds = _seeds(args, cfg)
    for k, seed in enumerate(seeds):
        pool_seed = cfg.seeds.get("pool", seed)
        perms, log = None, []
        if method.kind == "rebasin":
            perms = PermutationSet.from_hard(weight_match(theta_a, theta_b, seed=seed))
        elif method.kind == "autofusion":
            perms, log = _learn_perms(theta_a, theta_b, pool_tasks, fcfg, cfg.pool_fraction, seed, pool_seed)
        fused = fuse(theta_a, theta_b, method, perms)
        joint, per, _ = evaluate_tasks(fused, tests)
        complexity = [perm_complexity(p) for p in perms.hard()] if perms is not None else []
        runs.append(RunResult(joint, per, seed, complexity))
        suffix = "" if k == 0 else f"_seed{seed}"
        save_params(out / f"fused{suffix}.pfck", fused)
        if perms is not None:
            save_perms(out / f"perms{suffix}.pfck", perms.hard())
            if perms.logits is not None:
                np.savez(out / f"logits{suffix}.npz", *perms.logits)
        if log:
            write_training_log(out / f"train_log{suffix}.csv", log)
        print(f"seed {seed}: joint {joint:.2f}%  tasks " + " ".join(f"{v:.2f}" for v in per))
    meta = {"method": method.kind, "gamma": method.gamma, "mode": method.mode,
            "fusion_config": fcfg.to_dict(), "seeds": {"fusion": seeds, "pool": cfg.seeds.get("pool")},
            "checkpoints": [str(c) for c in args.checkpoints], "tasks": [t["name"] for t in tasks],
            "pool_fraction": cfg.pool_fraction, "version": __version__}
    report = build_report(method.kind, runs, meta)
    write_report_csv(out / "report.csv", [report])
    _write_json(out / "report.json", {**meta, "acc_joint": report.acc_joint,
                                      "acc_tasks": report.acc_tasks, "std_joint": report.std_joint,
                                      "permutation_complexity": report.permutation_complexity})
    print(format_table([report]), end="")
    return EXIT_OK


def _split_names(text):
    return [s for s in text.split(",") if s] if text else None


def cmd_eval(args) -> int:
    manifest = load_manifest(args.split)
    tasks = _pick_tasks(manifest, _split_names(args.tasks))
    reports = []
    for ckpt in args.checkpoints:
        params = load_params(ckpt)
        joint, per, _ = evaluate_tasks(params, [task_data(t, "test") for t in tasks])
        reports.append(build_report(Path(ckpt).stem, [RunResult(joint, per, args.seed)]))
    if args.out:
        out = _out_dir(args)
        write_report_csv(out / "eval.csv", reports)
    print("tasks: " + ", ".join(t["name"] for t in tasks))
    print(format_table(reports), end="")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _fusion_setup(args)
    fcfg = cfg.fusion_config()
    kind = METHOD_ALIASES[args.method]
    theta_a, theta_b = load_params(args.checkpoints[0]), load_params(args.checkpoints[1])
    manifest = load_manifest(args.split)
    tasks = _pick_tasks(manifest, _split_names(args.tasks))
    tests = [task_data(t, "test") for t in tasks]
    seed = _seeds(args, cfg)[0]
    perms = None
    if kind != "interpolate":
        if args.logits:
            with np.load(args.logits) as z:
                logits = [z[f"arr_{i}"] for i in range(len(z.files))]
            perms = PermutationSet(logits, tau=fcfg.tau, t=fcfg.t, mode=fcfg.mode)
        elif args.perms:
            perms = PermutationSet.from_hard(load_perms(args.perms))
        elif kind == "rebasin":
            perms = PermutationSet.from_hard(weight_match(theta_a, theta_b, seed=seed))
        else:
            perms, _ = _learn_perms(theta_a, theta_b, tasks, fcfg, cfg.pool_fraction, seed,
                                    cfg.seeds.get("pool", seed))
    mode = fcfg.mode if perms is not None and perms.logits is not None else "hard"
    rows = sweep_interpolation(theta_a, theta_b, FusionMethod(kind, 0.5, mode), args.grid, tests, perms)
    out = _out_dir(args)
    write_sweep_csv(out / f"sweep_{kind}.csv", rows)
    best = max(rows, key=lambda r: r.acc_joint)
    print(f"wrote {out / f'sweep_{kind}.csv'}: {len(rows)} points, best joint {best.acc_joint:.2f}% "
          f"at gamma {best.gamma:.3f}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--seed", type=int, help="seed for this command's randomness")
    p.add_argument("--out", default=".", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="autofusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a task manifest")
    _common(p)
    p.add_argument("--data-dir", action="append", required=True,
                   help="directory with IDX train/t10k files (repeatable with --by-dataset)")
    p.add_argument("--name", action="append", help="dataset name (one per --data-dir)")
    p.add_argument("--classes-a", help="comma-separated classes of task a (default: random half)")
    p.add_argument("--classes-b", help="classes of task b (default: the rest)")
    p.add_argument("--by-dataset", action="store_true", help="one task per dataset, all classes")
    p.add_argument("--manifest-name", help="file name of the manifest (default split.json)")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a base model on one task")
    _common(p)
    p.add_argument("--split", required=True, help="task manifest")
    p.add_argument("--task", required=True, help="task name in the manifest")
    p.add_argument("--arch", choices=("mlp", "cnn"))
    p.add_argument("--hidden", help="dense hidden widths, e.g. 512x6 or 256,128")
    p.add_argument("--channels", help="conv channels, e.g. 16,32 (cnn only)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--name", help="output file stem (default model_<task>)")
    p.set_defaults(func=cmd_train)

    def fusion_flags(p):
        p.add_argument("checkpoints", nargs=2, help="model A and model B checkpoints")
        p.add_argument("--split", required=True, help="task manifest")
        p.add_argument("--tasks", help="comma-separated evaluation tasks (default: all)")
        p.add_argument("--method", choices=sorted(METHOD_ALIASES), default="autofusion")
        p.add_argument("--gamma", type=float)
        p.add_argument("--mode", choices=("soft", "hard"))
        p.add_argument("--epochs", type=int, help="permutation-training epochs")
        p.add_argument("--strategy", choices=("weighted", "rounded", "normalized"))
        p.add_argument("--tau", type=float)
        p.add_argument("--t", type=int)
        p.add_argument("--zeta", type=float)
        p.add_argument("--pool-size", type=int)
        p.add_argument("--labeled", action="store_true", help="use true pool labels")
        p.add_argument("--fusion-seeds", help="comma-separated seeds for repeated fusions")

    p = sub.add_parser("fuse", help="fuse two checkpoints")
    _common(p)
    fusion_flags(p)
    p.add_argument("--pool-tasks", help="tasks whose training data feed the sample pool")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="evaluate checkpoints on manifest tasks")
    p.add_argument("checkpoints", nargs="+")
    p.add_argument("--split", required=True)
    p.add_argument("--tasks")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy along a gamma grid")
    _common(p)
    fusion_flags(p)
    p.add_argument("--grid", type=int, default=50)
    p.add_argument("--perms", help="hard permutation file from fuse")
    p.add_argument("--logits", help="soft permutation logits (.npz) from fuse")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FusionDivergedError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CheckpointError, IdxFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, DataError, DimensionError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
