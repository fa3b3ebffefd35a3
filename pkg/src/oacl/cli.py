"""Experiment CLI: run / compare / report subcommands.

All randomness derives from the config seed through named sub-seeds; a rerun
with the same config and seed writes a byte-identical summary.json. Wall
time goes to a separate timing file so the summary stays deterministic.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .backbone import build_and_pretrain, save_checkpoint
from .errors import ConfigError, NumericalError
from .metrics import avg_final_accuracy, budget_report, forgetting_per_task
from .orthogonality import stack_overlap_summary
from .tasks import gen_base, gen_task_stream, reorder
from .trainer import TrainConfig, run_sequence

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

COMPARE_TOKENS = ("oa_adapter", "o_adapter", "inc_adapter", "dynamic", "fixed")


@dataclass
class BackboneConfig:
    d_in: int = 32
    d: int = 64
    layers: int = 4
    classes: int = 8
    pretrain_per_class: int = 200
    pretrain_steps: int = 1200
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 32


@dataclass
class StreamConfig:
    tasks: int = 4
    n_train_per_class: int = 250
    n_val_per_class: int = 50
    n_test_per_class: int = 100
    shift: str = "rotation"
    order: list[int] | None = None


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/run"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    compare_variants: list[str] = field(default_factory=list)
    compare_seeds: list[int] = field(default_factory=list)


def _dataclass_from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return data


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if raw is None:
        raw = {}
    top_names = {"seed", "out_dir", "backbone", "stream", "train", "compare"}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    unknown = set(raw) - top_names
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")

    backbone = BackboneConfig(**_dataclass_from_dict(
        BackboneConfig, raw.get("backbone", {}), "backbone"))
    stream = StreamConfig(**_dataclass_from_dict(
        StreamConfig, raw.get("stream", {}), "stream"))
    train_kwargs = _dataclass_from_dict(TrainConfig, raw.get("train", {}), "train")
    compare = raw.get("compare", {})
    if compare and not isinstance(compare, dict):
        raise ConfigError("compare: expected a mapping")
    bad_compare = set(compare) - {"variants", "seeds"}
    if bad_compare:
        raise ConfigError(f"compare: unknown keys {sorted(bad_compare)}")

    cfg = ExperimentConfig(
        seed=int(raw.get("seed", 0)),
        out_dir=str(raw.get("out_dir", "runs/run")),
        backbone=backbone,
        stream=stream,
        train=TrainConfig(**{**train_kwargs, "seed": int(raw.get("seed", 0))}),
        compare_variants=list(compare.get("variants", [])),
        compare_seeds=[int(s) for s in compare.get("seeds", [])],
    )
    if cfg.stream.shift not in ("rotation", "rotation+relabel"):
        raise ConfigError(f"stream.shift: unknown value {cfg.stream.shift!r}")
    for v in cfg.compare_variants:
        if v not in COMPARE_TOKENS:
            raise ConfigError(f"compare.variants: {v!r} not in {COMPARE_TOKENS}")
    return cfg


def _config_snapshot(cfg: ExperimentConfig) -> dict:
    return {
        "seed": cfg.seed,
        "backbone": dataclasses.asdict(cfg.backbone),
        "stream": dataclasses.asdict(cfg.stream),
        "train": dataclasses.asdict(cfg.train),
    }


def execute_run(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """Pretrain, run the task sequence, and persist all artifacts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    bb = cfg.backbone
    base = gen_base(cfg.seed, bb.classes, bb.d_in, bb.pretrain_per_class)
    backbone = build_and_pretrain(
        cfg.seed, bb.d_in, bb.d, bb.layers, bb.classes, base,
        steps=bb.pretrain_steps, lr=bb.pretrain_lr,
        batch_size=bb.pretrain_batch_size)

    st = cfg.stream
    stream = gen_task_stream(
        cfg.seed, st.tasks, bb.classes, bb.d_in,
        n_train_per_class=st.n_train_per_class, shift=st.shift,
        n_val_per_class=st.n_val_per_class, n_test_per_class=st.n_test_per_class)
    if st.order:
        stream = reorder(stream, st.order)

    result = run_sequence(backbone, stream, cfg.train)
    wall = time.perf_counter() - started

    (out_dir / "config_snapshot.yaml").write_text(
        yaml.safe_dump(_config_snapshot(cfg), sort_keys=True))

    T = result.matrix.T
    with open(out_dir / "accuracy_matrix.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task"] + [f"after_task_{j}" for j in range(1, T + 1)])
        for i in range(T):
            w.writerow([i + 1] + [repr(float(v)) for v in result.matrix.a[i]])

    with open(out_dir / "curves.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "task_id", "accuracy"])
        for step, task_id, acc in result.curves:
            w.writerow([step, task_id, repr(float(acc))])

    with open(out_dir / "dims.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task", "layer", "r_eff"])
        for rep in result.reports:
            for layer, r in enumerate(rep.r_eff_per_layer):
                w.writerow([rep.task_id, layer, r])

    budget = budget_report(result.stack)
    overlap = stack_overlap_summary(result.stack)
    summary = {
        "avg_final_accuracy": avg_final_accuracy(result.matrix),
        "forgetting_per_task": forgetting_per_task(result.matrix).tolist(),
        "task_order": stream.order_id,
        "pretrain_accuracy": backbone.pretrain_accuracy,
        "budget": {
            "avg_final_budget": budget.avg_final_budget,
            "params_saved_fraction": budget.params_saved_fraction,
            "total_activated": budget.total_activated,
            "total_allocated": budget.total_allocated,
            "per_task_activated": {str(k): v for k, v in budget.per_task_activated.items()},
            "r_eff": {f"task{t}_layer{l}": v for (t, l), v in budget.r_eff.items()},
        },
        "overlap": overlap,
        "config": _config_snapshot(cfg),
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    (out_dir / "timing.txt").write_text(f"wall_time_sec={wall:.3f}\n")
    save_checkpoint(out_dir / "checkpoint.oacl.npz", backbone, result.stack)
    return summary


def _variant_config(cfg: ExperimentConfig, token: str, seed: int) -> ExperimentConfig:
    train = dataclasses.asdict(cfg.train)
    if token in ("dynamic", "fixed"):
        train["variant"] = "oa_adapter"
        train["threshold_mode"] = token
    else:
        train["variant"] = token
    train["seed"] = seed
    return dataclasses.replace(cfg, seed=seed, train=TrainConfig(**train))


def cmd_run(config_path, out_override=None, seed_override=None) -> int:
    cfg = load_config(config_path)
    if seed_override is not None:
        cfg = dataclasses.replace(
            cfg, seed=seed_override,
            train=dataclasses.replace(cfg.train, seed=seed_override))
    out_dir = Path(out_override) if out_override else Path(cfg.out_dir)
    execute_run(cfg, out_dir)
    return EXIT_OK


def cmd_compare(config_path, variants=None, seeds=None, out_override=None) -> int:
    cfg = load_config(config_path)
    variants = list(variants) if variants else cfg.compare_variants
    seeds = list(seeds) if seeds else (cfg.compare_seeds or [cfg.seed])
    if len(variants) < 2:
        raise ConfigError("compare needs at least two variants")
    for v in variants:
        if v not in COMPARE_TOKENS:
            raise ConfigError(f"unknown variant {v!r}")
    out_dir = Path(out_override) if out_override else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    failures = 0
    for token in variants:
        accs, budgets, saved = [], [], []
        for seed in seeds:
            cell_dir = out_dir / token / f"seed{seed}"
            try:
                summary = execute_run(_variant_config(cfg, token, seed), cell_dir)
            except NumericalError as e:
                print(f"[compare] {token} seed {seed} failed: {e}", file=sys.stderr)
                failures += 1
                continue
            accs.append(summary["avg_final_accuracy"])
            budgets.append(summary["budget"]["avg_final_budget"])
            saved.append(summary["budget"]["params_saved_fraction"])
        rows.append([
            token, len(accs),
            repr(float(np.mean(accs))) if accs else "",
            repr(float(np.std(accs))) if accs else "",
            repr(float(np.mean(budgets))) if budgets else "",
            repr(float(np.mean(saved))) if saved else "",
        ])

    with open(out_dir / "compare.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "n_seeds", "mean_avg_final_accuracy",
                    "std_avg_final_accuracy", "mean_avg_final_budget",
                    "mean_params_saved_fraction"])
        w.writerows(rows)
    return EXIT_OK if failures == 0 else EXIT_NUMERICAL


def _load_summary(run_dir: Path) -> dict:
    path = run_dir / "summary.json"
    if not path.is_file():
        raise ConfigError(f"missing artifact {path}")
    return json.loads(path.read_text())


def _format_summary(s: dict) -> str:
    lines = [
        f"avg_final_accuracy: {s['avg_final_accuracy']:.4f}",
        "forgetting_per_task: "
        + " ".join(f"{v:.4f}" for v in s["forgetting_per_task"]),
        f"avg_final_budget: {s['budget']['avg_final_budget']:.3f}",
        f"params_saved: {100 * s['budget']['params_saved_fraction']:.1f}%",
        f"mean_overlap: {s['overlap']['mean_overlap']:.4f}",
        f"task_order: {s['task_order']}",
    ]
    return "\n".join(lines)


def cmd_report(run_dir, other_dir=None) -> int:
    s = _load_summary(Path(run_dir))
    print(f"== {run_dir} ==")
    print(_format_summary(s))
    if other_dir is not None:
        o = _load_summary(Path(other_dir))
        print(f"\n== {other_dir} ==")
        print(_format_summary(o))
        print("\n== deltas (first - second) ==")
        print(f"avg_final_accuracy: {s['avg_final_accuracy'] - o['avg_final_accuracy']:+.4f}")
        print(f"avg_final_budget: "
              f"{s['budget']['avg_final_budget'] - o['budget']['avg_final_budget']:+.3f}")
        print(f"mean_overlap: "
              f"{s['overlap']['mean_overlap'] - o['overlap']['mean_overlap']:+.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oacl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute one experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--deterministic", action="store_true", default=True)

    p_cmp = sub.add_parser("compare", help="run a variant/seed grid")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--variants", nargs="*", default=None)
    p_cmp.add_argument("--seeds", nargs="*", type=int, default=None)

    p_rep = sub.add_parser("report", help="summarize a run directory")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("other_dir", nargs="?", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "compare":
            return cmd_compare(args.config, args.variants, args.seeds, args.out)
        if args.command == "report":
            return cmd_report(args.run_dir, args.other_dir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
