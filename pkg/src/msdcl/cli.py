"""Command-line entry point.

Subcommands: gen-data, train, eval, grad-check, rfbe-check, ablate.
Exit codes: 0 success, 2 config/validation error, 3 training failure,
4 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .data import GenConfig, generate_dataset, read_dataset, train_test_split, write_dataset
from .errors import ConfigError, FormatError, MsdclError
from .evaluate import evaluate_checkpoint
from .gradcheck import format_reports, run_suite
from .losses import LossConfig
from .rfbe import equivalence_report
from .trainer import TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING_FAILED = 3
EXIT_IO = 4


# ---------------------------------------------------------------------------
# run-config file: JSON with gen / train / loss / eval sections


@dataclasses.dataclass
class RunConfig:
    seed: int
    gen: GenConfig
    train: TrainConfig
    eval: dict


_EVAL_FIELDS = {"ks", "probe_fraction"}


def _section_fields(cls, skip=()):
    return {f.name for f in dataclasses.fields(cls) if f.name not in skip}


def _check_keys(section: dict, allowed: set[str], path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key '{path}.{key}' in run config")


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"run config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("run config must be a JSON object")
    allowed_top = {"seed", "gen", "train", "loss", "eval"}
    _check_keys(raw, allowed_top, "$")
    if "seed" not in raw:
        raise ConfigError("run config must set 'seed' (the only field without a default)")
    seed = raw["seed"]
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"'seed' must be a non-negative integer, got {seed!r}")

    gen_raw = dict(raw.get("gen", {}))
    _check_keys(gen_raw, _section_fields(GenConfig, skip=("seed",)), "gen")
    gen = GenConfig(seed=seed, **gen_raw)

    loss_raw = dict(raw.get("loss", {}))
    _check_keys(loss_raw, _section_fields(LossConfig), "loss")
    loss = LossConfig(**loss_raw)

    train_raw = dict(raw.get("train", {}))
    _check_keys(train_raw, _section_fields(TrainConfig, skip=("seed", "loss")), "train")
    if "hidden_dims" in train_raw:
        train_raw["hidden_dims"] = tuple(train_raw["hidden_dims"])
    train_cfg = TrainConfig(seed=seed, loss=loss, **train_raw)

    eval_raw = dict(raw.get("eval", {}))
    _check_keys(eval_raw, _EVAL_FIELDS, "eval")
    eval_opts = {"ks": eval_raw.get("ks", [1, 5, 10]), "probe_fraction": eval_raw.get("probe_fraction", 0.1)}
    return RunConfig(seed=seed, gen=gen, train=train_cfg, eval=eval_opts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = load_run_config(args.config)
    ds = generate_dataset(cfg.gen)
    write_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = cfg.train
    if args.mode is not None and args.mode != train_cfg.loss.mode:
        loss = dataclasses.replace(train_cfg.loss, mode=args.mode)
        train_cfg = dataclasses.replace(train_cfg, loss=loss)
    result = train(train_cfg, args.data, args.out, resume=args.resume)
    if result.status == "training_failed":
        print(json.dumps(result.failure, indent=2))
        return EXIT_TRAINING_FAILED
    print(f"trained {result.epochs_run} epochs ({result.global_step} steps); "
          f"checkpoint at {result.checkpoint_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.checkpoint, args.data, seed=args.seed)
    Path(args.out).write_text(report.to_json() + "\n")
    print(report.format_table())
    return EXIT_OK


def cmd_grad_check(args) -> int:
    reports = run_suite(seed=args.seed, instances=args.instances, sabotage=args.sabotage)
    print(format_reports(reports))
    return EXIT_OK if all(r.passed for r in reports) else 1


def cmd_rfbe_check(args) -> int:
    b_list = [int(b) for b in args.b_list.split(",")]
    rows = equivalence_report(args.n, b_list, seed=args.seed)
    for row in rows:
        print(json.dumps(row, separators=(",", ":")))
    return EXIT_OK if all(r["passed"] for r in rows) else 1


# Reduced desk-scale budget; the large-batch cell uses RFBE (sub-batch 16).
# The EMA coefficient is scaled so its horizon stays a small fraction of
# the short run, mirroring the reference configuration's ratio.
DEFAULT_GRID = {
    "modes": ["msd", "onehot", "end2end"],
    "batches": [{"primary": 16, "sub": 16}, {"primary": 512, "sub": 16}],
    "ratios": [[0.0, 1.0], [0.3, 0.7], [0.5, 0.5], [0.7, 0.3], [1.0, 0.0]],
    "epochs": 20,
    "seeds": [0],
    "queue_capacity": 1024,
    "base_lr": 1e-3,
    "momentum": 0.98,
}


def _grid_cells(grid: dict) -> list[dict]:
    cells = []
    for mode in grid["modes"]:
        for batch in grid["batches"]:
            ratios = grid["ratios"] if mode == "msd" else [None]
            for ratio in ratios:
                for seed in grid["seeds"]:
                    cells.append(
                        {
                            "mode": mode,
                            "primary": batch["primary"],
                            "sub": batch["sub"],
                            "ratio": ratio,
                            "seed": seed,
                            "epochs": grid["epochs"],
                            "queue_capacity": grid["queue_capacity"],
                            "base_lr": grid["base_lr"],
                            "momentum": grid["momentum"],
                        }
                    )
    return cells


def _cell_key(cell: dict) -> str:
    ratio = "default" if cell["ratio"] is None else f"a{cell['ratio'][0]}_b{cell['ratio'][1]}"
    return f"{cell['mode']}_bs{cell['primary']}_{ratio}_seed{cell['seed']}"


def _run_ablate_cell(task: tuple[dict, str, str]) -> dict:
    cell, data_path, out_root = task
    key = _cell_key(cell)
    out_dir = Path(out_root) / key
    loss_kwargs = {"mode": cell["mode"]}
    if cell["ratio"] is not None:
        loss_kwargs.update(alpha=cell["ratio"][0], beta=cell["ratio"][1])
    try:
        cfg = TrainConfig(
            seed=cell["seed"],
            epochs=cell["epochs"],
            primary_batch=cell["primary"],
            sub_batch=cell["sub"],
            queue_capacity=max(cell["queue_capacity"], cell["primary"]),
            base_lr=cell["base_lr"],
            momentum=cell["momentum"],
            loss=LossConfig(**loss_kwargs),
        )
        result = train(cfg, data_path, out_dir)
    except MsdclError as exc:
        return {"key": key, **cell, "status": f"error: {exc}", "r1": None, "r5": None,
                "r10": None, "zs_acc": None, "zs_auc": None, "probe_auc": None}
    row = {"key": key, **cell, "status": result.status}
    if result.status == "ok":
        report = evaluate_checkpoint(result.checkpoint_path, data_path, seed=cell["seed"])
        row.update(
            r1=report.recall_at.get(1),
            r5=report.recall_at.get(5),
            r10=report.recall_at.get(10),
            zs_acc=report.zero_shot_accuracy,
            zs_auc=report.zero_shot_macro_auc,
            probe_auc=report.probe_auc,
        )
    else:
        row.update(r1=None, r5=None, r10=None, zs_acc=None, zs_auc=None, probe_auc=None)
    return row


_TABLE_COLS = ("key", "status", "r1", "r5", "r10", "zs_acc", "zs_auc", "probe_auc")


def _format_ablate_table(rows: list[dict]) -> str:
    def fmt(v):
        if v is None:
            return "-"
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r.get(c)) for c in _TABLE_COLS] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(_TABLE_COLS)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(_TABLE_COLS, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    if args.grid is not None:
        with open(args.grid) as fh:
            grid = {**DEFAULT_GRID, **json.load(fh)}
        unknown = set(grid) - set(DEFAULT_GRID)
        if unknown:
            raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    else:
        grid = DEFAULT_GRID
    cells = _grid_cells(grid)
    # Skip cells whose primary batch exceeds the training split.
    ds = read_dataset(args.data)
    n_train = len(train_test_split(ds)[0])
    tasks = []
    skipped = []
    for cell in cells:
        if cell["primary"] > n_train:
            skipped.append({"key": _cell_key(cell), **cell, "status": "skipped: batch exceeds split",
                            "r1": None, "r5": None, "r10": None, "zs_acc": None,
                            "zs_auc": None, "probe_auc": None})
        else:
            tasks.append((cell, str(args.data), str(args.out)))

    if args.max_workers > 1:
        with ProcessPoolExecutor(max_workers=args.max_workers) as pool:
            rows = list(pool.map(_run_ablate_cell, tasks))
    else:
        rows = [_run_ablate_cell(t) for t in tasks]
    rows.extend(skipped)
    rows.sort(key=lambda r: r["key"])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = _format_ablate_table(rows)
    (out / "table.txt").write_text(table + "\n")
    with open(out / "table.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_TABLE_COLS, extrasaction="ignore")
        writer.writeheader()
        for r in rows:
            writer.writerow({c: ("" if r.get(c) is None else r.get(c)) for c in _TABLE_COLS})
    print(table)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=["msd", "onehot", "end2end"], default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("rfbe-check", help="gradient-equivalence report for RFBE")
    p.add_argument("--N", dest="n", type=int, default=64)
    p.add_argument("--b-list", default="1,2,4,8,16,32,64")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_rfbe_check)

    p = sub.add_parser("ablate", help="train and evaluate a grid of configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None)
    p.add_argument("--max-workers", type=int, default=1)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
