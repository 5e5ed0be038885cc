"""Experiment orchestration: run grid cells, write round logs, summarize.

Each cell (method, |S|, seed) runs independently and deterministically,
so cells can fan out over worker threads without changing any output
byte. Summaries are always recomputed from the per-round CSVs on disk,
which keeps them auditable with nothing but a CSV reader.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import Cell, ExperimentPlan, model_config, round_config
from .data import Dataset
from .errors import ConfigurationError
from .federation import (
    RoundMetrics,
    clients_from_partition,
    init_rng,
    partition_clients,
    run_training,
)
from .metrics import top1_accuracy
from .model import ModelParams, init_model, save_checkpoint

ROUND_COLUMNS = [
    "round",
    "method",
    "s_size_target",
    "seed",
    "clients",
    "mean_loss",
    "mean_s_size",
    "params_down",
    "params_up",
    "bytes_down",
    "bytes_up",
    "eval_top1",
]


def cell_dir_name(cell: Cell) -> str:
    return f"{cell.method}_s{cell.s_size}_seed{cell.seed}"


def _format_float(x: Optional[float]) -> str:
    return "" if x is None else repr(float(x))


def write_round_csv(path, cell: Cell, history: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ROUND_COLUMNS)
        for rm in history:
            writer.writerow(
                [
                    rm.round_index,
                    rm.method,
                    cell.s_size,
                    cell.seed,
                    "|".join(str(c) for c in rm.client_ids),
                    repr(rm.mean_loss),
                    repr(rm.mean_s_size),
                    rm.params_down,
                    rm.params_up,
                    rm.bytes_down,
                    rm.bytes_up,
                    _format_float(rm.eval_top1),
                ]
            )


def write_round_jsonl(path, cell: Cell, history: Sequence[RoundMetrics]) -> None:
    with open(path, "w") as fh:
        for rm in history:
            record = {
                "round": rm.round_index,
                "method": rm.method,
                "s_size_target": cell.s_size,
                "seed": cell.seed,
                "clients": list(rm.client_ids),
                "mean_loss": rm.mean_loss,
                "mean_s_size": rm.mean_s_size,
                "params_down": rm.params_down,
                "params_up": rm.params_up,
                "bytes_down": rm.bytes_down,
                "bytes_up": rm.bytes_up,
                "eval_top1": rm.eval_top1,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_cell(
    cfg: Dict[str, Dict],
    cell: Cell,
    train: Dataset,
    test: Dataset,
    out_dir,
    rounds: Optional[int] = None,
) -> Path:
    """Run one grid cell end to end and write its artifacts.

    The cell seed drives model init, the data partition, client
    selection, negative sampling, and shuffling, so a rerun of the same
    cell reproduces every output byte.
    """
    out = Path(out_dir) / cell_dir_name(cell)
    out.mkdir(parents=True, exist_ok=True)
    t = cfg["training"]
    p = cfg["partition"]
    rounds = int(t["rounds"]) if rounds is None else int(rounds)

    mc = model_config(cfg, input_dim=train.input_dim, n_classes=train.n_classes)
    model = init_model(mc, init_rng(cell.seed))
    rc = round_config(cfg, method=cell.method, s_size=cell.s_size, seed=cell.seed)
    partition = partition_clients(
        train,
        num_clients=int(p["num_clients"]),
        classes_per_client=int(p["classes_per_client"]),
        examples_per_client=int(p["examples_per_client"]),
        seed=cell.seed,
        grouping=str(p["grouping"]),
    )
    clients = clients_from_partition(partition)

    def eval_fn(m: ModelParams) -> float:
        return top1_accuracy(m, test, head=rc.head, scale=rc.scale)

    checkpoint_every = int(t["checkpoint_every"])

    def checkpoint_fn(m: ModelParams, r: int) -> None:
        save_checkpoint(out / "model.json", m, mc)

    final_state, history = run_training(
        model,
        clients,
        rc,
        rounds=rounds,
        eval_fn=eval_fn,
        eval_every=int(t["eval_every"]),
        checkpoint_fn=checkpoint_fn,
        checkpoint_every=checkpoint_every,
    )
    write_round_csv(out / "rounds.csv", cell, history)
    write_round_jsonl(out / "rounds.jsonl", cell, history)
    return out


def _env_workers(env: Optional[Dict[str, str]] = None) -> int:
    import os

    env = os.environ if env is None else env
    raw = env.get("FEDSS_WORKERS", "1")
    try:
        workers = int(raw)
    except ValueError:
        raise ConfigurationError(f"FEDSS_WORKERS must be an integer, got {raw!r}")
    if workers < 1:
        raise ConfigurationError("FEDSS_WORKERS must be >= 1")
    return workers


def run_experiment(
    cfg: Dict[str, Dict],
    plan: ExperimentPlan,
    train: Dataset,
    test: Dataset,
    workers: Optional[int] = None,
) -> Path:
    """Execute every cell of the plan and summarize from the CSVs."""
    if workers is None:
        workers = _env_workers()

    def one(cell: Cell) -> Path:
        return run_cell(cfg, cell, train, test, plan.out_dir)

    if workers > 1 and len(plan.cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(one, plan.cells))
    else:
        for cell in plan.cells:
            one(cell)
    write_cells_csv(plan.out_dir, plan.cells)
    write_summary_csv(plan.out_dir, plan.cells)
    return plan.out_dir


def read_final_row(out_dir, cell: Cell) -> Dict[str, str]:
    path = Path(out_dir) / cell_dir_name(cell) / "rounds.csv"
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigurationError(f"no round rows in {path}")
    return rows[-1]


def write_cells_csv(out_dir, cells: Sequence[Cell]) -> None:
    """One row per cell, re-read from that cell's round log."""
    out = Path(out_dir)
    with open(out / "cells.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["method", "s_size", "seed", "rounds", "final_top1", "final_loss"]
        )
        for cell in sorted(cells, key=lambda c: (c.method, c.s_size, c.seed)):
            last = read_final_row(out, cell)
            writer.writerow(
                [
                    cell.method,
                    cell.s_size,
                    cell.seed,
                    int(last["round"]) + 1,
                    last["eval_top1"],
                    last["mean_loss"],
                ]
            )


def summarize(out_dir, cells: Sequence[Cell]) -> List[Dict]:
    """Group final accuracy by (method, s_size): mean and sample std."""
    groups: Dict = {}
    for cell in cells:
        last = read_final_row(out_dir, cell)
        if last["eval_top1"] == "":
            raise ConfigurationError(
                f"cell {cell_dir_name(cell)} has no final evaluation"
            )
        groups.setdefault((cell.method, cell.s_size), []).append(
            float(last["eval_top1"])
        )
    rows = []
    for (method, s_size), vals in sorted(groups.items()):
        arr = np.array(vals)
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        rows.append(
            {
                "method": method,
                "s_size": s_size,
                "n_seeds": int(arr.size),
                "top1_mean": float(arr.mean()),
                "top1_std": std,
            }
        )
    return rows


def write_summary_csv(out_dir, cells: Sequence[Cell]) -> None:
    rows = summarize(out_dir, cells)
    with open(Path(out_dir) / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "s_size", "n_seeds", "top1_mean", "top1_std"])
        for r in rows:
            writer.writerow(
                [
                    r["method"],
                    r["s_size"],
                    r["n_seeds"],
                    repr(r["top1_mean"]),
                    repr(r["top1_std"]),
                ]
            )


def run_positive_ablation(
    cfg: Dict[str, Dict],
    out_dir,
    seeds: Sequence[int],
    train: Dataset,
    test: Dataset,
    workers: Optional[int] = None,
) -> Dict:
    """Sampled-softmax training with positives against the matched-count
    control that replaces them with extra negatives."""
    s_size = int(cfg["training"]["target_s_size"])
    cells = [
        Cell(method=m, s_size=s_size, seed=int(sd))
        for m in ("fedss", "negonly_matched")
        for sd in seeds
    ]
    plan = ExperimentPlan(cells=cells, out_dir=Path(out_dir))
    run_experiment(cfg, plan, train, test, workers=workers)
    rows = summarize(plan.out_dir, cells)
    by_method = {r["method"]: r for r in rows}
    gap = (
        by_method["fedss"]["top1_mean"]
        - by_method["negonly_matched"]["top1_mean"]
    )
    result = {
        "s_size": s_size,
        "seeds": [int(s) for s in seeds],
        "fedss_top1_mean": by_method["fedss"]["top1_mean"],
        "fedss_top1_std": by_method["fedss"]["top1_std"],
        "matched_top1_mean": by_method["negonly_matched"]["top1_mean"],
        "matched_top1_std": by_method["negonly_matched"]["top1_std"],
        "gap": gap,
    }
    (Path(out_dir) / "ablation.json").write_text(
        json.dumps(result, indent=2, sort_keys=True)
    )
    return result
