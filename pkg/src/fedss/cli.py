"""Command-line surface.

Subcommands: gen-data, train, eval, grad-noise, cost-report,
ablate-positives. Every subcommand accepts --config (JSON or TOML),
--seed, and --out; any contract or configuration violation exits
nonzero with the reason on stderr. FEDSS_WORKERS controls how many
experiment cells run in parallel (default 1).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import build_plan, load_config, load_datasets, model_config, synthetic_spec
from .data import generate_synthetic, write_dataset_dir
from .errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    IngestionError,
    ProtocolViolationError,
)
from .experiments import run_experiment, run_positive_ablation, summarize
from .federation import init_rng, stream
from .metrics import (
    RetrievalIndex,
    comm_cost_report,
    map_at_r,
    noise_curve,
    top1_accuracy,
    write_noise_csv,
)
from .model import init_model, load_checkpoint

_TAG_NOISE_BATCH = 107

_FAILURES = (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    IngestionError,
    ProtocolViolationError,
)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON or TOML config file")
    sub.add_argument("--seed", type=int, default=None, help="seed override")
    sub.add_argument("--out", default="out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedss",
        description="Federated sampled-softmax training and analysis harness.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="write a synthetic dataset to CSV")
    _add_common(p)

    p = subs.add_parser("train", help="run the configured experiment grid")
    _add_common(p)
    p.add_argument("--rounds", type=int, default=None, help="round-count override")

    p = subs.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model checkpoint path")
    p.add_argument(
        "--metric", choices=["accuracy", "map@r"], default=None, help="metric override"
    )

    p = subs.add_parser("grad-noise", help="sweep the gradient-noise curve over m")
    _add_common(p)

    p = subs.add_parser("cost-report", help="communication cost accounting")
    _add_common(p)

    p = subs.add_parser(
        "ablate-positives",
        help="compare training with positives vs matched extra negatives",
    )
    _add_common(p)
    return parser


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    spec = synthetic_spec(cfg, seed=args.seed)
    train, test = generate_synthetic(spec)
    out = _out_dir(args)
    write_dataset_dir(train, test, out, spec)
    print(f"wrote {len(train)} train / {len(test)} test examples to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.rounds is not None:
        cfg["training"]["rounds"] = int(args.rounds)
    train, test = load_datasets(cfg)
    plan = build_plan(cfg, args.out, seed=args.seed)
    run_experiment(cfg, plan, train, test)
    rows = summarize(plan.out_dir, plan.cells)
    print(f"{'method':<18} {'|S|':>5} {'seeds':>5} {'top1':>8} {'std':>8}")
    for r in rows:
        print(
            f"{r['method']:<18} {r['s_size']:>5} {r['n_seeds']:>5} "
            f"{r['top1_mean']:>8.4f} {r['top1_std']:>8.4f}"
        )
    print(f"artifacts in {plan.out_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _, test = load_datasets(cfg)
    model, mc = load_checkpoint(args.checkpoint)
    metric = args.metric if args.metric is not None else str(cfg["eval"]["metric"])
    head = mc.head
    scale = mc.scale
    if metric == "accuracy":
        value = top1_accuracy(model, test, head=head, scale=scale)
    elif metric == "map@r":
        index = RetrievalIndex.from_model(model, test)
        r = int(cfg["eval"]["map_r"])
        if r < 1:
            counts = np.bincount(test.y, minlength=test.n_classes)
            r = max(1, int(counts[counts > 0].min()) - 1)
        value = map_at_r(index, r)
        metric = f"map@{r}"
    else:
        raise ConfigurationError(f"unknown eval metric {metric!r}")
    out = _out_dir(args)
    payload = {"metric": metric, "value": value, "checkpoint": str(args.checkpoint)}
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    print(f"{metric}: {value:.6f}")
    return 0


def cmd_grad_noise(args) -> int:
    cfg = load_config(args.config)
    train, _ = load_datasets(cfg)
    noise_cfg = cfg["noise"]
    seed = int(cfg["training"]["seed"] if args.seed is None else args.seed)
    mc = model_config(cfg, input_dim=train.input_dim, n_classes=train.n_classes)
    model = init_model(mc, init_rng(seed))

    batch_size = min(int(noise_cfg["batch_size"]), len(train))
    picks = stream(seed, _TAG_NOISE_BATCH).choice(
        len(train), size=batch_size, replace=False
    )
    from .data import Dataset

    batch = Dataset(X=train.X[picks], y=train.y[picks], n_classes=train.n_classes)
    pool = train.n_classes - np.unique(batch.y).size
    ms = []
    for m in noise_cfg["ms"]:
        if isinstance(m, str):
            if m != "pool":
                raise ConfigurationError(f"noise.ms entries must be ints or 'pool', got {m!r}")
            ms.append(pool)
        else:
            ms.append(int(m))
    points = noise_curve(
        model,
        batch,
        ms,
        clients=int(noise_cfg["clients"]),
        replicates=int(noise_cfg["replicates"]),
        seed=seed,
        lr=float(noise_cfg["lr"]),
        head=mc.head,
        scale=mc.scale,
    )
    out = _out_dir(args)
    write_noise_csv(out / "noise.csv", points)
    for p in points:
        print(f"m={p.m:>5}  mean={p.noise:.3e}  std={p.std:.3e}  n={p.replicates}")
    print(f"curve written to {out / 'noise.csv'}")
    return 0


def cmd_cost_report(args) -> int:
    cfg = load_config(args.config)
    cost = cfg["cost"]
    d = cfg["data"]
    m = cfg["model"]
    phi_params = int(cost["phi_params"])
    if phi_params < 1:
        dims = [int(d["input_dim"])] + [int(h) for h in m["hidden_dims"]]
        dims.append(int(m["embedding_dim"]))
        phi_params = sum(
            dims[i] * dims[i + 1] + dims[i + 1] for i in range(len(dims) - 1)
        )
    s_size = int(cost["s_size"]) or int(cfg["training"]["target_s_size"])
    report = comm_cost_report(
        phi_params=phi_params,
        embedding_dim=int(m["embedding_dim"]),
        n_classes=int(d["n_classes"]),
        s_size=s_size,
        rounds=int(cost["rounds"]),
        clients_per_round=int(cost["clients_per_round"]),
        n_grid=[int(n) for n in cost["n_grid"]] or None,
        d_grid=[int(g) for g in cost["d_grid"]] or None,
    )
    out = _out_dir(args)
    (out / "cost_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    print(
        f"download per client per round: {report['download_params_per_client_round']}"
        f" params ({report['download_bytes_per_client_round']} bytes)"
    )
    print(f"classifier fraction of full model: {report['classifier_fraction']:.4f}")
    print(f"transmitted fraction of full model: {report['transmitted_fraction']:.4f}")
    print(f"report written to {out / 'cost_report.json'}")
    return 0


def cmd_ablate_positives(args) -> int:
    cfg = load_config(args.config)
    train, test = load_datasets(cfg)
    seeds = [int(s) for s in cfg["experiment"]["seeds"]]
    if not seeds:
        seeds = [int(cfg["training"]["seed"] if args.seed is None else args.seed)]
    out = _out_dir(args)
    result = run_positive_ablation(cfg, out, seeds, train, test)
    print(
        f"with positives: {result['fedss_top1_mean']:.4f}"
        f" +/- {result['fedss_top1_std']:.4f}"
    )
    print(
        f"matched extra negatives: {result['matched_top1_mean']:.4f}"
        f" +/- {result['matched_top1_std']:.4f}"
    )
    print(f"gap: {result['gap']:.4f}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "grad-noise": cmd_grad_noise,
    "cost-report": cmd_cost_report,
    "ablate-positives": cmd_ablate_positives,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _FAILURES as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
