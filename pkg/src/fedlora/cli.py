"""Command-line entry point.

Subcommands:
  run                      execute an experiment config, one run per seed
  size-report              parameter counts, message bytes and total cost
  partition                build and persist a Dirichlet client partition
  quantize-roundtrip-check self-check of the quantization codec
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import data as D
from . import federation as F
from . import models as M
from . import quant as Q
from . import wire
from .config import DATA_ROOT_ENV, ExperimentConfig, load_config, write_resolved
from .errors import ConfigError, FormatError

METRICS_FIELDS = (
    "round", "seed", "accuracy", "loss",
    "uplink_bytes", "downlink_bytes", "cumulative_tcc",
)


def _build_datasets(cfg: ExperimentConfig) -> tuple[D.Dataset, D.Dataset]:
    if cfg.dataset_kind == "synthetic":
        train = D.synthetic_dataset(cfg.classes, cfg.per_class, cfg.image_size,
                                    noise=cfg.noise, seed=0, task_seed=cfg.task_seed)
        test = D.synthetic_dataset(cfg.classes, cfg.test_per_class, cfg.image_size,
                                   noise=cfg.noise, seed=1, task_seed=cfg.task_seed)
        return train, test
    root = cfg.resolved_cifar_dir()
    if not root or not Path(root).is_dir():
        raise FormatError(
            f"cifar10 dataset directory not found: '{root or '(unset)'}' "
            f"(set [dataset] cifar_dir or ${DATA_ROOT_ENV})"
        )
    return D.load_cifar10(root, "train"), D.load_cifar10(root, "test")


def _model_builder(cfg: ExperimentConfig):
    if cfg.arch == "tiny":
        return lambda seed: M.build_tiny(cfg.num_classes, cfg.channels,
                                         cfg.image_size, seed=seed)
    builder = M.BUILDERS[cfg.arch]
    return lambda seed: builder(num_classes=cfg.num_classes, seed=seed)


def _format_float(x: float) -> str:
    return f"{x:.8f}"


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    if args.parallel_clients:
        cfg.parallel_clients = args.parallel_clients
    train, test = _build_datasets(cfg)
    build = _model_builder(cfg)

    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out_dir / "config.resolved.ini")

    rows = []
    finals: dict[int, float] = {}
    totals: dict[int, int] = {}
    for seed in cfg.seeds:
        partition = D.lda_partition(train.labels, cfg.num_clients,
                                    cfg.partition_alpha, seed=seed)
        fed_cfg = cfg.federation_config(seed)
        reports = F.run_experiment(fed_cfg, build, train, test, partition)
        cumulative = 0
        for r in reports:
            cumulative += r.uplink_bytes + r.downlink_bytes
            rows.append({
                "round": r.round_index,
                "seed": seed,
                "accuracy": _format_float(r.test_accuracy),
                "loss": _format_float(r.train_loss),
                "uplink_bytes": r.uplink_bytes,
                "downlink_bytes": r.downlink_bytes,
                "cumulative_tcc": cumulative,
            })
        finals[seed] = reports[-1].test_accuracy if reports else 0.0
        totals[seed] = cumulative

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRICS_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    acc_values = [finals[s] for s in cfg.seeds]
    tcc_values = [totals[s] for s in cfg.seeds]
    summary = {
        "seeds": cfg.seeds,
        "final_accuracy_mean": statistics.fmean(acc_values),
        "final_accuracy_std": statistics.stdev(acc_values) if len(acc_values) > 1 else 0.0,
        "total_tcc_bytes_mean": statistics.fmean(tcc_values),
        "total_tcc_bytes_std": statistics.stdev(tcc_values) if len(tcc_values) > 1 else 0.0,
        "final_accuracy_per_seed": {str(s): finals[s] for s in cfg.seeds},
        "total_tcc_bytes_per_seed": {str(s): totals[s] for s in cfg.seeds},
    }
    (out_dir / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    print(f"wrote {out_dir / 'metrics.csv'} and {out_dir / 'summary.json'}")
    return 0


def cmd_size_report(args) -> int:
    bits = None if args.bits in (None, "none", "fp32") else int(args.bits)
    rank = None if args.rank in (None, 0) else args.rank
    report = wire.message_size_report(args.model, rank, bits, rounds=args.rounds)
    row = report.as_row()
    width = max(len(k) for k in row)
    for key, value in row.items():
        print(f"{key:<{width}}  {value}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(row))
            writer.writeheader()
            writer.writerow(row)
        print(f"wrote {args.out}")
    return 0


def cmd_partition(args) -> int:
    if args.dataset == "synthetic":
        ds = D.synthetic_dataset(args.classes, args.per_class, seed=0,
                                 task_seed=args.task_seed)
    else:
        root = args.cifar_dir or os.environ.get(DATA_ROOT_ENV, "")
        if not root or not Path(root).is_dir():
            raise FormatError(
                f"cifar10 dataset directory not found: '{root or '(unset)'}'"
            )
        ds = D.load_cifar10(root, "train")
    part = D.lda_partition(ds.labels, args.clients, args.alpha, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    part.save(out_dir / "partition.json")
    hist = part.class_histogram(ds.labels, ds.num_classes)
    with open(out_dir / "class_histogram.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client"] + [f"class_{c}" for c in range(ds.num_classes)])
        for cid in range(hist.shape[0]):
            writer.writerow([cid] + hist[cid].tolist())
    print(f"wrote {out_dir / 'partition.json'} and {out_dir / 'class_histogram.csv'}")
    return 0


def cmd_quantize_roundtrip_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = 0
    for bits in Q.SUPPORTED_BITS:
        ok = True
        for trial in range(20):
            shape = tuple(rng.integers(1, 7, size=rng.integers(1, 5)))
            x = (rng.normal(size=shape) * rng.uniform(0.1, 10)).astype(np.float32)
            axis = Q.channel_axis_for(shape)
            qp = Q.compute_affine_params(x, axis, bits)
            q = Q.quantize(x, qp)
            xh = Q.dequantize(q).data
            bshape = [shape[i] if i == axis else 1 for i in range(len(shape))]
            bound = qp.scale.reshape(bshape) / 2 + 1e-6
            if not (np.abs(x - xh) <= bound).all():
                ok = False
            if Q.quantize(xh, qp).packed != q.packed:
                ok = False
        print(f"bits={bits}: {'PASS' if ok else 'FAIL'}")
        failures += 0 if ok else 1
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora",
        description="Federated training with low-rank adapter exchange",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None,
                       help="override the config's seed list with one seed")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--parallel-clients", type=int, default=None)
    p_run.set_defaults(func=cmd_run)

    p_size = sub.add_parser("size-report", help="parameter and message-size table")
    p_size.add_argument("--model", required=True, choices=sorted(M.BUILDERS))
    p_size.add_argument("--rank", type=int, default=None,
                        help="adapter rank; omit for the full model")
    p_size.add_argument("--bits", default=None, choices=["none", "2", "4", "8"])
    p_size.add_argument("--rounds", type=int, default=100)
    p_size.add_argument("--out", default=None, help="also write a CSV row")
    p_size.set_defaults(func=cmd_size_report)

    p_part = sub.add_parser("partition", help="persist a Dirichlet client partition")
    p_part.add_argument("--dataset", default="synthetic", choices=["synthetic", "cifar10"])
    p_part.add_argument("--cifar-dir", default=None)
    p_part.add_argument("--classes", type=int, default=3)
    p_part.add_argument("--per-class", type=int, default=200)
    p_part.add_argument("--task-seed", type=int, default=0)
    p_part.add_argument("--clients", type=int, required=True)
    p_part.add_argument("--alpha", type=float, required=True)
    p_part.add_argument("--seed", type=int, default=0)
    p_part.add_argument("--out", required=True)
    p_part.set_defaults(func=cmd_partition)

    p_q = sub.add_parser("quantize-roundtrip-check", help="codec self-check")
    p_q.add_argument("--seed", type=int, default=0)
    p_q.set_defaults(func=cmd_quantize_roundtrip_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
