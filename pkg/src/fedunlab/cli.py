"""Command line interface.

Subcommands:
  gen-data   write a synthetic federated dataset to a text file
  train      train from a dataset and write a checkpoint
  unlearn    service one deletion request against a checkpoint
  stream     service a file of deletion requests in order
  verify     exact distributional-equivalence check on a small setup
  bench      run an experiment config end to end
  report     summarize metrics/outcomes files from a bench run
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .bench import (
    ExperimentConfig,
    MetricsRow,
    convergence_summary,
    run_experiment,
    unlearning_efficiency_report,
)
from .data import (
    COMPACT,
    FULL_HISTORY,
    HyperParams,
    UnlearnRequest,
    export_dataset,
    generate_synthetic,
    import_dataset,
)
from .engine import run_fats
from .errors import FedUnlabError
from .losses import make_loss
from .stability import (
    enumerate_history_distribution,
    equivalence_test_exact,
    unlearned_history_distribution,
)
from .store import HistoryStore, load_checkpoint, save_checkpoint
from .unlearn import (
    UnlearnOutcome,
    full_retrain_unlearn,
    parse_request_line,
    process_stream,
    unlearn_client,
    unlearn_sample,
)


def _read_dataset(path: str):
    with open(path, "r", encoding="utf-8") as handle:
        return import_dataset(handle.read())


def _add_hyper_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--total-steps", type=int, required=True)
    parser.add_argument("--local-steps", type=int, required=True)
    parser.add_argument("--rho-sample", type=float, required=True)
    parser.add_argument("--rho-client", type=float, required=True)
    parser.add_argument("--lr", type=float, required=True)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--storage-mode", choices=[FULL_HISTORY, COMPACT], default=FULL_HISTORY
    )


def cmd_gen_data(args: argparse.Namespace) -> int:
    dataset = generate_synthetic(
        num_clients=args.num_clients,
        samples_per_client=args.samples_per_client,
        dim=args.dim,
        classes=args.classes,
        beta=args.beta,
        seed=args.seed,
    )
    text = export_dataset(dataset)
    with open(args.out, "w", encoding="utf-8") as handle:
        handle.write(text)
    print(f"wrote {dataset.num_clients} clients, {dataset.total_points} points to {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    dataset = _read_dataset(args.data)
    hyper = HyperParams.from_budgets(
        rho_sample=args.rho_sample,
        rho_client=args.rho_client,
        num_clients=dataset.num_clients,
        samples_per_client=max(c.size for c in dataset.clients),
        total_steps=args.total_steps,
        local_steps=args.local_steps,
        lr=args.lr,
        seed=args.seed,
        storage_mode=args.storage_mode,
    )
    loss = make_loss(args.loss, dataset.clients[0].points[0].features.size)
    store = HistoryStore(hyper.storage_mode, hyper.local_steps)
    final = run_fats(1, hyper, dataset, store, loss)
    save_checkpoint(store, hyper, dataset, args.out)
    print(
        f"trained {hyper.total_steps} iterations "
        f"(K={hyper.clients_per_round}, b={hyper.batch_size}, "
        f"rho_sample={hyper.rho_sample_realized:.6f}, "
        f"rho_client={hyper.rho_client_realized:.6f})"
    )
    print(f"final model norm {float(np.linalg.norm(final)):.6f}; checkpoint at {args.out}")
    return 0


def _print_outcome(outcome: UnlearnOutcome) -> None:
    req = outcome.request
    target = f"client {req.target_client}" + (
        "" if req.target_uid is None else f" uid {req.target_uid}"
    )
    print(
        f"{req.kind} deletion of {target}: {outcome.action}, "
        f"retrained {outcome.retrained_iterations} iterations, "
        f"probes {outcome.probes}, wall {outcome.wall_time_s:.4f}s"
    )


def cmd_unlearn(args: argparse.Namespace) -> int:
    dataset = _read_dataset(args.data)
    store, hyper = load_checkpoint(args.checkpoint, dataset)
    loss = make_loss(args.loss, dataset.clients[0].points[0].features.size)
    request = UnlearnRequest(
        kind=args.kind,
        target_client=args.client,
        target_uid=args.uid,
        issue_step=hyper.total_steps if args.issue_step is None else args.issue_step,
    )
    if args.full_retrain:
        outcome, reduced = full_retrain_unlearn(request, store, dataset, hyper, loss)
    elif request.kind == "sample":
        outcome, reduced = unlearn_sample(request, store, dataset, hyper, loss)
    else:
        outcome, reduced = unlearn_client(request, store, dataset, hyper, loss)
    _print_outcome(outcome)
    if args.out:
        save_checkpoint(store, hyper, reduced, args.out)
        print(f"updated checkpoint at {args.out}")
    if args.data_out:
        with open(args.data_out, "w", encoding="utf-8") as handle:
            handle.write(export_dataset(reduced))
        print(f"reduced dataset at {args.data_out}")
    return 0


def cmd_stream(args: argparse.Namespace) -> int:
    dataset = _read_dataset(args.data)
    store, hyper = load_checkpoint(args.checkpoint, dataset)
    loss = make_loss(args.loss, dataset.clients[0].points[0].features.size)
    requests = []
    with open(args.requests, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line and not line.startswith("#"):
                requests.append(parse_request_line(line))
    outcomes, dataset = process_stream(requests, store, dataset, hyper, loss)
    for outcome in outcomes:
        _print_outcome(outcome)
    if args.out:
        save_checkpoint(store, hyper, dataset, args.out)
        print(f"updated checkpoint at {args.out}")
    report = unlearning_efficiency_report(outcomes, hyper.total_steps)
    print(json.dumps(report, indent=2, default=str))
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    dataset = generate_synthetic(
        num_clients=args.num_clients,
        samples_per_client=args.samples_per_client,
        dim=1,
        classes=2,
        beta=0.5,
        seed=args.seed,
    )
    hyper = HyperParams.from_budgets(
        rho_sample=args.rho_sample,
        rho_client=args.rho_client,
        num_clients=dataset.num_clients,
        samples_per_client=args.samples_per_client,
        total_steps=args.total_steps,
        local_steps=args.local_steps,
        lr=0.1,
        seed=args.seed,
        storage_mode=FULL_HISTORY,
    )
    target_client = dataset.client_ids[0]
    target_uid = dataset.client(target_client).uids[0]
    request = UnlearnRequest(
        kind=args.kind,
        target_client=target_client,
        target_uid=target_uid if args.kind == "sample" else None,
        issue_step=hyper.total_steps,
    )
    unlearned = unlearned_history_distribution(hyper, dataset, request)
    if args.kind == "sample":
        from .data import remove_sample

        reduced = remove_sample(dataset, target_client, target_uid)
    else:
        from .data import remove_client

        reduced = remove_client(dataset, target_client)
    retrain = enumerate_history_distribution(hyper, reduced)
    report = equivalence_test_exact(unlearned, retrain)
    print(report.record())
    return 0 if report.passed else 1


def cmd_bench(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_file(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    results = run_experiment(config)
    for result in results:
        print(
            f"run {result.run}: {len(result.metrics)} rounds, "
            f"{len(result.outcomes)} requests, train {result.train_wall_s:.2f}s "
            f"-> {result.run_dir}"
        )
    all_metrics = [row for result in results for row in result.metrics]
    summary = convergence_summary(all_metrics)
    print(json.dumps(summary, indent=2))
    all_outcomes = [o for result in results for o in result.outcomes]
    if all_outcomes:
        print(json.dumps(
            unlearning_efficiency_report(all_outcomes, config.total_steps),
            indent=2, default=str,
        ))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    rows: list[MetricsRow] = []
    with open(args.metrics, "r", encoding="utf-8") as handle:
        for record in csv.DictReader(handle):
            rows.append(
                MetricsRow(
                    run=int(record["run"]),
                    round=int(record["round"]),
                    iteration=int(record["iteration"]),
                    grad_norm_sq=float(record["grad_norm_sq"]),
                    avg_grad_norm_sq=float(record["avg_grad_norm_sq"]),
                    loss=float(record["loss"]),
                    diversity=float(record["diversity"]),
                    lr_condition_margin=float(record["lr_condition_margin"]),
                    rho_sample_realized=float(record["rho_sample_realized"]),
                    rho_client_realized=float(record["rho_client_realized"]),
                    curvature_ratio=float(record["curvature_ratio"]),
                )
            )
    print(json.dumps(convergence_summary(rows), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedunlab",
        description="Deterministic federated training with exact sample and client deletion.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic federated dataset")
    p.add_argument("--num-clients", type=int, required=True)
    p.add_argument("--samples-per-client", type=int, required=True)
    p.add_argument("--dim", type=int, default=4)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--loss", choices=["quadratic", "logistic"], default="quadratic")
    _add_hyper_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("unlearn", help="service one deletion request")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--kind", choices=["sample", "client"], required=True)
    p.add_argument("--client", type=int, required=True)
    p.add_argument("--uid", type=int, default=None)
    p.add_argument("--issue-step", type=int, default=None)
    p.add_argument("--full-retrain", action="store_true",
                   help="retrain from scratch instead of resuming mid-history")
    p.add_argument("--out", default=None, help="write the updated checkpoint here")
    p.add_argument("--data-out", default=None, help="write the reduced dataset here")
    p.set_defaults(func=cmd_unlearn)

    p = sub.add_parser("stream", help="service a request file in order")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--loss", choices=["quadratic", "logistic"], default="quadratic")
    p.add_argument("--requests", required=True,
                   help="text file, one request per line: kind,client,uid|-,issue_step")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("verify", help="exact equivalence check on a small setup")
    p.add_argument("--kind", choices=["sample", "client"], default="sample")
    p.add_argument("--num-clients", type=int, default=2)
    p.add_argument("--samples-per-client", type=int, default=2)
    p.add_argument("--total-steps", type=int, default=2)
    p.add_argument("--local-steps", type=int, default=1)
    p.add_argument("--rho-sample", type=float, default=0.5)
    p.add_argument("--rho-client", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="summarize a metrics.csv")
    p.add_argument("--metrics", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FedUnlabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
