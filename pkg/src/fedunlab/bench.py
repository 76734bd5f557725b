"""Experiment runner, metrics, and reports.

A single JSON config describes dataset, loss, schedule, budgets, and
deletion requests. Runs write three files per repeat: metrics.csv
(deterministic per-round training metrics; byte-identical across runs
with the same config and seed), timings.csv (wall-clock measurements,
kept separate precisely because they are not deterministic), and
outcomes.csv (one line per deletion request)."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import wilcoxon

from .data import (
    FULL_HISTORY,
    FederatedDataset,
    HyperParams,
    UnlearnRequest,
    generate_synthetic,
    import_dataset,
)
from .engine import run_fats
from .errors import InvalidArgumentError
from .losses import (
    LossModel,
    check_lr_condition,
    estimate_grad_bound,
    estimate_smoothness,
    full_local_grad,
    global_grad,
    global_loss,
    gradient_diversity,
    make_loss,
    stability_curvature_ratio,
    suggest_learning_rate,
)
from .store import HistoryStore
from .streams import DOMAIN_TRIAL, substream
from .unlearn import UnlearnOutcome, process_stream

METRICS_FIELDS = [
    "run",
    "round",
    "iteration",
    "grad_norm_sq",
    "avg_grad_norm_sq",
    "loss",
    "diversity",
    "lr_condition_margin",
    "rho_sample_realized",
    "rho_client_realized",
    "curvature_ratio",
]

OUTCOME_FIELDS = [
    "run",
    "index",
    "kind",
    "client",
    "uid",
    "issue_step",
    "action",
    "from_iteration",
    "retrained_iterations",
    "probes",
    "rho_sample_realized",
    "rho_client_realized",
    "wall_time_s",
]


@dataclass(frozen=True)
class MetricsRow:
    """One training round's diagnostics for one run."""

    run: int
    round: int
    iteration: int
    grad_norm_sq: float
    avg_grad_norm_sq: float
    loss: float
    diversity: float
    lr_condition_margin: float
    rho_sample_realized: float
    rho_client_realized: float
    curvature_ratio: float


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    dataset_clients: int
    dataset_samples: int
    dataset_dim: int
    dataset_classes: int
    dataset_beta: float
    dataset_seed: int
    dataset_path: str | None
    loss: str
    total_steps: int
    local_steps: int
    rho_sample: float
    rho_client: float
    lr: float | None  # None means derive from estimates
    storage_mode: str
    requests: list[UnlearnRequest] = field(default_factory=list)
    random_sample_requests: int = 0
    request_seed: int = 0
    repeats: int = 1
    seed_base: int = 0
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        def need(section: dict, key: str, path: str):
            if key not in section:
                raise InvalidArgumentError(f"config field {path} is required")
            return section[key]

        if not isinstance(raw, dict):
            raise InvalidArgumentError("config root must be an object")
        dataset = raw.get("dataset", {})
        hyper = raw.get("hyper", {})
        if not isinstance(dataset, dict):
            raise InvalidArgumentError("config field dataset must be an object")
        if not isinstance(hyper, dict):
            raise InvalidArgumentError("config field hyper must be an object")
        path = dataset.get("path")
        if path is None:
            clients = int(need(dataset, "num_clients", "dataset.num_clients"))
            samples = int(need(dataset, "samples_per_client", "dataset.samples_per_client"))
            dim = int(dataset.get("dim", 1))
            classes = int(dataset.get("classes", 2))
            beta = float(dataset.get("beta", 0.5))
            dseed = int(dataset.get("seed", 0))
        else:
            clients = samples = dim = classes = 0
            beta, dseed = 0.5, 0
        lr_raw = hyper.get("lr", "auto")
        if lr_raw == "auto":
            lr = None
        else:
            lr = float(lr_raw)
            if lr <= 0:
                raise InvalidArgumentError("config field hyper.lr must be positive")
        requests = []
        raw_requests = raw.get("requests", [])
        random_requests = 0
        request_seed = 0
        if isinstance(raw_requests, dict):
            random_requests = int(raw_requests.get("random_samples", 0))
            request_seed = int(raw_requests.get("seed", 0))
        else:
            for index, entry in enumerate(raw_requests):
                where = f"requests[{index}]"
                kind = need(entry, "kind", f"{where}.kind")
                uid = entry.get("uid")
                requests.append(
                    UnlearnRequest(
                        kind=kind,
                        target_client=int(need(entry, "client", f"{where}.client")),
                        target_uid=None if uid is None else int(uid),
                        issue_step=int(
                            entry.get("issue_step", need(hyper, "total_steps", "hyper.total_steps"))
                        ),
                    )
                )
        return cls(
            dataset_clients=clients,
            dataset_samples=samples,
            dataset_dim=dim,
            dataset_classes=classes,
            dataset_beta=beta,
            dataset_seed=dseed,
            dataset_path=path,
            loss=str(raw.get("loss", "quadratic")),
            total_steps=int(need(hyper, "total_steps", "hyper.total_steps")),
            local_steps=int(need(hyper, "local_steps", "hyper.local_steps")),
            rho_sample=float(need(hyper, "rho_sample", "hyper.rho_sample")),
            rho_client=float(need(hyper, "rho_client", "hyper.rho_client")),
            lr=lr,
            storage_mode=str(hyper.get("storage_mode", FULL_HISTORY)),
            requests=requests,
            random_sample_requests=random_requests,
            request_seed=request_seed,
            repeats=int(raw.get("repeats", 1)),
            seed_base=int(raw.get("seed_base", 0)),
            output_dir=str(raw.get("output_dir", "out")),
        )

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))


def load_config_dataset(config: ExperimentConfig) -> FederatedDataset:
    if config.dataset_path is not None:
        with open(config.dataset_path, "r", encoding="utf-8") as handle:
            return import_dataset(handle.read())
    return generate_synthetic(
        num_clients=config.dataset_clients,
        samples_per_client=config.dataset_samples,
        dim=config.dataset_dim,
        classes=config.dataset_classes,
        beta=config.dataset_beta,
        seed=config.dataset_seed,
    )


def resolve_learning_rate(
    config: ExperimentConfig, dataset: FederatedDataset, loss: LossModel
) -> tuple[float, float, float]:
    """Return (lr, curvature_ratio, smoothness). An explicit lr is passed
    through with the ratio still estimated for reporting; 'auto' applies
    the budget-balanced rule and then halves until the step-size condition
    holds (the loss gap uses zero as the optimum stand-in, which is a
    lower bound for both shipped losses)."""
    theta0 = np.zeros(loss.dim)
    smoothness = estimate_smoothness(loss, dataset, seed=config.seed_base)
    sizes = HyperParams.from_budgets(
        rho_sample=config.rho_sample,
        rho_client=config.rho_client,
        num_clients=dataset.num_clients,
        samples_per_client=max(c.size for c in dataset.clients),
        total_steps=config.total_steps,
        local_steps=config.local_steps,
        lr=1.0,
        seed=0,
        storage_mode=FULL_HISTORY,
    )
    grad_bound = estimate_grad_bound(
        loss, dataset, batch_size=sizes.batch_size, seed=config.seed_base
    )
    loss_gap = max(global_loss(loss, theta0, dataset), 1e-9)
    ratio = stability_curvature_ratio(
        grad_bound=grad_bound,
        smoothness=smoothness,
        loss_gap=loss_gap,
        rho_sample=config.rho_sample,
        num_clients=dataset.num_clients,
        samples_per_client=max(c.size for c in dataset.clients),
    )
    if config.lr is not None:
        return config.lr, ratio, smoothness
    lr = suggest_learning_rate(
        smoothness=smoothness, curvature_ratio=ratio, total_steps=config.total_steps
    )
    diversity_guess = 2.0
    for _ in range(60):
        ok, _ = check_lr_condition(lr, smoothness, diversity_guess, config.local_steps)
        if ok:
            break
        lr /= 2.0
    return lr, ratio, smoothness


def build_hyper(
    config: ExperimentConfig, dataset: FederatedDataset, lr: float, seed: int
) -> HyperParams:
    return HyperParams.from_budgets(
        rho_sample=config.rho_sample,
        rho_client=config.rho_client,
        num_clients=dataset.num_clients,
        samples_per_client=max(c.size for c in dataset.clients),
        total_steps=config.total_steps,
        local_steps=config.local_steps,
        lr=lr,
        seed=seed,
        storage_mode=config.storage_mode,
    )


def draw_random_sample_requests(
    dataset: FederatedDataset, count: int, seed: int, issue_step: int
) -> list[UnlearnRequest]:
    """Draw distinct sample targets, at most one per client per pass so
    streams stay feasible for small clients."""
    rng = substream(seed, DOMAIN_TRIAL, 999)
    requests: list[UnlearnRequest] = []
    taken: set[int] = set()
    client_ids = list(dataset.client_ids)
    while len(requests) < count:
        cid = int(client_ids[rng.integers(0, len(client_ids))])
        client = dataset.client(cid)
        candidates = [u for u in client.uids if u not in taken]
        if not candidates:
            continue
        uid = int(candidates[int(rng.integers(0, len(candidates)))])
        taken.add(uid)
        requests.append(
            UnlearnRequest(kind="sample", target_client=cid, target_uid=uid, issue_step=issue_step)
        )
    return requests


@dataclass
class RunResult:
    run: int
    hyper: HyperParams
    metrics: list[MetricsRow]
    outcomes: list[UnlearnOutcome]
    train_wall_s: float
    final_model: np.ndarray
    run_dir: str | None = None


def run_single(
    config: ExperimentConfig,
    dataset: FederatedDataset,
    loss: LossModel,
    lr: float,
    curvature_ratio: float,
    smoothness: float,
    run_index: int,
) -> RunResult:
    hyper = build_hyper(config, dataset, lr, seed=config.seed_base + run_index)
    store = HistoryStore(hyper.storage_mode, hyper.local_steps)
    metrics: list[MetricsRow] = []
    running_total = 0.0

    def round_hook(round_index: int, iteration: int, theta: np.ndarray) -> None:
        nonlocal running_total
        grad = global_grad(loss, theta, dataset)
        norm_sq = float(grad @ grad)
        running_total += norm_sq
        local_grads = [full_local_grad(loss, theta, c) for c in dataset.clients]
        try:
            diversity = gradient_diversity(local_grads)
        except Exception:
            diversity = float("nan")
        _, margin = check_lr_condition(
            hyper.lr,
            smoothness,
            diversity if math.isfinite(diversity) else 1.0,
            hyper.local_steps,
        )
        metrics.append(
            MetricsRow(
                run=run_index,
                round=round_index,
                iteration=iteration,
                grad_norm_sq=norm_sq,
                avg_grad_norm_sq=running_total / round_index,
                loss=global_loss(loss, theta, dataset),
                diversity=diversity,
                lr_condition_margin=margin,
                rho_sample_realized=hyper.rho_sample_realized,
                rho_client_realized=hyper.rho_client_realized,
                curvature_ratio=curvature_ratio,
            )
        )

    start = time.perf_counter()
    final = run_fats(1, hyper, dataset, store, loss, round_hook=round_hook)
    train_wall = time.perf_counter() - start

    requests = list(config.requests)
    if config.random_sample_requests:
        requests += draw_random_sample_requests(
            dataset,
            config.random_sample_requests,
            config.request_seed + run_index,
            issue_step=hyper.total_steps,
        )
    outcomes: list[UnlearnOutcome] = []
    if requests:
        outcomes, _ = process_stream(requests, store, dataset, hyper, loss)
        latest = store.latest_global_model()
        if latest is not None:
            final = latest
    return RunResult(
        run=run_index,
        hyper=hyper,
        metrics=metrics,
        outcomes=outcomes,
        train_wall_s=train_wall,
        final_model=final,
    )


def write_run_files(result: RunResult, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "metrics.csv"), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_FIELDS)
        for row in result.metrics:
            writer.writerow([
                row.run, row.round, row.iteration,
                repr(row.grad_norm_sq), repr(row.avg_grad_norm_sq), repr(row.loss),
                repr(row.diversity), repr(row.lr_condition_margin),
                repr(row.rho_sample_realized), repr(row.rho_client_realized),
                repr(row.curvature_ratio),
            ])
    with open(os.path.join(run_dir, "outcomes.csv"), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(OUTCOME_FIELDS)
        for index, outcome in enumerate(result.outcomes):
            req = outcome.request
            writer.writerow([
                result.run, index, req.kind, req.target_client,
                "-" if req.target_uid is None else req.target_uid,
                req.issue_step, outcome.action,
                "-" if outcome.from_iteration is None else outcome.from_iteration,
                outcome.retrained_iterations, outcome.probes,
                repr(outcome.rho_sample_realized), repr(outcome.rho_client_realized),
                f"{outcome.wall_time_s:.6f}",
            ])
    with open(os.path.join(run_dir, "timings.csv"), "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["run", "train_wall_s", "unlearn_wall_s_total"])
        writer.writerow([
            result.run,
            f"{result.train_wall_s:.6f}",
            f"{sum(o.wall_time_s for o in result.outcomes):.6f}",
        ])


def run_experiment(config: ExperimentConfig, write_files: bool = True) -> list[RunResult]:
    dataset = load_config_dataset(config)
    loss = make_loss(config.loss, dataset.clients[0].points[0].features.size)
    lr, ratio, smoothness = resolve_learning_rate(config, dataset, loss)
    results = []
    for run_index in range(config.repeats):
        result = run_single(config, dataset, loss, lr, ratio, smoothness, run_index)
        if write_files:
            run_dir = os.path.join(config.output_dir, f"run_{run_index}")
            write_run_files(result, run_dir)
            result.run_dir = run_dir
        results.append(result)
    return results


def convergence_summary(metrics: list[MetricsRow], *, plateau_fraction: float = 0.25) -> dict:
    """Summarize one configuration's runs: the running-average gradient
    norm trend and a plateau estimate over the last rounds."""
    if not metrics:
        raise InvalidArgumentError("no metrics rows")
    by_run: dict[int, list[MetricsRow]] = {}
    for row in metrics:
        by_run.setdefault(row.run, []).append(row)
    plateaus = []
    finals = []
    for run_rows in by_run.values():
        run_rows.sort(key=lambda r: r.round)
        tail = max(1, int(len(run_rows) * plateau_fraction))
        plateaus.append(float(np.mean([r.grad_norm_sq for r in run_rows[-tail:]])))
        finals.append(run_rows[-1].avg_grad_norm_sq)
    return {
        "runs": len(by_run),
        "rounds": max(r.round for r in metrics),
        "plateau_grad_norm_sq": plateaus,
        "final_avg_grad_norm_sq": finals,
        "mean_plateau": float(np.mean(plateaus)),
        "mean_final_avg": float(np.mean(finals)),
    }


def plateau_improvement_test(
    plateaus_small: list[float], plateaus_large: list[float]
) -> tuple[float, bool]:
    """Paired one-sided Wilcoxon: does the larger stability budget give a
    strictly lower plateau? Returns (pvalue, significant at 0.05)."""
    if len(plateaus_small) != len(plateaus_large):
        raise InvalidArgumentError("paired test needs equal run counts")
    _, pvalue = wilcoxon(plateaus_small, plateaus_large, alternative="greater")
    return float(pvalue), pvalue < 0.05


def divergence_risk(
    *, local_steps: int, total_steps: int, curvature_ratio: float, diversity: float
) -> bool:
    """Flag configurations whose local-step fraction exceeds the safe
    threshold sqrt(ratio / diversity) / 2."""
    if diversity <= 0:
        return True
    return (local_steps / total_steps) >= 0.5 * math.sqrt(curvature_ratio / diversity)


def unlearning_efficiency_report(outcomes: list[UnlearnOutcome], total_steps: int) -> dict:
    """Aggregate deletion servicing cost against the full-retrain
    baseline of total_steps iterations per request."""
    if not outcomes:
        raise InvalidArgumentError("no outcomes")
    serviced = [o for o in outcomes if o.action != "stale"]
    retrained = [o.retrained_iterations for o in serviced]
    recomputes = sum(1 for o in serviced if o.retrained_iterations > 0)
    total_retrained = sum(retrained)
    baseline = total_steps * len(serviced)
    return {
        "requests": len(outcomes),
        "serviced": len(serviced),
        "stale": len(outcomes) - len(serviced),
        "noop": sum(1 for o in serviced if o.action == "noop"),
        "recompute_rate": recomputes / len(serviced) if serviced else 0.0,
        "mean_retrained_iterations": total_retrained / len(serviced) if serviced else 0.0,
        "max_retrained_iterations": max(retrained) if retrained else 0,
        "mean_rho_sample_realized": float(
            np.mean([o.rho_sample_realized for o in serviced])
        ) if serviced else 0.0,
        "speedup_vs_full_retrain": (
            baseline / total_retrained if total_retrained > 0 else math.inf
        ),
        "mean_wall_time_s": float(np.mean([o.wall_time_s for o in serviced]))
        if serviced
        else 0.0,
    }
