"""Deletion handling: O(1) verification plus partial re-computation.

Sample deletion verifies involvement with one index probe. If the
sample never appeared in a recorded batch the request is a no-op and
the current model is already indistinguishable from one trained without
the sample. Otherwise re-computation starts at the earliest involved
iteration. The re-run reuses the recorded client multisets, every other
client's recorded batches, and the target client's batches that did not
contain the deleted point; only batches that contained it are redrawn,
from the reduced dataset under a fresh stream epoch. This component-wise
reuse is exactly the coupling that makes the re-computed run's sampling
history distributionally identical to retraining from scratch on the
reduced dataset. Redrawing the whole suffix instead would bias the
retained prefix (it would be conditioned on non-involvement), so the
reuse is a correctness requirement, not an optimization.

Client deletion verifies with one probe against the round index. The
re-run starts at the first round that selected the client; from there
every multiset is redrawn over the remaining clients (conditioning a
with-replacement draw on avoiding one client is exactly the uniform
draw over the others, so the retained prefix needs no surgery) and all
batches in re-run rounds are fresh.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import (
    FULL_HISTORY,
    FederatedDataset,
    HyperParams,
    UnlearnRequest,
    remove_client,
    remove_sample,
)
from .engine import ReplayPlan, run_fats
from .errors import (
    EmptyFederationError,
    InvalidArgumentError,
    ModeMismatchError,
    NotFoundError,
    StaleRequestError,
)
from .losses import LossModel
from .store import HistoryStore

NOOP = "noop"
PARTIAL_RETRAIN = "partial_retrain"
FULL_RETRAIN = "full_retrain"
STALE = "stale"


@dataclass(frozen=True)
class UnlearnOutcome:
    """What servicing one deletion request did."""

    request: UnlearnRequest
    action: str
    from_iteration: int | None
    retrained_iterations: int
    wall_time_s: float
    final_model: np.ndarray | None
    rho_sample_realized: float
    rho_client_realized: float
    probes: int
    beyond_issue_step: bool = False  # first use was after issue_step

    def log_line(self) -> str:
        req = self.request
        uid = "-" if req.target_uid is None else str(req.target_uid)
        start = "-" if self.from_iteration is None else str(self.from_iteration)
        return (
            f"{req.kind},{req.target_client},{uid},{req.issue_step},"
            f"{self.action},{start},{self.retrained_iterations},"
            f"{self.wall_time_s:.6f}"
        )


def _realized_budgets(
    hyper: HyperParams, dataset: FederatedDataset, target_client: int | None
) -> tuple[float, float]:
    """Budgets realized against the current federation. The sample
    budget uses the target client's current size when one is given,
    otherwise the smallest client (the conservative choice)."""
    clients = dataset.num_clients
    if target_client is not None and dataset.has_client(target_client):
        size = dataset.client(target_client).size
    else:
        size = dataset.min_client_size()
    rho_client = hyper.clients_per_round * hyper.total_steps / (
        hyper.local_steps * clients
    )
    if size == 0:
        rho_sample = float("inf")
    else:
        rho_sample = (
            hyper.batch_size * hyper.clients_per_round * hyper.total_steps
        ) / (clients * size)
    return rho_sample, rho_client


def build_sample_replay_plan(
    store: HistoryStore, from_iteration: int, client_id: int, uid: int
) -> ReplayPlan:
    """Pin every recorded decision at or after from_iteration except the
    target client's batches that contained the deleted uid."""
    plan = ReplayPlan()
    for r in range(store.round_of(from_iteration), store.round_of(store.next_iteration - 1) + 1):
        if store.round_start_iteration(r) >= from_iteration:
            multiset = store.round_multiset(r)
            if multiset is not None:
                plan.round_multisets[r] = multiset
    for (t, cid), record in store.iter_records():
        if t < from_iteration:
            continue
        if cid == client_id and uid in record.batch_uids:
            continue
        plan.batches[(t, cid)] = record.batch_uids
    return plan


def unlearn_sample(
    request: UnlearnRequest,
    store: HistoryStore,
    dataset: FederatedDataset,
    hyper: HyperParams,
    loss: LossModel,
) -> tuple[UnlearnOutcome, FederatedDataset]:
    """Delete one sample exactly. Returns the outcome and the reduced
    dataset (unchanged dataset on a no-op: deletion from the data store
    itself is still performed by the caller's data pipeline; here the
    point is removed from the returned federation either way)."""
    if request.kind != "sample":
        raise InvalidArgumentError("unlearn_sample needs a sample request")
    if store.mode != FULL_HISTORY:
        raise ModeMismatchError(
            "partial re-computation needs a full history store; use "
            "full_retrain_unlearn with compact stores"
        )
    client_id = request.target_client
    uid = request.target_uid
    assert uid is not None
    client = dataset.client(client_id)
    if not client.has_uid(uid):
        raise NotFoundError(f"uid {uid} not in client {client_id}")
    start_time = time.perf_counter()
    probes_before = store.probes
    first_use = store.earliest_sample_use(uid)
    reduced = remove_sample(dataset, client_id, uid)
    rho_s, rho_c = _realized_budgets(hyper, dataset, client_id)
    if first_use is None:
        final = store.latest_global_model()
        return (
            UnlearnOutcome(
                request=request,
                action=NOOP,
                from_iteration=None,
                retrained_iterations=0,
                wall_time_s=time.perf_counter() - start_time,
                final_model=final,
                rho_sample_realized=rho_s,
                rho_client_realized=rho_c,
                probes=store.probes - probes_before,
            ),
            reduced,
        )
    plan = build_sample_replay_plan(store, first_use, client_id, uid)
    store.prune_after(first_use)
    final = run_fats(first_use, hyper, reduced, store, loss, replay=plan)
    return (
        UnlearnOutcome(
            request=request,
            action=PARTIAL_RETRAIN,
            from_iteration=first_use,
            retrained_iterations=hyper.total_steps - first_use + 1,
            wall_time_s=time.perf_counter() - start_time,
            final_model=final,
            rho_sample_realized=rho_s,
            rho_client_realized=rho_c,
            probes=store.probes - probes_before,
            beyond_issue_step=first_use > request.issue_step,
        ),
        reduced,
    )


def unlearn_client(
    request: UnlearnRequest,
    store: HistoryStore,
    dataset: FederatedDataset,
    hyper: HyperParams,
    loss: LossModel,
) -> tuple[UnlearnOutcome, FederatedDataset]:
    """Delete one client exactly; re-computation redraws client
    multisets over the remaining clients with the same per-round count."""
    if request.kind != "client":
        raise InvalidArgumentError("unlearn_client needs a client request")
    if store.mode != FULL_HISTORY:
        raise ModeMismatchError(
            "partial re-computation needs a full history store; use "
            "full_retrain_unlearn with compact stores"
        )
    client_id = request.target_client
    if not dataset.has_client(client_id):
        raise NotFoundError(f"client {client_id} not in federation")
    if dataset.num_clients == 1:
        raise EmptyFederationError("cannot unlearn the only client")
    start_time = time.perf_counter()
    probes_before = store.probes
    first_use = store.earliest_client_use(client_id)
    reduced = remove_client(dataset, client_id)
    rho_s, rho_c = _realized_budgets(hyper, reduced, None)
    if first_use is None:
        final = store.latest_global_model()
        return (
            UnlearnOutcome(
                request=request,
                action=NOOP,
                from_iteration=None,
                retrained_iterations=0,
                wall_time_s=time.perf_counter() - start_time,
                final_model=final,
                rho_sample_realized=rho_s,
                rho_client_realized=rho_c,
                probes=store.probes - probes_before,
            ),
            reduced,
        )
    store.prune_after(first_use)
    final = run_fats(first_use, hyper, reduced, store, loss)
    return (
        UnlearnOutcome(
            request=request,
            action=PARTIAL_RETRAIN,
            from_iteration=first_use,
            retrained_iterations=hyper.total_steps - first_use + 1,
            wall_time_s=time.perf_counter() - start_time,
            final_model=final,
            rho_sample_realized=rho_s,
            rho_client_realized=rho_c,
            probes=store.probes - probes_before,
            beyond_issue_step=store.round_of(first_use) > store.round_of(request.issue_step),
        ),
        reduced,
    )


def full_retrain_unlearn(
    request: UnlearnRequest,
    store: HistoryStore,
    dataset: FederatedDataset,
    hyper: HyperParams,
    loss: LossModel,
) -> tuple[UnlearnOutcome, FederatedDataset]:
    """Compact-store deletion: verify involvement with one flag probe
    and retrain from scratch when involved. Works with either store
    mode. Note that for sample deletions the keep-or-retrain rule is a
    coarser coupling than partial re-computation: the no-op branch keeps
    a history conditioned on non-involvement, so only the involvement
    verdict and the recompute budget match the partial path exactly."""
    client_id = request.target_client
    start_time = time.perf_counter()
    probes_before = store.probes
    if request.kind == "sample":
        uid = request.target_uid
        assert uid is not None
        client = dataset.client(client_id)
        if not client.has_uid(uid):
            raise NotFoundError(f"uid {uid} not in client {client_id}")
        involved = store.sample_involved(client_id, uid)
        reduced = remove_sample(dataset, client_id, uid)
    else:
        if not dataset.has_client(client_id):
            raise NotFoundError(f"client {client_id} not in federation")
        if dataset.num_clients == 1:
            raise EmptyFederationError("cannot unlearn the only client")
        involved = store.client_involved(client_id)
        reduced = remove_client(dataset, client_id)
    rho_s, rho_c = _realized_budgets(hyper, reduced, None)
    if not involved:
        final = store.latest_global_model()
        return (
            UnlearnOutcome(
                request=request,
                action=NOOP,
                from_iteration=None,
                retrained_iterations=0,
                wall_time_s=time.perf_counter() - start_time,
                final_model=final,
                rho_sample_realized=rho_s,
                rho_client_realized=rho_c,
                probes=store.probes - probes_before,
            ),
            reduced,
        )
    theta0 = store.global_model(0)
    store.prune_after(1)
    final = run_fats(1, hyper, reduced, store, loss, theta0=theta0)
    return (
        UnlearnOutcome(
            request=request,
            action=FULL_RETRAIN,
            from_iteration=1,
            retrained_iterations=hyper.total_steps,
            wall_time_s=time.perf_counter() - start_time,
            final_model=final,
            rho_sample_realized=rho_s,
            rho_client_realized=rho_c,
            probes=store.probes - probes_before,
        ),
        reduced,
    )


def process_stream(
    requests: list[UnlearnRequest],
    store: HistoryStore,
    dataset: FederatedDataset,
    hyper: HyperParams,
    loss: LossModel,
) -> tuple[list[UnlearnOutcome], FederatedDataset]:
    """Service requests in order. A request whose target is already gone
    yields a stale outcome and the stream continues."""
    outcomes: list[UnlearnOutcome] = []
    for request in requests:
        start_time = time.perf_counter()
        try:
            if store.mode != FULL_HISTORY:
                outcome, dataset = full_retrain_unlearn(request, store, dataset, hyper, loss)
            elif request.kind == "sample":
                outcome, dataset = unlearn_sample(request, store, dataset, hyper, loss)
            else:
                outcome, dataset = unlearn_client(request, store, dataset, hyper, loss)
        except (NotFoundError, StaleRequestError):
            rho_s, rho_c = _realized_budgets(hyper, dataset, None)
            outcome = UnlearnOutcome(
                request=request,
                action=STALE,
                from_iteration=None,
                retrained_iterations=0,
                wall_time_s=time.perf_counter() - start_time,
                final_model=None,
                rho_sample_realized=rho_s,
                rho_client_realized=rho_c,
                probes=0,
            )
        outcomes.append(outcome)
    return outcomes, dataset


def parse_request_line(line: str) -> UnlearnRequest:
    """Parse 'kind,client_id,uid_or_dash,issue_step'."""
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 4:
        raise InvalidArgumentError(
            f"request line needs 4 comma-separated fields, got {line!r}"
        )
    kind, client_text, uid_text, step_text = parts
    uid = None if uid_text == "-" else int(uid_text)
    return UnlearnRequest(
        kind=kind,
        target_client=int(client_text),
        target_uid=uid,
        issue_step=int(step_text),
    )
