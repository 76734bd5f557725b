"""Federated averaging engine with per-decision random streams.

Training runs in rounds of local_steps iterations. At a round start the
server draws a multiset of clients_per_round clients uniformly with
replacement and broadcasts the current global model; every distinct
selected client then performs one mini-batch SGD step per iteration
(a client drawn twice runs once but carries weight two in the average).
At a round end the multiplicity-weighted mean of the local models
becomes the new global model.

Every sampling decision and every post-step local model is recorded in
the history store, which is what makes deletions verifiable in O(1) and
re-computation possible from any iteration. Re-execution of a suffix is
bit-identical as long as the store's epoch is unchanged, because every
draw is keyed by (seed, purpose, epoch, iteration context).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import FULL_HISTORY, FederatedDataset, HyperParams
from .errors import (
    CorruptedHistoryError,
    InfeasibleBatchError,
    InvalidArgumentError,
    ModeMismatchError,
)
from .losses import LossModel
from .store import HistoryStore
from .streams import DOMAIN_CLIENT_SAMPLING, DOMAIN_MINIBATCH, substream


@dataclass(frozen=True)
class ReplayPlan:
    """Pinned sampling decisions consulted during re-computation.

    Multisets are pinned per round, batches per (iteration, client).
    Any decision not pinned is drawn fresh from the current dataset with
    the store's current epoch in the stream key. Component-wise reuse is
    what keeps re-computed runs distributionally identical to
    retraining from scratch.
    """

    round_multisets: dict[int, tuple[int, ...]] = field(default_factory=dict)
    batches: dict[tuple[int, int], tuple[int, ...]] = field(default_factory=dict)

    def multiset(self, round_index: int) -> tuple[int, ...] | None:
        return self.round_multisets.get(round_index)

    def batch(self, iteration: int, client_id: int) -> tuple[int, ...] | None:
        return self.batches.get((iteration, client_id))


def sample_client_multiset(
    rng: np.random.Generator, client_ids: tuple[int, ...], count: int
) -> tuple[int, ...]:
    """Draw count clients uniformly with replacement; the result is the
    canonical (ascending) multiset."""
    if not client_ids:
        raise InvalidArgumentError("no clients to sample from")
    draws = rng.integers(0, len(client_ids), size=count)
    return tuple(sorted(client_ids[i] for i in draws))


def sample_minibatch(
    rng: np.random.Generator, uids: tuple[int, ...], batch_size: int
) -> tuple[int, ...]:
    """Draw batch_size uids uniformly without replacement, canonically
    sorted. Every subset of that size is equally likely."""
    if batch_size > len(uids):
        raise InfeasibleBatchError(
            f"batch size {batch_size} exceeds client size {len(uids)}"
        )
    rows = rng.choice(len(uids), size=batch_size, replace=False)
    return tuple(sorted(uids[i] for i in rows))


def local_step(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * grad


def aggregate(
    local_models: dict[int, np.ndarray], multiset: tuple[int, ...]
) -> np.ndarray:
    """Multiplicity-weighted mean over the sampled multiset, summed in
    ascending client order so the float result is reproducible."""
    acc = None
    for client_id in multiset:  # already sorted ascending
        model = local_models[client_id]
        acc = model.copy() if acc is None else acc + model
    return acc / len(multiset)


def virtual_average(
    local_models: dict[int, np.ndarray], multiset: tuple[int, ...]
) -> np.ndarray:
    """The would-be aggregate at an arbitrary iteration; coincides with
    the global model at round boundaries."""
    return aggregate(local_models, multiset)


IterationHook = Callable[[int, np.ndarray], None]
RoundHook = Callable[[int, int, np.ndarray], None]


def run_fats(
    start_iteration: int,
    hyper: HyperParams,
    dataset: FederatedDataset,
    store: HistoryStore,
    loss: LossModel,
    theta0: np.ndarray | None = None,
    replay: ReplayPlan | None = None,
    iteration_hook: IterationHook | None = None,
    round_hook: RoundHook | None = None,
) -> np.ndarray:
    """Execute iterations start_iteration..total_steps and return the
    final global model.

    Starting from 1 requires an initial model (zeros by default) and an
    empty or overwritable store. Starting mid-history resumes from the
    store: at a round boundary only the previous global model is needed;
    inside a round the recorded multiset and every selected client's
    local model from the previous iteration are loaded. Records at or
    after start_iteration are discarded and rewritten; the epoch is not
    advanced here, so re-running the same suffix is bit-identical.
    """
    total = hyper.total_steps
    steps = hyper.local_steps
    if not 1 <= start_iteration <= total:
        raise InvalidArgumentError(
            f"start_iteration {start_iteration} outside [1, {total}]"
        )
    if start_iteration > store.next_iteration:
        raise InvalidArgumentError(
            f"cannot start at {start_iteration}: store only covers history "
            f"up to {store.next_iteration - 1}"
        )
    if start_iteration > 1 and store.mode != FULL_HISTORY:
        raise ModeMismatchError("compact stores only support training from iteration 1")
    if store.local_steps != steps:
        raise InvalidArgumentError("store and hyper disagree on local_steps")

    seed = hyper.seed
    count = hyper.clients_per_round
    batch_size = hyper.batch_size
    lr = hyper.lr
    active = dataset.client_ids
    epoch = store.epoch

    first_round = store.round_of(start_iteration)
    mid_round = start_iteration != store.round_start_iteration(first_round)

    multiset: tuple[int, ...] | None = None
    locals_: dict[int, np.ndarray] = {}
    if mid_round:
        multiset = store.round_multiset(first_round)
        if multiset is None:
            raise CorruptedHistoryError(
                f"mid-round start at t={start_iteration} but round "
                f"{first_round} has no recorded multiset"
            )
        if replay is not None:
            pinned = replay.multiset(first_round)
            if pinned is not None and pinned != multiset:
                raise CorruptedHistoryError(
                    "replay plan disagrees with the stored round multiset"
                )
        for client_id in sorted(set(multiset)):
            record = store.iteration_record(start_iteration - 1, client_id)
            if record is None:
                raise CorruptedHistoryError(
                    f"no local model for client {client_id} at t={start_iteration - 1}"
                )
            locals_[client_id] = record.local_model.copy()
    else:
        if start_iteration == 1:
            if theta0 is None:
                theta0 = np.zeros(loss.dim)
            theta0 = np.asarray(theta0, dtype=np.float64)
            if theta0.shape != (loss.dim,):
                raise InvalidArgumentError("theta0 has the wrong dimension")
        else:
            theta0 = store.global_model(first_round - 1)
            if theta0 is None:
                raise CorruptedHistoryError(
                    f"no global model recorded for round {first_round - 1}"
                )

    store.discard_from(start_iteration)
    if start_iteration == 1:
        store.record_global(0, theta0)

    theta_global: np.ndarray | None = None
    for t in range(start_iteration, total + 1):
        round_index = store.round_of(t)
        if t == store.round_start_iteration(round_index):
            pinned = replay.multiset(round_index) if replay is not None else None
            if pinned is not None:
                multiset = pinned
            else:
                rng = substream(seed, DOMAIN_CLIENT_SAMPLING, epoch, round_index)
                multiset = sample_client_multiset(rng, active, count)
            store.record_round_start(round_index, multiset)
            broadcast = store.global_model(round_index - 1)
            if broadcast is None:
                raise CorruptedHistoryError(
                    f"no global model recorded for round {round_index - 1}"
                )
            locals_ = {cid: broadcast.copy() for cid in set(multiset)}
        assert multiset is not None
        for client_id in sorted(set(multiset)):
            pinned_batch = replay.batch(t, client_id) if replay is not None else None
            client = dataset.client(client_id)
            if pinned_batch is not None:
                batch = pinned_batch
            else:
                if batch_size > client.size:
                    raise InfeasibleBatchError(
                        f"client {client_id} holds {client.size} points; cannot "
                        f"draw a batch of {batch_size}"
                    )
                rng = substream(seed, DOMAIN_MINIBATCH, epoch, t, client_id)
                batch = sample_minibatch(rng, client.uids, batch_size)
            rows = client.rows_for(batch)
            grad = loss.mean_grad(
                locals_[client_id],
                client.features_matrix[rows],
                client.labels_vector[rows],
            )
            locals_[client_id] = local_step(locals_[client_id], grad, lr)
            store.record_iteration(t, client_id, batch, locals_[client_id])
        if iteration_hook is not None:
            iteration_hook(t, virtual_average(locals_, multiset))
        if t % steps == 0:
            theta_global = aggregate(locals_, multiset)
            store.record_global(round_index, theta_global)
            if round_hook is not None:
                round_hook(round_index, t, theta_global)
    assert theta_global is not None
    return theta_global
