"""Deletion servicing: verification probes, partial re-computation,
prefix preservation, streams."""

import numpy as np
import pytest

from fedunlab.data import (
    COMPACT,
    FULL_HISTORY,
    HyperParams,
    UnlearnRequest,
    generate_synthetic,
    remove_sample,
)
from fedunlab.engine import run_fats
from fedunlab.errors import (
    EmptyFederationError,
    InvalidArgumentError,
    ModeMismatchError,
    NotFoundError,
)
from fedunlab.losses import make_loss
from fedunlab.store import HistoryStore
from fedunlab.unlearn import (
    FULL_RETRAIN,
    NOOP,
    PARTIAL_RETRAIN,
    STALE,
    full_retrain_unlearn,
    parse_request_line,
    process_stream,
    unlearn_client,
    unlearn_sample,
)


def _setup(seed=0, mode=FULL_HISTORY, num_clients=4, samples=5, total_steps=8,
           local_steps=2, batch_size=2, clients_per_round=2):
    dataset = generate_synthetic(
        num_clients=num_clients, samples_per_client=samples, dim=2,
        classes=2, beta=0.5, seed=6,
    )
    hyper = HyperParams(
        num_clients=num_clients, samples_per_client=samples,
        total_steps=total_steps, local_steps=local_steps,
        clients_per_round=clients_per_round, batch_size=batch_size,
        lr=0.05, rho_sample=0.5, rho_client=0.5, seed=seed, storage_mode=mode,
    )
    loss = make_loss("quadratic", 2)
    store = HistoryStore(mode, local_steps)
    run_fats(1, hyper, dataset, store, loss)
    return dataset, hyper, loss, store


def _find_used_uid(store, dataset):
    for client in dataset.clients:
        for uid in client.uids:
            if store._earliest_use.get(uid) is not None:
                return client.client_id, uid
    raise AssertionError("no uid was used")


def _find_unused_uid(store, dataset):
    for client in dataset.clients:
        for uid in client.uids:
            if store._earliest_use.get(uid) is None:
                return client.client_id, uid
    return None


# ----------------------------------------------------------------------
# sample deletion


def test_unlearn_sample_noop_when_never_used():
    for seed in range(20):
        dataset, hyper, loss, store = _setup(seed=seed)
        unused = _find_unused_uid(store, dataset)
        if unused is None:
            continue
        client_id, uid = unused
        reference = store.copy()
        request = UnlearnRequest(kind="sample", target_client=client_id,
                                 target_uid=uid, issue_step=hyper.total_steps)
        outcome, reduced = unlearn_sample(request, store, dataset, hyper, loss)
        assert outcome.action == NOOP
        assert outcome.retrained_iterations == 0
        assert outcome.probes == 1
        assert store.state_equal(reference)
        assert not reduced.client(client_id).has_uid(uid)
        return
    raise AssertionError("no seed produced an unused uid")


def test_unlearn_sample_removes_target_everywhere():
    dataset, hyper, loss, store = _setup(seed=1)
    client_id, uid = _find_used_uid(store, dataset)
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    outcome, reduced = unlearn_sample(request, store, dataset, hyper, loss)
    assert outcome.action == PARTIAL_RETRAIN
    assert outcome.probes == 1
    assert outcome.from_iteration is not None
    assert outcome.retrained_iterations == hyper.total_steps - outcome.from_iteration + 1
    for (t, cid), record in store.iter_records():
        if cid == client_id:
            assert uid not in record.batch_uids
    # every stored batch is drawable from the reduced federation
    for (t, cid), record in store.iter_records():
        client = reduced.client(cid)
        assert set(record.batch_uids) <= set(client.uids)


def test_unlearn_sample_preserves_prefix_and_uninvolved_batches():
    dataset, hyper, loss, store = _setup(seed=2)
    client_id, uid = _find_used_uid(store, dataset)
    reference = store.copy()
    first_use = reference._earliest_use[uid]
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    unlearn_sample(request, store, dataset, hyper, loss)
    # records strictly before the first use are bit-identical
    for (t, cid), record in reference.iter_records():
        if t < first_use:
            after = store.iteration_record(t, cid)
            assert after.batch_uids == record.batch_uids
            assert np.array_equal(after.local_model, record.local_model)
    # round multisets never change under sample deletion
    for r in range(1, hyper.rounds + 1):
        assert store.round_multiset(r) == reference.round_multiset(r)
    # batches not containing the uid are reused verbatim at every t
    for (t, cid), record in reference.iter_records():
        if cid == client_id and uid in record.batch_uids:
            continue
        assert store.iteration_record(t, cid).batch_uids == record.batch_uids


def test_unlearn_sample_epoch_advances_only_on_recompute():
    dataset, hyper, loss, store = _setup(seed=1)
    client_id, uid = _find_used_uid(store, dataset)
    epoch = store.epoch
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    unlearn_sample(request, store, dataset, hyper, loss)
    assert store.epoch == epoch + 1


def test_unlearn_sample_missing_uid():
    dataset, hyper, loss, store = _setup()
    request = UnlearnRequest(kind="sample", target_client=0,
                             target_uid=10**9, issue_step=8)
    with pytest.raises(NotFoundError):
        unlearn_sample(request, store, dataset, hyper, loss)


def test_unlearn_sample_needs_full_history():
    dataset, hyper, loss, store = _setup(mode=COMPACT)
    request = UnlearnRequest(kind="sample", target_client=0,
                             target_uid=dataset.client(0).uids[0], issue_step=8)
    with pytest.raises(ModeMismatchError):
        unlearn_sample(request, store, dataset, hyper, loss)


def test_unlearn_sample_rejects_wrong_kind():
    dataset, hyper, loss, store = _setup()
    request = UnlearnRequest(kind="client", target_client=0,
                             target_uid=None, issue_step=8)
    with pytest.raises(InvalidArgumentError):
        unlearn_sample(request, store, dataset, hyper, loss)


# ----------------------------------------------------------------------
# client deletion


def test_unlearn_client_prunes_from_first_selection():
    dataset, hyper, loss, store = _setup(seed=3)
    client_id = store.round_multiset(2)[0]
    reference = store.copy()
    first_round = reference._earliest_round[client_id]
    request = UnlearnRequest(kind="client", target_client=client_id,
                             target_uid=None, issue_step=hyper.total_steps)
    outcome, reduced = unlearn_client(request, store, dataset, hyper, loss)
    assert outcome.action == PARTIAL_RETRAIN
    assert outcome.from_iteration == (first_round - 1) * hyper.local_steps + 1
    assert not reduced.has_client(client_id)
    # the client appears nowhere afterward
    for r in range(1, hyper.rounds + 1):
        assert client_id not in store.round_multiset(r)
    for (t, cid), _ in store.iter_records():
        assert cid != client_id
    # prefix rounds before the first selection are bit-identical
    for r in range(1, first_round):
        assert store.round_multiset(r) == reference.round_multiset(r)
        for t in range((r - 1) * hyper.local_steps + 1, r * hyper.local_steps + 1):
            for cid in set(reference.round_multiset(r)):
                before = reference.iteration_record(t, cid)
                after = store.iteration_record(t, cid)
                assert after.batch_uids == before.batch_uids
                assert np.array_equal(after.local_model, before.local_model)


def test_unlearn_client_keeps_per_round_count():
    dataset, hyper, loss, store = _setup(seed=4)
    client_id = store.round_multiset(1)[0]
    request = UnlearnRequest(kind="client", target_client=client_id,
                             target_uid=None, issue_step=hyper.total_steps)
    unlearn_client(request, store, dataset, hyper, loss)
    for r in range(1, hyper.rounds + 1):
        assert len(store.round_multiset(r)) == hyper.clients_per_round


def test_unlearn_client_noop_when_never_selected():
    for seed in range(60):
        dataset, hyper, loss, store = _setup(
            seed=seed, num_clients=6, clients_per_round=1, total_steps=4,
        )
        unseen = [c for c in dataset.client_ids if c not in store._earliest_round]
        if not unseen:
            continue
        reference = store.copy()
        request = UnlearnRequest(kind="client", target_client=unseen[0],
                                 target_uid=None, issue_step=hyper.total_steps)
        outcome, reduced = unlearn_client(request, store, dataset, hyper, loss)
        assert outcome.action == NOOP
        assert outcome.probes == 1
        assert store.state_equal(reference)
        return
    raise AssertionError("no seed left a client unselected")


def test_unlearn_client_last_client_forbidden(micro_dataset):
    from conftest import micro_hyper

    hyper = micro_hyper()
    loss = make_loss("quadratic", 1)
    store = HistoryStore(FULL_HISTORY, 1)
    run_fats(1, hyper, micro_dataset, store, loss)
    from fedunlab.data import remove_client

    reduced = remove_client(micro_dataset, 0)
    request = UnlearnRequest(kind="client", target_client=1,
                             target_uid=None, issue_step=2)
    with pytest.raises(EmptyFederationError):
        unlearn_client(request, store, reduced, hyper, loss)


# ----------------------------------------------------------------------
# compact-mode full retrain


def test_full_retrain_unlearn_compact():
    dataset, hyper, loss, store = _setup(seed=5, mode=COMPACT)
    client_id, uid = None, None
    for client in dataset.clients:
        for candidate in client.uids:
            if store.sample_involved(client.client_id, candidate):
                client_id, uid = client.client_id, candidate
                break
        if uid is not None:
            break
    assert uid is not None
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    outcome, reduced = full_retrain_unlearn(request, store, dataset, hyper, loss)
    assert outcome.action == FULL_RETRAIN
    assert outcome.retrained_iterations == hyper.total_steps
    assert not store.sample_involved(client_id, uid)
    assert outcome.final_model is not None


def test_full_retrain_unlearn_deterministic():
    results = []
    for _ in range(2):
        dataset, hyper, loss, store = _setup(seed=9, mode=COMPACT)
        client_id = dataset.client_ids[0]
        uid = dataset.client(client_id).uids[0]
        request = UnlearnRequest(kind="sample", target_client=client_id,
                                 target_uid=uid, issue_step=hyper.total_steps)
        outcome, _ = full_retrain_unlearn(request, store, dataset, hyper, loss)
        results.append((outcome.action, outcome.final_model))
    assert results[0][0] == results[1][0]
    np.testing.assert_array_equal(results[0][1], results[1][1])


# ----------------------------------------------------------------------
# streams


def test_process_stream_marks_repeat_as_stale():
    dataset, hyper, loss, store = _setup(seed=1)
    client_id, uid = _find_used_uid(store, dataset)
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    outcomes, reduced = process_stream(
        [request, request], store, dataset, hyper, loss
    )
    assert [o.action for o in outcomes] == [PARTIAL_RETRAIN, STALE]
    assert not reduced.client(client_id).has_uid(uid)


def test_process_stream_mixed_kinds():
    dataset, hyper, loss, store = _setup(seed=2)
    client_id, uid = _find_used_uid(store, dataset)
    other = next(c for c in dataset.client_ids if c != client_id)
    requests = [
        UnlearnRequest(kind="sample", target_client=client_id,
                       target_uid=uid, issue_step=hyper.total_steps),
        UnlearnRequest(kind="client", target_client=other,
                       target_uid=None, issue_step=hyper.total_steps),
    ]
    outcomes, reduced = process_stream(requests, store, dataset, hyper, loss)
    assert len(outcomes) == 2
    assert not reduced.has_client(other)
    assert all(o.action in (NOOP, PARTIAL_RETRAIN) for o in outcomes)
    # sampled multisets in the final history avoid the removed client
    for r in range(1, hyper.rounds + 1):
        assert other not in store.round_multiset(r)


def test_outcome_log_line_format():
    dataset, hyper, loss, store = _setup(seed=1)
    client_id, uid = _find_used_uid(store, dataset)
    request = UnlearnRequest(kind="sample", target_client=client_id,
                             target_uid=uid, issue_step=hyper.total_steps)
    outcome, _ = unlearn_sample(request, store, dataset, hyper, loss)
    fields = outcome.log_line().split(",")
    assert fields[0] == "sample"
    assert fields[1] == str(client_id)
    assert fields[2] == str(uid)
    assert fields[4] == PARTIAL_RETRAIN
    assert int(fields[6]) == outcome.retrained_iterations


def test_parse_request_line():
    request = parse_request_line("sample, 3, 17, 40")
    assert request == UnlearnRequest(kind="sample", target_client=3,
                                     target_uid=17, issue_step=40)
    request = parse_request_line("client,2,-,40")
    assert request.target_uid is None
    with pytest.raises(InvalidArgumentError):
        parse_request_line("sample,3,17")
