"""History store: recording, probing, pruning, storage accounting,
checkpoints."""

import numpy as np
import pytest

from fedunlab.data import COMPACT, FULL_HISTORY, generate_synthetic
from fedunlab.engine import run_fats
from fedunlab.errors import (
    CheckpointFormatError,
    CorruptedHistoryError,
    DigestMismatchError,
    InvalidArgumentError,
    ModeMismatchError,
)
from fedunlab.losses import make_loss
from fedunlab.store import HistoryStore, load_checkpoint, save_checkpoint

from conftest import micro_hyper


def _filled_store(local_steps=2):
    store = HistoryStore(FULL_HISTORY, local_steps)
    store.record_global(0, np.zeros(2))
    store.record_round_start(1, (0, 1))
    store.record_iteration(1, 0, (3, 5), np.array([0.1, 0.2]))
    store.record_iteration(1, 1, (8,), np.array([0.3, 0.4]))
    store.record_iteration(2, 0, (4, 5), np.array([0.5, 0.6]))
    store.record_iteration(2, 1, (9,), np.array([0.7, 0.8]))
    store.record_global(1, np.array([0.4, 0.5]))
    store.record_round_start(2, (1, 1))
    store.record_iteration(3, 1, (8,), np.array([1.0, 1.1]))
    store.record_iteration(4, 1, (7,), np.array([1.2, 1.3]))
    store.record_global(2, np.array([1.2, 1.3]))
    return store


# ----------------------------------------------------------------------
# round arithmetic and recording


def test_round_arithmetic():
    store = HistoryStore(FULL_HISTORY, 3)
    assert store.round_start_iteration(1) == 1
    assert store.round_start_iteration(3) == 7
    assert store.round_of(1) == 1
    assert store.round_of(3) == 1
    assert store.round_of(4) == 2


def test_recording_and_lookup():
    store = _filled_store()
    assert store.round_multiset(1) == (0, 1)
    assert store.round_multiset(3) is None
    assert store.iteration_record(2, 0).batch_uids == (4, 5)
    np.testing.assert_array_equal(store.global_model(1), [0.4, 0.5])
    np.testing.assert_array_equal(store.latest_global_model(), [1.2, 1.3])
    assert store.next_iteration == 5


def test_multiset_must_be_sorted():
    store = HistoryStore(FULL_HISTORY, 1)
    with pytest.raises(InvalidArgumentError):
        store.record_round_start(1, (2, 1))


def test_round_start_gap_rejected():
    store = HistoryStore(FULL_HISTORY, 2)
    with pytest.raises(CorruptedHistoryError):
        store.record_round_start(2, (0,))


def test_out_of_order_iteration_rejected():
    store = _filled_store()
    with pytest.raises(CorruptedHistoryError):
        store.record_iteration(3, 1, (9,), np.zeros(2))


# ----------------------------------------------------------------------
# probes


def test_earliest_sample_use_single_probe():
    store = _filled_store()
    before = store.probes
    assert store.earliest_sample_use(5) == 1
    assert store.probes == before + 1
    assert store.earliest_sample_use(7) == 4
    assert store.earliest_sample_use(999) is None


def test_earliest_sample_use_through_cutoff():
    store = _filled_store()
    assert store.earliest_sample_use(7, through=3) is None
    assert store.earliest_sample_use(7, through=4) == 4


def test_earliest_client_use_round_based():
    store = _filled_store()
    assert store.earliest_client_use(0) == 1
    assert store.earliest_client_use(1) == 1
    assert store.earliest_client_use(5) is None
    # through is interpreted at round granularity
    store2 = HistoryStore(FULL_HISTORY, 2)
    store2.record_global(0, np.zeros(1))
    store2.record_round_start(1, (0,))
    store2.record_iteration(1, 0, (1,), np.zeros(1))
    store2.record_iteration(2, 0, (1,), np.zeros(1))
    store2.record_global(1, np.zeros(1))
    store2.record_round_start(2, (2,))
    assert store2.earliest_client_use(2, through=2) is None
    assert store2.earliest_client_use(2, through=3) == 3


def test_involvement_flags_full_mode():
    store = _filled_store()
    assert store.sample_involved(0, 5)
    assert not store.sample_involved(0, 999)
    assert store.client_involved(1)
    assert not store.client_involved(4)


# ----------------------------------------------------------------------
# pruning


def test_discard_from_keeps_epoch_prune_bumps_it():
    store = _filled_store()
    epoch = store.epoch
    clone = store.copy()
    assert clone.discard_from(3)
    assert clone.epoch == epoch
    assert clone.next_iteration == 3
    assert clone.round_multiset(2) is None
    assert clone.iteration_record(3, 1) is None
    assert clone.iteration_record(2, 0) is not None

    store.prune_after(3)
    assert store.epoch == epoch + 1
    # prune beyond history is a no-op and must not bump the epoch
    store.prune_after(100)
    assert store.epoch == epoch + 1


def test_prune_rebuilds_earliest_indices():
    store = _filled_store()
    assert store.earliest_sample_use(7) == 4
    store.prune_after(4)
    assert store.earliest_sample_use(7) is None
    assert store.earliest_sample_use(8) == 1


def test_compact_prune_only_full_reset():
    store = HistoryStore(COMPACT, 2)
    store.record_global(0, np.zeros(1))
    store.record_round_start(1, (0,))
    store.record_iteration(1, 0, (1,), np.zeros(1))
    store.record_iteration(2, 0, (2,), np.zeros(1))
    with pytest.raises(ModeMismatchError):
        store.discard_from(2)
    store.prune_after(1)
    assert store.next_iteration == 1
    assert not store.client_involved(0)


# ----------------------------------------------------------------------
# storage accounting


def _trained_store(mode, total_steps, seed=0):
    dataset = generate_synthetic(
        num_clients=2, samples_per_client=4, dim=1, classes=2, beta=0.5, seed=3
    )
    hyper_kwargs = dict(
        num_clients=2, samples_per_client=4, total_steps=total_steps,
        local_steps=10, clients_per_round=1, batch_size=2, lr=0.01,
        rho_sample=0.5, rho_client=0.5, seed=seed, storage_mode=mode,
    )
    from fedunlab.data import HyperParams

    hyper = HyperParams(**hyper_kwargs)
    store = HistoryStore(mode, 10)
    run_fats(1, hyper, dataset, store, make_loss("quadratic", 1), theta0=np.zeros(1))
    return store


def test_storage_full_mode_linear_in_horizon():
    words = [_trained_store(FULL_HISTORY, t).storage_word_count()
             for t in (100, 200, 400)]
    assert words[0] < words[1] < words[2]
    # doubling the horizon roughly doubles the footprint
    assert words[2] / words[1] == pytest.approx(2.0, rel=0.1)


def test_storage_compact_mode_saturates():
    words = [_trained_store(COMPACT, t).storage_word_count()
             for t in (100, 200, 400)]
    assert words[0] == words[1] == words[2]


def test_state_equal_detects_differences():
    a = _filled_store()
    b = _filled_store()
    assert a.state_equal(b)
    b.record_iteration(5, 0, (3,), np.zeros(2))
    assert not a.state_equal(b)


# ----------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_full(tmp_path, micro_dataset):
    hyper = micro_hyper()
    store = HistoryStore(FULL_HISTORY, 1)
    run_fats(1, hyper, micro_dataset, store, make_loss("quadratic", 1))
    path = tmp_path / "ckpt.txt"
    save_checkpoint(store, hyper, micro_dataset, str(path))
    loaded, loaded_hyper = load_checkpoint(str(path), micro_dataset)
    assert loaded.state_equal(store)
    assert loaded_hyper == hyper


def test_checkpoint_round_trip_compact(tmp_path, micro_dataset):
    hyper = micro_hyper(storage_mode=COMPACT)
    store = HistoryStore(COMPACT, 1)
    run_fats(1, hyper, micro_dataset, store, make_loss("quadratic", 1))
    path = tmp_path / "ckpt.txt"
    save_checkpoint(store, hyper, micro_dataset, str(path))
    loaded, _ = load_checkpoint(str(path), micro_dataset)
    assert loaded.state_equal(store)


def test_checkpoint_digest_mismatch(tmp_path, micro_dataset):
    hyper = micro_hyper()
    store = HistoryStore(FULL_HISTORY, 1)
    run_fats(1, hyper, micro_dataset, store, make_loss("quadratic", 1))
    path = tmp_path / "ckpt.txt"
    save_checkpoint(store, hyper, micro_dataset, str(path))
    other = generate_synthetic(
        num_clients=2, samples_per_client=2, dim=1, classes=2, beta=0.5, seed=8
    )
    with pytest.raises(DigestMismatchError):
        load_checkpoint(str(path), other)


def test_checkpoint_truncation_detected(tmp_path, micro_dataset):
    hyper = micro_hyper()
    store = HistoryStore(FULL_HISTORY, 1)
    run_fats(1, hyper, micro_dataset, store, make_loss("quadratic", 1))
    path = tmp_path / "ckpt.txt"
    save_checkpoint(store, hyper, micro_dataset, str(path))
    text = path.read_text()
    path.write_text("\n".join(text.splitlines()[:-2]) + "\n")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_checkpoint_bad_header(tmp_path):
    path = tmp_path / "ckpt.txt"
    path.write_text("some other format v9\nend\n")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(str(path))


def test_checkpoint_resume_continues_training(tmp_path, micro_dataset):
    """A checkpoint taken mid-run resumes to the same final state as the
    uninterrupted run."""
    from fedunlab.data import HyperParams

    hyper = HyperParams(
        num_clients=2, samples_per_client=2, total_steps=4, local_steps=2,
        clients_per_round=1, batch_size=1, lr=0.1, rho_sample=0.5,
        rho_client=0.5, seed=5, storage_mode=FULL_HISTORY,
    )
    loss = make_loss("quadratic", 1)
    full_store = HistoryStore(FULL_HISTORY, 2)
    final = run_fats(1, hyper, micro_dataset, full_store, loss)

    partial = HistoryStore(FULL_HISTORY, 2)
    # train the first round only, by replaying the first half
    half = HistoryStore(FULL_HISTORY, 2)
    run_fats(1, hyper, micro_dataset, half, loss)
    half.discard_from(3)
    path = tmp_path / "half.txt"
    save_checkpoint(half, hyper, micro_dataset, str(path))
    resumed, resumed_hyper = load_checkpoint(str(path), micro_dataset)
    final_resumed = run_fats(3, resumed_hyper, micro_dataset, resumed, loss)
    assert np.array_equal(final, final_resumed)
    assert resumed.state_equal(full_store)
