"""Engine-level smoke: Monte Carlo histories from the real pipeline
against exact enumeration, determinism, and unlearn timing."""

import time
from collections import Counter

import numpy as np

from fedunlab.data import (
    FULL_HISTORY,
    HyperParams,
    UnlearnRequest,
    generate_synthetic,
    remove_sample,
)
from fedunlab.engine import run_fats
from fedunlab.losses import make_loss
from fedunlab.stability import (
    enumerate_history_distribution,
    equivalence_test_mc,
    unlearned_history_distribution,
)
from fedunlab.store import HistoryStore
from fedunlab.streams import derive_trial_seeds
from fedunlab.unlearn import unlearn_sample


def micro():
    dataset = generate_synthetic(
        num_clients=2, samples_per_client=2, dim=1, classes=2, beta=0.5, seed=7
    )

    def hyper_for(seed):
        return HyperParams.from_budgets(
            rho_sample=0.5, rho_client=1.0, num_clients=2, samples_per_client=2,
            total_steps=2, local_steps=1, lr=0.1, seed=seed, storage_mode=FULL_HISTORY,
        )

    return dataset, hyper_for


def main() -> None:
    dataset, hyper_for = micro()
    loss = make_loss("quadratic", 1)
    cid = dataset.client_ids[1]
    uid = dataset.client(cid).uids[0]
    reduced = remove_sample(dataset, cid, uid)

    # determinism
    h1 = HistoryStore(FULL_HISTORY, 1)
    h2 = HistoryStore(FULL_HISTORY, 1)
    m1 = run_fats(1, hyper_for(42), dataset, h1, loss)
    m2 = run_fats(1, hyper_for(42), dataset, h2, loss)
    assert np.array_equal(m1, m2) and h1.history_tuple() == h2.history_tuple()
    print("determinism ok")

    trials = 100_000
    start = time.perf_counter()
    seeds = derive_trial_seeds(2024, trials, salt=11)

    def run_unlearned(seed: int):
        hyper = hyper_for(int(seed))
        store = HistoryStore(FULL_HISTORY, 1)
        run_fats(1, hyper, dataset, store, loss)
        req = UnlearnRequest(kind="sample", target_client=cid, target_uid=uid, issue_step=2)
        unlearn_sample(req, store, dataset, hyper, loss)
        return store.history_tuple()

    def run_retrain(seed: int):
        hyper = hyper_for(int(seed))
        store = HistoryStore(FULL_HISTORY, 1)
        run_fats(1, hyper, reduced, store, loss)
        return store.history_tuple()

    unlearned_counts = Counter(run_unlearned(s) for s in seeds[: trials // 2])
    mid = time.perf_counter()
    print(f"{trials // 2} unlearn trials in {mid - start:.1f}s")
    retrain_counts = Counter(run_retrain(s) for s in seeds[trials // 2 :])
    print(f"{trials // 2} retrain trials in {time.perf_counter() - mid:.1f}s")

    # chi-square against exact reduced enumeration, and MC two-sample
    exact = enumerate_history_distribution(hyper_for(0), reduced)
    support = set(exact.support)
    assert set(unlearned_counts) <= support, set(unlearned_counts) - support
    assert set(retrain_counts) <= support

    from scipy.stats import chisquare

    n = sum(unlearned_counts.values())
    observed = [unlearned_counts.get(h, 0) for h in exact.support]
    expected = [float(p) * n for p in exact.probs]
    stat, pvalue = chisquare(observed, expected)
    print(f"unlearned vs exact reduced: chi2={stat:.2f} p={pvalue:.4f}")
    assert pvalue > 0.001, pvalue

    report = equivalence_test_mc(
        lambda s: run_unlearned(s),
        lambda s: run_retrain(s),
        trials=6000,
        seed=555,
        name="micro-sample",
    )
    print(report.record())
    assert report.passed

    total = time.perf_counter() - start
    print(f"total {total:.1f}s for {trials} pipeline trials (+12k mc)")


if __name__ == "__main__":
    main()
