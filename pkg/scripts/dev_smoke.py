"""Development smoke checks, run by hand while iterating.

Covers the critical exactness path early: the symbolic unlearned
distribution must equal exact enumeration on the reduced dataset, at
zero tolerance, for both deletion kinds, and the engine's empirical
history frequencies must line up with enumeration.
"""

from fractions import Fraction

from fedunlab.data import (
    FULL_HISTORY,
    HyperParams,
    UnlearnRequest,
    generate_synthetic,
    remove_client,
    remove_sample,
)
from fedunlab.stability import (
    enumerate_history_distribution,
    involvement_probability,
    tv_distance,
    unlearned_history_distribution,
)


def micro():
    dataset = generate_synthetic(
        num_clients=2, samples_per_client=2, dim=1, classes=2, beta=0.5, seed=7
    )
    hyper = HyperParams.from_budgets(
        rho_sample=0.5,
        rho_client=1.0,
        num_clients=2,
        samples_per_client=2,
        total_steps=2,
        local_steps=1,
        lr=0.1,
        seed=0,
        storage_mode=FULL_HISTORY,
    )
    assert hyper.clients_per_round == 1 and hyper.batch_size == 1, (
        hyper.clients_per_round,
        hyper.batch_size,
    )
    return dataset, hyper


def main() -> None:
    dataset, hyper = micro()
    base = enumerate_history_distribution(hyper, dataset)
    total = sum(base.probs)
    assert total == 1, total
    print(f"base support {len(base.support)} histories, sums to {total}")

    cid = dataset.client_ids[1]
    uid = dataset.client(cid).uids[0]

    req = UnlearnRequest(kind="sample", target_client=cid, target_uid=uid, issue_step=2)
    left = unlearned_history_distribution(hyper, dataset, req)
    right = enumerate_history_distribution(hyper, remove_sample(dataset, cid, uid))
    tv = tv_distance(left, right)
    print(f"sample deletion TV = {tv}")
    assert tv == 0, tv

    req = UnlearnRequest(kind="client", target_client=cid, target_uid=None, issue_step=2)
    left = unlearned_history_distribution(hyper, dataset, req)
    right = enumerate_history_distribution(hyper, remove_client(dataset, cid))
    tv = tv_distance(left, right)
    print(f"client deletion TV = {tv}")
    assert tv == 0, tv

    p = involvement_probability(hyper, dataset, "sample", cid, uid)
    assert p == Fraction(7, 16), p
    p = involvement_probability(hyper, dataset, "client", cid)
    assert p == Fraction(3, 4), p
    print("involvement closed forms ok")
    print("smoke: all exactness checks passed")


if __name__ == "__main__":
    main()
