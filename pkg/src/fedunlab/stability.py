"""Exact distribution lab over sampling histories, plus statistical
equivalence harnesses.

A sampling history is, per round, the drawn client multiset and, for
every distinct selected client, its mini-batch uid sets for each local
iteration. This module enumerates the exact rational distribution over
histories for small configurations, applies the deletion couplings to
it symbolically, and checks distributional identities with zero
tolerance. All probabilities are Fractions; floating point never enters
the exact paths.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Hashable, Sequence

from scipy.stats import chi2_contingency

from .data import FederatedDataset, HyperParams, UnlearnRequest, remove_client, remove_sample
from .errors import (
    BinsTooFineError,
    InvalidArgumentError,
    TooLargeToEnumerateError,
)
from .streams import derive_trial_seeds

ENUMERATION_BUDGET = 10**6

Round = tuple[tuple[int, ...], tuple[tuple[int, tuple[tuple[int, ...], ...]], ...]]
History = tuple[Round, ...]


@dataclass(frozen=True)
class HistoryDistribution:
    """Finite distribution over canonical sampling histories."""

    support: tuple[History, ...]
    probs: tuple[Fraction, ...]

    def __post_init__(self) -> None:
        if len(self.support) != len(self.probs):
            raise InvalidArgumentError("support and probs must align")
        total = sum(self.probs, Fraction(0))
        if total != 1:
            raise InvalidArgumentError(f"probabilities sum to {total}, not 1")

    def as_dict(self) -> dict[History, Fraction]:
        return dict(zip(self.support, self.probs))

    @classmethod
    def from_dict(cls, dist: dict[History, Fraction]) -> "HistoryDistribution":
        items = sorted(dist.items())
        return cls(
            support=tuple(h for h, _ in items),
            probs=tuple(p for _, p in items),
        )


def _multiset_probability(multiset: tuple[int, ...], num_clients: int) -> Fraction:
    """Probability of an unordered with-replacement draw: the multinomial
    coefficient over the ordered draws, divided by num_clients^len."""
    count = len(multiset)
    coeff = math.factorial(count)
    for _, group in itertools.groupby(multiset):
        coeff //= math.factorial(len(tuple(group)))
    return Fraction(coeff, num_clients**count)


def enumeration_budget(hyper: HyperParams, dataset: FederatedDataset) -> int:
    """Upper bound on the number of distinct histories."""
    clients = dataset.num_clients
    largest = max(c.size for c in dataset.clients)
    per_client_batches = math.comb(largest, min(hyper.batch_size, largest))
    per_round = clients**hyper.clients_per_round * per_client_batches ** (
        hyper.clients_per_round * hyper.local_steps
    )
    return per_round**hyper.rounds


def _check_budget(hyper: HyperParams, dataset: FederatedDataset) -> None:
    if enumeration_budget(hyper, dataset) > ENUMERATION_BUDGET:
        raise TooLargeToEnumerateError(
            f"history space exceeds the enumeration budget of {ENUMERATION_BUDGET}"
        )


def per_round_outcomes(
    hyper: HyperParams, dataset: FederatedDataset
) -> list[tuple[Round, Fraction]]:
    """All (round outcome, probability) pairs for one round."""
    client_ids = dataset.client_ids
    outcomes: list[tuple[Round, Fraction]] = []
    for multiset in itertools.combinations_with_replacement(
        client_ids, hyper.clients_per_round
    ):
        base = _multiset_probability(multiset, len(client_ids))
        distinct = sorted(set(multiset))
        per_client_choices: list[list[tuple[tuple[tuple[int, ...], ...], Fraction]]] = []
        for client_id in distinct:
            uids = dataset.client(client_id).uids
            if hyper.batch_size > len(uids):
                raise InvalidArgumentError(
                    f"client {client_id} is smaller than the batch size"
                )
            combos = [
                tuple(sorted(batch))
                for batch in itertools.combinations(uids, hyper.batch_size)
            ]
            weight = Fraction(1, len(combos))
            sequences = [
                (seq, weight ** hyper.local_steps)
                for seq in itertools.product(combos, repeat=hyper.local_steps)
            ]
            per_client_choices.append(sequences)
        for assignment in itertools.product(*per_client_choices):
            prob = base
            body = []
            for client_id, (seq, weight) in zip(distinct, assignment):
                prob *= weight
                body.append((client_id, seq))
            outcomes.append(((tuple(multiset), tuple(body)), prob))
    return outcomes


def enumerate_history_distribution(
    hyper: HyperParams, dataset: FederatedDataset
) -> HistoryDistribution:
    """Exact distribution over full sampling histories of a training run
    on the given dataset. Rounds are independent and identically
    distributed, so the history measure is the per-round measure to the
    power of the round count."""
    _check_budget(hyper, dataset)
    rounds = per_round_outcomes(hyper, dataset)
    acc: dict[History, Fraction] = {}
    for combo in itertools.product(rounds, repeat=hyper.rounds):
        history = tuple(outcome for outcome, _ in combo)
        prob = Fraction(1)
        for _, p in combo:
            prob *= p
        acc[history] = acc.get(history, Fraction(0)) + prob
    return HistoryDistribution.from_dict(acc)


def _first_sample_involvement(
    history: History, hyper: HyperParams, client_id: int, uid: int
) -> int | None:
    """Earliest iteration whose recorded batch for client_id contains
    uid, scanning the entire history."""
    for round_index, (multiset, body) in enumerate(history, start=1):
        if client_id not in multiset:
            continue
        for cid, batches in body:
            if cid != client_id:
                continue
            for step, batch in enumerate(batches, start=1):
                if uid in batch:
                    return (round_index - 1) * hyper.local_steps + step
    return None


def _first_client_involvement(history: History, client_id: int) -> int | None:
    for round_index, (multiset, _) in enumerate(history, start=1):
        if client_id in multiset:
            return round_index
    return None


def unlearned_history_distribution(
    hyper: HyperParams,
    dataset: FederatedDataset,
    request: UnlearnRequest,
) -> HistoryDistribution:
    """Exact distribution over final histories after training on the
    full dataset and servicing one deletion request, mirroring the
    engine's couplings symbolically.

    Sample deletion keeps multisets and uninvolved batches and replaces
    every batch of the target client that contained the uid with a
    uniformly drawn batch over the client's remaining points. Client
    deletion keeps rounds before the first selection and redraws all
    later rounds over the remaining clients.
    """
    _check_budget(hyper, dataset)
    original = enumerate_history_distribution(hyper, dataset)
    acc: dict[History, Fraction] = {}

    if request.kind == "sample":
        client_id = request.target_client
        uid = request.target_uid
        assert uid is not None
        reduced_uids = tuple(
            u for u in dataset.client(client_id).uids if u != uid
        )
        if hyper.batch_size > len(reduced_uids):
            raise InvalidArgumentError(
                "deletion would leave the client smaller than the batch size"
            )
        reduced_batches = [
            tuple(sorted(batch))
            for batch in itertools.combinations(reduced_uids, hyper.batch_size)
        ]
        redraw_weight = Fraction(1, len(reduced_batches))
        for history, prob in zip(original.support, original.probs):
            slots = []
            for r_index, (multiset, body) in enumerate(history):
                for c_index, (cid, batches) in enumerate(body):
                    if cid != client_id:
                        continue
                    for s_index, batch in enumerate(batches):
                        if uid in batch:
                            slots.append((r_index, c_index, s_index))
            if not slots:
                acc[history] = acc.get(history, Fraction(0)) + prob
                continue
            for replacement in itertools.product(reduced_batches, repeat=len(slots)):
                rounds = [
                    [list(batches) for _, batches in body]
                    for _, body in history
                ]
                for (r_index, c_index, s_index), batch in zip(slots, replacement):
                    rounds[r_index][c_index][s_index] = batch
                rebuilt: list[Round] = []
                for (multiset, body), new_batches in zip(history, rounds):
                    rebuilt.append(
                        (
                            multiset,
                            tuple(
                                (cid, tuple(batches))
                                for (cid, _), batches in zip(body, new_batches)
                            ),
                        )
                    )
                weight = prob * redraw_weight ** len(slots)
                key = tuple(rebuilt)
                acc[key] = acc.get(key, Fraction(0)) + weight
        return HistoryDistribution.from_dict(acc)

    if request.kind == "client":
        client_id = request.target_client
        reduced = remove_client(dataset, client_id)
        fresh_rounds = per_round_outcomes(hyper, reduced)
        for history, prob in zip(original.support, original.probs):
            first_round = _first_client_involvement(history, client_id)
            if first_round is None:
                acc[history] = acc.get(history, Fraction(0)) + prob
                continue
            prefix = history[: first_round - 1]
            tail = hyper.rounds - first_round + 1
            for combo in itertools.product(fresh_rounds, repeat=tail):
                suffix = tuple(outcome for outcome, _ in combo)
                weight = prob
                for _, p in combo:
                    weight *= p
                key = prefix + suffix
                acc[key] = acc.get(key, Fraction(0)) + weight
        return HistoryDistribution.from_dict(acc)

    raise InvalidArgumentError(f"unknown request kind {request.kind!r}")


def involvement_probability(
    hyper: HyperParams,
    dataset: FederatedDataset,
    kind: str,
    client_id: int,
    uid: int | None = None,
) -> Fraction:
    """Exact probability that a target is touched by a training run.

    Per round, a specific client is selected with probability
    1 - ((M-1)/M)^K; given selection, a specific point appears in at
    least one of the round's batches with probability 1 - (1 - b/N)^E,
    because a single uniform batch contains a fixed point with
    probability exactly b/N. Rounds are independent.
    """
    clients = dataset.num_clients
    selected = 1 - Fraction(clients - 1, clients) ** hyper.clients_per_round
    if kind == "client":
        per_round = selected
    elif kind == "sample":
        size = dataset.client(client_id).size
        hit = 1 - (1 - Fraction(hyper.batch_size, size)) ** hyper.local_steps
        per_round = selected * hit
    else:
        raise InvalidArgumentError(f"unknown kind {kind!r}")
    return 1 - (1 - per_round) ** hyper.rounds


def tv_distance(a: HistoryDistribution, b: HistoryDistribution) -> Fraction:
    """Exact total variation distance between two history distributions."""
    da, db = a.as_dict(), b.as_dict()
    keys = set(da) | set(db)
    gap = sum(
        (abs(da.get(k, Fraction(0)) - db.get(k, Fraction(0))) for k in keys),
        Fraction(0),
    )
    return gap / 2


@dataclass(frozen=True)
class EquivalenceReport:
    """Structured verdict of one equivalence check."""

    name: str
    mode: str  # "exact_enumeration" or "chi_square_mc"
    statistic: float
    pvalue: float | None
    threshold: float
    verdict: str  # "pass" or "fail"
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def record(self) -> str:
        pvalue = "-" if self.pvalue is None else f"{self.pvalue:.6g}"
        return (
            f"{self.name} mode={self.mode} statistic={self.statistic:.6g} "
            f"pvalue={pvalue} threshold={self.threshold:g} verdict={self.verdict}"
        )


def equivalence_test_exact(
    a: HistoryDistribution, b: HistoryDistribution, name: str = "exact"
) -> EquivalenceReport:
    """Zero-tolerance distributional identity via exact TV distance."""
    gap = tv_distance(a, b)
    return EquivalenceReport(
        name=name,
        mode="exact_enumeration",
        statistic=float(gap),
        pvalue=None,
        threshold=0.0,
        verdict="pass" if gap == 0 else "fail",
        detail=f"tv={gap}",
    )


def equivalence_test_mc(
    runner_a: Callable[[int], Hashable],
    runner_b: Callable[[int], Hashable],
    *,
    trials: int,
    seed: int,
    alpha: float = 0.001,
    min_expected: float = 5.0,
    name: str = "mc",
) -> EquivalenceReport:
    """Two-sample chi-square test on binned pipeline outputs.

    Each runner maps an independent trial seed to a hashable bin label
    (canonical history, hash, or any discretized statistic). The test
    fails only below the configured significance level, so identical
    pipelines pass with probability 1 - alpha. Raises when any expected
    bin count is too small for the chi-square approximation.
    """
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    seeds_a = derive_trial_seeds(seed, trials, salt=101)
    seeds_b = derive_trial_seeds(seed, trials, salt=202)
    counts_a = Counter(runner_a(s) for s in seeds_a)
    counts_b = Counter(runner_b(s) for s in seeds_b)
    bins = sorted(set(counts_a) | set(counts_b), key=repr)
    table = [
        [counts_a.get(bin_key, 0) for bin_key in bins],
        [counts_b.get(bin_key, 0) for bin_key in bins],
    ]
    total = 2 * trials
    for column in range(len(bins)):
        column_total = table[0][column] + table[1][column]
        expected = column_total * trials / total
        if expected < min_expected:
            raise BinsTooFineError(
                f"bin {bins[column]!r} has expected count {expected:.2f} < "
                f"{min_expected}; coarsen the binning or add trials"
            )
    if len(bins) < 2:
        # Identical single-bin outputs: trivially indistinguishable.
        return EquivalenceReport(
            name=name, mode="chi_square_mc", statistic=0.0, pvalue=1.0,
            threshold=alpha, verdict="pass", detail="single shared bin",
        )
    statistic, pvalue, _, _ = chi2_contingency(table, correction=False)
    verdict = "fail" if pvalue < alpha else "pass"
    return EquivalenceReport(
        name=name,
        mode="chi_square_mc",
        statistic=float(statistic),
        pvalue=float(pvalue),
        threshold=alpha,
        verdict=verdict,
        detail=f"bins={len(bins)} trials={trials}",
    )
