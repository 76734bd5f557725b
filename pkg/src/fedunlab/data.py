"""Federated dataset model, synthetic generation, and deletion surgery.

A federation is a fixed set of clients, each holding an ordered list of
points with globally unique integer uids. Deletion operations return new
dataset objects; uids of surviving points never change, which is what
lets recorded mini-batches be replayed after a deletion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

from .errors import (
    EmptyFederationError,
    InfeasibleBudgetError,
    InvalidArgumentError,
    NotFoundError,
)
from .streams import DOMAIN_DATA, substream

FULL_HISTORY = "full_history"
COMPACT = "compact"
_STORAGE_MODES = (FULL_HISTORY, COMPACT)


@dataclass(frozen=True)
class DataPoint:
    """One training sample: a feature vector, a scalar label, and a uid
    that stays stable across deletions of other points."""

    uid: int
    features: np.ndarray
    label: float

    def __post_init__(self) -> None:
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 1 or feats.size == 0:
            raise InvalidArgumentError("features must be a non-empty 1-d vector")
        if not np.all(np.isfinite(feats)):
            raise InvalidArgumentError(f"non-finite features for uid {self.uid}")
        if not math.isfinite(self.label):
            raise InvalidArgumentError(f"non-finite label for uid {self.uid}")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "label", float(self.label))


@dataclass(frozen=True)
class ClientDataset:
    """Ordered collection of points held by one client.

    Feature and label arrays are cached as matrices so mini-batch
    gradients can be computed without per-point Python overhead.
    """

    client_id: int
    points: tuple[DataPoint, ...]
    features_matrix: np.ndarray = field(init=False, repr=False, compare=False)
    labels_vector: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        uids = [p.uid for p in self.points]
        if len(set(uids)) != len(uids):
            raise InvalidArgumentError(f"duplicate uids in client {self.client_id}")
        dims = {p.features.size for p in self.points}
        if len(dims) > 1:
            raise InvalidArgumentError("inconsistent feature dimension within client")
        if self.points:
            mat = np.stack([p.features for p in self.points]).astype(np.float64)
            labels = np.array([p.label for p in self.points], dtype=np.float64)
        else:
            mat = np.zeros((0, 0), dtype=np.float64)
            labels = np.zeros(0, dtype=np.float64)
        mat.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "features_matrix", mat)
        object.__setattr__(self, "labels_vector", labels)
        object.__setattr__(self, "_row_of", {uid: i for i, uid in enumerate(uids)})
        object.__setattr__(self, "_uids", tuple(uids))

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def uids(self) -> tuple[int, ...]:
        return self._uids  # type: ignore[attr-defined]

    def has_uid(self, uid: int) -> bool:
        return uid in self._row_of  # type: ignore[attr-defined]

    def rows_for(self, uids: Iterable[int]) -> np.ndarray:
        row_of = self._row_of  # type: ignore[attr-defined]
        try:
            return np.fromiter((row_of[u] for u in uids), dtype=np.intp)
        except KeyError as exc:
            raise NotFoundError(
                f"uid {exc.args[0]} not in client {self.client_id}"
            ) from None


@dataclass(frozen=True)
class FederatedDataset:
    """All clients plus the generation metadata needed for export."""

    clients: tuple[ClientDataset, ...]
    classes: int
    dim: int
    declared_samples_per_client: int
    seed: int

    def __post_init__(self) -> None:
        ids = [c.client_id for c in self.clients]
        if len(set(ids)) != len(ids):
            raise InvalidArgumentError("duplicate client ids")
        all_uids: set[int] = set()
        for c in self.clients:
            overlap = all_uids.intersection(c.uids)
            if overlap:
                raise InvalidArgumentError(f"uids {sorted(overlap)} appear in two clients")
            all_uids.update(c.uids)
        object.__setattr__(self, "_by_id", {c.client_id: c for c in self.clients})

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @property
    def client_ids(self) -> tuple[int, ...]:
        return tuple(sorted(c.client_id for c in self.clients))

    @property
    def total_points(self) -> int:
        return sum(c.size for c in self.clients)

    def has_client(self, client_id: int) -> bool:
        return client_id in self._by_id  # type: ignore[attr-defined]

    def client(self, client_id: int) -> ClientDataset:
        try:
            return self._by_id[client_id]  # type: ignore[attr-defined]
        except KeyError:
            raise NotFoundError(f"client {client_id} not in federation") from None

    def min_client_size(self) -> int:
        return min((c.size for c in self.clients), default=0)


@dataclass(frozen=True)
class SamplingSizes:
    """Integer per-round sampling sizes and the budgets they realize."""

    clients_per_round: int
    batch_size: int
    rho_sample_realized: float
    rho_client_realized: float


@dataclass(frozen=True)
class HyperParams:
    """Training schedule and sampling sizes for one run.

    total_steps is split into rounds of local_steps iterations each; a
    round samples clients_per_round clients with replacement and every
    selected client draws one mini-batch per iteration.
    """

    num_clients: int
    samples_per_client: int
    total_steps: int
    local_steps: int
    clients_per_round: int
    batch_size: int
    lr: float
    rho_sample: float
    rho_client: float
    seed: int
    storage_mode: str = FULL_HISTORY

    def __post_init__(self) -> None:
        for name in ("num_clients", "samples_per_client", "total_steps",
                     "local_steps", "clients_per_round", "batch_size"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.total_steps % self.local_steps != 0:
            raise InvalidArgumentError(
                f"total_steps={self.total_steps} must be a multiple of "
                f"local_steps={self.local_steps}"
            )
        if self.batch_size > self.samples_per_client:
            raise InvalidArgumentError("batch_size exceeds samples_per_client")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise InvalidArgumentError("lr must be positive and finite")
        if self.storage_mode not in _STORAGE_MODES:
            raise InvalidArgumentError(f"unknown storage_mode {self.storage_mode!r}")

    @property
    def rounds(self) -> int:
        return self.total_steps // self.local_steps

    @property
    def rho_sample_realized(self) -> float:
        return (self.batch_size * self.clients_per_round * self.total_steps) / (
            self.num_clients * self.samples_per_client
        )

    @property
    def rho_client_realized(self) -> float:
        return (self.clients_per_round * self.total_steps) / (
            self.local_steps * self.num_clients
        )

    @classmethod
    def from_budgets(
        cls,
        *,
        rho_sample: float,
        rho_client: float,
        num_clients: int,
        samples_per_client: int,
        total_steps: int,
        local_steps: int,
        lr: float,
        seed: int,
        storage_mode: str = FULL_HISTORY,
    ) -> "HyperParams":
        sizes = derive_sampling_sizes(
            rho_sample=rho_sample,
            rho_client=rho_client,
            num_clients=num_clients,
            samples_per_client=samples_per_client,
            total_steps=total_steps,
            local_steps=local_steps,
        )
        return cls(
            num_clients=num_clients,
            samples_per_client=samples_per_client,
            total_steps=total_steps,
            local_steps=local_steps,
            clients_per_round=sizes.clients_per_round,
            batch_size=sizes.batch_size,
            lr=lr,
            rho_sample=rho_sample,
            rho_client=rho_client,
            seed=seed,
            storage_mode=storage_mode,
        )


@dataclass(frozen=True)
class UnlearnRequest:
    """A deletion request issued as of training iteration issue_step."""

    kind: str  # "sample" or "client"
    target_client: int
    target_uid: int | None
    issue_step: int

    def __post_init__(self) -> None:
        if self.kind not in ("sample", "client"):
            raise InvalidArgumentError(f"unknown request kind {self.kind!r}")
        if self.kind == "sample" and self.target_uid is None:
            raise InvalidArgumentError("sample request needs a target_uid")
        if self.issue_step < 1:
            raise InvalidArgumentError("issue_step must be >= 1")


def _round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


def derive_sampling_sizes(
    *,
    rho_sample: float,
    rho_client: float,
    num_clients: int,
    samples_per_client: int,
    total_steps: int,
    local_steps: int,
) -> SamplingSizes:
    """Derive integer (clients_per_round, batch_size) from the target
    participation budgets.

    Fractional values are rounded half-up and clamped to feasible
    ranges; the realized budgets are recomputed from the integers so
    callers always see what the run will actually consume. If the batch
    size implied by the budgets exceeds the client dataset size before
    rounding, no feasible batch size exists and an error is raised.
    """
    if not (0 < rho_sample <= 1) or not (0 < rho_client <= 1):
        raise InvalidArgumentError("budgets must lie in (0, 1]")
    for name, value in (
        ("num_clients", num_clients),
        ("samples_per_client", samples_per_client),
        ("total_steps", total_steps),
        ("local_steps", local_steps),
    ):
        if value < 1:
            raise InvalidArgumentError(f"{name} must be >= 1")
    if total_steps % local_steps != 0:
        raise InvalidArgumentError("total_steps must be a multiple of local_steps")

    rho_s = Fraction(rho_sample)
    rho_c = Fraction(rho_client)
    clients_exact = rho_c * local_steps * num_clients / total_steps
    batch_exact = rho_s * samples_per_client / (rho_c * local_steps)
    if batch_exact > samples_per_client:
        raise InfeasibleBudgetError(
            f"implied batch size {float(batch_exact):g} exceeds client size "
            f"{samples_per_client}; budgets are infeasible"
        )
    clients_per_round = max(1, _round_half_up(clients_exact))
    batch_size = min(samples_per_client, max(1, _round_half_up(batch_exact)))
    realized_sample = (batch_size * clients_per_round * total_steps) / (
        num_clients * samples_per_client
    )
    realized_client = (clients_per_round * total_steps) / (local_steps * num_clients)
    return SamplingSizes(
        clients_per_round=clients_per_round,
        batch_size=batch_size,
        rho_sample_realized=realized_sample,
        rho_client_realized=realized_client,
    )


def _class_means(classes: int, dim: int, scale: float = 2.0) -> np.ndarray:
    """Fixed per-class means: scaled unit directions, wrapping with an
    amplitude step once class count exceeds the dimension."""
    means = np.zeros((classes, dim), dtype=np.float64)
    for c in range(classes):
        means[c, c % dim] = scale * (1 + c // dim)
    return means


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(int)
    shortfall = total - int(counts.sum())
    if shortfall > 0:
        remainders = raw - counts
        order = np.lexsort((np.arange(len(raw)), -remainders))
        for idx in order[:shortfall]:
            counts[idx] += 1
    return counts


def generate_synthetic(
    *,
    num_clients: int,
    samples_per_client: int,
    dim: int,
    classes: int,
    beta: float,
    seed: int,
) -> FederatedDataset:
    """Generate a label-skewed synthetic federation.

    Per-client label proportions are drawn from a symmetric Dirichlet
    with concentration beta (small beta: heterogeneous clients; large
    beta: near-uniform). Features are unit-variance Gaussians around
    fixed per-class means. Fully deterministic given the seed.
    """
    if num_clients < 1 or samples_per_client < 1 or dim < 1 or classes < 1:
        raise InvalidArgumentError("num_clients, samples_per_client, dim, classes must be >= 1")
    if beta <= 0:
        raise InvalidArgumentError("beta must be positive")
    rng = substream(seed, DOMAIN_DATA)
    means = _class_means(classes, dim)
    clients = []
    next_uid = 0
    for client_id in range(num_clients):
        if classes == 1:
            proportions = np.ones(1)
        else:
            proportions = rng.dirichlet(np.full(classes, beta))
        counts = _largest_remainder_counts(proportions, samples_per_client)
        labels = np.repeat(np.arange(classes), counts)
        rng.shuffle(labels)
        points = []
        for label in labels:
            feats = rng.normal(loc=means[label], scale=1.0, size=dim)
            points.append(DataPoint(uid=next_uid, features=feats, label=float(label)))
            next_uid += 1
        clients.append(ClientDataset(client_id=client_id, points=tuple(points)))
    return FederatedDataset(
        clients=tuple(clients),
        classes=classes,
        dim=dim,
        declared_samples_per_client=samples_per_client,
        seed=seed,
    )


def remove_sample(dataset: FederatedDataset, client_id: int, uid: int) -> FederatedDataset:
    """Return a copy of the federation without one point. Order and uids
    of all other points are unchanged."""
    client = dataset.client(client_id)
    if not client.has_uid(uid):
        raise NotFoundError(f"uid {uid} not in client {client_id}")
    if client.size == 1:
        raise EmptyFederationError(
            f"removing uid {uid} would leave client {client_id} empty"
        )
    new_points = tuple(p for p in client.points if p.uid != uid)
    new_client = ClientDataset(client_id=client_id, points=new_points)
    clients = tuple(new_client if c.client_id == client_id else c for c in dataset.clients)
    return FederatedDataset(
        clients=clients,
        classes=dataset.classes,
        dim=dataset.dim,
        declared_samples_per_client=dataset.declared_samples_per_client,
        seed=dataset.seed,
    )


def remove_client(dataset: FederatedDataset, client_id: int) -> FederatedDataset:
    """Return a copy of the federation without one client."""
    dataset.client(client_id)
    clients = tuple(c for c in dataset.clients if c.client_id != client_id)
    if not clients:
        raise EmptyFederationError("removing the last client leaves an empty federation")
    return FederatedDataset(
        clients=clients,
        classes=dataset.classes,
        dim=dataset.dim,
        declared_samples_per_client=dataset.declared_samples_per_client,
        seed=dataset.seed,
    )


_EXPORT_HEADER = "fedunlab-dataset v1 encoding=decimal-text"


def export_dataset(dataset: FederatedDataset) -> str:
    """Serialize to line-delimited text that round-trips bit-exactly.

    Floats are written with repr, which Python guarantees to round-trip
    to the identical double.
    """
    lines = [_EXPORT_HEADER]
    lines.append(
        "meta clients={} declared_samples={} dim={} classes={} seed={}".format(
            dataset.num_clients,
            dataset.declared_samples_per_client,
            dataset.dim,
            dataset.classes,
            dataset.seed,
        )
    )
    for client in dataset.clients:
        lines.append(f"client {client.client_id}")
        for p in client.points:
            feats = ",".join(repr(float(x)) for x in p.features)
            lines.append(f"point {p.uid} {repr(p.label)} {feats}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def import_dataset(text: str) -> FederatedDataset:
    """Parse the export format back into an identical dataset."""
    lines = text.splitlines()
    if not lines or lines[0] != _EXPORT_HEADER:
        raise InvalidArgumentError("not a fedunlab dataset file (bad header)")
    if lines[-1] != "end":
        raise InvalidArgumentError("truncated dataset file (missing end marker)")
    meta = lines[1].split()
    if len(meta) != 6 or meta[0] != "meta":
        raise InvalidArgumentError("malformed meta record")
    fields = dict(part.split("=", 1) for part in meta[1:])
    clients: list[ClientDataset] = []
    current_id: int | None = None
    current_points: list[DataPoint] = []

    def flush() -> None:
        if current_id is not None:
            clients.append(ClientDataset(client_id=current_id, points=tuple(current_points)))

    for line in lines[2:-1]:
        parts = line.split(" ", 3)
        if parts[0] == "client":
            flush()
            current_id = int(parts[1])
            current_points = []
        elif parts[0] == "point":
            if current_id is None:
                raise InvalidArgumentError("point record before any client record")
            uid = int(parts[1])
            label = float(parts[2])
            feats = np.array([float(x) for x in parts[3].split(",")], dtype=np.float64)
            current_points.append(DataPoint(uid=uid, features=feats, label=label))
        else:
            raise InvalidArgumentError(f"unknown record type {parts[0]!r}")
    flush()
    return FederatedDataset(
        clients=tuple(clients),
        classes=int(fields["classes"]),
        dim=int(fields["dim"]),
        declared_samples_per_client=int(fields["declared_samples"]),
        seed=int(fields["seed"]),
    )


def dataset_digest(dataset: FederatedDataset) -> str:
    """64-bit FNV-1a digest of the canonical export, as 16 hex chars."""
    data = export_dataset(dataset).encode("utf-8")
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return f"{h:016x}"
