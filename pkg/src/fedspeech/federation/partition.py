"""Subject-level splits of a training set across simulated devices."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

IID = "iid"
DIRICHLET = "dirichlet"


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class RoundConfig:
    n_clients: int = 5
    local_epochs: int = 1
    total_rounds: int = 25
    aggregator: str = "fedavg"
    partition: str = IID
    alpha: float = 0.5

    def __post_init__(self):
        if self.n_clients < 2:
            raise ValueError("federation needs at least two clients")
        if self.aggregator not in ("fedavg", "fedma"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")
        if self.partition not in (IID, DIRICHLET):
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.partition == DIRICHLET and self.alpha <= 0:
            raise ValueError("Dirichlet alpha must be positive")
        if self.local_epochs < 0 or self.total_rounds < 0:
            raise ValueError("epochs and rounds must be non-negative")


@dataclass
class ClientShard:
    client_id: int
    subjects: tuple[str, ...]
    x: np.ndarray
    y: np.ndarray
    frame_index: np.ndarray

    @property
    def n_k(self) -> int:
        return len(self.y)


def _by_class(subject_labels: Mapping[str, int], rng: np.random.Generator) -> list[list[str]]:
    classes = sorted(set(subject_labels.values()))
    out = []
    for c in classes:
        members = sorted(s for s, l in subject_labels.items() if l == c)
        out.append([members[i] for i in rng.permutation(len(members))])
    return out


def iid_partition(subject_labels: Mapping[str, int], n_clients: int, rng: np.random.Generator) -> list[list[str]]:
    """Class-stratified round-robin; the dealing position carries over between classes."""
    shards: list[list[str]] = [[] for _ in range(n_clients)]
    pos = 0
    for members in _by_class(subject_labels, rng):
        for s in members:
            shards[pos % n_clients].append(s)
            pos += 1
    return shards


def dirichlet_proportions(alpha: float, n_clients: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """(n_classes, n_clients) matrix; each row is a draw from Dirichlet(alpha * 1)."""
    return rng.dirichlet(np.full(n_clients, alpha), size=n_classes)


def dirichlet_partition(subject_labels: Mapping[str, int], n_clients: int, alpha: float,
                        rng: np.random.Generator, max_tries: int = 100) -> list[list[str]]:
    groups = _by_class(subject_labels, rng)
    for _ in range(max_tries):
        props = dirichlet_proportions(alpha, n_clients, len(groups), rng)
        shards: list[list[str]] = [[] for _ in range(n_clients)]
        for members, p in zip(groups, props):
            cuts = (np.cumsum(p) * len(members)).round().astype(int)[:-1]
            for k, part in enumerate(np.split(np.array(members, dtype=object), cuts)):
                shards[k].extend(part.tolist())
        if all(shards):
            return shards
    raise PartitionError(f"no non-empty Dirichlet(alpha={alpha}) split into {n_clients} shards "
                         f"after {max_tries} draws")


def partition_subjects(subject_labels: Mapping[str, int], cfg: RoundConfig, seed: int) -> list[list[str]]:
    if len(subject_labels) < cfg.n_clients:
        raise PartitionError(f"{len(subject_labels)} subjects cannot fill {cfg.n_clients} non-empty shards")
    rng = np.random.default_rng(seed)
    if cfg.partition == IID:
        shards = iid_partition(subject_labels, cfg.n_clients, rng)
    else:
        shards = dirichlet_partition(subject_labels, cfg.n_clients, cfg.alpha, rng)
    return [sorted(s) for s in shards]


def partition_dataset(x: np.ndarray, y: np.ndarray, frame_subjects: Sequence[str],
                      subject_labels: Mapping[str, int], cfg: RoundConfig, seed: int) -> list[ClientShard]:
    """Split frames by subject so that no subject's frames straddle two shards."""
    frame_subjects = np.asarray(frame_subjects, dtype=object)
    shards = []
    for k, subjects in enumerate(partition_subjects(subject_labels, cfg, seed)):
        idx = np.flatnonzero(np.isin(frame_subjects, subjects))
        if len(idx) == 0:
            raise PartitionError(f"client {k} received subjects {subjects} without any frames")
        shards.append(ClientShard(k, tuple(subjects), x[idx], y[idx], idx))
    return shards
