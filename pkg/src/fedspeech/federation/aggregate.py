"""Server-side aggregation: sample-weighted averaging and matched averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..nn.network import MatchUnit
from ..nn.params import Param, ParamSet
from .assignment import solve_assignment


class AggregationError(ValueError):
    pass


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamSet
    n_k: int
    train_time_s: float = 0.0
    local_epochs: int = 0
    train_loss: float = float("nan")

    def __post_init__(self):
        if self.n_k <= 0:
            raise AggregationError(f"client {self.client_id}: sample count must be positive, got {self.n_k}")


def _check_layouts(updates: Sequence[ClientUpdate]) -> None:
    if not updates:
        raise AggregationError("no client updates to aggregate")
    ref = updates[0].params
    for u in updates[1:]:
        err = ref.same_layout(u.params)
        if err:
            raise AggregationError(f"client {u.client_id} incompatible with client {updates[0].client_id}: {err}")


def _weights(updates: Sequence[ClientUpdate]) -> np.ndarray:
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    return n / n.sum()


def weighted_mean(tensors: Sequence[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """``sum_k w_k x_k`` computed as ``x_0 + sum_k w_k (x_k - x_0)``.

    Equal inputs therefore come back bit-identical.
    """
    base = tensors[0].astype(np.float64)
    acc = np.zeros_like(base)
    for w, t in zip(weights, tensors):
        acc += w * (t.astype(np.float64) - base)
    return (base + acc).astype(tensors[0].dtype)


def fedavg_aggregate(updates: Sequence[ClientUpdate]) -> ParamSet:
    _check_layouts(updates)
    w = _weights(updates)
    ref = updates[0].params
    out = ParamSet()
    for p in ref:
        value = weighted_mean([u.params[p.name] for u in updates], w)
        out.add(Param(p.name, p.kind, value, p.trainable))
    return out


# ---------------------------------------------------------------------------
# Matched averaging

def anchor_index(updates: Sequence[ClientUpdate]) -> int:
    """Client with the most samples; ties go to the smallest client id."""
    return min(range(len(updates)), key=lambda i: (-updates[i].n_k, updates[i].client_id))


def fedma_match_layer(client_rows: Sequence[np.ndarray], sizes: Sequence[int]) -> tuple[np.ndarray, list[np.ndarray]]:
    """Align each client's neurons (rows) to the anchor client and average them.

    Returns the sample-weighted mean of the aligned rows and, per client, the
    permutation ``perm`` such that ``rows[perm]`` is aligned with the anchor.
    """
    if not client_rows:
        raise AggregationError("no clients to match")
    shapes = {r.shape for r in client_rows}
    if len(shapes) != 1:
        raise AggregationError(f"clients disagree on layer width or neuron size: {sorted(shapes)}")
    sizes = list(sizes)
    a = min(range(len(sizes)), key=lambda i: (-sizes[i], i))
    anchor = client_rows[a].astype(np.float64)
    sq_anchor = (anchor ** 2).sum(axis=1)
    perms = []
    for k, rows in enumerate(client_rows):
        if k == a:
            perms.append(np.arange(len(rows)))
            continue
        r = rows.astype(np.float64)
        cost = sq_anchor[:, None] + (r ** 2).sum(axis=1)[None, :] - 2.0 * anchor @ r.T
        perm, _ = solve_assignment(np.maximum(cost, 0.0))
        perms.append(perm)
    w = np.asarray(sizes, dtype=np.float64) / float(sum(sizes))
    merged = weighted_mean([rows[p] for rows, p in zip(client_rows, perms)], w)
    return merged, perms


def _unit_rows(params: ParamSet, unit: MatchUnit) -> np.ndarray:
    m = params[unit.producer].shape[0]
    return np.concatenate([params[n].reshape(m, -1) for n in unit.names()], axis=1)


def apply_unit_permutation(params: ParamSet, unit: MatchUnit, perm: np.ndarray) -> None:
    """Reorder a unit's neurons in place: producer/traveler rows and consumer input columns."""
    m = params[unit.producer].shape[0]
    if sorted(perm.tolist()) != list(range(m)):
        raise AggregationError(f"{unit.producer}: not a permutation of {m} units")
    for n in unit.names():
        if params[n].shape[0] != m:
            raise AggregationError(f"{n}: leading dim {params[n].shape[0]} != {m} units of {unit.producer}")
        params[n] = params[n][perm]
    for n in unit.consumers:
        if params[n].shape[1] != m:
            raise AggregationError(f"{n}: input dim {params[n].shape[1]} != {m} units of {unit.producer}")
        params[n] = params[n][:, perm]


@dataclass
class FedMAResult:
    params: ParamSet
    permutations: dict[str, list[np.ndarray]] = field(default_factory=dict)


def fedma_aggregate(updates: Sequence[ClientUpdate], units: Sequence[MatchUnit]) -> ParamSet:
    return fedma_aggregate_detailed(updates, units).params


def fedma_aggregate_detailed(updates: Sequence[ClientUpdate], units: Sequence[MatchUnit]) -> FedMAResult:
    """One-pass matched averaging over every trainable match unit, input to output.

    Units whose producer is frozen are left in place; all tensors are then
    combined with the sample-weighted mean.
    """
    _check_layouts(updates)
    updates = sorted(updates, key=lambda u: u.client_id)
    aligned = [u.params.copy() for u in updates]
    sizes = [u.n_k for u in updates]
    perms_by_unit = {}
    for unit in units:
        if not aligned[0].param(unit.producer).trainable:
            continue
        try:
            rows = [_unit_rows(p, unit) for p in aligned]
        except ValueError as exc:
            raise AggregationError(f"{unit.producer}: {exc}") from exc
        _, perms = fedma_match_layer(rows, sizes)
        for p, perm in zip(aligned, perms):
            apply_unit_permutation(p, unit, perm)
        perms_by_unit[unit.producer] = perms
    merged = fedavg_aggregate([ClientUpdate(u.client_id, p, u.n_k) for u, p in zip(updates, aligned)])
    return FedMAResult(merged, perms_by_unit)
