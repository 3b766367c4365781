"""Synchronous federated rounds: broadcast, local training, barrier, aggregation."""

from __future__ import annotations

import json
import socket
import struct
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..nn.checkpoint import load_checkpoint, save_checkpoint
from ..nn.network import Model
from ..nn.optim import DivergenceError
from ..nn.params import ParamSet
from ..training import EarlyStopping, TrainConfig, early_stop, evaluate_loss, frame_logits, train_epoch
from .aggregate import ClientUpdate, fedavg_aggregate, fedma_aggregate
from .partition import ClientShard, RoundConfig


class FederationError(RuntimeError):
    pass


def local_train(shard: ClientShard, global_params: ParamSet, model: Model, cfg: TrainConfig,
                local_epochs: int, seed, start_epoch: int = 0, head_only: bool = True,
                round_index: int = 0) -> ClientUpdate:
    """Train a private copy of the global model on one shard.

    The learning-rate schedule is indexed by ``start_epoch + e`` so that
    decay follows the cumulative epoch count across rounds.
    """
    if shard.n_k == 0:
        raise FederationError(f"client {shard.client_id} has an empty shard")
    local = model.with_params(global_params.copy())
    rng = np.random.default_rng(seed)
    opt = cfg.new_state(start_epoch)
    t0 = time.perf_counter()
    loss = float("nan")
    try:
        for e in range(local_epochs):
            opt.epoch = start_epoch + e
            loss = train_epoch(local, shard.x, shard.y, opt, cfg, rng, head_only)
    except DivergenceError as exc:
        raise FederationError(f"round {round_index}, client {shard.client_id}: {exc}") from exc
    return ClientUpdate(shard.client_id, local.params, shard.n_k, time.perf_counter() - t0, local_epochs, loss)


class LoopbackTransport:
    """Moves ParamSets across a real TCP socket on 127.0.0.1 as checkpoint bytes."""

    def __init__(self):
        self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._server.bind(("127.0.0.1", 0))
        self._server.listen(8)
        self.address = self._server.getsockname()
        self.bytes_sent = 0

    def close(self) -> None:
        self._server.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    @staticmethod
    def _recv_exact(conn: socket.socket, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = conn.recv(min(1 << 20, n - len(buf)))
            if not chunk:
                raise FederationError(f"connection closed after {len(buf)} of {n} bytes")
            buf.extend(chunk)
        return bytes(buf)

    def transfer(self, params: ParamSet) -> ParamSet:
        """Send ``params`` from a client thread; return what the server decoded."""
        payload = save_checkpoint(params)
        errors = []

        def send():
            try:
                with socket.create_connection(self.address) as s:
                    s.sendall(struct.pack("<Q", len(payload)) + payload)
            except OSError as exc:  # surfaced below
                errors.append(exc)

        sender = threading.Thread(target=send)
        sender.start()
        conn, _ = self._server.accept()
        with conn:
            (n,) = struct.unpack("<Q", self._recv_exact(conn, 8))
            data = self._recv_exact(conn, n)
        sender.join()
        if errors:
            raise FederationError(f"loopback send failed: {errors[0]}")
        self.bytes_sent += 8 + n
        received, _ = load_checkpoint(data, expect=params)
        return received


@dataclass
class RoundRecord:
    round: int
    clients: list[dict]
    aggregate_time_s: float
    round_time_s: float
    cumulative_time_s: float
    val_loss: float
    val_accuracy: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class FederatedResult:
    params: ParamSet
    history: list[RoundRecord] = field(default_factory=list)
    best_round: int = 0
    early_stopped: bool = False

    @property
    def train_time_s(self) -> float:
        return self.history[-1].cumulative_time_s if self.history else 0.0


def aggregate(updates: Sequence[ClientUpdate], model: Model, aggregator: str) -> ParamSet:
    if aggregator == "fedavg":
        return fedavg_aggregate(updates)
    if aggregator == "fedma":
        return fedma_aggregate(updates, model.match_units)
    raise ValueError(f"unknown aggregator {aggregator!r}")


def run_federated_training(shards: Sequence[ClientShard], model: Model, cfg: RoundConfig,
                           train_cfg: TrainConfig = TrainConfig(), seed: int = 0,
                           val: tuple[np.ndarray, np.ndarray] | None = None,
                           stopping: EarlyStopping | None = None, head_only: bool = True,
                           transport: LoopbackTransport | None = None,
                           on_round: Callable[[RoundRecord], None] | None = None) -> FederatedResult:
    """Run ``cfg.total_rounds`` synchronous rounds from ``model.params``.

    With ``stopping`` and ``val`` given, rounds are early-stopped on
    validation loss and the best round's global model is returned.
    """
    if len(shards) != cfg.n_clients:
        raise FederationError(f"expected {cfg.n_clients} shards, got {len(shards)}")
    global_params = model.params.copy()
    result = FederatedResult(global_params.copy())
    val_losses: list[float] = []
    cumulative = 0.0
    for r in range(cfg.total_rounds):
        t_round = time.perf_counter()
        updates = []
        for shard in shards:
            sent = transport.transfer(global_params) if transport else global_params
            upd = local_train(shard, sent, model, train_cfg, cfg.local_epochs,
                              seed=[seed, r, shard.client_id],
                              start_epoch=r * cfg.local_epochs, head_only=head_only, round_index=r)
            if transport:
                upd.params = transport.transfer(upd.params)
            updates.append(upd)
        t_agg = time.perf_counter()
        global_params = aggregate(updates, model, cfg.aggregator)
        agg_time = time.perf_counter() - t_agg
        round_time = time.perf_counter() - t_round
        cumulative += round_time
        vl, va = float("nan"), float("nan")
        if val is not None and len(val[0]):
            evaluated = model.with_params(global_params)
            vl = evaluate_loss(evaluated, val[0], val[1], head_only)
            va = float(np.mean(frame_logits(evaluated, val[0], head_only).argmax(axis=1) == val[1]))
        rec = RoundRecord(r, [{"client_id": u.client_id, "n_k": u.n_k, "train_time_s": u.train_time_s,
                               "train_loss": u.train_loss} for u in updates],
                          agg_time, round_time, cumulative, vl, va)
        result.history.append(rec)
        if on_round:
            on_round(rec)
        if stopping is not None and val is not None:
            val_losses.append(vl)
            stop, best = early_stop(val_losses, stopping.patience, stopping.min_delta)
            if best == r:
                result.params = global_params.copy()
                result.best_round = r
            if stop:
                result.early_stopped = True
                break
        else:
            result.params = global_params
            result.best_round = r
    return result


def write_history(path: str | Path, history: Sequence[RoundRecord]) -> None:
    Path(path).write_text("".join(rec.to_json() + "\n" for rec in history))
