"""Federated averaging over simulated laser-manufacturer clients.

Each round the server broadcasts the global parameters, every client
trains locally from them with Adam, and the server replaces the global
model with the sample-count-weighted mean of the returned parameters.
All messages cross an in-process transport as FLLP bytes.
"""

from __future__ import annotations

import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from fedlaser.adam import Adam
from fedlaser.features import ClientDataset, NormStats
from fedlaser.metrics import Metrics, compute_metrics
from fedlaser.model import (Batch, ModelConfig, ParamSet, batch_loss, init_params,
                            predict, to_batch, train_epoch)
from fedlaser.wire import deserialize_params, serialize_params

log = logging.getLogger(__name__)


@dataclass
class FedConfig:
    n_clients: int = 8
    n_rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    persistent_adam: bool = False
    threads: int = 1

    def __post_init__(self):
        for name in ("n_clients", "batch_size", "eval_every", "threads"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ValueError(f"federation.{name}: must be a positive integer, got {v!r}")
        for name in ("n_rounds", "local_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"federation.{name}: must be a non-negative integer, got {v!r}")
        if not self.lr >= 0:
            raise ValueError(f"federation.lr: must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ValueError(f"federation.lr_decay: must be in (0, 1], got {self.lr_decay}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1 and self.adam_eps > 0):
            raise ValueError("federation.adam_*: need 0 <= beta < 1 and eps > 0")

    def round_lr(self, round_index: int) -> float:
        """Learning rate used during round ``round_index`` (1-based)."""
        return self.lr * self.lr_decay ** (round_index - 1)

    def make_optimizer(self, round_index: int = 1) -> Adam:
        return Adam(lr=self.round_lr(round_index), beta1=self.adam_beta1,
                    beta2=self.adam_beta2, eps=self.adam_eps)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict) -> "FedConfig":
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ValueError(f"federation.{key}: unknown key")
        return cls(**d)


@dataclass
class ClientUpdate:
    client_id: int
    w_next: np.ndarray
    n_i: int
    local_loss: float


@dataclass
class RoundReport:
    round: int
    global_loss: float
    client_losses: Dict[int, float]
    metrics: Optional[Metrics] = None


@dataclass
class FederationResult:
    reports: List[RoundReport]
    params: ParamSet


# ---------------------------------------------------------------------------
# aggregation


def _check_updates(updates: Sequence[ClientUpdate]) -> List[ClientUpdate]:
    if not updates:
        raise ValueError("no client updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    length = ordered[0].w_next.shape
    for u in ordered:
        if u.w_next.shape != length:
            raise ValueError(
                f"client {u.client_id}: vector length {u.w_next.size} != {ordered[0].w_next.size}")
        if u.n_i < 1:
            raise ValueError(f"client {u.client_id}: n_i must be >= 1")
    return ordered


def fedavg(updates: Sequence[ClientUpdate]) -> np.ndarray:
    """Weighted mean ``sum_i (n_i / n) * w_i`` in ascending client-id order.

    Accumulated as offsets from the first client's vector with Kahan
    compensation, so identical inputs reproduce themselves exactly.
    """
    ordered = _check_updates(updates)
    total = float(sum(u.n_i for u in ordered))
    base = np.asarray(ordered[0].w_next, dtype=np.float64)
    acc = np.zeros_like(base)
    comp = np.zeros_like(base)
    for u in ordered[1:]:
        term = (u.n_i / total) * (u.w_next - base) - comp
        nxt = acc + term
        comp = (nxt - acc) - term
        acc = nxt
    return base + acc


def global_loss(updates: Sequence[ClientUpdate]) -> float:
    """Sample-count-weighted mean of the clients' local losses."""
    ordered = _check_updates(updates)
    total = float(sum(u.n_i for u in ordered))
    return float(np.sum([(u.n_i / total) * u.local_loss for u in ordered]))


# ---------------------------------------------------------------------------
# clients


def round_rng(seed: int, round_index: int, stream_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, stream_id])


def run_local_epochs(data: Batch, params: ParamSet, cfg: FedConfig, optimizer: Adam,
                     rng: np.random.Generator, dropout_rate: float):
    """``cfg.local_epochs`` passes; with zero epochs only the loss is evaluated."""
    if cfg.local_epochs == 0:
        return params, batch_loss(params, data)
    loss = float("nan")
    for _ in range(cfg.local_epochs):
        params, loss = train_epoch(data, params, optimizer, cfg.batch_size, rng, dropout_rate)
    return params, loss


def local_update(client: ClientDataset, w_t: np.ndarray, shapes, cfg: FedConfig,
                 model_cfg: ModelConfig, rng: np.random.Generator,
                 optimizer: Optional[Adam] = None, data: Optional[Batch] = None) -> ClientUpdate:
    """Train from the broadcast vector ``w_t`` on the client's own data."""
    if data is None:
        data = to_batch(client.samples)
    if len(data) < 1:
        raise ValueError(f"client {client.client_id} has no data")
    params = ParamSet.unflatten(w_t, shapes)
    optimizer = optimizer if optimizer is not None else cfg.make_optimizer()
    params, loss = run_local_epochs(data, params, cfg, optimizer, rng, model_cfg.dropout_rate)
    return ClientUpdate(client.client_id, params.flatten(), client.n_i, loss)


class InProcessTransport:
    """Mailboxes keyed by recipient; payloads are raw bytes only."""

    def __init__(self):
        self._boxes: Dict[str, List[bytes]] = {}
        self._lock = threading.Lock()

    def send(self, recipient: str, payload: bytes) -> None:
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("transport carries bytes only")
        with self._lock:
            self._boxes.setdefault(recipient, []).append(bytes(payload))

    def recv(self, recipient: str) -> bytes:
        with self._lock:
            box = self._boxes.get(recipient)
            if not box:
                raise LookupError(f"no message for {recipient}")
            return box.pop(0)

    def pending(self, recipient: str) -> int:
        return len(self._boxes.get(recipient, []))


META_N = "__meta.n_i"
META_LOSS = "__meta.local_loss"


def encode_update(update: ClientUpdate, shapes) -> bytes:
    vector = np.concatenate([update.w_next, [float(update.n_i)], [update.local_loss]])
    return serialize_params(vector, list(shapes) + [(META_N, (1,)), (META_LOSS, (1,))])


def decode_update(client_id: int, payload: bytes) -> ClientUpdate:
    vector, shapes = deserialize_params(payload)
    if [s[0] for s in shapes[-2:]] != [META_N, META_LOSS]:
        raise ValueError(f"client {client_id}: update message lacks metadata")
    return ClientUpdate(client_id, vector[:-2].copy(), int(vector[-2]), float(vector[-1]))


class Client:
    def __init__(self, dataset: ClientDataset, cfg: FedConfig, model_cfg: ModelConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.model_cfg = model_cfg
        self.data = to_batch(dataset.samples)
        self._optimizer: Optional[Adam] = None

    @property
    def address(self) -> str:
        return f"client-{self.dataset.client_id}"

    @property
    def reply_address(self) -> str:
        return f"server/{self.dataset.client_id}"

    def handle_round(self, round_index: int, transport: InProcessTransport) -> None:
        w_t, shapes = deserialize_params(transport.recv(self.address))
        if self.cfg.persistent_adam:
            if self._optimizer is None:
                self._optimizer = self.cfg.make_optimizer()
            optimizer = self._optimizer
            optimizer.lr = self.cfg.round_lr(round_index)
        else:
            optimizer = self.cfg.make_optimizer(round_index)
        rng = round_rng(self.cfg.seed, round_index, self.dataset.client_id)
        update = local_update(self.dataset, w_t, shapes, self.cfg, self.model_cfg, rng,
                              optimizer=optimizer, data=self.data)
        transport.send(self.reply_address, encode_update(update, shapes))


# ---------------------------------------------------------------------------
# server loop


def evaluate(params: ParamSet, test: Batch, norm: Optional[NormStats]) -> Metrics:
    """Held-out metrics; de-normalized to years when ``norm`` is given."""
    pred = predict(params, test)
    true = test.target
    if norm is not None:
        pred = norm.unscale("ttf_years", pred)
        true = norm.unscale("ttf_years", true)
    return compute_metrics(pred, true)


def run_federation(clients: Sequence[ClientDataset], cfg: FedConfig, model_cfg: ModelConfig,
                   test: Optional[Batch] = None, norm: Optional[NormStats] = None,
                   init: Optional[ParamSet] = None,
                   on_round: Optional[Callable[[RoundReport], None]] = None) -> FederationResult:
    """FedAvg for ``cfg.n_rounds`` rounds with every client in every round.

    Results depend only on the seeds: client RNG streams are keyed by
    (seed, round, client id) and aggregation runs in client-id order, so
    ``cfg.threads`` changes wall time only.
    """
    if not clients:
        raise ValueError("federation needs at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids {ids}")
    global_params = init if init is not None else init_params(
        model_cfg, np.random.default_rng(model_cfg.seed))
    shapes = global_params.layout
    w = global_params.flatten()
    workers = [Client(c, cfg, model_cfg) for c in sorted(clients, key=lambda c: c.client_id)]
    transport = InProcessTransport()
    reports: List[RoundReport] = []

    with ThreadPoolExecutor(max_workers=min(cfg.threads, len(workers))) as pool:
        for t in range(1, cfg.n_rounds + 1):
            message = serialize_params(w, shapes)
            for worker in workers:
                transport.send(worker.address, message)
            # full barrier: every client finishes before aggregation
            list(pool.map(lambda wk: wk.handle_round(t, transport), workers))
            updates = [decode_update(wk.dataset.client_id, transport.recv(wk.reply_address))
                       for wk in workers]
            w = fedavg(updates)
            report = RoundReport(
                round=t,
                global_loss=global_loss(updates),
                client_losses={u.client_id: u.local_loss for u in updates},
            )
            if test is not None and (t % cfg.eval_every == 0 or t == cfg.n_rounds):
                report.metrics = evaluate(ParamSet.unflatten(w, shapes), test, norm)
            reports.append(report)
            if on_round is not None:
                on_round(report)
            log.debug("round %d global loss %.6g", t, report.global_loss)
    return FederationResult(reports, ParamSet.unflatten(w, shapes))

