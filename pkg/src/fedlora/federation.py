"""The federated round protocol: sample clients, broadcast the global
trainable tensors, train locally, upload, aggregate by weighted average.

Two modes share one code path: "full" exchanges every model parameter
(plain federated averaging) and "lora" exchanges only the adapter factors
plus whatever the freeze policy leaves trainable. The frozen base never
moves after initialization. All randomness derives from the master seed, so
single-threaded runs are bit-reproducible; sampled clients within a round
are independent and may run on a thread pool.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass

import numpy as np

from . import adapters as A
from . import models as M
from . import wire
from .data import Dataset, PartitionMap
from .errors import ConfigError, ProtocolError
from .tensor import SGDMomentum, Tensor, softmax_cross_entropy

_SAMPLE_TAG = 101
_CLIENT_TAG = 202


@dataclass
class FederationConfig:
    num_clients: int = 100
    sample_fraction: float = 0.1
    rounds: int = 100
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    mode: str = "lora"  # "full" | "lora"
    rank: int = 32
    alpha_factor: float = 16.0  # adapter alpha = alpha_factor * rank
    freeze_variant: str = "plus_norm_plus_final_fc"
    quant_bits: int | None = None
    master_seed: int = 0
    parallel_clients: int = 1

    def __post_init__(self):
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError(f"sample_fraction must be in (0, 1], got {self.sample_fraction}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.mode not in ("full", "lora"):
            raise ConfigError(f"mode must be 'full' or 'lora', got '{self.mode}'")
        if self.mode == "lora" and self.rank < 1:
            raise ConfigError(f"rank must be >= 1, got {self.rank}")
        if self.quant_bits not in (None, 2, 4, 8):
            raise ConfigError(f"quant_bits must be one of None/2/4/8, got {self.quant_bits}")
        if self.parallel_clients < 1:
            raise ConfigError(f"parallel_clients must be >= 1, got {self.parallel_clients}")

    @property
    def alpha(self) -> float:
        return self.alpha_factor * self.rank


@dataclass
class ClientUpdate:
    client_id: int
    num_examples: int
    tensors: dict[str, np.ndarray]
    loss: float
    accuracy: float
    steps: int


@dataclass
class RoundReport:
    round_index: int
    sampled_clients: list[int]
    test_accuracy: float
    train_loss: float
    uplink_bytes: int
    downlink_bytes: int
    wall_time_s: float


def sample_clients(round_index: int, cfg: FederationConfig) -> list[int]:
    """Uniform sample without replacement, deterministic per (seed, round)."""
    k = int(np.floor(cfg.num_clients * cfg.sample_fraction + 0.5))
    if k < 1:
        raise ConfigError(
            f"sample_fraction {cfg.sample_fraction} of {cfg.num_clients} clients rounds to 0"
        )
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed, _SAMPLE_TAG, round_index])
    )
    ids = rng.choice(cfg.num_clients, size=k, replace=False)
    return sorted(int(i) for i in ids)


def _client_rng(cfg: FederationConfig, client_id: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed, _CLIENT_TAG, round_index, client_id])
    )


def aggregate(updates: list[ClientUpdate]) -> dict[str, np.ndarray]:
    """Weighted mean of the updates, weights n_k / n, in client-id order.

    Accumulates in float64 internally and returns float32 tensors.
    """
    if not updates:
        raise ProtocolError("aggregate requires at least one update")
    updates = sorted(updates, key=lambda u: u.client_id)
    reference = updates[0].tensors
    names = list(reference)
    for u in updates[1:]:
        if list(u.tensors) != names:
            raise ProtocolError(
                f"client {u.client_id} update tensor set does not match the global set"
            )
        for name in names:
            if u.tensors[name].shape != reference[name].shape:
                raise ProtocolError(
                    f"client {u.client_id} tensor '{name}' has shape "
                    f"{u.tensors[name].shape}, expected {reference[name].shape}"
                )
    n = sum(u.num_examples for u in updates)
    out: dict[str, np.ndarray] = {}
    for name in names:
        acc = np.zeros(reference[name].shape, np.float64)
        for u in updates:
            acc += (u.num_examples / n) * u.tensors[name].astype(np.float64)
        out[name] = acc.astype(np.float32)
    return out


class _ModelHandle:
    """One materialized model: base params plus (in lora mode) its adapters."""

    def __init__(self, spec: M.ModelSpec, params: M.ParamSet,
                 adapted: A.AdaptedModel | None):
        self.spec = spec
        self.params = params
        self.adapted = adapted

    def forward(self, x) -> Tensor:
        if self.adapted is not None:
            return self.adapted.forward(x)
        return M.forward(self.spec, self.params, x)

    def trainable(self) -> list[tuple[str, Tensor]]:
        if self.adapted is not None:
            return self.adapted.trainable()
        named = [(M.ParamSet.flat_name(k), t) for k, t in self.params.items()]
        named.sort(key=lambda kv: kv[0])
        return named

    def load_trainables(self, values: dict[str, np.ndarray]) -> None:
        named = self.trainable()
        names = [n for n, _ in named]
        if sorted(values) != names:
            raise ProtocolError("received tensor set does not match the trainable set")
        for name, t in named:
            if values[name].shape != t.data.shape:
                raise ProtocolError(
                    f"tensor '{name}' has shape {values[name].shape}, "
                    f"expected {t.data.shape}"
                )
            t.data[...] = values[name]


def _build_handle(cfg: FederationConfig, spec: M.ModelSpec, params: M.ParamSet) -> _ModelHandle:
    if cfg.mode == "full":
        for _, t in params.items():
            t.requires_grad = True
        return _ModelHandle(spec, params, None)
    adapted = A.attach_adapters(
        spec, params, cfg.rank, cfg.alpha,
        A.FreezePolicy(cfg.freeze_variant), seed=cfg.master_seed,
    )
    return _ModelHandle(spec, params, adapted)


def _clone_handle(handle: _ModelHandle) -> _ModelHandle:
    """Client-private copy: trainable tensors are deep-copied, the frozen
    base is shared read-only."""
    params = M.ParamSet()
    for key, t in handle.params.items():
        if t.requires_grad:
            clone = Tensor(t.data.copy(), requires_grad=True)
            params[key] = clone
        else:
            params[key] = t
    if handle.adapted is None:
        return _ModelHandle(handle.spec, params, None)
    pairs = {
        name: A.AdapterPair(
            pair.layer, pair.kind,
            Tensor(pair.b.data.copy(), requires_grad=True),
            Tensor(pair.a.data.copy(), requires_grad=True),
            pair.rank, pair.alpha,
        )
        for name, pair in handle.adapted.adapters.items()
    }
    adapted = A.AdaptedModel(handle.spec, params, pairs, handle.adapted.policy)
    return _ModelHandle(handle.spec, params, adapted)


def local_train(
    cfg: FederationConfig,
    handle: _ModelHandle,
    client_id: int,
    round_index: int,
    received: dict[str, np.ndarray],
    dataset: Dataset,
    indices: np.ndarray,
) -> ClientUpdate:
    """Load the broadcast trainables, run local epochs of minibatch SGD with
    momentum (buffers reset each round), and return the trained tensors."""
    if len(indices) == 0:
        raise ConfigError(f"client {client_id} has an empty dataset")
    client = _clone_handle(handle)
    client.load_trainables(received)
    named = client.trainable()
    opt = SGDMomentum([t for _, t in named], cfg.lr, cfg.momentum)
    rng = _client_rng(cfg, client_id, round_index)

    loss_sum = 0.0
    correct = 0
    seen = 0
    steps = 0
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(indices))
        for start in range(0, len(order), cfg.batch_size):
            batch = indices[order[start : start + cfg.batch_size]]
            x = dataset.images[batch]
            y = dataset.labels[batch]
            opt.zero_grad()
            logits = client.forward(x)
            loss = softmax_cross_entropy(logits, y)
            loss.backward()
            opt.step()
            steps += 1
            loss_sum += float(loss.data) * len(batch)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            seen += len(batch)
    return ClientUpdate(
        client_id=client_id,
        num_examples=len(indices),
        tensors={name: t.data.copy() for name, t in named},
        loss=loss_sum / seen,
        accuracy=correct / seen,
        steps=steps,
    )


def evaluate(handle: _ModelHandle, dataset: Dataset, batch_size: int = 256) -> float:
    correct = 0
    for start in range(0, len(dataset), batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits = handle.forward(x)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return correct / len(dataset)


class FederatedRun:
    """Holds the server-side state of one experiment."""

    def __init__(
        self,
        cfg: FederationConfig,
        spec: M.ModelSpec,
        params: M.ParamSet,
        train_set: Dataset,
        test_set: Dataset,
        partition: PartitionMap,
    ):
        if len(partition.clients) != cfg.num_clients:
            raise ConfigError(
                f"partition has {len(partition.clients)} clients, config says {cfg.num_clients}"
            )
        self.cfg = cfg
        self.train_set = train_set
        self.test_set = test_set
        self.partition = partition
        self.server = _build_handle(cfg, spec, params)
        self.ledger = wire.CostLedger()
        self.reports: list[RoundReport] = []

    def run_round(self, round_index: int) -> RoundReport:
        cfg = self.cfg
        started = time.perf_counter()
        sampled = sample_clients(round_index, cfg)

        global_named = [(name, t.data) for name, t in self.server.trainable()]
        downlink = wire.serialize(
            wire.encode_tensors(global_named, cfg.quant_bits),
            round_index=round_index, sender=wire.SERVER_SENDER,
        )
        received = wire.decode_tensors(wire.deserialize(downlink)[1])

        def train_one(cid: int) -> tuple[ClientUpdate, int]:
            update = local_train(
                cfg, self.server, cid, round_index, received,
                self.train_set, self.partition.clients[cid],
            )
            named = sorted(update.tensors.items())
            uplink = wire.serialize(
                wire.encode_tensors(named, cfg.quant_bits),
                round_index=round_index, sender=cid,
            )
            update.tensors = wire.decode_tensors(wire.deserialize(uplink)[1])
            return update, len(uplink)

        if cfg.parallel_clients > 1:
            with concurrent.futures.ThreadPoolExecutor(cfg.parallel_clients) as pool:
                results = list(pool.map(train_one, sampled))
        else:
            results = [train_one(cid) for cid in sampled]

        updates = [u for u, _ in results]
        uplink_bytes = results[0][1]
        merged = aggregate(updates)
        self.server.load_trainables(merged)

        accuracy = evaluate(self.server, self.test_set)
        total_examples = sum(u.num_examples for u in updates)
        train_loss = sum(u.loss * u.num_examples for u in updates) / total_examples
        self.ledger.record(round_index, len(downlink), uplink_bytes)
        report = RoundReport(
            round_index=round_index,
            sampled_clients=sampled,
            test_accuracy=accuracy,
            train_loss=train_loss,
            uplink_bytes=uplink_bytes,
            downlink_bytes=len(downlink),
            wall_time_s=time.perf_counter() - started,
        )
        self.reports.append(report)
        return report

    def run(self) -> list[RoundReport]:
        for r in range(self.cfg.rounds):
            self.run_round(r)
        return self.reports


def run_experiment(
    cfg: FederationConfig,
    build_model,
    train_set: Dataset,
    test_set: Dataset,
    partition: PartitionMap,
) -> list[RoundReport]:
    """Build the model from `build_model(seed)` and run all rounds."""
    spec, params = build_model(cfg.master_seed)
    run = FederatedRun(cfg, spec, params, train_set, test_set, partition)
    return run.run()
