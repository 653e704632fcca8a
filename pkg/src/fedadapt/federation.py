"""Federated protocol engine with exact communication accounting.

One round: broadcast the dense 32-bit global adapter, train a fresh low-rank
delta on every participating client, upload the quantized delta payloads,
and combine them by sample-count-weighted averaging in ascending client-id
order. GAN training and augmentation happen once per client before round 0.

Clients within a round may run on independent threads; every client owns its
state and rng, and the aggregation order is fixed, so results are identical
for any thread count.
"""

from __future__ import annotations

import concurrent.futures
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import qlora
from .adapter import AdapterConfig, AdapterParams, adapter_forward, adapter_loss, logits
from .encoder import ClassPrototypes, EmbeddingDataset
from .gan import AugmentationPolicy, GanConfig, augment, train_gan
from .tensor import AdamState, Matrix, Tape, adam_step, zero_grad

__all__ = [
    "FedConfig",
    "SimulationConfig",
    "ClientState",
    "ServerState",
    "RoundReport",
    "ClientUpdate",
    "EvalResult",
    "SimulationResult",
    "PartitionError",
    "AggregationError",
    "partition_long_tail",
    "dense_adapter_bytes",
    "delta_payload_bytes",
    "client_update",
    "train_local",
    "aggregate",
    "evaluate",
    "run_round",
    "run_simulation",
]

logger = logging.getLogger(__name__)


class PartitionError(RuntimeError):
    """The requested split cannot satisfy the per-client constraints."""


class AggregationError(RuntimeError):
    """A round had to be aborted during aggregation."""


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 5
    rounds: int = 100
    dirichlet_alpha: float = 0.5
    imbalance_factor: float = 10.0
    local_epochs: int = 1
    batch: int = 32
    lr: float = 5e-3
    rank: int = 4
    lora_alpha: float | None = None  # None -> rank
    bits: int = 4                    # 4, 8, or 32 (32 = quantization off)
    block_size: int = 64
    count_synthetic: bool = True     # include synthetic samples in m_i
    participation: float = 1.0
    n_threads: int = 1
    target_accuracy: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError(f"n_clients must be >= 1, got {self.n_clients}")
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        if self.imbalance_factor < 1:
            raise ValueError(f"imbalance_factor must be >= 1, got {self.imbalance_factor}")
        if self.bits not in (4, 8, 32):
            raise ValueError(f"bits must be 4, 8, or 32, got {self.bits}")
        if not 0.0 < self.participation <= 1.0:
            raise ValueError(f"participation must be in (0, 1], got {self.participation}")
        if self.rank < 1 or self.block_size < 1 or self.batch < 1 or self.local_epochs < 0:
            raise ValueError("rank/block_size/batch/local_epochs out of range")

    @property
    def alpha_effective(self) -> float:
        return float(self.lora_alpha) if self.lora_alpha is not None else float(self.rank)


@dataclass(frozen=True)
class SimulationConfig:
    adapter: AdapterConfig
    fed: FedConfig
    gan_enabled: bool = True
    gan: GanConfig = field(default_factory=GanConfig)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)


@dataclass
class ClientState:
    id: int
    dataset: EmbeddingDataset          # post-augmentation
    m: int                             # aggregation weight
    base: AdapterParams | None = None  # snapshot of the broadcast global model
    lora: qlora.LoraAdapter | None = None
    opt: AdamState | None = None

    @property
    def n_real(self) -> int:
        return self.dataset.n_real

    @property
    def n_synthetic(self) -> int:
        return self.dataset.n_synthetic


@dataclass
class ServerState:
    params: AdapterParams
    round: int = 0
    bytes_up_total: int = 0
    bytes_down_total: int = 0
    history: list["RoundReport"] = field(default_factory=list)


@dataclass
class ClientUpdate:
    client_id: int
    payload: bytes
    m: int
    train_loss: float
    local_accuracy: float


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    per_class_recall: list[float]


@dataclass
class RoundReport:
    """Per-round metrics. ``duration_s`` is wall clock and is deliberately
    excluded from the serialized metrics stream so reruns are byte-identical."""

    round: int
    client_train_loss: dict[int, float]
    client_accuracy: dict[int, float]
    server_accuracy: float
    server_loss: float
    per_class_recall: list[float]
    bytes_up: int
    bytes_down: int
    bytes_up_total: int
    bytes_down_total: int
    duration_s: float = 0.0

    def to_records(self) -> list[dict]:
        records = [
            {"round": self.round, "entity": "server", "metric": "accuracy", "value": self.server_accuracy},
            {"round": self.round, "entity": "server", "metric": "loss", "value": self.server_loss},
            {"round": self.round, "entity": "server", "metric": "per_class_recall", "value": self.per_class_recall},
            {"round": self.round, "entity": "server", "metric": "bytes_up_total", "value": self.bytes_up_total},
            {"round": self.round, "entity": "server", "metric": "bytes_down_total", "value": self.bytes_down_total},
        ]
        for cid in sorted(self.client_train_loss):
            records.append({"round": self.round, "entity": cid, "metric": "train_loss",
                            "value": self.client_train_loss[cid]})
            records.append({"round": self.round, "entity": cid, "metric": "local_accuracy",
                            "value": self.client_accuracy[cid]})
        return records


@dataclass
class SimulationResult:
    reports: list[RoundReport]
    summary: dict


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def partition_long_tail(dataset: EmbeddingDataset, n_clients: int, dirichlet_alpha: float,
                        imbalance_factor: float, seed: int) -> list[EmbeddingDataset]:
    """Subsample to an exponential class profile, then split by Dirichlet draws.

    Class k keeps round(count_k * f^(-k/(C-1))) samples, so a balanced input
    ends up with head:tail ratio equal to ``imbalance_factor``. Each class is
    then divided across clients by proportions drawn from Dirichlet(alpha);
    draws are retried until every client holds at least one sample of at
    least two classes.
    """
    if n_clients < 1:
        raise ValueError(f"n_clients must be >= 1, got {n_clients}")
    if imbalance_factor < 1:
        raise ValueError(f"imbalance_factor must be >= 1, got {imbalance_factor}")
    num_classes = dataset.num_classes
    rng = _rng(seed, 11)
    kept: list[np.ndarray] = []
    for k in range(num_classes):
        idx = np.flatnonzero(dataset.labels == k)
        if idx.size == 0:
            kept.append(idx)
            continue
        if num_classes > 1:
            frac = imbalance_factor ** (-k / (num_classes - 1))
        else:
            frac = 1.0
        target = max(1, int(np.floor(idx.size * frac + 0.5)))
        chosen = rng.choice(idx, size=min(target, idx.size), replace=False)
        kept.append(np.sort(chosen))

    for attempt in range(100):
        parts: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for k, idx in enumerate(kept):
            if idx.size == 0:
                continue
            if n_clients == 1:
                parts[0].append(idx)
                continue
            p = rng.dirichlet(np.full(n_clients, dirichlet_alpha))
            cuts = np.floor(np.cumsum(p)[:-1] * idx.size + 0.5).astype(np.int64)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        ok = True
        for i in range(n_clients):
            indices = np.concatenate(parts[i]) if parts[i] else np.array([], dtype=np.int64)
            classes = np.unique(dataset.labels[indices]) if indices.size else []
            if len(classes) < min(2, num_classes):
                ok = False
                break
        if ok:
            return [
                dataset.subset(np.sort(np.concatenate(parts[i])))
                for i in range(n_clients)
            ]
    raise PartitionError(
        f"client {i} never received samples of >= 2 classes after 100 Dirichlet draws "
        f"(alpha={dirichlet_alpha}, n_clients={n_clients})"
    )


def dense_adapter_bytes(config: AdapterConfig) -> int:
    """Size of the dense 32-bit broadcast of the full adapter."""
    return 4 * config.param_count


def delta_payload_bytes(adapter_cfg: AdapterConfig, fed: FedConfig) -> int:
    """Closed-form uplink payload size for one client's quantized delta."""
    entries = [
        (name, rows, cols, qlora.factored_rank(rows, cols, fed.rank))
        for name, rows, cols in adapter_cfg.shapes()
    ]
    return qlora.delta_wire_bytes(entries, fed.bits, fed.block_size)


def _eval_params(params: AdapterParams) -> AdapterParams:
    # quantize_logits is a training-path knob; evaluation always runs it off
    if params.config.quantize_logits:
        return params.with_config(replace(params.config, quantize_logits=False))
    return params


def evaluate(params: AdapterParams, dataset: EmbeddingDataset,
             prototypes: ClassPrototypes, batch: int = 32) -> EvalResult:
    """Accuracy, mean loss, and per-class recall on a held-out set."""
    if len(dataset) == 0:
        raise ValueError("evaluate: dataset is empty")
    params = _eval_params(params)
    correct = np.zeros(dataset.num_classes, dtype=np.int64)
    total = np.zeros(dataset.num_classes, dtype=np.int64)
    losses = []
    for start in range(0, len(dataset), batch):
        x = Matrix(dataset.vectors[start : start + batch])
        y = dataset.labels[start : start + batch]
        v = adapter_forward(params, x)
        lg = logits(params, v, prototypes)
        losses.append(adapter_loss(params, lg, y).item() * len(y))
        pred = lg.data.argmax(axis=1)
        for c in range(dataset.num_classes):
            mask = y == c
            total[c] += int(mask.sum())
            correct[c] += int((pred[mask] == c).sum())
    recall = [float(correct[c] / total[c]) if total[c] else 0.0 for c in range(dataset.num_classes)]
    return EvalResult(
        accuracy=float(correct.sum() / total.sum()),
        loss=float(np.sum(losses) / total.sum()),
        per_class_recall=recall,
    )


def train_local(client: ClientState, global_params: AdapterParams, fed: FedConfig,
                prototypes: ClassPrototypes, round_idx: int) -> tuple[qlora.LowRankDelta, float]:
    """Run the local epochs and return the trained delta plus mean train loss.

    The broadcast global model becomes the frozen base; only the fresh
    low-rank factors (and dense bias deltas) train.
    """
    if len(client.dataset) == 0:
        raise ValueError(f"client {client.id}: local dataset is empty")
    client.base = global_params.copy()
    rng = _rng(fed.seed, 101, client.id, round_idx)
    client.lora = qlora.LoraAdapter(client.base, fed.rank, fed.alpha_effective, rng)
    trainable = client.lora.trainable()
    client.opt = AdamState(trainable)
    n = len(client.dataset)
    epoch_loss = 0.0
    for _ in range(fed.local_epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, fed.batch):
            idx = order[start : start + fed.batch]
            x = Matrix(client.dataset.vectors[idx])
            y = client.dataset.labels[idx]
            with Tape() as tape:
                eff = client.lora.effective()
                v = adapter_forward(eff, x)
                lg = logits(eff, v, prototypes)
                loss = adapter_loss(eff, lg, y)
                tape.backward(loss)
            adam_step(trainable, [p.grad for p in trainable], client.opt, fed.lr)
            zero_grad(trainable)
            batch_losses.append(loss.item() * idx.size)
        epoch_loss = float(np.sum(batch_losses) / n)
    return client.lora.to_delta(), epoch_loss


def client_update(client: ClientState, global_params: AdapterParams, fed: FedConfig,
                  prototypes: ClassPrototypes, round_idx: int) -> ClientUpdate:
    """One client round: broadcast, local training, quantized upload."""
    delta, train_loss = train_local(client, global_params, fed, prototypes, round_idx)
    payload = qlora.encode_delta(delta, fed.bits, fed.block_size)
    local = evaluate(client.lora.effective(), client.dataset, prototypes, batch=fed.batch)
    return ClientUpdate(
        client_id=client.id,
        payload=payload,
        m=client.m,
        train_loss=train_loss,
        local_accuracy=local.accuracy,
    )


def aggregate(server: ServerState, uploads: list[ClientUpdate], fed: FedConfig) -> AdapterParams:
    """Weighted-average the dequantized deltas into the global model."""
    if not uploads:
        raise AggregationError("aggregate: no uploads")
    uploads = sorted(uploads, key=lambda u: u.client_id)
    total_m = sum(u.m for u in uploads)
    if total_m <= 0:
        raise AggregationError("aggregate: total sample weight is zero")
    deltas = []
    for u in uploads:
        try:
            deltas.append(qlora.decode_delta(u.payload, alpha=fed.alpha_effective))
        except qlora.PayloadError as exc:
            raise AggregationError(f"round aborted: client {u.client_id} payload invalid: {exc}") from exc
    named = server.params.named()
    out: dict[str, Matrix] = {}
    for name, p in named.items():
        acc = p.data.astype(np.float64)
        for u, delta in zip(uploads, deltas):
            acc = acc + (u.m / total_m) * delta.dense_update(name)
        out[name] = Matrix(acc.astype(np.float32))
    new_params = AdapterParams.from_named(server.params.config, out)
    server.params = new_params
    return new_params


def _participants(clients: list[ClientState], fed: FedConfig, round_idx: int) -> list[ClientState]:
    if fed.participation >= 1.0:
        return clients
    k = max(1, int(np.ceil(fed.participation * len(clients))))
    rng = _rng(fed.seed, 31, round_idx)
    picked = sorted(rng.choice(len(clients), size=k, replace=False).tolist())
    return [clients[i] for i in picked]


def run_round(server: ServerState, clients: list[ClientState], fed: FedConfig,
              prototypes: ClassPrototypes, test_set: EmbeddingDataset) -> RoundReport:
    """broadcast -> client updates (possibly threaded) -> aggregate -> evaluate."""
    t0 = time.perf_counter()
    round_idx = server.round
    part = _participants(clients, fed, round_idx)
    bytes_down = len(part) * dense_adapter_bytes(server.params.config)
    global_params = server.params

    def one(client: ClientState) -> ClientUpdate:
        return client_update(client, global_params, fed, prototypes, round_idx)

    if fed.n_threads > 1 and len(part) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=fed.n_threads) as pool:
            updates = list(pool.map(one, part))
    else:
        updates = [one(c) for c in part]
    updates.sort(key=lambda u: u.client_id)

    aggregate(server, updates, fed)
    result = evaluate(server.params, test_set, prototypes, batch=fed.batch)

    bytes_up = sum(len(u.payload) for u in updates)
    server.bytes_up_total += bytes_up
    server.bytes_down_total += bytes_down
    server.round += 1
    report = RoundReport(
        round=server.round,
        client_train_loss={u.client_id: u.train_loss for u in updates},
        client_accuracy={u.client_id: u.local_accuracy for u in updates},
        server_accuracy=result.accuracy,
        server_loss=result.loss,
        per_class_recall=result.per_class_recall,
        bytes_up=bytes_up,
        bytes_down=bytes_down,
        bytes_up_total=server.bytes_up_total,
        bytes_down_total=server.bytes_down_total,
        duration_s=time.perf_counter() - t0,
    )
    server.history.append(report)
    return report


def _tail_classes(histogram: np.ndarray) -> list[int]:
    counts = np.asarray(histogram)
    present = counts[counts > 0]
    if present.size == 0:
        return []
    median = int(np.sort(present)[present.size // 2])
    return [c for c in range(counts.size) if 0 < counts[c] < median]


def run_simulation(train_set: EmbeddingDataset, test_set: EmbeddingDataset,
                   prototypes: ClassPrototypes, sim: SimulationConfig) -> SimulationResult:
    """Partition, optionally balance with per-client GANs, then run the rounds."""
    fed = sim.fed
    shards = partition_long_tail(
        train_set, fed.n_clients, fed.dirichlet_alpha, fed.imbalance_factor, fed.seed
    )
    longtail_hist = np.sum([s.class_histogram for s in shards], axis=0)

    clients: list[ClientState] = []
    for cid, shard in enumerate(shards):
        data = shard
        if sim.gan_enabled and len(shard) >= 2:
            gan_cfg = replace(sim.gan, seed=int(_rng(fed.seed, 201, cid).integers(2**31)))
            generator, _, _ = train_gan(shard, gan_cfg)
            data = augment(shard, generator, sim.policy, seed=gan_cfg.seed + 1)
        m = len(data) if fed.count_synthetic else data.n_real
        clients.append(ClientState(id=cid, dataset=data, m=m))

    server = ServerState(params=AdapterParams.init(sim.adapter, seed=fed.seed))
    initial = evaluate(server.params, test_set, prototypes, batch=fed.batch)

    reports: list[RoundReport] = []
    for _ in range(fed.rounds):
        report = run_round(server, clients, fed, prototypes, test_set)
        reports.append(report)
        if fed.target_accuracy is not None and report.server_accuracy >= fed.target_accuracy:
            logger.info("early stop: reached accuracy %.4f at round %d",
                        report.server_accuracy, report.round)
            break

    final = reports[-1] if reports else None
    tail = _tail_classes(longtail_hist)
    recall = final.per_class_recall if final else initial.per_class_recall
    summary = {
        "rounds_completed": len(reports),
        "initial_accuracy": initial.accuracy,
        "final_accuracy": final.server_accuracy if final else initial.accuracy,
        "final_loss": final.server_loss if final else initial.loss,
        "per_class_recall": recall,
        "tail_classes": tail,
        "tail_recall": float(np.mean([recall[c] for c in tail])) if tail else 0.0,
        "longtail_histogram": longtail_hist.tolist(),
        "client_real_samples": [c.n_real for c in clients],
        "client_synthetic_samples": [c.n_synthetic for c in clients],
        "bytes_up_total": server.bytes_up_total,
        "bytes_down_total": server.bytes_down_total,
    }
    return SimulationResult(reports=reports, summary=summary)
