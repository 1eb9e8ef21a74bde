"""
Federated averaging.

Every round the server broadcasts the global weights, each client trains a
fresh copy on its private frames and returns the weights together with its
frame count, and the server replaces the global weights with the
count-weighted average. A round completes only when every client reported.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from fedseg.errors import ConfigError, EmptyDatasetError, RoundAbortedError, ShapeMismatchError
from fedseg.data_processing import FrameDataset
from fedseg.losses import hybrid_loss
from fedseg.models import FedConfig, UNetConfig
from fedseg.params import ModelParams
from fedseg.unet import SegmentationPair, initial_global_params
from fedseg.utils import derive_seed

logger = logging.getLogger(__name__)

Evaluator = Callable[[ModelParams], dict[str, float]]


@dataclass(frozen=True)
class TrainingTask:
    """What a client needs to train: protocol constants and network shape."""

    fed: FedConfig
    unet: UNetConfig

    def validate(self) -> None:
        self.fed.validate()
        self.unet.validate()


class ClientUpdate(NamedTuple):
    params: ModelParams
    sample_count: int
    train_loss: float


@dataclass
class RoundLog:
    """Summary of one completed round."""

    round_index: int
    sample_counts: list[int]
    client_losses: list[float]
    global_metrics: dict[str, float] = field(default_factory=dict)

    @property
    def total_samples(self) -> int:
        return sum(self.sample_counts)

    def to_dict(self) -> dict:
        return {
            'round_index': self.round_index,
            'sample_counts': list(self.sample_counts),
            'client_losses': list(self.client_losses),
            'global_metrics': dict(self.global_metrics),
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'RoundLog':
        return cls(
            round_index=int(data['round_index']),
            sample_counts=[int(v) for v in data['sample_counts']],
            client_losses=[float(v) for v in data['client_losses']],
            global_metrics={k: float(v) for k, v in data.get('global_metrics', {}).items()},
        )


def aggregate(client_params: Sequence[ModelParams], weights: Sequence[float]) -> ModelParams:
    """
    Weighted average of client parameters.

    Accumulation runs in float64 in the given client order and is rounded to
    float32 once, so equal inputs always give bit-identical output.

    Raises:
        ShapeMismatchError: Layouts differ or counts do not match
        ConfigError: Non-positive weights or a zero total
    """
    if not client_params:
        raise ShapeMismatchError("nothing to aggregate")
    if len(client_params) != len(weights):
        raise ShapeMismatchError(f"{len(client_params)} parameter sets but {len(weights)} weights")
    if any(w <= 0 for w in weights):
        raise ConfigError(f"aggregation weights must be positive, got {list(weights)}")
    total = float(sum(weights))
    if total <= 0:
        raise ConfigError("aggregation weights sum to zero")
    layout = client_params[0].layout()
    acc = np.zeros(client_params[0].param_count, dtype=np.float64)
    for params, weight in zip(client_params, weights):
        if params.layout() != layout:
            raise ShapeMismatchError("client parameter layouts differ")
        acc += (float(weight) / total) * params.flatten().astype(np.float64)
    return ModelParams.unflatten(acc.astype(np.float32), layout)


def client_update(client_id: int, global_params: ModelParams, local_dataset: FrameDataset,
                  task: TrainingTask, round_index: int = 1) -> ClientUpdate:
    """
    Train a copy of the global weights on one client's frames.

    Both networks get ``local_epochs`` passes of mini-batch training on the
    hybrid loss with a fresh optimizer state. The shuffle order is seeded by
    (seed, client_id, round, epoch) and the last, partial batch is kept.

    Returns:
        ClientUpdate(params, sample_count, train_loss) where sample_count is
        the number of frames and train_loss the mean loss of the last epoch

    Raises:
        EmptyDatasetError: The client has no frames
    """
    n = len(local_dataset)
    if n == 0:
        raise EmptyDatasetError(f"client {client_id} has no frames")
    fed = task.fed
    pair = SegmentationPair.from_params(task.unet, global_params, fed.learning_rate, fed.l2_lambda)
    epoch_loss = 0.0
    for epoch in range(fed.local_epochs):
        rng = np.random.default_rng(derive_seed(fed.seed, 'shuffle', client_id, round_index, epoch))
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, fed.batch_size):
            batch = local_dataset.take(order[start:start + fed.batch_size])
            batch_loss = 0.0
            for model, target in ((pair.eem, batch.eem_targets), (pair.lumen, batch.lumen_targets)):
                probs, cache = model.forward(batch.images)
                loss, grad = hybrid_loss(probs, target, fed.omega)
                model.apply_gradients(model.backward(cache, grad), fed.optimizer)
                batch_loss += loss
            losses.append(batch_loss / 2.0)
        epoch_loss = float(np.mean(losses))
    logger.debug("client %d round %d: %d frames, loss %.5f", client_id, round_index, n, epoch_loss)
    return ClientUpdate(pair.params(), n, epoch_loss)


def _run_round(pool: ThreadPoolExecutor, round_index: int, global_params: ModelParams,
               datasets: Sequence[FrameDataset], task: TrainingTask) -> list[ClientUpdate]:
    futures = [
        pool.submit(client_update, client_id, global_params, dataset, task, round_index)
        for client_id, dataset in enumerate(datasets)
    ]
    updates = []
    for client_id, future in enumerate(futures):
        try:
            updates.append(future.result())
        except Exception as exc:
            for pending in futures:
                pending.cancel()
            raise RoundAbortedError(f"round {round_index} aborted: client {client_id} failed: {exc}") from exc
    return updates


def server_run(partitioned_datasets: Sequence[FrameDataset], task: TrainingTask,
               transport: str = 'in_process', evaluate: Optional[Evaluator] = None,
               host: str = '127.0.0.1') -> tuple[ModelParams, list[RoundLog]]:
    """
    Run ``task.fed.rounds`` rounds of federated averaging.

    Args:
        partitioned_datasets: One dataset per client, indexed by client id
        task: Protocol constants and network shape
        transport: 'in_process' (thread pool) or 'wire' (loopback TCP)
        evaluate: Optional callback scoring the global weights after a round
        host: Bind address for the wire transport

    Returns:
        (final global parameters, one RoundLog per round)

    Raises:
        ConfigError: Client count disagrees with the config
        RoundAbortedError: A client failed during a round
    """
    task.validate()
    if len(partitioned_datasets) != task.fed.n_clients:
        raise ConfigError(
            f"{len(partitioned_datasets)} partitions for n_clients={task.fed.n_clients}"
        )
    for client_id, dataset in enumerate(partitioned_datasets):
        if len(dataset) == 0:
            raise EmptyDatasetError(f"client {client_id} has no frames")
    if transport == 'wire':
        from fedseg.transport import run_loopback
        return run_loopback(partitioned_datasets, task, evaluate=evaluate, host=host)
    if transport != 'in_process':
        raise ConfigError(f"unknown transport {transport!r}")

    global_params = initial_global_params(task.unet)
    logs: list[RoundLog] = []
    with ThreadPoolExecutor(max_workers=task.fed.n_clients, thread_name_prefix='fedseg-client') as pool:
        for round_index in range(1, task.fed.rounds + 1):
            updates = _run_round(pool, round_index, global_params, partitioned_datasets, task)
            global_params = aggregate([u.params for u in updates], [u.sample_count for u in updates])
            logs.append(finish_round(round_index, updates, global_params, task, evaluate))
    return global_params, logs


def finish_round(round_index: int, updates: Sequence[ClientUpdate], global_params: ModelParams,
                 task: TrainingTask, evaluate: Optional[Evaluator]) -> RoundLog:
    """Build the round's log entry and run the optional evaluation hook."""
    log = RoundLog(
        round_index=round_index,
        sample_counts=[u.sample_count for u in updates],
        client_losses=[u.train_loss for u in updates],
    )
    if evaluate is not None and (task.fed.eval_every_round or round_index == task.fed.rounds):
        log.global_metrics = dict(evaluate(global_params))
    logger.info(
        "Round %d/%d: %d frames, mean client loss %.5f%s",
        round_index, task.fed.rounds, log.total_samples,
        float(np.mean(log.client_losses)) if log.client_losses else float('nan'),
        ''.join(f", {k}={v:.4f}" for k, v in log.global_metrics.items()),
    )
    return log


def train_centralized(dataset: FrameDataset, task: TrainingTask,
                      evaluate: Optional[Evaluator] = None) -> tuple[ModelParams, list[RoundLog]]:
    """
    Pooled-data baseline on the same schedule as a single federated client.

    Bit-identical to ``server_run`` with one client holding ``dataset``.
    """
    task.validate()
    params = initial_global_params(task.unet)
    logs = []
    for round_index in range(1, task.fed.rounds + 1):
        update = client_update(0, params, dataset, task, round_index)
        params = aggregate([update.params], [update.sample_count])
        logs.append(finish_round(round_index, [update], params, task, evaluate))
    return params, logs
