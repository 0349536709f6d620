"""Training, evaluation and model (de)serialization."""
import json
import math
import os
import queue
import threading
from logging import getLogger
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from pcefusion import tensor as T
from pcefusion.checkpoint import load_checkpoint, save_checkpoint
from pcefusion.component import Component
from pcefusion.config import CHECKPOINT_FILE, SPLIT_FILE, TRAINING_LOG_FILE, VOCAB_FILE, RunConfig
from pcefusion.dataset import DatasetSplit, DeviceBatch, DeviceBatchBuilder, DeviceRecord, corpus_of
from pcefusion.errors import ContractError, DataError, NumericError
from pcefusion.metrics import mae, r2
from pcefusion.model import ModelConfig, PCEFusionModel, loss_fn
from pcefusion.optim import AdamW
from pcefusion.structure import CrystalStructure
from pcefusion.text_encoder import Vocabulary, build_vocab

logger = getLogger(__name__)


def learning_rate(epoch: int, lr_main: float, warmup_epochs: int, total_epochs: int) -> float:
    """The learning rate of 1-based ``epoch``: a linear ramp from 0 over the warm-up, then cosine decay to 0."""
    if epoch < warmup_epochs:
        return lr_main * epoch / warmup_epochs
    progress = min(1.0, (epoch - warmup_epochs) / max(1, total_epochs - warmup_epochs))
    return lr_main * 0.5 * (1.0 + math.cos(math.pi * progress))


class TrainingLog(Component):
    """Per-epoch training history.

    Attributes:
        epochs (List[dict]): Entries with keys epoch, train_loss, val_loss, val_mae, val_r2, lr.
        best_epoch (int): The epoch with the lowest val_loss, 0 before the first epoch.
        stopped_early (bool): If true, training stopped before the last scheduled epoch.
    """

    def __init__(self):
        self.epochs: List[dict] = []
        self.best_epoch: int = 0
        self.stopped_early: bool = False

    @property
    def best_val_loss(self) -> float:
        return self.epochs[self.best_epoch - 1]["val_loss"] if self.best_epoch else math.inf

    def append(self, entry: dict) -> bool:
        """Add an epoch entry and return whether it is the new best."""
        self.epochs.append(entry)
        if entry["val_loss"] < self.best_val_loss:
            self.best_epoch = entry["epoch"]
            return True
        return False

    def to_dict(self) -> dict:
        """Convert this object into a dictionary."""
        return dict(epochs=self.epochs, best_epoch=self.best_epoch, stopped_early=self.stopped_early)

    def to_string(self) -> str:
        """Convert this object into a string."""
        return (
            f"<TrainingLog, #epochs: {len(self.epochs)}, best_epoch: {self.best_epoch}, "
            f"stopped_early: {self.stopped_early}>"
        )


def prefetch(batches: Iterable[DeviceBatch], depth: int) -> Iterator[DeviceBatch]:
    """Build batches on a worker thread, handing them over in order through a queue of ``depth`` slots.

    The worker only runs numpy preprocessing; nothing it touches is recorded on a computation graph.
    """
    if depth < 1:
        yield from batches
        return
    handoff: "queue.Queue" = queue.Queue(maxsize=depth)
    done = object()
    stop = threading.Event()

    def put(item) -> bool:
        while not stop.is_set():
            try:
                handoff.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for batch in batches:
                if not put(batch):
                    return
            put(done)
        except BaseException as e:  # re-raised on the consumer side
            put(e)

    worker = threading.Thread(target=produce, daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is done:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()


class EvalResult:
    """Predictions over a list of devices, in percent."""

    def __init__(self, device_ids: List[str], y: Optional[np.ndarray], mu: np.ndarray, sigma: np.ndarray, loss: float):
        self.device_ids = device_ids
        self.y = y
        self.mu = mu
        self.sigma = sigma
        self.loss = loss


def evaluate(
    model: PCEFusionModel,
    builder: DeviceBatchBuilder,
    ids: Sequence[str],
    batch_size: int,
    attention_maps: Optional[List[Tuple[List[str], List[Dict]]]] = None,
) -> EvalResult:
    """Run ``model`` in eval mode over ``ids``.

    Args:
        attention_maps: When a list is given, a (device ids, recorded attention maps) pair is appended per batch.

    Returns:
        Predictions in percent; ``loss`` is the training-scale loss, or NaN when some device has no target.
    """
    if not ids:
        raise ContractError("cannot evaluate an empty list of devices")
    device_ids, mus, sigmas, ys = [], [], [], []
    total, has_targets = 0.0, True
    with T.no_grad():
        for batch in builder.batches(ids, batch_size):
            ctx = model.context(training=False, record_attention=attention_maps is not None)
            mu, sigma = model(batch, ctx)
            if attention_maps is not None:
                attention_maps.append((batch.device_ids, ctx.attention_maps))
            if batch.targets is None:
                has_targets = False
            else:
                total += loss_fn(model, mu, sigma, model.scale_targets(batch.targets)).item() * len(batch)
                ys.append(batch.targets)
            mu, sigma = model.to_percent(mu.data, sigma.data)
            device_ids.extend(batch.device_ids)
            mus.append(mu)
            sigmas.append(sigma)
    T.clear_graph()
    return EvalResult(
        device_ids,
        np.concatenate(ys) if has_targets else None,
        np.concatenate(mus),
        np.concatenate(sigmas),
        total / len(ids) if has_targets else math.nan,
    )


def save_model(path: str, model: PCEFusionModel, vocab: Vocabulary, state: Optional[Dict[str, np.ndarray]] = None):
    meta = model.meta()
    meta["vocab"] = vocab.id_to_token
    save_checkpoint(path, state if state is not None else model.state_dict(), meta)


def load_model(path: str, model_config: Optional[ModelConfig] = None) -> Tuple[PCEFusionModel, Vocabulary]:
    """Rebuild a model from a checkpoint.

    Args:
        model_config: When given, the model is built from this configuration instead of the stored one, so that a
            mismatch surfaces as a :class:`DimensionError` naming the parameter.
    """
    state, meta = load_checkpoint(path)
    try:
        vocab = Vocabulary(meta["vocab"][3:])
        config = model_config or ModelConfig(**meta["model"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed checkpoint metadata: {e}")
    model = PCEFusionModel(config, len(vocab))
    model.load_state_dict(state)
    model.set_target_stats(meta.get("target_mean", 0.0), meta.get("target_std", 1.0))
    return model, vocab


class Trainer:
    """Fits a :class:`PCEFusionModel` with AdamW, a warm-up/cosine schedule, and early stopping on val loss.

    Args:
        config: The run configuration.
        records: All device records.
        store: The structure store.
        split: The train/val/test partition.
        seed: Seeds parameter initialization, dropout, and shuffling.
    """

    def __init__(
        self,
        config: RunConfig,
        records: Sequence[DeviceRecord],
        store: Dict[str, CrystalStructure],
        split: DatasetSplit,
        seed: int,
    ):
        self.config = config
        self.split = split
        self.seed = seed
        by_id = {r.device_id: r for r in records}
        missing = [i for i in split.train + split.val if i not in by_id]
        if missing:
            raise DataError(f"split refers to unknown devices {missing[:5]}")
        if not split.train or not split.val:
            raise DataError("training needs nonempty train and val parts")
        unlabeled = [i for i in split.train + split.val if by_id[i].pce is None]
        if unlabeled:
            raise DataError(f"devices without a pce value cannot be trained on: {unlabeled[:5]}")
        train_records = [by_id[i] for i in split.train]
        self.vocab = build_vocab(corpus_of(train_records), config.data.min_count)
        self.builder = DeviceBatchBuilder(
            records, store, self.vocab, config.model.max_tokens, config.data.graph_params
        )
        self.model = PCEFusionModel(config.model, len(self.vocab), seed)
        if config.model.standardize_targets:
            targets = np.array([r.pce for r in train_records], dtype=np.float64)
            self.model.set_target_stats(targets.mean(), targets.std() if targets.std() > 0 else 1.0)
        self.optimizer = AdamW(
            self.model.parameter_groups(config.optim.lr_text_multiplier),
            betas=tuple(config.optim.betas),
            eps=config.optim.eps,
            weight_decay=config.optim.weight_decay,
        )
        self.log = TrainingLog()
        self.best_state: Optional[Dict[str, np.ndarray]] = None

    def fit(self, out_dir: Optional[str] = None) -> TrainingLog:
        """Train until the schedule ends or validation loss stalls for ``patience`` epochs.

        When ``out_dir`` is given, the split, vocabulary, best checkpoint and training log are written there.

        Raises:
            NumericError: If a loss becomes non-finite; the log so far is written first.
        """
        schedule, data = self.config.schedule, self.config.data
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            self.split.save_json(os.path.join(out_dir, SPLIT_FILE))
            self.vocab.save(os.path.join(out_dir, VOCAB_FILE))
        rng = np.random.default_rng(self.seed)
        logger.info(
            f"Train {self.model.config.architecture} ({self.model.num_parameters()} parameters) "
            f"on {len(self.split.train)} devices, seed {self.seed}."
        )

        since_best = 0
        for epoch in range(1, schedule.total_epochs + 1):
            lr = learning_rate(epoch, self.config.optim.lr_main, schedule.warmup_epochs, schedule.total_epochs)
            order = [self.split.train[i] for i in rng.permutation(len(self.split.train))]
            train_loss = self._train_epoch(order, lr, epoch, out_dir)

            result = evaluate(self.model, self.builder, self.split.val, data.batch_size)
            if not np.isfinite(result.loss):
                self._abort(epoch, "validation loss is not finite", out_dir)
            entry = dict(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=result.loss,
                val_mae=mae(result.y, result.mu),
                val_r2=r2(result.y, result.mu) if np.ptp(result.y) > 0 else math.nan,
                lr=lr,
            )
            logger.info(
                f"epoch {epoch}: train_loss {train_loss:.4f}, val_loss {result.loss:.4f}, "
                f"val_mae {entry['val_mae']:.4f}, lr {lr:.3g}"
            )
            if self.log.append(entry):
                since_best = 0
                self.best_state = self.model.state_dict()
                if out_dir:
                    save_model(os.path.join(out_dir, CHECKPOINT_FILE), self.model, self.vocab, self.best_state)
            else:
                since_best += 1
                if since_best >= schedule.patience and epoch >= schedule.warmup_epochs + schedule.patience:
                    logger.warning(f"Stop early at epoch {epoch}; best epoch {self.log.best_epoch}.")
                    self.log.stopped_early = True
                    break

        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        if out_dir:
            self.log.save_json(os.path.join(out_dir, TRAINING_LOG_FILE))
        return self.log

    def _train_epoch(self, ids: List[str], lr: float, epoch: int, out_dir: Optional[str]) -> float:
        total = 0.0
        batches = self.builder.batches(ids, self.config.data.batch_size)
        for i, batch in enumerate(prefetch(batches, self.config.data.prefetch)):
            ctx = self.model.context(training=True)
            mu, sigma = self.model(batch, ctx)
            loss = loss_fn(self.model, mu, sigma, self.model.scale_targets(batch.targets))
            if not np.isfinite(loss.item()):
                T.clear_graph()
                self._abort(epoch, f"training loss is not finite at batch {i}", out_dir)
            self.optimizer.zero_grad()
            T.backward(loss)
            self.optimizer.step(lr)
            T.clear_graph()
            total += loss.item() * len(batch)
        return total / len(ids)

    def _abort(self, epoch: int, reason: str, out_dir: Optional[str]) -> None:
        for entry in self.log.epochs:
            logger.error(f"epoch log: {json.dumps(entry)}")
        if out_dir:
            self.log.save_json(os.path.join(out_dir, TRAINING_LOG_FILE))
        raise NumericError(f"epoch {epoch}: {reason}")
