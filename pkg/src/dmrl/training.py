"""Optimization loop: hard-negative triples, Adam epochs, early stopping,
and binary checkpointing.

Parameters and Adam moments are stored float32 (matching the checkpoint
payload format exactly, so save -> load -> resume is bit-identical to an
uninterrupted run) while every gradient and update is computed in float64.
Each epoch draws its RNG stream from (seed, epoch), so resuming needs no
serialized RNG state.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from dmrl import evaluation
from dmrl.data import FeatureTable, InteractionDataset, sample_negative_candidates
from dmrl.model import ModelConfig, ModelParams, total_loss
from dmrl.numerics import AdamState, adam_step

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DMRLCK01"


@dataclass
class TrainConfig:
    batch_size: int = 1024
    learning_rate: float = 0.0001
    n_candidates: int = 4
    max_epochs: int = 300
    patience_epochs: int = 50
    checkpoint_every: int = 10
    eval_k: int = 20
    seed: int = 0
    grad_clip_norm: float = 0.0    # 0 disables the global-norm escape hatch

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (disentanglement needs 2 samples)")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class TrainState:
    epoch: int = 0                    # last completed epoch (0 = none)
    best_val_recall: float = -1.0
    best_epoch: int = 0
    epochs_since_best: int = 0
    adam: dict[str, AdamState] = field(default_factory=dict)

    def copy(self) -> "TrainState":
        dup = TrainState(epoch=self.epoch, best_val_recall=self.best_val_recall,
                         best_epoch=self.best_epoch, epochs_since_best=self.epochs_since_best)
        for name, adam in self.adam.items():
            dup.adam[name] = AdamState(
                first_moment=adam.first_moment.copy(),
                second_moment=adam.second_moment.copy(),
                step_count=adam.step_count, beta1=adam.beta1, beta2=adam.beta2,
                epsilon=adam.epsilon, learning_rate=adam.learning_rate)
        return dup


def early_stop_check(state: TrainState, current_val_recall: float, patience: int) -> str:
    """'continue' or 'stop'; strict improvement resets the patience counter."""
    if not 0.0 <= current_val_recall <= 1.0:
        raise ValueError(f"recall {current_val_recall} outside [0, 1]")
    if current_val_recall > state.best_val_recall:
        state.best_val_recall = current_val_recall
        state.best_epoch = state.epoch
        state.epochs_since_best = 0
        return "continue"
    state.epochs_since_best += 1
    return "stop" if state.epochs_since_best >= patience else "continue"


def select_hard_negative(user: int, candidates, params: ModelParams) -> int:
    """Candidate with the largest user-item ID-embedding dot product.

    Exact ties break toward the lowest item index.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate set")
    scores = params.get64("item_embed")[candidates] @ params.get64("user_embed")[user]
    return int(candidates[scores == scores.max()].min())


def build_epoch_triples(dataset: InteractionDataset, params: ModelParams,
                        config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """One (user, pos, hard-neg) triple per training positive, shuffled."""
    pairs = dataset.train_pairs()
    triples = np.empty((pairs.shape[0], 3), dtype=np.int64)
    for row, (user, pos) in enumerate(pairs):
        candidates = sample_negative_candidates(int(user), config.n_candidates, rng, dataset)
        triples[row] = (user, pos, select_hard_negative(int(user), candidates, params))
    return triples[rng.permutation(triples.shape[0])]


@dataclass
class EpochMetrics:
    loss: float
    bpr: float
    l2: float
    disentangle: float


def _clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale


def train_epoch(dataset: InteractionDataset, text_features, visual_features,
                params: ModelParams, state: TrainState, config: TrainConfig,
                rng: np.random.Generator) -> EpochMetrics:
    """One pass over shuffled triples in batches; Adam on every tensor.

    Returns equal-weight batch means of each loss term; aborts with a
    diagnostic if a non-finite term appears.
    """
    triples = build_epoch_triples(dataset, params, config, rng)
    sums = np.zeros(4)
    n_batches = 0
    for start in range(0, triples.shape[0], config.batch_size):
        batch = triples[start:start + config.batch_size]
        try:
            terms, grads = total_loss(params, batch[:, 0], batch[:, 1], batch[:, 2],
                                      text_features, visual_features)
        except RuntimeError as exc:
            raise RuntimeError(f"epoch {state.epoch + 1}, batch {n_batches}: {exc}") from exc
        if config.grad_clip_norm > 0:
            _clip_global_norm(grads, config.grad_clip_norm)
        for name in params.names:
            params[name] = adam_step(params[name], grads[name], state.adam[name])
        sums += (terms.total, terms.bpr, terms.l2, terms.disentangle)
        n_batches += 1
    means = sums / max(1, n_batches)
    return EpochMetrics(loss=means[0], bpr=means[1], l2=means[2], disentangle=means[3])


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def _write_tensor_block(fh, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw_name)))
        fh.write(raw_name)
        fh.write(struct.pack("<B", tensor.ndim))
        fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.raw):
            raise ValueError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.offset:self.offset + count]
        self.offset += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor_block(reader: _Reader) -> dict[str, np.ndarray]:
    (count,) = reader.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (rank,) = reader.unpack("<B")
        shape = reader.unpack(f"<{rank}I")
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(reader.take(4 * size), dtype="<f4").reshape(shape)
        tensors[name] = data.copy()
    return tensors


def save_checkpoint(params: ModelParams, state: TrainState, path,
                    train_config: Optional[TrainConfig] = None) -> None:
    """Versioned binary container; float32 payloads round-trip bit-exactly."""
    header = {
        "model": params.config.to_dict(),
        "num_users": params.num_users,
        "num_items": params.num_items,
    }
    if train_config is not None:
        header["train"] = train_config.to_dict()
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_tensor_block(fh, {n: params[n] for n in params.names})
        moments: dict[str, np.ndarray] = {}
        for name in params.names:
            adam = state.adam.get(name)
            if adam is None:
                adam = AdamState.for_param(params[name])
            moments[f"adam_m.{name}"] = adam.first_moment.astype(np.float32)
            moments[f"adam_v.{name}"] = adam.second_moment.astype(np.float32)
        _write_tensor_block(fh, moments)
        step_count = next(iter(state.adam.values())).step_count if state.adam else 0
        fh.write(struct.pack("<Q", step_count))
        fh.write(struct.pack("<IIId", state.epoch, state.best_epoch,
                             state.epochs_since_best, state.best_val_recall))


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None,
                    learning_rate: float = 0.0001):
    """Load (params, state, train_config_dict|None); validates magic, shape,
    and (when given) the expected model config."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(8) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    (blob_len,) = reader.unpack("<I")
    header = json.loads(reader.take(blob_len).decode("utf-8"))
    config = ModelConfig.from_dict(header["model"])
    if expected_config is not None and config != expected_config:
        raise ValueError(f"{path}: checkpoint config mismatch: "
                         f"stored {config}, expected {expected_config}")
    params = ModelParams(config, header["num_users"], header["num_items"], seed=0)
    tensors = _read_tensor_block(reader)
    if set(tensors) != set(params.names):
        raise ValueError(f"{path}: tensor names do not match the config layout")
    for name, tensor in tensors.items():
        params[name] = tensor
    moments = _read_tensor_block(reader)
    (step_count,) = reader.unpack("<Q")
    epoch, best_epoch, since_best, best_recall = reader.unpack("<IIId")
    train_dict = header.get("train")
    lr = train_dict["learning_rate"] if train_dict else learning_rate
    state = TrainState(epoch=epoch, best_epoch=best_epoch,
                       epochs_since_best=since_best, best_val_recall=best_recall)
    for name in params.names:
        adam = AdamState.for_param(params[name], learning_rate=lr)
        adam.first_moment = moments[f"adam_m.{name}"].astype(params.dtype)
        adam.second_moment = moments[f"adam_v.{name}"].astype(params.dtype)
        adam.step_count = int(step_count)
        state.adam[name] = adam
    return params, state, train_dict


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    loss: float
    bpr: float
    l2: float
    disentangle: float
    val_recall: float
    val_ndcg: float
    seconds: float

    def log_line(self) -> str:
        return (f"{self.epoch}\t{self.loss:.10g}\t{self.bpr:.10g}\t{self.l2:.10g}"
                f"\t{self.disentangle:.10g}\t{self.val_recall:.10g}"
                f"\t{self.val_ndcg:.10g}\t{self.seconds:.3f}")


class Trainer:
    """Runs the full optimization with per-epoch validation and checkpoints.

    `out_dir`, when given, receives `train_log.tsv`, periodic
    `checkpoint_epoch####.dmrl` files, and `checkpoint.dmrl` (best epoch,
    restored at the end of training).
    """

    def __init__(self, dataset: InteractionDataset, model_config: ModelConfig,
                 train_config: TrainConfig, text_features=None, visual_features=None,
                 out_dir=None):
        self.dataset = dataset
        self.model_config = model_config
        self.config = train_config
        self.text = self._matrix(text_features)
        self.visual = self._matrix(visual_features)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.params = ModelParams(model_config, dataset.num_users, dataset.num_items,
                                  seed=train_config.seed)
        self.state = TrainState()
        self._init_adam()
        self.history: list[EpochRecord] = []
        self._best_params = self.params.copy()
        self._best_state = self.state.copy()

    @staticmethod
    def _matrix(features):
        if features is None:
            return None
        if isinstance(features, FeatureTable):
            return features.matrix
        return np.asarray(features, dtype=np.float64)

    def _init_adam(self):
        for name in self.params.names:
            self.state.adam[name] = AdamState.for_param(
                self.params[name], learning_rate=self.config.learning_rate)

    def _epoch_rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.config.seed, 0x5EED, epoch]))

    def resume_from(self, checkpoint_path) -> None:
        params, state, _ = load_checkpoint(checkpoint_path, expected_config=self.model_config,
                                           learning_rate=self.config.learning_rate)
        if (params.num_users, params.num_items) != (self.dataset.num_users, self.dataset.num_items):
            raise ValueError("checkpoint user/item counts do not match the dataset")
        self.params = params
        self.state = state
        self._best_params = self.params.copy()
        self._best_state = self.state.copy()

    def run(self, log_fh=None) -> list[EpochRecord]:
        """Train until max_epochs or early stop; leaves best params loaded."""
        cfg = self.config
        while self.state.epoch < cfg.max_epochs:
            started = time.perf_counter()
            metrics = train_epoch(self.dataset, self.text, self.visual,
                                  self.params, self.state, cfg,
                                  self._epoch_rng(self.state.epoch))
            self.state.epoch += 1
            report = evaluation.evaluate(self.dataset, self.params, self.text, self.visual,
                                         k=cfg.eval_k, split="val")
            record = EpochRecord(epoch=self.state.epoch, loss=metrics.loss, bpr=metrics.bpr,
                                 l2=metrics.l2, disentangle=metrics.disentangle,
                                 val_recall=report.recall, val_ndcg=report.ndcg,
                                 seconds=time.perf_counter() - started)
            self.history.append(record)
            if log_fh is not None:
                log_fh.write(record.log_line() + "\n")
                log_fh.flush()
            improved = report.recall > self.state.best_val_recall
            verdict = early_stop_check(self.state, report.recall, cfg.patience_epochs)
            if improved:
                self._best_params = self.params.copy()
                self._best_state = self.state.copy()
                if self.out_dir is not None:
                    save_checkpoint(self._best_params, self._best_state,
                                    self.out_dir / "checkpoint.dmrl", cfg)
            if self.out_dir is not None and self.state.epoch % cfg.checkpoint_every == 0:
                save_checkpoint(self.params, self.state,
                                self.out_dir / f"checkpoint_epoch{self.state.epoch:04d}.dmrl", cfg)
            if verdict == "stop":
                logger.info("early stop at epoch %d (best %.4f at epoch %d)",
                            self.state.epoch, self.state.best_val_recall, self.state.best_epoch)
                break
        self.params = self._best_params
        return self.history

    def train(self) -> list[EpochRecord]:
        if self.out_dir is None:
            return self.run()
        with (self.out_dir / "train_log.tsv").open("a", encoding="utf-8") as fh:
            return self.run(log_fh=fh)
