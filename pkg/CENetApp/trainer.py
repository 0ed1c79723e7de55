"""
SGD training loop, evaluation loop and checkpoints.

Schedule granularity is one iteration (one mini-batch):
max_iter = max_epochs * iterations per epoch unless max_iters is set.
The last batch of an epoch may be smaller than batch_size; a last batch of
one sample is folded into the one before it, since batch norm on the 1/32
scale map of a small image would see a single value per channel.
"""

import csv
import hashlib
import json
import logging
import math
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .augment import pad_to_divisor, random_augment, sample_rng
from .autograd import Tape
from .config import AugmentConfig, ModelConfig, TrainConfig
from .debug import debug_log
from .exceptions import ConfigurationError, ContractError, DataError, IntegrityError, NumericError, VersionMismatchError
from .losses import IGNORE_LABEL, segmentation_loss, total_loss
from .metrics import aggregate, binary_view, image_metrics, pooled_auc
from .model import DIVISOR, UNET_DEEPEST_SCALE, build_params, forward, predict
from .params import CONV_WEIGHT, Binder, ParamStore
from .state import CheckpointMeta, EvalTable, HistoryRow, Sample, TrainResult
from .tensor import load_tensors, save_tensors
from .tta import tta_predict

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_TENSORS = "checkpoint.cetnsr"
CHECKPOINT_META = "checkpoint.json"
VELOCITY_PREFIX = "optimizer.velocity."


# ─── schedule and optimizer ─────────────────────────────────────────────────

def poly_lr(iteration: int, max_iter: int, cfg: TrainConfig) -> float:
    """base_lr * (1 - iteration / max_iter) ** poly_power; 0 past the end."""
    if max_iter < 1:
        raise ContractError(f"max_iter must be >= 1, got {max_iter}")
    if iteration < 0:
        raise ContractError(f"iteration must be >= 0, got {iteration}")
    if iteration > max_iter:
        logger.warning(f"⚠️ Iteration {iteration} is past the schedule end {max_iter}; learning rate clamped to 0")
        return 0.0
    return cfg.base_lr * (1.0 - iteration / max_iter) ** cfg.poly_power


class OptimizerState:
    """Momentum buffers, one per trainable parameter, zero-initialized."""

    def __init__(self, velocity: "OrderedDict[str, np.ndarray]"):
        self.velocity = velocity

    @classmethod
    def zeros_like(cls, store: ParamStore) -> "OptimizerState":
        return cls(OrderedDict((n, np.zeros_like(store[n])) for n in store.trainable()))

    def copy(self) -> "OptimizerState":
        return OptimizerState(OrderedDict((k, v.copy()) for k, v in self.velocity.items()))


def sgd_step(store: ParamStore, grads: Dict[str, np.ndarray], state: OptimizerState, lr: float,
             cfg: TrainConfig) -> None:
    """
    In place: v <- mu * v + (g + wd * w) for conv weights, v <- mu * v + g
    otherwise; then w <- w - lr * v. Nothing is updated if any gradient is
    non-finite.
    """
    for name in store.trainable():
        g = grads.get(name)
        if g is None:
            raise ContractError(f"no gradient for parameter {name!r}")
        if g.shape != store[name].shape:
            raise ContractError(f"gradient for {name!r} has shape {list(g.shape)}, expected {list(store[name].shape)}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}", {"parameter": name, "lr": lr})

    mu, wd = cfg.momentum, cfg.weight_decay
    for name in store.trainable():
        w = store[name]
        g = grads[name].astype(w.dtype, copy=False)
        if store.kind(name) == CONV_WEIGHT and wd:
            g = g + wd * w
        v = mu * state.velocity[name] + g
        state.velocity[name] = v.astype(w.dtype, copy=False)
        store[name] = (w - lr * state.velocity[name]).astype(w.dtype, copy=False)


# ─── batches ────────────────────────────────────────────────────────────────

def schedule_length(n_samples: int, cfg: TrainConfig) -> Tuple[int, int]:
    """(iterations per epoch, total iterations)."""
    per_epoch = math.ceil(n_samples / cfg.batch_size)
    if per_epoch > 1 and n_samples % cfg.batch_size == 1:
        per_epoch -= 1
    return per_epoch, cfg.max_iters or cfg.max_epochs * per_epoch


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch])).permutation(n)


def batch_indices(order: np.ndarray, position: int, per_epoch: int, batch_size: int) -> np.ndarray:
    """Slice of the epoch order for one iteration; the last batch takes every remaining index."""
    start = position * batch_size
    return order[start:] if position == per_epoch - 1 else order[start:start + batch_size]


def smallest_batch(n_samples: int, batch_size: int) -> int:
    if n_samples <= batch_size:
        return n_samples
    tail = n_samples % batch_size
    return batch_size if tail in (0, 1) else tail


def check_batch_norm_room(model_cfg: ModelConfig, samples: Sequence[Sample], batch_size: int) -> None:
    """
    Reject runs where some batch would reach the deepest batch norm with a
    single value per channel (N * H * W < 2 there).
    """
    scale = UNET_DEEPEST_SCALE if model_cfg.variant == "unet" else DIVISOR
    n = smallest_batch(len(samples), batch_size)
    for s in samples:
        _, h, w = s["image"].shape
        cells = (math.ceil(h / DIVISOR) * DIVISOR // scale) * (math.ceil(w / DIVISOR) * DIVISOR // scale)
        if n * cells < 2:
            raise ConfigurationError(
                f"{s['id']} is {h}x{w}: a batch of {n} gives batch norm a single value per channel "
                f"on the 1/{scale} scale map; use batch_size >= 2 with at least 2 samples, or larger images"
            )


def assemble_batch(samples: Sequence[Sample], indices: Sequence[int], epoch: int, train_cfg: TrainConfig,
                   aug_cfg: AugmentConfig, dtype) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    items = []
    for i in indices:
        i = int(i)
        if train_cfg.augment:
            items.append(random_augment(samples[i], aug_cfg, sample_rng(aug_cfg.seed, epoch, i)))
        else:
            items.append(pad_to_divisor(samples[i]))
    shapes = {s["image"].shape for s in items}
    if len(shapes) != 1:
        raise DataError(f"batch mixes image sizes {sorted(shapes)}: {[s['id'] for s in items]}")
    images = np.stack([s["image"] for s in items]).astype(dtype)
    labels = np.stack([s["mask"] for s in items]).astype(np.int64)
    return images, labels, [s["id"] for s in items]


# ─── training ───────────────────────────────────────────────────────────────

def train(model_cfg: ModelConfig, samples: Sequence[Sample], train_cfg: TrainConfig,
          aug_cfg: Optional[AugmentConfig] = None, resume: Optional[Union[str, Path]] = None,
          stop_at: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None,
          ignore_label: int = IGNORE_LABEL, config_hash: str = "", progress: bool = True) -> TrainResult:
    """
    Train from scratch (or from the checkpoint directory `resume`) until the
    schedule ends or `stop_at` iterations have run in total. With `out_dir`,
    a checkpoint is written after every epoch and at the end, and the
    history is appended to history.csv.
    """
    if not samples:
        raise DataError("training set is empty")
    aug_cfg = aug_cfg or AugmentConfig()
    check_batch_norm_room(model_cfg, samples, train_cfg.batch_size)
    per_epoch, max_iter = schedule_length(len(samples), train_cfg)

    if resume is not None:
        store, optimizer, meta = load_checkpoint(resume, model_cfg, config_hash or None)
        start = meta["iteration"]
        logger.info(f"🔁 Resuming {model_cfg.label} at iteration {start}/{max_iter}")
    else:
        store = build_params(model_cfg, seed=train_cfg.seed)
        optimizer = OptimizerState.zeros_like(store)
        start = 0
    end = max_iter if stop_at is None else min(stop_at, max_iter)

    history: List[HistoryRow] = []
    out = Path(out_dir) if out_dir is not None else None
    bar = tqdm(range(start, end), desc=f"train {model_cfg.label}", unit="it", disable=not progress)
    for it in bar:
        epoch, pos = divmod(it, per_epoch)
        order = epoch_order(train_cfg.seed, epoch, len(samples))
        indices = batch_indices(order, pos, per_epoch, train_cfg.batch_size)
        images, labels, ids = assemble_batch(samples, indices, epoch, train_cfg, aug_cfg, store.dtype)

        lr = poly_lr(it, max_iter, train_cfg)
        tape = Tape()
        bind = Binder(store, tape, "train")
        prob = forward(model_cfg, store, images, mode="train", tape=tape, bind=bind)
        data_loss = segmentation_loss(train_cfg.loss, prob, labels, model_cfg.num_classes, ignore_label)
        losses = total_loss(data_loss, store, train_cfg.weight_decay)
        tape.backward(losses["loss"])
        grads = bind.gradients()

        loss_value = losses["loss"].item()
        if not math.isfinite(loss_value):
            norms = {n: float(np.linalg.norm(g)) for n, g in grads.items()}
            worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:5]
            raise NumericError(
                f"loss became non-finite at iteration {it}",
                {"iteration": it, "batch": ids, "lr": lr, "loss": loss_value, "largest_grad_norms": worst},
            )
        sgd_step(store, grads, optimizer, lr, train_cfg)
        tape.clear()

        row = HistoryRow(iter=it, epoch=epoch, lr=lr, loss=loss_value, reg=losses["reg"].item())
        history.append(row)
        bar.set_postfix(loss=f"{loss_value:.4f}", lr=f"{lr:.2e}")
        debug_log(f"iter {it}", {"batch": ids, "loss": loss_value, "lr": lr})

        done = it + 1
        if out is not None and (done % per_epoch == 0 or done == end):
            save_checkpoint(out, store, optimizer, done, done // per_epoch, train_cfg, aug_cfg, config_hash,
                            position=done % per_epoch)

    iteration = max(start, end)
    if out is not None:
        write_history_csv(out / "history.csv", history, append=resume is not None)
    finished = iteration >= max_iter
    logger.info(f"🏁 {model_cfg.label}: iteration {iteration}/{max_iter}"
                + (f", last loss {history[-1]['loss']:.4f}" if history else ""))
    return TrainResult(store=store, optimizer=optimizer, history=history, iteration=iteration, finished=finished)


def write_history_csv(path: Union[str, Path], rows: Sequence[HistoryRow], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with path.open("w" if fresh else "a", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(["iter", "epoch", "lr", "loss", "reg"])
        for r in rows:
            writer.writerow([r["iter"], r["epoch"], repr(r["lr"]), repr(r["loss"]), repr(r["reg"])])
    return path


# ─── evaluation ─────────────────────────────────────────────────────────────

def evaluate(cfg: ModelConfig, store: ParamStore, samples: Sequence[Sample], tta: bool = False,
             ignore_label: int = IGNORE_LABEL,
             on_prediction: Optional[Callable[[str, np.ndarray], None]] = None) -> EvalTable:
    """
    Per-image metrics plus mean/std aggregates and the pooled-pixel AUC.
    Predictions use eval-mode batch-norm statistics.
    """
    if not samples:
        raise DataError("evaluation set is empty")

    def run(image: np.ndarray) -> np.ndarray:
        return predict(cfg, store, image)

    rows = []
    pooled = []
    for sample in samples:
        prob = tta_predict(run, sample["image"]) if tta else run(sample["image"])
        rows.extend(image_metrics(sample["id"], prob, sample["mask"], ignore_label))
        labels = np.asarray(sample["mask"])
        valid = labels != ignore_label
        pooled.append((binary_view(prob)[0], (labels != 0) & valid, valid))
        if on_prediction is not None:
            on_prediction(sample["id"], prob)
    table = EvalTable(rows=rows, aggregate=aggregate(rows), pooled_auc=pooled_auc(pooled))
    summary = ", ".join(f"{k} {v['mean']:.4f}±{v['std']:.4f}" for k, v in table["aggregate"].items())
    logger.info(f"📊 {cfg.label} on {len(samples)} images{' (TTA)' if tta else ''}: {summary}")
    return table


# ─── checkpoints ────────────────────────────────────────────────────────────

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_checkpoint(directory: Union[str, Path], store: ParamStore, optimizer: OptimizerState, iteration: int,
                    epoch: int, train_cfg: TrainConfig, aug_cfg: Optional[AugmentConfig] = None,
                    config_hash: str = "", position: int = 0) -> CheckpointMeta:
    """
    Parameters and momentum buffers in one CETNSR1 container, plus a JSON
    sidecar. Batch order and augmentation draws are functions of
    (seed, epoch, position), so those three fully describe the RNG state.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict(store.items())
    for name, v in optimizer.velocity.items():
        tensors[VELOCITY_PREFIX + name] = v
    container = directory / CHECKPOINT_TENSORS
    save_tensors(container, tensors)

    meta = CheckpointMeta(
        version=CHECKPOINT_VERSION,
        iteration=iteration,
        epoch=epoch,
        rng={
            "seed": train_cfg.seed,
            "augment_seed": (aug_cfg or AugmentConfig()).seed,
            "epoch": epoch,
            "position": position,
        },
        config_hash=config_hash,
        sha256=_sha256(container),
    )
    (directory / CHECKPOINT_META).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    debug_log(f"checkpoint at iteration {iteration}", {"dir": str(directory)})
    return meta


def load_checkpoint(directory: Union[str, Path], cfg: ModelConfig,
                    config_hash: Optional[str] = None) -> Tuple[ParamStore, OptimizerState, CheckpointMeta]:
    directory = Path(directory)
    meta_path, container = directory / CHECKPOINT_META, directory / CHECKPOINT_TENSORS
    if not meta_path.is_file() or not container.is_file():
        raise IntegrityError(f"no checkpoint in {directory}")
    try:
        meta: CheckpointMeta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise IntegrityError(f"{meta_path}: unreadable checkpoint metadata ({e})") from e
    if meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatchError(meta.get("version"), CHECKPOINT_VERSION)
    if _sha256(container) != meta.get("sha256"):
        raise IntegrityError(f"{container}: checksum mismatch, the checkpoint is corrupted")
    if config_hash and meta.get("config_hash") and meta["config_hash"] != config_hash:
        raise IntegrityError(f"{directory}: checkpoint was written by a different configuration")

    tensors = load_tensors(container)
    store = build_params(cfg)
    store.fill_from(tensors)
    optimizer = OptimizerState.zeros_like(store)
    for name in optimizer.velocity:
        key = VELOCITY_PREFIX + name
        if key not in tensors:
            raise IntegrityError(f"{container}: momentum buffer for {name!r} missing")
        optimizer.velocity[name] = tensors[key].astype(store.dtype)
    return store, optimizer, meta
