"""Pre-training, fine-tuning and validation loops."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .datagen import Dataset
from .nn import tensor as T
from .nn.optim import AdamState, adam_step
from .nn.tensor import DimensionError, NumericError, Tensor
from .unet import ModelConfig, UNet, load_pretrained_for_task, save_weights

THRESHOLD = 0.1  # validation loss that counts as converged


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    seed: int = 0
    val_fraction: float = 0.1
    checkpoint_every: int = 0  # epochs; 0 disables
    patience: int | None = None
    checkpoint_dir: str | None = None

    @classmethod
    def for_finetune(cls, pretrain: "TrainConfig | None" = None, **kw) -> "TrainConfig":
        """Fine-tune settings: a tenth of the pre-training learning rate."""
        base = pretrain or cls()
        return replace(base, lr=base.lr / 10.0, **kw)

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunLog:
    kind: str
    config: dict
    epochs: list[dict] = field(default_factory=list)
    final_weights: str | None = None
    extra: dict = field(default_factory=dict)

    def epochs_to_threshold(self, threshold: float = THRESHOLD) -> int | None:
        for e in self.epochs:
            if e["val_loss"] is not None and e["val_loss"] < threshold:
                return e["epoch"]
        return None

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "RunLog":
        return cls(**json.loads(Path(path).read_text()))


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (train, val) split; a nonzero fraction keeps at least one validation sample."""
    perm = np.random.default_rng(np.random.SeedSequence([seed, 7])).permutation(n)
    n_val = 0 if val_fraction <= 0 or n < 2 else max(1, int(round(val_fraction * n)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def per_sample_dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0) -> np.ndarray:
    """1 − mean over channels of the smoothed dice coefficient, one value per sample."""
    pred = pred.astype(np.float64)
    target = target.astype(np.float64)
    inter = (pred * target).sum(axis=(2, 3))
    denom = pred.sum(axis=(2, 3)) + target.sum(axis=(2, 3))
    d = (2.0 * inter + smooth) / (denom + smooth)
    return 1.0 - d.mean(axis=1)


def evaluate(model, dataset: Dataset, batch: int = 16, indices: Sequence[int] | None = None) -> float:
    """Mean per-sample soft dice loss; never touches the weights."""
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        return float("nan")
    cfg = getattr(model, "config", None)
    if cfg is not None:
        want = cfg.in_channels + cfg.command_channels
        have = dataset.n_layers + dataset.n_command
        if want != have or cfg.patch_px != dataset.patch_px:
            raise DimensionError(f"model takes {want}×{cfg.patch_px}² inputs, dataset has "
                                 f"{have}×{dataset.patch_px}²")
    losses = []
    for i in range(0, len(idx), batch):
        x, y = dataset.batch(idx[i:i + batch])
        losses.append(per_sample_dice_loss(np.asarray(model.predict(x)), y))
    return float(np.concatenate(losses).mean())


def _save_ckpt(model: UNet, cfg: TrainConfig, kind: str, epoch: int) -> str | None:
    if not cfg.checkpoint_dir:
        return None
    d = Path(cfg.checkpoint_dir)
    d.mkdir(parents=True, exist_ok=True)
    path = d / f"{kind}_epoch{epoch:03d}.alfw"
    save_weights(model, path)
    return str(path)


def train_loop(model: UNet, dataset: Dataset, cfg: TrainConfig, kind: str,
               on_epoch: Callable[[dict], None] | None = None) -> RunLog:
    """Minimize soft dice loss with Adam over seeded shuffles of the training split."""
    cfg.validate()
    log = RunLog(kind, asdict(cfg))
    train_idx, val_idx = split_indices(len(dataset), cfg.val_fraction, cfg.seed)
    log.extra["train_size"] = int(len(train_idx))
    log.extra["val_size"] = int(len(val_idx))
    if len(val_idx):
        log.extra["initial_val_loss"] = evaluate(model, dataset, indices=val_idx)
    params = model.parameters()
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    best, stale = math.inf, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = train_idx[rng.permutation(len(train_idx))]
        total, seen = 0.0, 0
        for b, i in enumerate(range(0, len(order), cfg.batch_size)):
            x, y = dataset.batch(order[i:i + cfg.batch_size])
            model.zero_grad()
            pred = model.forward(Tensor(x))
            loss = T.soft_dice_loss(pred, y)
            val = float(loss.data)
            if not math.isfinite(val):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(params, [p.grad for p in params], state)
            total += val * len(x)
            seen += len(x)
        val_loss = evaluate(model, dataset, indices=val_idx) if len(val_idx) else None
        rec = {"epoch": epoch, "train_loss": total / max(seen, 1), "val_loss": val_loss,
               "wall_time": time.perf_counter() - t0}
        log.epochs.append(rec)
        if on_epoch:
            on_epoch(rec)
        if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            _save_ckpt(model, cfg, kind, epoch)
        if cfg.patience is not None and val_loss is not None:
            if val_loss < best - 1e-6:
                best, stale = val_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.extra["early_stop_epoch"] = epoch
                    break
    return log


def pretrain(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
             weights_path=None, model_seed: int | None = None) -> tuple[UNet, RunLog]:
    if dataset.n_command:
        raise ValueError("pre-training data must not carry command channels")
    if model_config.command_channels:
        raise ValueError("the foundation model takes no command channels")
    model = UNet(model_config, seed=train_config.seed if model_seed is None else model_seed)
    log = train_loop(model, dataset, train_config, "pretrain")
    if weights_path is not None:
        save_weights(model, weights_path)
        log.final_weights = str(weights_path)
    return model, log


def finetune(foundation, foundation_config: ModelConfig, dataset: Dataset, task_config: ModelConfig,
             train_config: TrainConfig, weights_path=None, task: str = "") -> tuple[UNet, RunLog]:
    """Start from foundation weights (new stem slices random) and train on task data."""
    if dataset.n_command != task_config.command_channels:
        raise DimensionError(f"dataset has {dataset.n_command} command channels, "
                             f"model expects {task_config.command_channels}")
    model, report = load_pretrained_for_task(foundation, foundation_config, task_config,
                                             seed=train_config.seed)
    log = train_loop(model, dataset, train_config, "finetune")
    log.extra.update({"task": task, "copied": report.copied, "fresh": report.fresh})
    if weights_path is not None:
        save_weights(model, weights_path)
        log.final_weights = str(weights_path)
    return model, log


def scratch(dataset: Dataset, task_config: ModelConfig, train_config: TrainConfig,
            task: str = "") -> tuple[UNet, RunLog]:
    model = UNet(task_config, seed=train_config.seed)
    log = train_loop(model, dataset, train_config, "scratch")
    log.extra["task"] = task
    return model, log


# ----------------------------------------------------------------------------
# fine-tune versus scratch


@dataclass
class CompareRow:
    task: str
    variant: str
    size: int
    repeat: int
    score: float
    epochs_to_threshold: int | None


CSV_COLUMNS = ("task", "variant", "size", "repeat", "score", "epochs_to_threshold")


def compare_scratch_vs_finetune(task: str, sizes: Sequence[int], repeats: int, seeds: Sequence[int],
                                make_dataset: Callable[[int, int], Dataset],
                                foundation, foundation_config: ModelConfig,
                                task_config: ModelConfig, scratch_config: TrainConfig,
                                score: Callable[[UNet], float],
                                finetune_config: TrainConfig | None = None,
                                csv_path=None) -> list[CompareRow]:
    """Train both variants per (size, repeat) and score each with ``score``.

    ``make_dataset(size, seed)`` builds the training set; fine-tuning uses a
    tenth of the scratch learning rate unless ``finetune_config`` says otherwise.
    """
    if len(seeds) < repeats:
        raise ValueError("need one seed per repeat")
    ft_cfg = finetune_config or TrainConfig.for_finetune(scratch_config)
    rows: list[CompareRow] = []
    for size in sizes:
        for r in range(repeats):
            seed = int(seeds[r])
            ds = make_dataset(size, seed)
            m, log = scratch(ds, task_config, replace(scratch_config, seed=seed), task)
            rows.append(CompareRow(task, "scratch", size, r, float(score(m)), log.epochs_to_threshold()))
            m, log = finetune(foundation, foundation_config, ds, task_config,
                              replace(ft_cfg, seed=seed), task=task)
            rows.append(CompareRow(task, "finetune", size, r, float(score(m)), log.epochs_to_threshold()))
    if csv_path is not None:
        write_compare_csv(rows, csv_path)
    return rows


def write_compare_csv(rows: Sequence[CompareRow], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.task, r.variant, r.size, r.repeat, f"{r.score:.6f}",
                        "" if r.epochs_to_threshold is None else r.epochs_to_threshold])
