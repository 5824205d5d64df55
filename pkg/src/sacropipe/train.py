"""Training loops: one-cycle schedules, discriminative learning rates, frozen-head
warm-up, progressive resizing, and checkpointing on validation improvement.

Both loops write ``history.csv`` (epoch, phase, lr, train_loss, val_metric) and
``best.pt`` next to it. A checkpoint is written only when the monitored metric
strictly improves, so the metrics of saved checkpoints strictly increase.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import imgproc, nets, pipeline
from .errors import ConfigError, NumericalError, ScheduleError
from .manifest import Manifest
from .stats import ConfusionMatrix, matthews

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "phase", "lr", "train_loss", "val_metric")


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class OneCycleConfig:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if not self.max_lr > 0:
            raise ScheduleError("max_lr must be > 0")
        if self.total_steps < 2:
            raise ScheduleError("total_steps must be >= 2")
        if not 0 < self.pct_start < 1:
            raise ScheduleError("pct_start must lie in (0, 1)")
        if not (self.div_factor > 1 and self.final_div_factor > 1):
            raise ScheduleError("div factors must be > 1")

    @property
    def up_steps(self) -> int:
        return min(max(int(round(self.pct_start * self.total_steps)), 1), self.total_steps - 1)


def _cos_interp(a: float, b: float, frac: float) -> float:
    w = (1 - math.cos(math.pi * frac)) / 2
    return (1 - w) * a + w * b


def one_cycle_lr(step: int, cfg: OneCycleConfig) -> float:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine decay to max_lr/final_div_factor."""
    if not 0 <= step <= cfg.total_steps:
        raise ScheduleError(f"step {step} outside [0, {cfg.total_steps}]")
    start = cfg.max_lr / cfg.div_factor
    end = cfg.max_lr / cfg.final_div_factor
    up = cfg.up_steps
    if step <= up:
        return _cos_interp(start, cfg.max_lr, step / up)
    return _cos_interp(cfg.max_lr, end, (step - up) / (cfg.total_steps - up))


def discriminative_lrs(head_lr: float, groups: int, ratio: float) -> list[float]:
    """Group g (0 = earliest) gets ``head_lr / ratio ** (groups - 1 - g)``."""
    if groups < 1:
        raise ConfigError("need at least one layer group")
    if ratio < 1:
        raise ConfigError("lr group ratio must be >= 1")
    return [head_lr / ratio ** (groups - 1 - g) for g in range(groups)]


# ---------------------------------------------------------------------------
# configs


def _from_dict(cls, d: dict | None):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SegTrainConfig:
    epochs: int = 500
    lr: float = 1e-3
    batch: int = 8
    input_size: tuple[int, int] = (512, 512)
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    weight_decay: float = 1e-2
    pct_start: float = 0.3
    w_dice: float = 1.0
    w_ce: float = 1.0
    dice_smooth: float = 1.0
    val_fraction: float = 0.15
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 2.0
    augment: bool = True

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.clahe_tiles = tuple(self.clahe_tiles)
        if self.epochs < 1 or self.batch < 1 or not self.lr > 0 or self.weight_decay < 0:
            raise ConfigError("epochs, batch and lr must be positive")
        nets.UNetConfig(self.input_size, self.channels)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)

    @property
    def clahe(self) -> imgproc.ClaheParams:
        return imgproc.ClaheParams(self.clahe_tiles, self.clahe_clip)

    @property
    def loss_weights(self) -> nets.LossWeights:
        return nets.LossWeights(self.w_dice, self.w_ce, self.dice_smooth)


def desk_seg_config(**overrides) -> SegTrainConfig:
    """Minute-scale segmentation settings: 30 epochs at 128x128."""
    base = dict(epochs=30, input_size=(128, 128), lr=3e-3)
    base.update(overrides)
    return SegTrainConfig(**base)


@dataclass
class ClfTrainConfig:
    size_schedule: list[tuple[int, int, int]] = field(default_factory=lambda: [
        (106, 158, 25), (208, 314, 25), (312, 472, 30), (416, 628, 40)])
    frozen_head_epochs: int = 15
    batch: int = 64
    batch_largest: int = 32
    lr: float = 1e-3
    lr_group_ratio: float = 2.6
    layer_groups: int = 3
    mixup_alpha: float = 0.2
    label_smooth_eps: float = 0.1
    weight_decay: float = 1e-2
    pct_start: float = 0.3
    stages: list[tuple[int, int]] = field(default_factory=lambda: [(32, 1), (64, 1), (128, 1), (256, 1)])
    stem_channels: int = 32
    val_fraction: float = 0.15
    clahe_tiles: tuple[int, int] = (8, 8)
    clahe_clip: float = 2.0
    augment: bool = True
    init_weights: str | None = None

    def __post_init__(self):
        self.size_schedule = [tuple(int(v) for v in s) for s in self.size_schedule]
        self.stages = [tuple(s) for s in self.stages]
        self.clahe_tiles = tuple(self.clahe_tiles)
        if not self.size_schedule:
            raise ConfigError("size_schedule must not be empty")
        areas = [h * w for h, w, _ in self.size_schedule]
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ConfigError("size_schedule must strictly increase in resolution")
        if any(e < 0 for _, _, e in self.size_schedule) or self.frozen_head_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.batch < 1 or self.batch_largest < 1 or not self.lr > 0:
            raise ConfigError("batch and lr must be positive")
        imgproc.MixupParams(self.mixup_alpha)

    @classmethod
    def from_dict(cls, d):
        return _from_dict(cls, d)

    def batch_for(self, index: int) -> int:
        return self.batch_largest if index == len(self.size_schedule) - 1 else self.batch

    @property
    def unfrozen_epochs(self) -> int:
        return sum(e for _, _, e in self.size_schedule)

    @property
    def clahe(self) -> imgproc.ClaheParams:
        return imgproc.ClaheParams(self.clahe_tiles, self.clahe_clip)

    @property
    def model_config(self) -> nets.ClassifierConfig:
        return nets.ClassifierConfig(self.stages, 2, self.layer_groups, self.stem_channels)


def desk_clf_config(**overrides) -> ClfTrainConfig:
    """Minute-scale classifier settings: default resolutions, epochs [5, 5, 6, 8]."""
    base = dict(size_schedule=[(106, 158, 5), (208, 314, 5), (312, 472, 6), (416, 628, 8)],
                frozen_head_epochs=1, batch=16, batch_largest=16, lr=5e-3,
                stages=[(8, 1), (16, 1), (32, 1), (64, 1)], stem_channels=8)
    base.update(overrides)
    return ClfTrainConfig(**base)


# ---------------------------------------------------------------------------
# shared helpers


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]
    best_metric: float
    best_epoch: int
    config_hash: str


def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def write_history(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in HISTORY_FIELDS})


def _check_finite(loss, epoch: int, step: int, lr: float):
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}, lr {lr:.3g}")


def _set_lrs(opt, step: int, cycles: list[OneCycleConfig]) -> float:
    for group, cyc in zip(opt.param_groups, cycles):
        group["lr"] = one_cycle_lr(step, cyc)
    return opt.param_groups[-1]["lr"]


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


# ---------------------------------------------------------------------------
# segmentation


def mean_dice(pred: np.ndarray, target: np.ndarray, classes=(1, 2)) -> float:
    """Hard Dice per foreground class pooled over all images, averaged over classes."""
    scores = []
    for k in classes:
        p, g = pred == k, target == k
        denom = p.sum() + g.sum()
        scores.append(1.0 if denom == 0 else 2.0 * (p & g).sum() / denom)
    return float(np.mean(scores))


@torch.no_grad()
def _predict_labels(model, images: np.ndarray, batch: int) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch):
        x = torch.from_numpy(images[i:i + batch])[:, None]
        out.append(model(x).argmax(1).numpy().astype(np.uint8))
    return np.concatenate(out)


def fit_segmentation(train_images, train_masks, val_images, val_masks, cfg: SegTrainConfig,
                     seed: int, out_dir) -> TrainResult:
    """Train a U-Net on preprocessed arrays (N, H, W); monitor validation mean Dice."""
    if len(val_images) == 0:
        raise ConfigError("validation set is empty")
    if len(train_images) == 0:
        raise ConfigError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = seed_everything(seed)
    model = nets.UNet(nets.UNetConfig(cfg.input_size, cfg.channels))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_images) / cfg.batch)
    cycle = OneCycleConfig(cfg.lr, max(2, steps_per_epoch * cfg.epochs), cfg.pct_start)
    weights = cfg.loss_weights
    aug = imgproc.SEGMENTATION_AUGMENT if cfg.augment else imgproc.NO_AUGMENT
    chash = config_hash(cfg)
    ckpt = out_dir / "best.pt"
    history, best, best_epoch, step = [], -math.inf, -1, 0
    for epoch in range(cfg.epochs):
        model.train()
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(train_images), cfg.batch, rng):
            xs, ys = [], []
            for i in idx:
                img, msk = imgproc.augment(train_images[i], train_masks[i], aug, rng)
                xs.append(img.astype(np.float32))
                ys.append(msk)
            x = torch.from_numpy(np.stack(xs))[:, None]
            y = torch.from_numpy(np.stack(ys).astype(np.int64))
            lr = _set_lrs(opt, step, [cycle])
            loss = nets.dice_ce_loss(model(x), y, weights)
            _check_finite(loss, epoch, step, lr)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
            step += 1
        metric = mean_dice(_predict_labels(model, val_images, cfg.batch), val_masks)
        history.append(dict(epoch=epoch, phase="train", lr=lr, train_loss=float(np.mean(losses)),
                            val_metric=metric))
        log.info("seg epoch %d loss %.4f dice %.4f (%.1fs)", epoch, np.mean(losses), metric,
                 time.perf_counter() - t0)
        if metric > best:
            best, best_epoch = metric, epoch
            nets.save_checkpoint(ckpt, model, dict(epoch=epoch, monitor="val_mean_dice", metric=metric,
                                                   config=asdict(cfg), config_hash=chash, seed=seed))
    write_history(out_dir / "history.csv", history)
    return TrainResult(ckpt, history, best, best_epoch, chash)


def train_segmentation(train: Manifest, val: Manifest, cfg: SegTrainConfig, seed: int,
                       out_dir) -> TrainResult:
    if len(val) == 0:
        raise ConfigError("validation manifest is empty")
    ti, tm = pipeline.load_seg_dataset(train, cfg.input_size, cfg.clahe)
    vi, vm = pipeline.load_seg_dataset(val, cfg.input_size, cfg.clahe)
    return fit_segmentation(ti, tm, vi, vm, cfg, seed, out_dir)


# ---------------------------------------------------------------------------
# classification


def monitor_mcc(labels: np.ndarray, probs: np.ndarray) -> float:
    """Validation MCC at p > 0.5; an undefined MCC counts as 0 for monitoring."""
    pred = probs > 0.5
    lab = labels.astype(bool)
    cm = ConfusionMatrix(int((pred & lab).sum()), int((pred & ~lab).sum()),
                         int((~pred & ~lab).sum()), int((~pred & lab).sum()))
    m = matthews(cm)
    return 0.0 if m is None else float(m)


def _freeze_body(model: nets.Classifier, frozen: bool):
    for m in model.body_modules():
        for p in m.parameters():
            p.requires_grad_(not frozen)


def _augment_batch(images: np.ndarray, idx, params: imgproc.AugmentParams, rng) -> np.ndarray:
    return np.stack([imgproc.augment(images[i], None, params, rng)[0].astype(np.float32)
                     for i in idx])


def load_backbone(model: nets.Classifier, path) -> list[str]:
    """Initialize matching body weights from a checkpoint or raw state dict.

    Tensors whose name or shape does not match are skipped, as is the head.
    Returns the names that were loaded.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"init_weights file not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    state = payload.get("state_dict", payload) if isinstance(payload, dict) else None
    if not isinstance(state, dict):
        raise ConfigError(f"{path} holds no state dict")
    own = model.state_dict()
    picked = {k: v for k, v in state.items()
              if k in own and not k.startswith("head.") and own[k].shape == v.shape}
    if not picked:
        raise ConfigError(f"{path} shares no body weights with the classifier")
    model.load_state_dict(picked, strict=False)
    return sorted(picked)


def fit_classifier(train_bases, train_labels, val_bases, val_labels, cfg: ClfTrainConfig,
                   seed: int, out_dir) -> TrainResult:
    """Progressive-resizing training on CLAHE-equalized source images of any size.

    Per size: a frozen-body phase training only the head, then the best weights
    so far are reloaded, everything is unfrozen and trained with discriminative
    learning rates. Each phase runs its own one-cycle schedule.
    """
    if len(val_bases) == 0:
        raise ConfigError("validation set is empty")
    if len(train_bases) == 0:
        raise ConfigError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_labels = np.asarray(train_labels, dtype=np.int64)
    val_labels = np.asarray(val_labels, dtype=np.int64)
    rng = seed_everything(seed)
    model = nets.Classifier(cfg.model_config)
    if cfg.init_weights:
        load_backbone(model, cfg.init_weights)
    mix = imgproc.MixupParams(cfg.mixup_alpha)
    aug = imgproc.AugmentParams() if cfg.augment else imgproc.NO_AUGMENT
    chash = config_hash(cfg)
    ckpt = out_dir / "best.pt"
    history = []
    best, best_epoch, best_state, best_size = -math.inf, -1, None, None
    epoch = 0

    for si, (h, w, n_unfrozen) in enumerate(cfg.size_schedule):
        size = (h, w)
        batch = cfg.batch_for(si)
        x_train = pipeline.stack_at_size(train_bases, size)
        x_val = pipeline.stack_at_size(val_bases, size)
        steps = math.ceil(len(x_train) / batch)
        for phase, n_ep in (("frozen", cfg.frozen_head_epochs), ("unfrozen", n_unfrozen)):
            if n_ep == 0:
                continue
            if phase == "unfrozen" and best_state is not None:
                model.load_state_dict(best_state)
            frozen = phase == "frozen"
            _freeze_body(model, frozen)
            groups = model.layer_groups()
            if frozen:
                param_groups = [{"params": groups[-1]}]
                max_lrs = [cfg.lr]
            else:
                param_groups = [{"params": g} for g in groups]
                max_lrs = discriminative_lrs(cfg.lr, len(groups), cfg.lr_group_ratio)
            opt = torch.optim.AdamW(param_groups, lr=cfg.lr, weight_decay=cfg.weight_decay)
            total = max(2, steps * n_ep)
            cycles = [OneCycleConfig(m, total, cfg.pct_start) for m in max_lrs]
            step = 0
            for _ in range(n_ep):
                model.train()
                t0 = time.perf_counter()
                losses = []
                for idx in _batches(len(x_train), batch, rng):
                    xb = torch.from_numpy(_augment_batch(x_train, idx, aug, rng))[:, None]
                    yb = torch.from_numpy(train_labels[idx])
                    perm = torch.from_numpy(rng.permutation(len(idx)))
                    xm, lam = imgproc.mixup(xb, xb[perm], yb, yb[perm], mix, rng)
                    lr = _set_lrs(opt, min(step, total), cycles)
                    logits = model(xm)
                    loss = (lam * nets.ce_label_smoothing(logits, yb, cfg.label_smooth_eps)
                            + (1 - lam) * nets.ce_label_smoothing(logits, yb[perm], cfg.label_smooth_eps))
                    _check_finite(loss, epoch, step, lr)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                    losses.append(loss.item())
                    step += 1
                metric = monitor_mcc(val_labels, pipeline.predict_proba(model, x_val, batch))
                history.append(dict(epoch=epoch, phase=f"{phase}@{h}x{w}", lr=lr,
                                    train_loss=float(np.mean(losses)), val_metric=metric))
                log.info("clf epoch %d %s@%dx%d loss %.4f mcc %.4f (%.1fs)", epoch, phase, h, w,
                         np.mean(losses), metric, time.perf_counter() - t0)
                if metric > best:
                    best, best_epoch, best_size = metric, epoch, size
                    best_state = copy.deepcopy(model.state_dict())
                    nets.save_checkpoint(ckpt, model, dict(
                        epoch=epoch, monitor="val_mcc", metric=metric, input_size=list(size),
                        config=asdict(cfg), config_hash=chash, seed=seed))
                epoch += 1
    _freeze_body(model, False)
    write_history(out_dir / "history.csv", history)
    if best_state is None:
        raise ConfigError("no training epochs were configured")
    return TrainResult(ckpt, history, best, best_epoch, chash)


def train_classifier(train: Manifest, val: Manifest, cfg: ClfTrainConfig, variant: str,
                     seed: int, out_dir) -> TrainResult:
    """Train one variant; the variant selects only the source images."""
    pipeline.check_variant(variant)
    if len(val) == 0:
        raise ConfigError("validation manifest is empty")
    tb, tl = pipeline.load_clf_sources(train, variant, cfg.clahe)
    vb, vl = pipeline.load_clf_sources(val, variant, cfg.clahe)
    return fit_classifier(tb, tl, vb, vl, cfg, seed, out_dir)
