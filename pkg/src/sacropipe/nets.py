"""Compact U-Net segmenter, residual CNN classifier, losses, and checkpoint format.

Checkpoint container (``torch.save`` of a plain dict, loadable with
``weights_only=True``)::

    {
      "format": "sacropipe-checkpoint",
      "format_version": 1,
      "kind": "unet" | "classifier",
      "config": {...},          # echo of UNetConfig / ClassifierConfig
      "state_dict": {...},      # weight tensors
      "metadata": {...},        # epoch, monitored metric, training config, ...
    }
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ShapeError, UpstreamMissingError

CHECKPOINT_FORMAT = "sacropipe-checkpoint"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# U-Net


@dataclass
class UNetConfig:
    input_size: tuple[int, int] = (512, 512)
    channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    classes: int = 3

    def __post_init__(self):
        self.input_size = tuple(self.input_size)
        self.channels = list(self.channels)
        if len(self.channels) < 3:
            raise ConfigError("U-Net needs at least 3 levels")
        div = 2 ** (len(self.channels) - 1)
        if self.input_size[0] % div or self.input_size[1] % div:
            raise ConfigError(f"input size must be divisible by {div}")


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    """Symmetric encoder/decoder with skip connections; logits at input resolution."""

    def __init__(self, config: UNetConfig = UNetConfig()):
        super().__init__()
        self.config = config
        ch = config.channels
        self.down = nn.ModuleList()
        cin = 1
        for c in ch:
            self.down.append(_double_conv(cin, c))
            cin = c
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c in reversed(ch[:-1]):
            self.up.append(nn.ConvTranspose2d(cin, c, 2, stride=2))
            self.dec.append(_double_conv(2 * c, c))
            cin = c
        self.head = nn.Conv2d(cin, config.classes, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != tuple(self.config.input_size):
            raise ShapeError(f"U-Net expects (N, 1, {self.config.input_size[0]}, "
                             f"{self.config.input_size[1]}), got {tuple(x.shape)}")
        skips = []
        for i, block in enumerate(self.down):
            x = block(x)
            if i < len(self.down) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for up, dec in zip(self.up, self.dec):
            x = up(x)
            x = dec(torch.cat([skips.pop(), x], dim=1))
        return self.head(x)


# ---------------------------------------------------------------------------
# classifier


@dataclass
class ClassifierConfig:
    stages: list[tuple[int, int]] = field(
        default_factory=lambda: [(32, 1), (64, 1), (128, 1), (256, 1)])
    classes: int = 2
    layer_groups: int = 3
    stem_channels: int = 32

    def __post_init__(self):
        self.stages = [tuple(s) for s in self.stages]
        if not self.stages:
            raise ConfigError("classifier needs at least one stage")
        if self.layer_groups < 1:
            raise ConfigError("layer_groups must be >= 1")


MIN_CLASSIFIER_INPUT = 64


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False),
                                          nn.BatchNorm2d(cout))

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + (x if self.shortcut is None else self.shortcut(x)))


class Classifier(nn.Module):
    """Residual CNN with a global-average-pool + linear head.

    Named children: ``stem``, ``stage1`` .. ``stageN``, ``head``. Global pooling
    lets the same weights run at every progressive-resizing resolution.
    """

    def __init__(self, config: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.config = config
        self.stem = nn.Sequential(
            nn.Conv2d(1, config.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(config.stem_channels), nn.ReLU(inplace=True), nn.MaxPool2d(2))
        cin = config.stem_channels
        self.stage_names = []
        for i, (c, blocks) in enumerate(config.stages):
            layers = [BasicBlock(cin, c, 1 if i == 0 else 2)]
            layers += [BasicBlock(c, c, 1) for _ in range(blocks - 1)]
            name = f"stage{i + 1}"
            self.add_module(name, nn.Sequential(*layers))
            self.stage_names.append(name)
            cin = c
        self.head = nn.Linear(cin, config.classes)

    def features(self, x):
        x = self.stem(x)
        for name in self.stage_names:
            x = getattr(self, name)(x)
        return x

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"classifier expects (N, 1, H, W), got {tuple(x.shape)}")
        if min(x.shape[-2:]) < MIN_CLASSIFIER_INPUT:
            raise ShapeError(f"classifier input must be at least {MIN_CLASSIFIER_INPUT}x"
                             f"{MIN_CLASSIFIER_INPUT}, got {tuple(x.shape[-2:])}")
        x = self.features(x)
        return self.head(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))

    @property
    def last_conv_layer(self) -> str:
        return self.stage_names[-1]

    def layer_groups(self, n_groups: int | None = None) -> list[list[nn.Parameter]]:
        """Parameters split into ``n_groups`` groups from earliest layers to the head.

        The head is always its own (last) group; body modules are spread over the
        remaining groups in order.
        """
        g = self.config.layer_groups if n_groups is None else n_groups
        head = list(self.head.parameters())
        body_modules = [self.stem] + [getattr(self, n) for n in self.stage_names]
        if g == 1:
            return [[p for m in body_modules for p in m.parameters()] + head]
        chunks = [[] for _ in range(g - 1)]
        for i, m in enumerate(body_modules):
            chunks[min(i * (g - 1) // len(body_modules), g - 2)].extend(m.parameters())
        return chunks + [head]

    def body_modules(self) -> list[nn.Module]:
        return [self.stem] + [getattr(self, n) for n in self.stage_names]


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossWeights:
    w_dice: float = 1.0
    w_ce: float = 1.0
    dice_smooth: float = 1.0
    label_smooth_eps: float = 0.1

    def __post_init__(self):
        if self.w_dice < 0 or self.w_ce < 0 or self.w_dice + self.w_ce <= 0:
            raise ConfigError("loss weights must be >= 0 with a positive sum")
        if not self.dice_smooth > 0:
            raise ConfigError("dice_smooth must be > 0")
        if not 0 <= self.label_smooth_eps < 1:
            raise ConfigError("label_smooth_eps must lie in [0, 1)")


def soft_dice_loss(logits, target, smooth: float = 1.0):
    """1 - mean over classes of (2 sum(p g) + s) / (sum p + sum g + s), sums over batch and pixels."""
    k = logits.shape[1]
    p = torch.softmax(logits, dim=1)
    g = F.one_hot(target.long(), k).permute(0, 3, 1, 2).to(p.dtype)
    dims = (0, 2, 3)
    inter = (p * g).sum(dims)
    dice = (2 * inter + smooth) / (p.sum(dims) + g.sum(dims) + smooth)
    return 1 - dice.mean()


def dice_ce_loss(logits, target, weights: LossWeights = LossWeights()):
    """Weighted sum of soft Dice loss and pixelwise cross-entropy.

    ``logits``: (N, K, H, W); ``target``: (N, H, W) integer labels.
    """
    if logits.ndim != 4 or target.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ShapeError(f"logits {tuple(logits.shape)} and target {tuple(target.shape)} mismatch")
    loss = logits.new_zeros(())
    if weights.w_dice:
        loss = loss + weights.w_dice * soft_dice_loss(logits, target, weights.dice_smooth)
    if weights.w_ce:
        loss = loss + weights.w_ce * F.cross_entropy(logits, target.long())
    return loss


def ce_label_smoothing(logits, target, eps: float = 0.1, reduction: str = "mean"):
    """Cross-entropy against ``(1 - eps) * onehot + eps / K``."""
    if not 0 <= eps < 1:
        raise ConfigError("eps must lie in [0, 1)")
    k = logits.shape[-1]
    logp = torch.log_softmax(logits, dim=-1)
    q = F.one_hot(target.long(), k).to(logp.dtype) * (1 - eps) + eps / k
    per_sample = -(q * logp).sum(-1)
    if reduction == "none":
        return per_sample
    return per_sample.mean()


# ---------------------------------------------------------------------------
# checkpoints


def build_model(kind: str, config: dict) -> nn.Module:
    if kind == "unet":
        return UNet(UNetConfig(**config))
    if kind == "classifier":
        return Classifier(ClassifierConfig(**config))
    raise ConfigError(f"unknown model kind {kind!r}")


def model_kind(model: nn.Module) -> str:
    if isinstance(model, UNet):
        return "unet"
    if isinstance(model, Classifier):
        return "classifier"
    raise ConfigError(f"cannot checkpoint {type(model).__name__}")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def save_checkpoint(path, model: nn.Module, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "kind": model_kind(model),
        "config": _plain(asdict(model.config)),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "metadata": _plain(metadata or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[nn.Module, dict]:
    path = Path(path)
    if not path.exists():
        raise UpstreamMissingError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('format_version')}")
    model = build_model(payload["kind"], payload["config"])
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload["metadata"]
