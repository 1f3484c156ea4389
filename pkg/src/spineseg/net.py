"""Modified attention U-Net: six encoder and six decoder levels with gated skips.

Each encoder level is two 3x3 conv+BN+ReLU blocks followed by 2x max-pooling,
with channel width doubling per level. The decoder mirrors the encoder with 2x
upsampling; skip connections pass through additive attention gates before
concatenation. A final 1x1 convolution produces one logit map per class.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError

CHECKPOINT_FORMAT_VERSION = 1

GATE_MODES = ("attention", "passthrough")
UP_MODES = ("bilinear", "transpose")
HEAD_MODES = ("softmax", "sigmoid")


@dataclass
class ModelConfig:
    levels: int = 6
    base_channels: int = 16
    in_channels: int = 1
    n_classes: int = 8
    gate_mode: str = "attention"
    up_mode: str = "bilinear"
    head_mode: str = "softmax"

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.gate_mode not in GATE_MODES:
            raise ConfigError(f"gate_mode must be one of {GATE_MODES}")
        if self.up_mode not in UP_MODES:
            raise ConfigError(f"up_mode must be one of {UP_MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")

    @property
    def encoder_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels)]


class ConvBlock(nn.Module):
    """Two 3x3 convolutions, each followed by batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class AttentionGate(nn.Module):
    """Additive attention over a skip connection.

    Skip and gating signal are projected to an intermediate width, summed,
    passed through ReLU and a 1x1 projection to a single channel, and squashed
    with a sigmoid. The resulting coefficient map (strictly inside (0, 1))
    multiplies the skip features. A gating signal at coarser resolution is
    bilinearly upsampled to the skip's size first.
    """

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int | None = None):
        super().__init__()
        inter_ch = inter_ch or max(skip_ch // 2, 1)
        self.w_skip = nn.Sequential(
            nn.Conv2d(skip_ch, inter_ch, kernel_size=1),
            nn.BatchNorm2d(inter_ch),
        )
        self.w_gate = nn.Sequential(
            nn.Conv2d(gate_ch, inter_ch, kernel_size=1),
            nn.BatchNorm2d(inter_ch),
        )
        self.psi = nn.Conv2d(inter_ch, 1, kernel_size=1)

    def coefficients(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        """Attention map alpha with shape (B, 1, H, W), values in (0, 1)."""
        if gating.shape[-2:] != skip.shape[-2:]:
            gating = F.interpolate(
                gating, size=skip.shape[-2:], mode="bilinear", align_corners=False
            )
        summed = F.relu(self.w_skip(skip) + self.w_gate(gating))
        return torch.sigmoid(self.psi(summed))

    def forward(self, skip: torch.Tensor, gating: torch.Tensor) -> torch.Tensor:
        return self.coefficients(skip, gating) * skip


class DecoderBlock(nn.Module):
    """Upsample, gate the skip connection, concatenate, and convolve."""

    def __init__(self, in_ch: int, out_ch: int, gate_mode: str, up_mode: str):
        super().__init__()
        if up_mode == "transpose":
            self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=2, stride=2)
        else:
            self.up = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(in_ch, out_ch, kernel_size=1),
            )
        # The gate is built in both modes so parameter layout (and therefore
        # seeded initialization) is identical; passthrough simply bypasses it.
        self.gate = AttentionGate(skip_ch=out_ch, gate_ch=out_ch)
        self.gate_mode = gate_mode
        self.conv = ConvBlock(2 * out_ch, out_ch)

    def forward(self, x, skip):
        x = self.up(x)
        if self.gate_mode == "attention":
            skip = self.gate(skip, x)
        return self.conv(torch.cat([x, skip], dim=1))


class AttentionUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_channels
        self.encoders = nn.ModuleList()
        in_ch = config.in_channels
        for w in widths:
            self.encoders.append(ConvBlock(in_ch, w))
            in_ch = w
        self.pool = nn.MaxPool2d(2)
        bottleneck_ch = widths[-1] * 2
        self.bottleneck = ConvBlock(widths[-1], bottleneck_ch)
        self.decoders = nn.ModuleList()
        up_in = bottleneck_ch
        for w in reversed(widths):
            self.decoders.append(DecoderBlock(up_in, w, config.gate_mode, config.up_mode))
            up_in = w
        self.head = nn.Conv2d(widths[0], config.n_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, in_channels, H, W) -> (B, n_classes, H, W) raw logits."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise DataError(f"expected (B, {self.config.in_channels}, H, W), got {tuple(x.shape)}")
        factor = 2**self.config.levels
        if x.shape[-2] % factor or x.shape[-1] % factor:
            raise DataError(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2^levels = {factor}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for dec, skip in zip(self.decoders, reversed(skips)):
            x = dec(x, skip)
        return self.head(x)


def build_model(config: ModelConfig, seed: int) -> AttentionUNet:
    """Construct a model with deterministic, seed-controlled initialization."""
    torch.manual_seed(seed)
    return AttentionUNet(config)


def forward(model: AttentionUNet, batch: torch.Tensor) -> torch.Tensor:
    """Raw logits for a batch; alias for ``model(batch)``."""
    return model(batch)


def predict(model: AttentionUNet, batch: torch.Tensor) -> torch.Tensor:
    """Per-pixel class decisions (B, H, W) via argmax over class probabilities.

    Softmax and per-channel sigmoid heads share the same argmax, so the head
    mode only matters to the loss; both decode identically here.
    """
    model.eval()
    with torch.no_grad():
        logits = model(batch)
        if model.config.head_mode == "sigmoid":
            scores = torch.sigmoid(logits)
        else:
            scores = torch.softmax(logits, dim=1)
        return scores.argmax(dim=1)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(model: AttentionUNet, seed: int, path: str | Path) -> None:
    """Serialize parameters, config, and seed (versioned layout, see README)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(model.config),
        "seed": int(seed),
        "state_dict": model.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[AttentionUNet, int]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(
            f"unsupported checkpoint format version {version} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    config = ModelConfig(**payload["model_config"])
    model = AttentionUNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, int(payload["seed"])
