"""Concatenated two-stage encoder-decoder network.

Stage one (enhancement) maps the raw 3-channel fundus image to a
3-channel enhanced image bounded by a sigmoid, which is the inspectable
intermediate handed to clinicians.  Stage two (segmentation) consumes the
enhancement map alone and produces a per-pixel vessel probability through
a logistic output.  Each stage is a U-Net with four down/up levels, two
3x3 convolutions per level, channel doubling from ``base_channels``, skip
connections, and bilinear upsampling.  No supervision touches the
enhancement map directly; it is learned end-to-end through the
segmentation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DOWNSAMPLES = 4  # ties to the 16-pixel padding grid

BCE_EPS = 1e-7


class ShapeError(ValueError):
    """Input spatial dimensions incompatible with the network."""


@dataclass
class ModelConfig:
    base_channels: int = 32
    enhancement_channels: int = 3
    output_channels: int = 1
    feed_raw_to_segmenter: bool = False  # ablation flag: concat raw input with I_e
    seed: int = 0


@dataclass
class ModelCheckpoint:
    state_dict: dict
    config: ModelConfig
    trained_on: list[str] = field(default_factory=list)
    fold: int | None = None
    step: int = 0


class _DoubleConv(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class UNet(nn.Module):
    """Four-level U-Net with bilinear upsampling and a sigmoid output."""

    def __init__(self, c_in: int, c_out: int, base: int = 32):
        super().__init__()
        chans = [base * 2**i for i in range(DOWNSAMPLES + 1)]
        self.inc = _DoubleConv(c_in, chans[0])
        self.downs = nn.ModuleList(
            _DoubleConv(chans[i], chans[i + 1]) for i in range(DOWNSAMPLES)
        )
        self.ups = nn.ModuleList(
            _DoubleConv(chans[i + 1] + chans[i], chans[i]) for i in reversed(range(DOWNSAMPLES))
        )
        self.out = nn.Conv2d(chans[0], c_out, 1)

    def forward(self, x):
        feats = [self.inc(x)]
        for down in self.downs:
            feats.append(down(F.max_pool2d(feats[-1], 2)))
        x = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = up(torch.cat([skip, x], dim=1))
        return torch.sigmoid(self.out(x))


class VesselNet(nn.Module):
    """Enhancement U-Net chained into a segmentation U-Net."""

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(self.config.seed)
        c = self.config
        self.enhancer = UNet(3, c.enhancement_channels, c.base_channels)
        seg_in = c.enhancement_channels + (3 if c.feed_raw_to_segmenter else 0)
        self.segmenter = UNet(seg_in, c.output_channels, c.base_channels)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (enhancement map B x 3 x H x W, probability map B x 1 x H x W)."""
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ShapeError(
                f"spatial dims {tuple(x.shape[-2:])} not divisible by 16; pad with pad_to_grid first"
            )
        enhanced = self.enhancer(x)
        seg_in = torch.cat([enhanced, x], dim=1) if self.config.feed_raw_to_segmenter else enhanced
        prob = self.segmenter(seg_in)
        return enhanced, prob


def loss_bce(
    prob: torch.Tensor, target: torch.Tensor, weights: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean per-pixel binary cross entropy on probabilities.

    Probabilities are clamped away from {0,1} so the loss stays finite;
    soft targets in [0,1] are allowed (pseudo labels).
    """
    if prob.shape != target.shape:
        raise ShapeError(f"prediction shape {tuple(prob.shape)} != target {tuple(target.shape)}")
    p = prob.clamp(BCE_EPS, 1.0 - BCE_EPS)
    per_pixel = -(target * torch.log(p) + (1.0 - target) * torch.log1p(-p))
    if weights is None:
        return per_pixel.mean()
    return (per_pixel * weights).sum() / weights.sum()


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """H x W x 3 float array in [0,1] -> 1 x 3 x H x W float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float().unsqueeze(0)


@torch.no_grad()
def forward_numpy(model: VesselNet, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run the network on an H x W x 3 array; returns (enhancement H x W x 3, prob H x W)."""
    model.eval()
    enhanced, prob = model(image_to_tensor(image))
    return (
        enhanced[0].permute(1, 2, 0).numpy().astype(np.float64),
        prob[0, 0].numpy().astype(np.float64),
    )


def make_checkpoint(
    model: VesselNet, trained_on: list[str], fold: int | None = None, step: int = 0
) -> ModelCheckpoint:
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return ModelCheckpoint(
        state_dict=state, config=model.config, trained_on=list(trained_on), fold=fold, step=step
    )


def model_from_checkpoint(ckpt: ModelCheckpoint) -> VesselNet:
    model = VesselNet(ckpt.config)
    model.load_state_dict(ckpt.state_dict)
    model.eval()
    return model


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": ckpt.state_dict,
            "config": asdict(ckpt.config),
            "trained_on": ckpt.trained_on,
            "fold": ckpt.fold,
            "step": ckpt.step,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    blob = torch.load(path, weights_only=False)
    return ModelCheckpoint(
        state_dict=blob["state_dict"],
        config=ModelConfig(**blob["config"]),
        trained_on=blob["trained_on"],
        fold=blob["fold"],
        step=blob["step"],
    )


def parameter_count(config: ModelConfig) -> int:
    return sum(p.numel() for p in VesselNet(config).parameters())
