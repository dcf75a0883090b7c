"""Stage 1: one shared encoder with separate depth and saliency decoders.

The encoder halves the spatial size five times (3x3 conv + relu, then 2x2
stride-2 conv + relu per level). Each decoder walks back up with lateral 3x3
convs on the skip, a 1x1-projected bilinear upsample of the coarser feature,
and relu after their sum, so per-level feature shapes mirror the encoder's.
Both heads end in a sigmoid at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, relu, sigmoid
from .errors import ConfigError, ContractError
from .losses import bce_loss, l1_ssim_loss
from .ops import bilinear_upsample, conv2d
from .params import ParamStore

DEFAULT_CHANNELS = (16, 32, 64, 64, 64)
LEVELS = 5


@dataclass
class StageOneOutput:
    saliency: Tensor            # (B, 1, H, W) in (0, 1)
    depth: Tensor               # (B, 1, H, W) in (0, 1)
    rgb_feats: list             # encoder features, level i at (H/2^i, W/2^i)
    depth_feats: list           # depth-decoder features, same shapes
    saliency_feats: list        # saliency-decoder features, same shapes


class MultiTaskModel:
    def __init__(self, channels=DEFAULT_CHANNELS, in_channels: int = 3,
                 rng: np.random.Generator | None = None):
        if len(channels) != LEVELS:
            raise ConfigError(f"expected {LEVELS} channel counts, got {len(channels)}")
        self.channels = tuple(int(c) for c in channels)
        self.in_channels = in_channels
        self.params = ParamStore()
        build_encoder(self.params, "enc", in_channels, self.channels, rng)
        for branch in ("depth", "sal"):
            build_decoder(self.params, branch, self.channels, rng)

    @classmethod
    def from_state(cls, arrays: dict) -> "MultiTaskModel":
        channels = tuple(arrays[f"enc{i}.conv.w"].shape[0] for i in range(1, LEVELS + 1))
        in_channels = arrays["enc1.conv.w"].shape[1]
        model = cls(channels=channels, in_channels=in_channels, rng=None)
        model.params.load_state(arrays)
        return model

    def freeze(self) -> None:
        self.params.freeze()


def build_encoder(params: ParamStore, prefix: str, in_channels: int,
                  channels, rng) -> None:
    c_prev = in_channels
    for i, c in enumerate(channels, start=1):
        params.conv(f"{prefix}{i}.conv", c_prev, c, 3, rng)
        params.conv(f"{prefix}{i}.down", c, c, 2, rng)
        c_prev = c


def run_encoder(params: ParamStore, prefix: str, x: Tensor) -> list:
    feats = []
    h = x
    for i in range(1, LEVELS + 1):
        h = relu(conv2d(h, params[f"{prefix}{i}.conv.w"], params[f"{prefix}{i}.conv.b"],
                        stride=1, padding=1))
        h = relu(conv2d(h, params[f"{prefix}{i}.down.w"], params[f"{prefix}{i}.down.b"],
                        stride=2, padding=0))
        feats.append(h)
    return feats


def build_decoder(params: ParamStore, branch: str, channels, rng) -> None:
    for i in range(LEVELS, 0, -1):
        params.conv(f"{branch}{i}.lat", channels[i - 1], channels[i - 1], 3, rng)
        if i < LEVELS:
            params.conv(f"{branch}{i}.proj", channels[i], channels[i - 1], 1, rng)
    params.conv(f"{branch}.head", channels[0], 1, 3, rng)


def run_decoder(params: ParamStore, branch: str, feats: list,
                out_h: int, out_w: int) -> tuple[Tensor, list]:
    d = None
    levels: list = [None] * LEVELS
    for i in range(LEVELS, 0, -1):
        skip = feats[i - 1]
        t = conv2d(skip, params[f"{branch}{i}.lat.w"], params[f"{branch}{i}.lat.b"],
                   stride=1, padding=1)
        if d is not None:
            _, _, hh, ww = skip.data.shape
            up = bilinear_upsample(d, hh, ww)
            t = add(t, conv2d(up, params[f"{branch}{i}.proj.w"], params[f"{branch}{i}.proj.b"]))
        d = relu(t)
        levels[i - 1] = d
    logits = conv2d(d, params[f"{branch}.head.w"], params[f"{branch}.head.b"],
                    stride=1, padding=1)
    head = sigmoid(bilinear_upsample(logits, out_h, out_w))
    return head, levels


def multitask_forward(model: MultiTaskModel, image: Tensor) -> StageOneOutput:
    """Predict saliency and depth maps plus the three feature pyramids."""
    if image.data.ndim != 4 or image.data.shape[1] != model.in_channels:
        raise ConfigError(
            f"multitask_forward: expected (B, {model.in_channels}, H, W), "
            f"got {image.data.shape}")
    _, _, h, w = image.data.shape
    if h % 32 or w % 32:
        raise ConfigError(f"multitask_forward: spatial size {h}x{w} not divisible by 32")
    rgb_feats = run_encoder(model.params, "enc", image)
    depth, depth_feats = run_decoder(model.params, "depth", rgb_feats, h, w)
    saliency, sal_feats = run_decoder(model.params, "sal", rgb_feats, h, w)
    return StageOneOutput(saliency=saliency, depth=depth, rgb_feats=rgb_feats,
                          depth_feats=depth_feats, saliency_feats=sal_feats)


def stage1_loss(out: StageOneOutput, gt_mask: Tensor, gt_depth: Tensor) -> Tensor:
    """Saliency cross entropy plus depth L1+SSIM, equally weighted."""
    return add(bce_loss(out.saliency, gt_mask), l1_ssim_loss(out.depth, gt_depth))


def save_stage1(path, model: MultiTaskModel) -> None:
    from .fileio import save_checkpoint
    save_checkpoint(path, 1, model.params.state())


def load_stage1(path) -> MultiTaskModel:
    from .fileio import load_checkpoint
    _, arrays = load_checkpoint(path, stage=1)
    try:
        return MultiTaskModel.from_state(arrays)
    except KeyError as e:
        raise ContractError(f"stage-1 checkpoint missing parameter {e}") from None
