"""Stage 2: multi-source fusion producing the moving-object mask.

Per pyramid level the source features (RGB encoder, depth decoder, flow
encoder, saliency decoder) are concatenated; each source gets its own
attention branch (mix conv + relu, squeeze to one channel, pyramid pooling at
grids {2, 4, 6, global} upsampled and fused by a 1x1 conv, sigmoid). The
enhanced features pass through a purification step (common conv minus
exclusive conv) and a top-down decoder ending in a sigmoid head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, mul, relu, sigmoid, sub
from .errors import ConfigError, ContractError, DimensionError
from .losses import bce_loss
from .ops import GLOBAL, bilinear_upsample, concat_channels, conv2d, pyramid_pool
from .params import ParamStore
from .stage1 import LEVELS, StageOneOutput, build_encoder, run_encoder

SOURCES = ("rgb", "d", "op", "ss")
POOL_BINS = (2, 4, 6, GLOBAL)
DEFAULT_C_MID = 32


@dataclass
class IsamBranch:
    mix_w: Tensor
    mix_b: Tensor
    squeeze_w: Tensor
    squeeze_b: Tensor
    att_w: Tensor
    att_b: Tensor


@dataclass
class FpmLevel:
    comm_w: Tensor
    comm_b: Tensor
    exclu_w: Tensor | None
    exclu_b: Tensor | None


class FusionModel:
    def __init__(self, channels, c_mid: int = DEFAULT_C_MID, sources=SOURCES,
                 use_isam: bool = True, use_fpm: bool = True,
                 rng: np.random.Generator | None = None):
        unknown = [s for s in sources if s not in SOURCES]
        if unknown or not sources:
            raise ConfigError(f"invalid source set {tuple(sources)}")
        self.sources = tuple(s for s in SOURCES if s in set(sources))
        self.channels = tuple(int(c) for c in channels)
        if len(self.channels) != LEVELS:
            raise ConfigError(f"expected {LEVELS} channel counts, got {len(self.channels)}")
        self.c_mid = int(c_mid)
        self.use_isam = bool(use_isam)
        self.use_fpm = bool(use_fpm)
        self.params = ParamStore()
        p = self.params

        if "op" in self.sources:
            build_encoder(p, "flow", 3, self.channels, rng)

        n_src = len(self.sources)
        self.isam: list[list[IsamBranch]] = []
        self.fpm: list[FpmLevel] = []
        for i, c in enumerate(self.channels, start=1):
            cat_c = n_src * c
            if self.use_isam:
                level_branches = []
                for src in self.sources:
                    mw, mb = p.conv(f"isam{i}.{src}.mix", cat_c, self.c_mid, 3, rng)
                    sw, sb = p.conv(f"isam{i}.{src}.squeeze", self.c_mid, 1, 3, rng)
                    aw, ab = p.conv(f"isam{i}.{src}.att", len(POOL_BINS), 1, 1, rng)
                    level_branches.append(IsamBranch(mw, mb, sw, sb, aw, ab))
                self.isam.append(level_branches)
            cw, cb = p.conv(f"fpm{i}.comm", cat_c, self.c_mid, 3, rng)
            if self.use_fpm:
                ew, eb = p.conv(f"fpm{i}.exclu", cat_c, self.c_mid, 3, rng)
                self.fpm.append(FpmLevel(cw, cb, ew, eb))
            else:
                self.fpm.append(FpmLevel(cw, cb, None, None))
        for i in range(1, LEVELS + 1):
            p.conv(f"dec{i}.conv", self.c_mid, self.c_mid, 3, rng)
        p.conv("dec.head", self.c_mid, 1, 3, rng)

    @classmethod
    def from_state(cls, arrays: dict) -> "FusionModel":
        arrays = dict(arrays)
        try:
            src_idx = arrays.pop("meta.sources").astype(int)
            use_isam = bool(arrays.pop("meta.use_isam")[0])
            use_fpm = bool(arrays.pop("meta.use_fpm")[0])
            channels = tuple(arrays.pop("meta.channels").astype(int))
        except KeyError as e:
            raise ContractError(f"stage-2 checkpoint missing meta record {e}") from None
        sources = tuple(SOURCES[i] for i in src_idx)
        c_mid = arrays["fpm1.comm.w"].shape[0]
        model = cls(channels=channels, c_mid=c_mid, sources=sources,
                    use_isam=use_isam, use_fpm=use_fpm, rng=None)
        model.params.load_state(arrays)
        return model

    def meta_arrays(self) -> dict:
        return {
            "meta.sources": np.array([SOURCES.index(s) for s in self.sources], dtype=np.float64),
            "meta.use_isam": np.array([float(self.use_isam)]),
            "meta.use_fpm": np.array([float(self.use_fpm)]),
            "meta.channels": np.array(self.channels, dtype=np.float64),
        }

    def freeze(self) -> None:
        self.params.freeze()


def enhance(feature: Tensor, attention: Tensor) -> Tensor:
    """Residual attention: feature + feature * attention (channel-broadcast)."""
    if attention.data.shape[1] != 1:
        raise DimensionError(
            f"enhance: attention must be single-channel, got {attention.data.shape}")
    c = feature.data.shape[1]
    tiled = concat_channels([attention] * c) if c > 1 else attention
    return add(feature, mul(feature, tiled))


def isam_forward(branches, features) -> tuple[list, list]:
    """Per-source interoceptive attention over the concatenated sources.

    Returns (enhanced features, attention maps), one of each per source.
    """
    features = list(features)
    if len(branches) != len(features):
        raise DimensionError(
            f"isam_forward: {len(branches)} branches vs {len(features)} features")
    shape = features[0].data.shape
    for f in features[1:]:
        if f.data.shape != shape:
            raise DimensionError(
                f"isam_forward: source shapes {shape} and {f.data.shape} differ")
    _, _, h, w = shape
    cat = concat_channels(features)
    enhanced, attentions = [], []
    for branch, feat in zip(branches, features):
        mixed = relu(conv2d(cat, branch.mix_w, branch.mix_b, stride=1, padding=1))
        squeezed = conv2d(mixed, branch.squeeze_w, branch.squeeze_b, stride=1, padding=1)
        pooled = []
        for bins in POOL_BINS:
            nb = bins if bins == GLOBAL else min(bins, h, w)  # clamp on tiny maps
            pooled.append(bilinear_upsample(pyramid_pool(squeezed, nb), h, w))
        attention = sigmoid(conv2d(concat_channels(pooled), branch.att_w, branch.att_b))
        enhanced.append(enhance(feat, attention))
        attentions.append(attention)
    return enhanced, attentions


def fpm_forward(level: FpmLevel, features) -> Tensor:
    """Common-context conv minus exclusive-context conv over the concatenation."""
    features = list(features)
    shape = features[0].data.shape
    for f in features[1:]:
        if f.data.shape != shape:
            raise DimensionError(
                f"fpm_forward: source shapes {shape} and {f.data.shape} differ")
    cat = concat_channels(features)
    comm = conv2d(cat, level.comm_w, level.comm_b, stride=1, padding=1)
    if level.exclu_w is None:
        return comm
    exclu = conv2d(cat, level.exclu_w, level.exclu_b, stride=1, padding=1)
    return sub(comm, exclu)


def fusion_forward(model: FusionModel, frame: Tensor, flow_rgb: Tensor,
                   stage1: StageOneOutput) -> Tensor:
    """Fuse the per-level sources and decode the moving-object mask."""
    if stage1 is None:
        raise ContractError("fusion_forward: stage-1 features are required")
    if frame.data.ndim != 4:
        raise DimensionError(f"fusion_forward: frame shape {frame.data.shape} not BCHW")
    b, _, h, w = frame.data.shape
    if "op" in model.sources and flow_rgb.data.shape != (b, 3, h, w):
        raise DimensionError(
            f"fusion_forward: flow rendering shape {flow_rgb.data.shape} != {(b, 3, h, w)}")
    pyramids = {"rgb": stage1.rgb_feats, "d": stage1.depth_feats, "ss": stage1.saliency_feats}
    if "op" in model.sources:
        pyramids["op"] = run_encoder(model.params, "flow", flow_rgb)
    for name in model.sources:
        if len(pyramids[name]) != LEVELS:
            raise ContractError(f"fusion_forward: source {name!r} pyramid is incomplete")

    purified = []
    for i in range(LEVELS):
        feats = [pyramids[s][i] for s in model.sources]
        if model.use_isam:
            feats, _ = isam_forward(model.isam[i], feats)
        purified.append(fpm_forward(model.fpm[i], feats))

    d = None
    for i in range(LEVELS, 0, -1):
        t = purified[i - 1]
        if d is not None:
            _, _, hh, ww = t.data.shape
            t = add(t, bilinear_upsample(d, hh, ww))
        d = relu(conv2d(t, model.params[f"dec{i}.conv.w"], model.params[f"dec{i}.conv.b"],
                        stride=1, padding=1))
    logits = conv2d(d, model.params["dec.head.w"], model.params["dec.head.b"],
                    stride=1, padding=1)
    return sigmoid(bilinear_upsample(logits, h, w))


def stage2_loss(m_mos: Tensor, gt_mask: Tensor) -> Tensor:
    return bce_loss(m_mos, gt_mask)


def save_stage2(path, model: FusionModel) -> None:
    from .fileio import save_checkpoint
    arrays = model.params.state()
    arrays.update(model.meta_arrays())
    save_checkpoint(path, 2, arrays)


def load_stage2(path) -> FusionModel:
    from .fileio import load_checkpoint
    _, arrays = load_checkpoint(path, stage=2)
    return FusionModel.from_state(arrays)
