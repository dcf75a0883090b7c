"""Stage 3: automatic predictor selection between the static and motion masks.

Two entry convolutions (4-channel static route, 7-channel motion route) are
fused by element-wise addition, followed by a small stack of stride-2
residual blocks, global average pooling, and a sigmoid-capped linear head
producing one trust score per frame. Labels come from comparing the two
routes' mean absolute error against ground truth; ties go to the motion
route.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, relu, sigmoid
from .errors import ConfigError, DimensionError
from .losses import bce_loss
from .metrics import mae
from .ops import conv2d, global_avg_pool, linear, reshape
from .params import ParamStore

RS_CHANNELS = 4   # rgb + static saliency mask
RM_CHANNELS = 7   # rgb + flow rendering + motion mask
DEFAULT_WIDTH = 64
DEFAULT_BLOCKS = 3


@dataclass
class SelectionRecord:
    """One frame's selector inputs and, when known, its score and label."""

    rs: np.ndarray            # (4, H, W)
    rm: np.ndarray            # (7, H, W)
    score: float | None = None
    label: int | None = None

    def __post_init__(self):
        if self.rs.shape[0] != RS_CHANNELS or self.rm.shape[0] != RM_CHANNELS:
            raise DimensionError(
                f"SelectionRecord: channel counts {self.rs.shape[0]}/{self.rm.shape[0]} "
                f"!= {RS_CHANNELS}/{RM_CHANNELS}")
        if self.rs.shape[1:] != self.rm.shape[1:]:
            raise DimensionError(
                f"SelectionRecord: spatial sizes {self.rs.shape[1:]} and "
                f"{self.rm.shape[1:]} differ")


class APSModel:
    def __init__(self, width: int = DEFAULT_WIDTH, blocks: int = DEFAULT_BLOCKS,
                 rng: np.random.Generator | None = None):
        if width < 1 or blocks < 1:
            raise ConfigError(f"invalid trunk size: width={width}, blocks={blocks}")
        self.width = int(width)
        self.blocks = int(blocks)
        self.params = ParamStore()
        p = self.params
        p.conv("first_rs", RS_CHANNELS, width, 4, rng)
        p.conv("first_rm", RM_CHANNELS, width, 4, rng)
        for j in range(1, blocks + 1):
            p.conv(f"block{j}.conv1", width, width, 4, rng)
            p.conv(f"block{j}.conv2", width, width, 3, rng)
            p.conv(f"block{j}.skip", width, width, 2, rng)
        p.linear("head", width, 1, rng)

    @classmethod
    def from_state(cls, arrays: dict) -> "APSModel":
        width = arrays["first_rs.w"].shape[0]
        blocks = sum(1 for name in arrays if name.endswith(".conv1.w"))
        model = cls(width=width, blocks=blocks, rng=None)
        model.params.load_state(arrays)
        return model

    def freeze(self) -> None:
        self.params.freeze()


def aps_forward(model: APSModel, rs: Tensor, rm: Tensor) -> Tensor:
    """Score both routes; returns one value per batch element in (0, 1)."""
    for name, t, c in (("rs", rs, RS_CHANNELS), ("rm", rm, RM_CHANNELS)):
        if t.data.ndim != 4 or t.data.shape[1] != c:
            raise DimensionError(
                f"aps_forward: {name} must be (B, {c}, H, W), got {t.data.shape}")
    if rs.data.shape[0] != rm.data.shape[0] or rs.data.shape[2:] != rm.data.shape[2:]:
        raise DimensionError(
            f"aps_forward: rs {rs.data.shape} and rm {rm.data.shape} disagree")
    p = model.params
    x = relu(add(conv2d(rs, p["first_rs.w"], p["first_rs.b"], stride=2, padding=1),
                 conv2d(rm, p["first_rm.w"], p["first_rm.b"], stride=2, padding=1)))
    for j in range(1, model.blocks + 1):
        main = relu(conv2d(x, p[f"block{j}.conv1.w"], p[f"block{j}.conv1.b"],
                           stride=2, padding=1))
        main = conv2d(main, p[f"block{j}.conv2.w"], p[f"block{j}.conv2.b"],
                      stride=1, padding=1)
        skip = conv2d(x, p[f"block{j}.skip.w"], p[f"block{j}.skip.b"], stride=2, padding=0)
        x = relu(add(main, skip))
    pooled = global_avg_pool(x)
    logits = linear(pooled, p["head.w"], p["head.b"])
    return sigmoid(reshape(logits, (rs.data.shape[0],)))


def _as_map(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    return mask.reshape(mask.shape[-2:])


def make_label(m_sos: np.ndarray, m_mos: np.ndarray, gt: np.ndarray) -> int:
    """1 when the motion route's MAE is no worse than the static route's."""
    gt = _as_map(gt)
    return 0 if mae(_as_map(m_sos), gt) < mae(_as_map(m_mos), gt) else 1


def select(m_sos: np.ndarray, m_mos: np.ndarray, score: float,
           threshold: float = 0.5) -> np.ndarray:
    """Pick the motion mask at or above the threshold, else the static mask."""
    return m_mos if score >= threshold else m_sos


def aps_loss(score: Tensor, label) -> Tensor:
    """Mean binary cross entropy of the trust scores against their labels."""
    target = label if isinstance(label, Tensor) else Tensor(np.asarray(label, dtype=np.float64))
    return bce_loss(score, target)


def build_selection_inputs(frames: np.ndarray, m_sos: np.ndarray, flow_rgb: np.ndarray,
                           m_mos: np.ndarray) -> tuple[Tensor, Tensor]:
    """Assemble batched (rs, rm) selector inputs from raw arrays."""
    rs = np.concatenate([frames, m_sos], axis=1)
    rm = np.concatenate([frames, flow_rgb, m_mos], axis=1)
    return Tensor(rs), Tensor(rm)


def save_stage3(path, model: APSModel) -> None:
    from .fileio import save_checkpoint
    save_checkpoint(path, 3, model.params.state())


def load_stage3(path) -> APSModel:
    from .fileio import load_checkpoint
    _, arrays = load_checkpoint(path, stage=3)
    return APSModel.from_state(arrays)
