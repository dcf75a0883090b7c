"""Deterministic synthetic video generator with exact ground truth.

A scene is a smoothly textured background drifting at an integer velocity
plus one or two rigid foreground shapes translating at integer velocities.
The background carries one painted (static, background-depth) distractor
shape drawn from the same palette as the real objects, so appearance alone
cannot tell mover from non-mover; flow and depth can. Flow is exact by
construction: object velocity inside the mask, drift outside. Corruption
modes rewrite flow only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .ops import _interp_matrix

SHAPES = ("disk", "rectangle", "triangle")
CORRUPTIONS = ("none", "zero-object", "background-dominant", "noise")


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 64
    frames: int = 8
    min_objects: int = 1
    max_objects: int = 2
    shapes: tuple = SHAPES
    min_speed: int = 2        # per-axis max-norm lower bound, px/frame
    max_speed: int = 3
    max_drift: int = 1        # background drift per axis in [-max_drift, max_drift]
    texture_seed: int = 0
    corruption: str = "none"
    corruption_strength: float = 0.0

    def validate(self) -> None:
        if self.height % 32 or self.width % 32:
            raise ConfigError(f"image size {self.height}x{self.width} not divisible by 32")
        if self.frames < 2:
            raise ConfigError(f"need at least 2 frames, got {self.frames}")
        if not (1 <= self.min_objects <= self.max_objects <= 2):
            raise ConfigError(
                f"object count range [{self.min_objects}, {self.max_objects}] outside [1, 2]")
        unknown = [s for s in self.shapes if s not in SHAPES]
        if unknown or not self.shapes:
            raise ConfigError(f"unknown shapes {unknown}")
        if not (1 <= self.min_speed <= self.max_speed):
            raise ConfigError(f"bad speed range [{self.min_speed}, {self.max_speed}]")
        if self.max_drift < 0:
            raise ConfigError(f"negative drift bound {self.max_drift}")
        if self.corruption not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption mode {self.corruption!r}")


@dataclass
class VideoSample:
    seq_id: str
    seed: tuple
    frames: np.ndarray        # (T, 3, H, W) float64 in [0, 1]
    masks: np.ndarray         # (T, 1, H, W) uint8 in {0, 1}
    depths: np.ndarray        # (T, 1, H, W) float64 in [0, 1], larger = nearer
    flows: np.ndarray         # (T-1, 2, H, W) float32, channels (u, v)
    flow_quality: str = "none"
    corruption_strength: float = 0.0


def _resize_smooth(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear upsampling of a (C, gh, gw) grid to (C, h, w)."""
    _, gh, gw = grid.shape
    return np.einsum("chw,oh,pw->cop", grid, _interp_matrix(gh, h), _interp_matrix(gw, w),
                     optimize=True)


def _smooth_noise(rng: np.random.Generator, channels: int, h: int, w: int,
                  cell: int = 8) -> np.ndarray:
    """Band-limited value noise in [0, 1]: coarse grid, bilinear upsample."""
    gh = max(2, -(-h // cell) + 1)
    gw = max(2, -(-w // cell) + 1)
    return _resize_smooth(rng.uniform(0.0, 1.0, size=(channels, gh, gw)), h, w)


def _shape_stamp(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    if shape == "disk":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c ** 2
    if shape == "rectangle":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # apex top-center, base at the bottom row
        return np.abs(xx - c) <= (yy + 1) * c / size
    raise ConfigError(f"unknown shape {shape!r}")


def _vivid_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Saturated smooth texture; objects and distractor share this palette."""
    base = rng.permutation(np.array([0.85, 0.45, 0.15]) + rng.uniform(-0.08, 0.08, 3))
    wobble = (_smooth_noise(rng, 3, size, size, cell=4) - 0.5) * 0.16
    return np.clip(base[:, None, None] + wobble, 0.0, 1.0)


@dataclass
class _Object:
    stamp: np.ndarray
    texture: np.ndarray
    depth: np.ndarray
    pos0: np.ndarray          # (y, x) at frame 0
    velocity: np.ndarray      # (vy, vx) px/frame, integer


def _sample_velocity(rng, min_speed, max_speed) -> np.ndarray:
    for _ in range(1000):
        v = rng.integers(-max_speed, max_speed + 1, size=2)
        if min_speed <= np.abs(v).max() <= max_speed:
            return v
    raise ConfigError(f"cannot sample a velocity in [{min_speed}, {max_speed}]")


def _sample_position(rng, size, span, velocity, frames) -> np.ndarray | None:
    # keep the bbox at least 1 px inside the frame for every t
    pos = np.empty(2, dtype=np.int64)
    for axis in range(2):
        travel = velocity[axis] * (frames - 1)
        lo = 1 + max(0, -travel)
        hi = span[axis] - size - 1 - max(0, travel)
        if lo > hi:
            return None
        pos[axis] = rng.integers(lo, hi + 1)
    return pos


def _swept_bbox(obj_pos, size, velocity, frames):
    end = obj_pos + velocity * (frames - 1)
    lo = np.minimum(obj_pos, end)
    hi = np.maximum(obj_pos, end) + size
    return lo, hi


def generate_sequence(config: GeneratorConfig, seed, seq_id: str = "seq_000") -> VideoSample:
    """Render one sequence; bit-identical for identical (config, seed)."""
    config.validate()
    entropy = list(seed) if isinstance(seed, (tuple, list)) else [int(seed)]
    rng = np.random.default_rng(entropy + [config.texture_seed])
    h, w, t_count = config.height, config.width, config.frames

    drift = rng.integers(-config.max_drift, config.max_drift + 1, size=2)  # (dy, dx)
    # Static canvas; the viewport slides by -drift per frame, so background
    # content appears to move by +drift.
    canvas_h = h + abs(int(drift[0])) * (t_count - 1)
    canvas_w = w + abs(int(drift[1])) * (t_count - 1)
    origin0 = np.array([max(0, int(drift[0]) * (t_count - 1)),
                        max(0, int(drift[1]) * (t_count - 1))])

    gray = _smooth_noise(rng, 1, canvas_h, canvas_w)
    chroma = (_smooth_noise(rng, 3, canvas_h, canvas_w) - 0.5) * 0.10
    canvas = np.clip(0.25 + 0.5 * gray + chroma, 0.0, 1.0)
    depth_canvas = 0.10 + 0.32 * _smooth_noise(rng, 1, canvas_h, canvas_w)

    # Painted distractor: object palette, background depth, drifts with the
    # background. Placed inside every frame's viewport.
    base = min(h, w)
    d_size = int(rng.integers(base // 6, base // 4 + 1))
    d_stamp = _shape_stamp(str(rng.choice(config.shapes)), d_size)
    d_tex = _vivid_texture(rng, d_size)
    view_lo = np.array([max(0, -int(drift[0]) * (t_count - 1)),
                        max(0, -int(drift[1]) * (t_count - 1))]) + origin0
    view_hi = view_lo + np.array([h, w]) - abs(drift) * (t_count - 1) - d_size - 2
    d_pos = np.array([rng.integers(view_lo[0] + 1, max(view_lo[0] + 2, view_hi[0])),
                      rng.integers(view_lo[1] + 1, max(view_lo[1] + 2, view_hi[1]))])
    region = (slice(d_pos[0], d_pos[0] + d_size), slice(d_pos[1], d_pos[1] + d_size))
    canvas[:, region[0], region[1]][:, d_stamp] = d_tex[:, d_stamp]

    n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
    objects: list[_Object] = []
    for k in range(n_objects):
        placed = None
        for _ in range(200):
            size = int(rng.integers(base // 6, base // 4 + 1))
            velocity = _sample_velocity(rng, config.min_speed, config.max_speed)
            pos = _sample_position(rng, size, (h, w), velocity, t_count)
            if pos is None:
                continue
            lo, hi = _swept_bbox(pos, size, velocity, t_count)
            clash = any(
                not (hi[0] + 1 <= plo[0] or phi[0] + 1 <= lo[0]
                     or hi[1] + 1 <= plo[1] or phi[1] + 1 <= lo[1])
                for plo, phi in (
                    _swept_bbox(o.pos0, o.stamp.shape[0], o.velocity, t_count)
                    for o in objects))
            if not clash:
                placed = (size, velocity, pos)
                break
        if placed is None:
            raise ConfigError(
                f"object {k} cannot fit a {t_count}-frame path inside {h}x{w}")
        size, velocity, pos = placed
        stamp = _shape_stamp(str(rng.choice(config.shapes)), size)
        depth = np.clip(rng.uniform(0.60, 0.86)
                        + (_smooth_noise(rng, 1, size, size, cell=4)[0] - 0.5) * 0.08,
                        0.55, 0.92)
        objects.append(_Object(stamp, _vivid_texture(rng, size), depth, pos, velocity))

    frames = np.empty((t_count, 3, h, w))
    masks = np.zeros((t_count, 1, h, w), dtype=np.uint8)
    depths = np.empty((t_count, 1, h, w))
    for t in range(t_count):
        oy, ox = origin0 - drift * t
        frames[t] = canvas[:, oy:oy + h, ox:ox + w]
        depths[t] = depth_canvas[:, oy:oy + h, ox:ox + w]
        for obj in objects:
            py, px = obj.pos0 + obj.velocity * t
            size = obj.stamp.shape[0]
            sl = (slice(py, py + size), slice(px, px + size))
            frames[t][:, sl[0], sl[1]][:, obj.stamp] = obj.texture[:, obj.stamp]
            depths[t][0, sl[0], sl[1]][obj.stamp] = obj.depth[obj.stamp]
            masks[t][0, sl[0], sl[1]][obj.stamp] = 1

    flows = np.empty((t_count - 1, 2, h, w), dtype=np.float32)
    for t in range(t_count - 1):
        flows[t, 0] = drift[1]  # u: horizontal displacement
        flows[t, 1] = drift[0]  # v: vertical displacement
        for obj in objects:
            py, px = obj.pos0 + obj.velocity * t
            size = obj.stamp.shape[0]
            sl = (slice(py, py + size), slice(px, px + size))
            flows[t, 0, sl[0], sl[1]][obj.stamp] = obj.velocity[1]
            flows[t, 1, sl[0], sl[1]][obj.stamp] = obj.velocity[0]

    if config.corruption != "none":
        corr_seed = int(rng.integers(0, 2 ** 31))
        for t in range(t_count - 1):
            # background-dominant keeps one coherent direction per sequence
            per_frame = corr_seed if config.corruption == "background-dominant" else corr_seed + t
            flows[t] = corrupt_flow(flows[t], masks[t, 0], config.corruption,
                                    config.corruption_strength, per_frame)

    return VideoSample(
        seq_id=seq_id,
        seed=tuple(entropy),
        frames=frames,
        masks=masks,
        depths=depths,
        flows=flows,
        flow_quality=config.corruption,
        corruption_strength=config.corruption_strength,
    )


def _box_blur3(a: np.ndarray) -> np.ndarray:
    """3x3 mean over the in-bounds neighborhood (edges use smaller windows)."""
    c, h, w = a.shape
    padded = np.zeros((c, h + 2, w + 2))
    padded[:, 1:-1, 1:-1] = a
    counts = np.zeros((h + 2, w + 2))
    counts[1:-1, 1:-1] = 1.0
    total = np.zeros((c, h, w))
    weight = np.zeros((h, w))
    for dy in range(3):
        for dx in range(3):
            total += padded[:, dy:dy + h, dx:dx + w]
            weight += counts[dy:dy + h, dx:dx + w]
    return total / weight


def corrupt_flow(flow: np.ndarray, mask: np.ndarray, mode: str, strength: float,
                 seed: int) -> np.ndarray:
    """Degrade one flow field; the companion mask marks the moving object."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"corrupt_flow: expected (2, H, W) flow, got {flow.shape}")
    mask = np.asarray(mask).reshape(flow.shape[1:]) > 0
    if mode == "none":
        return flow.copy()
    if mode == "zero-object":
        out = flow.astype(np.float64, copy=True)
        if mask.any():
            fill = (np.median(out[:, ~mask], axis=1) if (~mask).any()
                    else np.zeros(2))
            out[0][mask] = fill[0]
            out[1][mask] = fill[1]
        return out.astype(np.float32)
    if mode == "background-dominant":
        rng = np.random.default_rng(seed)
        theta = rng.uniform(0.0, 2.0 * math.pi)
        out = flow.astype(np.float64, copy=True)
        out[0] += strength * math.cos(theta)
        out[1] += strength * math.sin(theta)
        return out.astype(np.float32)
    if mode == "noise":
        if strength == 0.0:
            return flow.copy()
        rng = np.random.default_rng(seed)
        noisy = flow.astype(np.float64) + rng.normal(0.0, strength, size=flow.shape)
        return _box_blur3(noisy).astype(np.float32)
    raise ConfigError(f"unknown corruption mode {mode!r}")


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    sector = np.floor(h * 6.0)
    f = h * 6.0 - sector
    i = sector.astype(int) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Color-wheel rendering: hue = angle, saturation/value = magnitude
    normalized by the per-frame maximum. Zero flow renders mid-gray."""
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DimensionError(f"flow_to_color: expected (2, H, W) flow, got {flow.shape}")
    u = flow[0].astype(np.float64)
    v = flow[1].astype(np.float64)
    mag = np.hypot(u, v)
    peak = mag.max()
    norm = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(v, u) + math.pi) / (2.0 * math.pi)
    return _hsv_to_rgb(hue, norm, 0.5 + 0.5 * norm)
