"""Dataset layout and split generation.

    <root>/<split>/<seq_id>/
        frame_000.ppm ...       8-bit color frames
        mask_000.pgm ...        binary object masks
        depth_000.pgm ...       16-bit depth maps
        flow_000.flo ...        forward flow t -> t+1 (one fewer than frames)
        meta                    JSON: seed, corruption tag, generator echo

Splits and corruption flags are derived deterministically from the dataset
seed, so regenerating with the same config is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, FormatError
from .synth import CORRUPTIONS, GeneratorConfig, VideoSample, generate_sequence

META_NAME = "meta"

# (mode, strength) cycle assigned to corrupted sequences in order
DEFAULT_CORRUPTIONS = (
    ("zero-object", 0.0),
    ("background-dominant", 8.0),
    ("noise", 3.0),
)


@dataclass(frozen=True)
class SplitSpec:
    count: int
    corrupt_fraction: float = 0.0

    def validate(self, name: str) -> None:
        if self.count < 1:
            raise ConfigError(f"split {name!r}: count must be positive, got {self.count}")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ConfigError(
                f"split {name!r}: corrupt_fraction {self.corrupt_fraction} outside [0, 1]")


def default_splits() -> dict:
    return {
        "train": SplitSpec(count=200, corrupt_fraction=0.0),
        "aps": SplitSpec(count=80, corrupt_fraction=0.5),
        "val": SplitSpec(count=50, corrupt_fraction=0.5),
    }


@dataclass(frozen=True)
class DatasetConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    splits: dict = field(default_factory=default_splits)
    corruptions: tuple = DEFAULT_CORRUPTIONS
    seed: int = 0

    def validate(self) -> None:
        self.generator.validate()
        if not self.splits:
            raise ConfigError("dataset config declares no splits")
        for name, spec in self.splits.items():
            spec.validate(name)
        for mode, strength in self.corruptions:
            if mode not in CORRUPTIONS or mode == "none":
                raise ConfigError(f"unknown corruption mode {mode!r}")
            if strength < 0:
                raise ConfigError(f"negative corruption strength {strength}")

    @staticmethod
    def from_dict(raw: dict) -> "DatasetConfig":
        known = {"generator", "splits", "corruptions", "seed"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys {sorted(unknown)}")
        gen_raw = dict(raw.get("generator", {}))
        gen_fields = {f.name for f in dataclasses.fields(GeneratorConfig)}
        bad = set(gen_raw) - gen_fields
        if bad:
            raise ConfigError(f"unknown generator keys {sorted(bad)}")
        if "shapes" in gen_raw:
            gen_raw["shapes"] = tuple(gen_raw["shapes"])
        splits = {name: SplitSpec(**spec)
                  for name, spec in raw.get("splits", {}).items()} or default_splits()
        corruptions = tuple((m, float(s)) for m, s in
                            raw.get("corruptions", DEFAULT_CORRUPTIONS))
        return DatasetConfig(generator=GeneratorConfig(**gen_raw), splits=splits,
                             corruptions=corruptions, seed=int(raw.get("seed", 0)))

    @staticmethod
    def from_json(path) -> "DatasetConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read dataset config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("dataset config must be a JSON object")
        return DatasetConfig.from_dict(raw)


def _corrupt_flags(count: int, fraction: float):
    """Evenly interleaved flags; exactly floor(count * fraction) are set."""
    return [math.floor((i + 1) * fraction) > math.floor(i * fraction)
            for i in range(count)]


def write_sample(sample: VideoSample, seq_dir, generator: GeneratorConfig) -> None:
    seq_dir = Path(seq_dir)
    seq_dir.mkdir(parents=True, exist_ok=True)
    t_count = sample.frames.shape[0]
    for t in range(t_count):
        fileio.write_ppm(seq_dir / f"frame_{t:03d}.ppm", sample.frames[t])
        fileio.write_mask_pgm(seq_dir / f"mask_{t:03d}.pgm", sample.masks[t, 0])
        fileio.write_depth_pgm(seq_dir / f"depth_{t:03d}.pgm", sample.depths[t, 0])
    for t in range(t_count - 1):
        fileio.write_flo(seq_dir / f"flow_{t:03d}.flo", sample.flows[t])
    meta = {
        "seq_id": sample.seq_id,
        "seed": list(sample.seed),
        "flow_quality": sample.flow_quality,
        "corruption_strength": sample.corruption_strength,
        "generator": dataclasses.asdict(generator),
    }
    (seq_dir / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def read_sample(seq_dir) -> VideoSample:
    seq_dir = Path(seq_dir)
    meta_path = seq_dir / META_NAME
    if not meta_path.is_file():
        raise FormatError("missing sequence metadata", path=meta_path)
    meta = json.loads(meta_path.read_text())
    frame_paths = sorted(seq_dir.glob("frame_*.ppm"))
    t_count = len(frame_paths)
    if t_count < 2:
        raise FormatError(f"sequence has {t_count} frames, need at least 2", path=seq_dir)
    for pattern, expected in (("mask_*.pgm", t_count), ("depth_*.pgm", t_count),
                              ("flow_*.flo", t_count - 1)):
        found = len(sorted(seq_dir.glob(pattern)))
        if found != expected:
            raise FormatError(
                f"expected {expected} files matching {pattern}, found {found}",
                path=seq_dir)
    frames = np.stack([fileio.read_ppm(p) for p in frame_paths])
    masks = np.stack([fileio.read_mask_pgm(seq_dir / f"mask_{t:03d}.pgm")
                      for t in range(t_count)])[:, None]
    depths = np.stack([fileio.read_depth_pgm(seq_dir / f"depth_{t:03d}.pgm")
                       for t in range(t_count)])[:, None]
    flows = np.stack([fileio.read_flo(seq_dir / f"flow_{t:03d}.flo")
                      for t in range(t_count - 1)])
    return VideoSample(
        seq_id=meta.get("seq_id", seq_dir.name),
        seed=tuple(meta.get("seed", ())),
        frames=frames,
        masks=masks.astype(np.uint8),
        depths=depths,
        flows=flows,
        flow_quality=meta.get("flow_quality", "none"),
        corruption_strength=float(meta.get("corruption_strength", 0.0)),
    )


def generate_dataset(config: DatasetConfig, root) -> dict:
    """Write every split under root; returns {split: [seq_id, ...]}."""
    config.validate()
    root = Path(root)
    written = {}
    for split_idx, (split, spec) in enumerate(config.splits.items()):
        flags = _corrupt_flags(spec.count, spec.corrupt_fraction)
        seq_ids = []
        for i in range(spec.count):
            if flags[i]:
                mode, strength = config.corruptions[i % len(config.corruptions)]
                gen = dataclasses.replace(config.generator, corruption=mode,
                                          corruption_strength=strength)
            else:
                gen = dataclasses.replace(config.generator, corruption="none",
                                          corruption_strength=0.0)
            seq_id = f"seq_{i:03d}"
            sample = generate_sequence(gen, [config.seed, split_idx, i], seq_id=seq_id)
            write_sample(sample, root / split / seq_id, gen)
            seq_ids.append(seq_id)
        written[split] = seq_ids
    return written


def read_split(root, split: str, quality: str = "all") -> list:
    """Load a split into memory. quality: all | clean | corrupted."""
    if quality not in ("all", "clean", "corrupted"):
        raise ConfigError(f"unknown quality filter {quality!r}")
    split_dir = Path(root) / split
    if not split_dir.is_dir():
        raise FormatError(f"split {split!r} not found", path=split_dir)
    samples = []
    for seq_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
        sample = read_sample(seq_dir)
        clean = sample.flow_quality == "none"
        if quality == "clean" and not clean:
            continue
        if quality == "corrupted" and clean:
            continue
        samples.append(sample)
    if not samples:
        raise FormatError(f"split {split!r} has no sequences after filter {quality!r}",
                          path=split_dir)
    return samples
