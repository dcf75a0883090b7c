"""Split evaluation for the three prediction modes, plus the ablation runner.

Modes:
    sos   static route only (stage-1 saliency head)
    mos   motion route (stage-2 fusion mask)
    aps   per-frame choice between the two routes, scored by the stage-3
          selector ("model") or by the ground-truth label rule ("oracle")

Scores are frame-averaged per sequence, then sequence-averaged into the
aggregate row.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataset import DatasetConfig, generate_dataset, read_split
from .errors import ConfigError, ContractError
from .fileio import load_checkpoint
from .metrics import EvalReport, SequenceScore, boundary_f, mae, region_j
from .stage1 import DEFAULT_CHANNELS, MultiTaskModel, multitask_forward
from .stage2 import DEFAULT_C_MID, FusionModel, fusion_forward
from .stage3 import APSModel, aps_forward, build_selection_inputs, make_label, select
from .synth import flow_to_color
from .train import VARIANTS, TrainConfig, train_stage

MODES = ("sos", "mos", "aps")
SELECTORS = ("model", "oracle")

_BUILDERS = {1: MultiTaskModel.from_state, 2: FusionModel.from_state,
             3: APSModel.from_state}


@dataclass
class FrameRecord:
    sequence: str
    frame: int
    score: float
    label: int
    chosen: str               # "sos" or "mos"


def records_to_tsv(records) -> str:
    lines = ["sequence\tframe\tscore\tlabel\tchosen"]
    for r in records:
        lines.append(f"{r.sequence}\t{r.frame}\t{r.score:.6f}\t{r.label}\t{r.chosen}")
    return "\n".join(lines) + "\n"


def load_models(checkpoint_paths) -> dict:
    """Load checkpoints, keyed by the stage each file declares."""
    models = {}
    for path in checkpoint_paths:
        if not Path(path).is_file():
            raise ContractError(f"checkpoint not found: {path}")
        stage, arrays = load_checkpoint(path)
        if stage in models:
            raise ConfigError(f"two checkpoints claim stage {stage}: {path}")
        models[stage] = _BUILDERS[stage](arrays)
        models[stage].freeze()
    return models


def _required_stages(mode: str, selector: str):
    if mode == "sos":
        return (1,)
    if mode == "mos":
        return (1, 2)
    return (1, 2, 3) if selector == "model" else (1, 2)


def _sequence_outputs(models: dict, sample, need_motion: bool):
    x = Tensor(sample.frames)
    upstream = multitask_forward(models[1], x)
    m_sos = upstream.saliency.data
    if not need_motion:
        return m_sos, None, None
    t_count = sample.frames.shape[0]
    flow_rgb = np.stack([flow_to_color(sample.flows[min(t, t_count - 2)])
                         for t in range(t_count)])
    m_mos = fusion_forward(models[2], x, Tensor(flow_rgb), upstream).data
    return m_sos, m_mos, flow_rgb


def evaluate_with_records(checkpoints, data, mode: str, split: str = "val",
                          quality: str = "all", selector: str = "model",
                          threshold: float = 0.5, label: str | None = None):
    """Returns (EvalReport, [FrameRecord, ...]); records are empty unless
    mode is 'aps'."""
    if mode not in MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; expected one of {MODES}")
    if selector not in SELECTORS:
        raise ConfigError(f"unknown selector {selector!r}; expected one of {SELECTORS}")
    models = checkpoints if isinstance(checkpoints, dict) else load_models(checkpoints)
    for stage in _required_stages(mode, selector):
        if stage not in models:
            raise ContractError(f"mode {mode!r} needs a stage-{stage} checkpoint")
    samples = read_split(data, split, quality)

    rows, records = [], []
    for sample in samples:
        t_count = sample.frames.shape[0]
        gt = sample.masks[:, 0].astype(np.float64)
        m_sos, m_mos, flow_rgb = _sequence_outputs(models, sample, mode != "sos")
        if mode == "sos":
            preds = m_sos[:, 0]
        elif mode == "mos":
            preds = m_mos[:, 0]
        else:
            labels = [make_label(m_sos[t, 0], m_mos[t, 0], gt[t])
                      for t in range(t_count)]
            if selector == "model":
                rs, rm = build_selection_inputs(sample.frames, m_sos, flow_rgb, m_mos)
                scores = aps_forward(models[3], rs, rm).data
            else:
                scores = np.asarray(labels, dtype=np.float64)
            preds = np.stack([select(m_sos[t, 0], m_mos[t, 0], scores[t], threshold)
                              for t in range(t_count)])
            for t in range(t_count):
                chosen = "mos" if scores[t] >= threshold else "sos"
                records.append(FrameRecord(sample.seq_id, t, float(scores[t]),
                                           labels[t], chosen))
                # selection can never beat the better of the two routes
                floor = min(mae(m_sos[t, 0], gt[t]), mae(m_mos[t, 0], gt[t]))
                if mae(preds[t], gt[t]) < floor - 1e-12:
                    raise ContractError("selected mask scored below the per-frame floor")
        js = [region_j(preds[t], gt[t], threshold) for t in range(t_count)]
        fs = [boundary_f(preds[t], gt[t], threshold=threshold) for t in range(t_count)]
        maes = [mae(preds[t], gt[t]) for t in range(t_count)]
        rows.append(SequenceScore(sample.seq_id, float(np.mean(js)),
                                  float(np.mean(fs)), float(np.mean(maes))))
    return EvalReport(variant=label or mode, per_sequence=rows), records


def evaluate(checkpoints, data, mode: str, split: str = "val", quality: str = "all",
             selector: str = "model", threshold: float = 0.5,
             label: str | None = None) -> EvalReport:
    report, _ = evaluate_with_records(checkpoints, data, mode, split=split,
                                      quality=quality, selector=selector,
                                      threshold=threshold, label=label)
    return report


@dataclass(frozen=True)
class AblateConfig:
    out: str
    data: str = ""              # empty generates the default benchmark in out/dataset
    seed: int = 0
    stage1_iters: int = 0       # 0 keeps the per-stage training default
    stage2_iters: int = 0
    stage3_iters: int = 0
    channels: tuple = DEFAULT_CHANNELS
    c_mid: int = DEFAULT_C_MID
    batch_size: int = 4
    base_lr: float = 0.05       # desk-scale rate; see the training presets
    clip_norm: float = 1.0
    split: str = "val"

    @staticmethod
    def from_dict(raw: dict) -> "AblateConfig":
        names = {f.name for f in dataclasses.fields(AblateConfig)}
        unknown = set(raw) - names
        if unknown:
            raise ConfigError(f"unknown ablate config keys {sorted(unknown)}")
        if "out" not in raw:
            raise ConfigError("ablate config missing required key 'out'")
        raw = dict(raw)
        if "channels" in raw:
            raw["channels"] = tuple(int(c) for c in raw["channels"])
        return AblateConfig(**raw)

    @staticmethod
    def from_json(path) -> "AblateConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read ablate config: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("ablate config must be a JSON object")
        return AblateConfig.from_dict(raw)


def summary_table(reports) -> str:
    lines = ["variant\tmean_j\tmean_f\tmae"]
    for report in reports:
        agg = report.aggregate
        lines.append(f"{report.variant}\t{agg.mean_j:.6f}\t{agg.mean_f:.6f}"
                     f"\t{agg.mae:.6f}")
    return "\n".join(lines) + "\n"


def ablate(config: AblateConfig) -> list:
    """Train and score every fusion variant plus the sos/mos/aps routes.

    All runs share one dataset and one seed, so rows differ only in the
    component under test. Returns the reports in table order.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    if config.data:
        data = config.data
    else:
        data = out / "dataset"
        if not data.is_dir():
            generate_dataset(DatasetConfig(seed=config.seed), data)
    base = dict(data=str(data), seed=config.seed, channels=config.channels,
                c_mid=config.c_mid, batch_size=config.batch_size,
                base_lr=config.base_lr, clip_norm=config.clip_norm)

    stage1_ckpt = str(out / "stage1.ckpt")
    train_stage(TrainConfig(stage=1, out=stage1_ckpt,
                            max_iter=config.stage1_iters, **base))

    reports = []
    stage2_ckpts = {}
    for variant in VARIANTS:
        ckpt = str(out / f"stage2_{variant.name.replace('+', '_')}.ckpt")
        train_stage(TrainConfig(stage=2, out=ckpt, variant=variant.name,
                                stage1_ckpt=stage1_ckpt,
                                max_iter=config.stage2_iters, **base))
        stage2_ckpts[variant.name] = ckpt
        reports.append(evaluate([stage1_ckpt, ckpt], data, "mos", split=config.split,
                                quality="clean", label=variant.name))

    full_ckpt = stage2_ckpts["all+isam+fpm"]
    stage3_ckpt = str(out / "stage3.ckpt")
    train_stage(TrainConfig(stage=3, out=stage3_ckpt, stage1_ckpt=stage1_ckpt,
                            stage2_ckpt=full_ckpt,
                            max_iter=config.stage3_iters, **base))

    reports.append(evaluate([stage1_ckpt], data, "sos", split=config.split,
                            quality="all", label="sos"))
    reports.append(evaluate([stage1_ckpt, full_ckpt], data, "mos", split=config.split,
                            quality="all", label="mos"))
    reports.append(evaluate([stage1_ckpt, full_ckpt, stage3_ckpt], data, "aps",
                            split=config.split, quality="all", label="aps"))

    (out / "ablation.tsv").write_text(summary_table(reports))
    (out / "ablation.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2) + "\n")
    return reports
