"""Command-line entry point.

Subcommands: generate, train, eval, ablate, infer. Failures from bad input
or broken files print one "error: <Type>: <message>" line on stderr and
exit nonzero; success exits 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .dataset import DatasetConfig, generate_dataset
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .evaluate import (MODES, SELECTORS, AblateConfig, ablate, evaluate_with_records,
                       load_models, records_to_tsv, summary_table)
from .stage3 import build_selection_inputs, aps_forward, select
from .synth import flow_to_color
from .train import TrainConfig, train_stage

logger = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zvos",
        description="Zero-shot video object segmentation on synthetic clips.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a dataset from a JSON config")
    p.add_argument("--config", required=True, help="dataset config (JSON)")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--config", required=True, help="train config (JSON)")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=None,
                   help="override the config stage")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("eval", help="score checkpoints on a dataset split")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--ckpt", required=True, nargs="+", help="checkpoint file(s)")
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--split", default="val")
    p.add_argument("--quality", default="all", choices=("all", "clean", "corrupted"))
    p.add_argument("--selector", default="model", choices=SELECTORS)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--report", default=None, help="also write the TSV report here")
    p.add_argument("--records", default=None,
                   help="write per-frame selection records here (aps mode)")

    p = sub.add_parser("ablate", help="train and score every fusion variant")
    p.add_argument("--config", required=True, help="ablation config (JSON)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("infer", help="segment one frame")
    p.add_argument("--frame", required=True, help="input frame (PPM)")
    p.add_argument("--flow", default=None, help="forward flow for the frame (.flo)")
    p.add_argument("--ckpt", required=True, nargs="+", help="checkpoint file(s)")
    p.add_argument("--out", required=True, help="output mask (PGM)")
    p.add_argument("--threshold", type=float, default=0.5)
    return parser


def _cmd_generate(args) -> int:
    config = DatasetConfig.from_json(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    written = generate_dataset(config, args.out)
    for split, seq_ids in written.items():
        print(f"{split}\t{len(seq_ids)} sequences")
    return 0


def _cmd_train(args) -> int:
    import json
    try:
        raw = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read train config: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("train config must be a JSON object")
    if args.stage is not None:
        raw["stage"] = args.stage
    if args.seed is not None:
        raw["seed"] = args.seed
    path, losses = train_stage(TrainConfig.from_dict(raw))
    print(f"checkpoint\t{path}")
    print(f"final_loss\t{losses[-1]:.6f}")
    return 0


def _cmd_eval(args) -> int:
    if args.records is not None and args.mode != "aps":
        raise ConfigError("--records is only meaningful with --mode aps")
    report, records = evaluate_with_records(
        list(args.ckpt), args.data, args.mode, split=args.split,
        quality=args.quality, selector=args.selector, threshold=args.threshold)
    text = report.to_tsv()
    sys.stdout.write(text)
    if args.report is not None:
        Path(args.report).write_text(text)
    if args.records is not None:
        Path(args.records).write_text(records_to_tsv(records))
    return 0


def _cmd_ablate(args) -> int:
    config = AblateConfig.from_json(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    reports = ablate(config)
    sys.stdout.write(summary_table(reports))
    return 0


def _cmd_infer(args) -> int:
    from .autodiff import Tensor
    from .stage1 import multitask_forward
    from .stage2 import fusion_forward

    models = load_models(list(args.ckpt))
    if 1 not in models:
        raise ContractError("inference needs a stage-1 checkpoint")
    frame = fileio.read_ppm(args.frame)[None]
    x = Tensor(frame)
    upstream = multitask_forward(models[1], x)
    m_sos = upstream.saliency.data
    route, score, mask = "sos", None, m_sos[0, 0]
    if 2 in models:
        if args.flow is None:
            raise ConfigError("a stage-2 checkpoint needs --flow")
        flow = fileio.read_flo(args.flow)
        flow_rgb = flow_to_color(flow)[None]
        m_mos = fusion_forward(models[2], x, Tensor(flow_rgb), upstream).data
        route, mask = "mos", m_mos[0, 0]
        if 3 in models:
            rs, rm = build_selection_inputs(frame, m_sos, flow_rgb, m_mos)
            score = float(aps_forward(models[3], rs, rm).data[0])
            mask = select(m_sos[0, 0], m_mos[0, 0], score, args.threshold)
            route = "mos" if score >= args.threshold else "sos"
    fileio.write_mask_pgm(args.out, (mask >= args.threshold).astype(np.uint8))
    print(f"route\t{route}")
    if score is not None:
        print(f"score\t{score:.6f}")
    print(f"mask\t{args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "infer": _cmd_infer,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ContractError, DimensionError, FormatError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
