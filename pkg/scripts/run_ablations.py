#!/usr/bin/env python3
"""
Run the graph-structure, loss and loss-weight ablations from the bundled
config presets: pretrain once per preset, then finetune pretrained and
random initialisations on the same splits.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

# Add the project root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.cli import run

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def presets(pattern: str):
    return sorted(CONFIG_DIR.glob(pattern))


def main():
    parser = argparse.ArgumentParser(description="Run ablation presets")
    parser.add_argument("--cache", required=True, help="Preprocessed pretraining cache")
    parser.add_argument("--data", required=True, help="Labeled CSV for finetuning")
    parser.add_argument("--vocab", required=True)
    parser.add_argument("--task", choices=["classify", "regress"], default="classify")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--out-dir", default="runs/ablations")
    parser.add_argument("--pattern", default="*.cfg", help="Preset glob in configs/")
    args = parser.parse_args()

    failures = []
    for preset in presets(args.pattern):
        out = Path(args.out_dir) / preset.stem
        logger.info("preset %s", preset.stem)
        code = run(
            ["pretrain", "--cache", args.cache, "--config", str(preset), "--out", str(out)]
        )
        if code == 0:
            code = run(
                [
                    "finetune",
                    "--data", args.data,
                    "--vocab", args.vocab,
                    "--ckpt", str(out / "pretrain_best.ckpt"),
                    "--task", args.task,
                    "--seeds", str(args.seeds),
                    "--out", str(out),
                    "--compare",
                ]
            )
        if code != 0:
            failures.append(preset.stem)
    if failures:
        logger.error("failed presets: %s", ", ".join(failures))
    sys.exit(1 if failures else 0)


if __name__ == "__main__":
    main()
