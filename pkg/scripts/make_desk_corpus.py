#!/usr/bin/env python3
"""
Write the desk-scale corpora: an unlabeled pretraining corpus and a labeled
toy task, both generated deterministically from a seed.
"""

import argparse
import logging
import os
import sys

# Add the project root to the path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from app.data_ingestion import MoleculeCorpusGenerator

logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description="Generate the desk-scale corpora")
    parser.add_argument("--out-dir", default="data", help="Output directory")
    parser.add_argument("--corpus-size", type=int, default=500)
    parser.add_argument("--task-size", type=int, default=400)
    parser.add_argument("--noise", type=float, default=0.05, help="Label flip rate")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    corpus = MoleculeCorpusGenerator(seed=args.seed).write_corpus(
        os.path.join(args.out_dir, "desk_corpus.csv"), n=args.corpus_size
    )
    # A separate stream so the task molecules differ from the corpus.
    task = MoleculeCorpusGenerator(seed=args.seed + 1).write_task(
        os.path.join(args.out_dir, "toy_task.csv"), n=args.task_size, noise=args.noise
    )
    logger.info("wrote %s and %s", corpus, task)


if __name__ == "__main__":
    main()
