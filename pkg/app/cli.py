"""
Command-line entry point.

Exit status is 0 on success, 2 on usage errors and 1 on any other failure;
failures print ``error: <module>: <message>`` on stderr.
"""

import argparse
import logging
import shutil
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from app import autodiff as ad
from app.checkpoint import Checkpoint, load_checkpoint
from app.chem.functional_groups import (
    FunctionalGroupSet,
    default_library,
    load_library,
    select_frequent_groups,
)
from app.chem.labels import compute_targets
from app.chem.perception import perceive
from app.chem.psm_vocab import (
    Decomposition,
    build_vocab,
    decompose,
    load_vocab,
    save_vocab,
)
from app.chem.smiles import canonical_form, parse_smiles
from app.chg import build_chg, dump_chg
from app.config import (
    Settings,
    build_run_config,
    load_run_config,
    parse_config_text,
    resolve_seed,
)
from app.data_ingestion import (
    Dataset,
    cache_meta,
    load_cache,
    load_csv,
    preprocess,
    save_cache,
)
from app.embeddings import Population, cluster_report, export_embeddings
from app.exceptions import ChgError, ConfigMismatch, DegenerateClustering, UsageError
from app.metrics import write_report
from app.schemas import EmbeddingLevel, RunConfig, TaskType
from app.training import compare_inits, evaluate, finetune_seeds, pretrain

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


# Flags that map straight onto dotted config keys.
_CONFIG_FLAGS = {
    "seed": "seed",
    "graph": "ablation.graph",
    "loss": "ablation.loss",
    "lambda_ab": "weights.ab",
    "lambda_frag": "weights.frag",
    "lambda_topo": "weights.topo",
    "lambda_scaf": "weights.scaf",
    "tau": "weights.tau",
    "hidden": "encoder.hidden",
    "layers": "encoder.layers",
    "dropout": "encoder.dropout",
    "lr": "adam.lr",
    "bits": "fingerprint_bits",
    "n_groups": "n_groups",
    "size": "vocab_size",
}

# Checkpoints carry the vocabulary digest, not the vocabulary.
_VOCAB_HELP = "fragment vocabulary the checkpoint was built with"


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value run configuration file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--graph", choices=["atom", "hierarchical", "full"])
    p.add_argument(
        "--loss",
        choices=[
            "full",
            "no_ab",
            "no_frag",
            "no_topo",
            "no_scaf",
            "no_graph_level",
            "no_local",
        ],
    )
    for name in ("ab", "frag", "topo", "scaf"):
        p.add_argument(f"--lambda-{name}", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--hidden", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--bits", type=int, help="fingerprint length D")
    p.add_argument("--n-groups", type=int, help="functional groups C")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chg", description="Hierarchical molecular graph pretraining")
    parser.add_argument("--threads", type=int, default=None, help="preprocessing workers")
    parser.add_argument("--quiet", action="store_true", help="warnings only, no progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("vocab-build", help="mine a fragment vocabulary")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--size", type=int, help="entries (default: vocab_size from --config)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--config", type=Path, help="key=value run configuration file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--sample", type=int, help="mine on a random subset of this size")
    p.set_defaults(handler=cmd_vocab_build)

    p = sub.add_parser("preprocess", help="build CHGraphs and targets into a cache")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--groups", type=Path, help="functional group library file")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("pretrain", help="self-supervised pretraining from a cache")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument(
        "--out",
        type=Path,
        required=True,
        help="run directory, or a .ckpt path that receives the best checkpoint",
    )
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="finetune on a labelled dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True, help=_VOCAB_HELP)
    p.add_argument("--ckpt", type=Path, help="pretrained checkpoint (random init if omitted)")
    p.add_argument("--task", choices=["classify", "regress"], required=True)
    p.add_argument("--labels", help="comma-separated label columns")
    p.add_argument("--seeds", type=int, help="run seeds 0..k-1")
    p.add_argument("--groups", type=Path)
    p.add_argument("--out", type=Path, default=Path("runs/finetune"))
    p.add_argument("--report", type=Path, help="metrics report path")
    p.add_argument(
        "--compare", action="store_true", help="also run random init on the same splits"
    )
    _add_config_flags(p)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("eval", help="score a finetuned checkpoint")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--vocab", type=Path, required=True, help=_VOCAB_HELP)
    p.add_argument("--labels", help="comma-separated label columns")
    p.add_argument("--groups", type=Path)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("embed", help="export embeddings for cluster analysis")
    p.add_argument("--level", choices=[lvl.value for lvl in EmbeddingLevel], required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="CSV of molecules to embed")
    p.add_argument("--vocab", type=Path, required=True, help=_VOCAB_HELP)
    p.add_argument("--ckpt", type=Path, help="checkpoint (random init if omitted)")
    p.add_argument("--groups", type=Path)
    p.add_argument("--top", type=int, default=None, help="scaffolds or groups to keep")
    p.add_argument("--per-group", type=int, default=100)
    p.add_argument(
        "--compare", action="store_true", help="also export a random-init encoder"
    )
    _add_config_flags(p)
    p.set_defaults(handler=cmd_embed)

    p = sub.add_parser("inspect", help="print the CHG and targets of one molecule")
    p.add_argument("--smiles", required=True)
    p.add_argument("--vocab", type=Path, help="without it each component is one fragment")
    p.add_argument("--groups", type=Path)
    p.add_argument("--bits", type=int, default=2048)
    p.set_defaults(handler=cmd_inspect)
    return parser


# Configuration plumbing


def _flatten(tree: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{name}."))
        elif isinstance(value, list):
            flat[name] = ",".join(str(v) for v in value)
        elif value is not None:
            flat[name] = value
    return flat


def _overrides(args: argparse.Namespace, epochs_key: str, batch_key: str) -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for attr, key in _CONFIG_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    if getattr(args, "epochs", None) is not None:
        flat[epochs_key] = args.epochs
    if getattr(args, "batch", None) is not None:
        flat[batch_key] = args.batch
    for item in getattr(args, "overrides", []):
        flat.update(parse_config_text(item, "--set"))
    return flat


def _run_config(
    args: argparse.Namespace,
    epochs_key: str = "pretrain_epochs",
    batch_key: str = "pretrain_batch",
    base: Optional[Checkpoint] = None,
) -> RunConfig:
    """Config file (or the checkpoint's stored config) with flags on top."""
    overrides = _overrides(args, epochs_key, batch_key)
    if getattr(args, "config", None) is None and base is not None and "config" in base.extra:
        flat = _flatten(base.extra["config"])
        flat.update(overrides)
        return build_run_config(flat)
    return load_run_config(getattr(args, "config", None), overrides)


def _library(args: argparse.Namespace) -> FunctionalGroupSet:
    path = getattr(args, "groups", None)
    return load_library(path) if path is not None else default_library()


def _groups_by_name(library: FunctionalGroupSet, names: Sequence[str]) -> FunctionalGroupSet:
    by_name = {p.name: p for p in library.patterns}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ConfigMismatch(f"functional groups {missing} are not in the library")
    return FunctionalGroupSet(patterns=tuple(by_name[n] for n in names))


def _model_groups(args: argparse.Namespace, ckpt: Optional[Checkpoint]) -> FunctionalGroupSet:
    library = _library(args)
    if ckpt is not None and ckpt.extra.get("groups"):
        return _groups_by_name(library, ckpt.extra["groups"])
    return library


def _check_vocab(ckpt: Optional[Checkpoint], digest: str) -> None:
    stored = ckpt.extra.get("vocab") if ckpt is not None else None
    if stored and stored != digest:
        raise ConfigMismatch(f"vocabulary {digest} differs from the checkpoint's {stored}")


def _label_columns(args: argparse.Namespace) -> Optional[List[str]]:
    if not getattr(args, "labels", None):
        return None
    return [c.strip() for c in args.labels.split(",") if c.strip()]


def _threads(args: argparse.Namespace) -> int:
    return args.threads if args.threads is not None else Settings().threads


# Commands


def cmd_vocab_build(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    ds = load_csv(args.corpus, task=TaskType.PRETRAIN, label_columns=[])
    vocab = build_vocab(
        [r.mol for r in ds.records],
        cfg.vocab_size,
        seed=resolve_seed(args.seed, cfg),
        sample_size=args.sample,
    )
    save_vocab(vocab, args.out)
    print(f"vocab entries={len(vocab)} digest={vocab.digest()} path={args.out}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    ds = load_csv(args.corpus, label_columns=_label_columns(args))
    vocab = load_vocab(args.vocab)
    fgs = _library(args)
    if len(fgs) > cfg.n_groups:
        fgs = select_frequent_groups(
            [perceive(r.mol) for r in ds.records], fgs, cfg.n_groups
        )
    elif len(fgs) < cfg.n_groups:
        logger.warning("library has only %d groups (n_groups=%d)", len(fgs), cfg.n_groups)
    records = preprocess(ds, vocab, fgs, cfg, threads=_threads(args), quiet=args.quiet)
    save_cache(records, cache_meta(ds, vocab, fgs, cfg), args.out)
    print(f"cache records={len(records)} skipped={len(ds.skipped)} path={args.out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    cache = load_cache(args.cache, expected={"fingerprint_bits": cfg.fingerprint_bits})
    meta = {key: cache.meta[key] for key in ("vocab", "groups", "corpus") if key in cache.meta}
    out_dir, best_path = args.out, None
    if args.out.suffix == ".ckpt":
        out_dir, best_path = args.out.parent, args.out
    result = pretrain(cache.records, cfg, out_dir, resume=args.resume, meta=meta)
    if best_path is not None and best_path.resolve() != result.best_checkpoint.resolve():
        shutil.copyfile(result.best_checkpoint, best_path)
    last = result.history.iloc[-1]
    print(
        f"pretrain epochs={len(result.history)} L_total={last['L_total']:.6f} "
        f"final={result.final_checkpoint} best={best_path or result.best_checkpoint} "
        f"losses={result.losses_path}"
    )
    return 0


def _finetune_records(
    args: argparse.Namespace, ds: Dataset, ckpt: Optional[Checkpoint], cfg: RunConfig
):
    vocab = load_vocab(args.vocab)
    _check_vocab(ckpt, vocab.digest())
    fgs = _model_groups(args, ckpt)
    return preprocess(ds, vocab, fgs, cfg, threads=_threads(args), quiet=args.quiet)


def cmd_finetune(args: argparse.Namespace) -> int:
    task = TaskType(args.task)
    ckpt = load_checkpoint(args.ckpt) if args.ckpt is not None else None
    cfg = _run_config(args, "finetune_epochs", "finetune_batch", base=ckpt)
    ds = load_csv(args.data, task=task, label_columns=_label_columns(args))
    records = _finetune_records(args, ds, ckpt, cfg)
    seeds = list(range(args.seeds)) if args.seeds is not None else cfg.seeds
    meta = {"label_names": ds.label_names}
    if ckpt is not None and "vocab" in ckpt.extra:
        meta["vocab"] = ckpt.extra["vocab"]
        meta["groups"] = ckpt.extra.get("groups", [])

    reports = []
    if args.compare:
        if ckpt is None:
            raise UsageError("--compare needs --ckpt")
        reports.extend(compare_inits(records, task, cfg, ckpt, seeds))
    else:
        reports.append(
            finetune_seeds(records, task, cfg, ckpt, seeds, out_dir=args.out, meta=meta)
        )
    for report in reports:
        path = args.report if args.report and len(reports) == 1 else None
        path = path or args.out / f"metrics_{report.init}.txt"
        write_report(report, path)
        print(
            f"finetune init={report.init} {report.metric} mean={report.mean:.4f} "
            f"std={report.std:.4f} seeds={len(report.per_seed)} report={path}"
        )
    if args.compare:
        print(f"delta_vs_random={reports[0].extra['delta_vs_random']:+.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = _run_config(args, base=ckpt)
    task = TaskType(ckpt.extra.get("task", TaskType.CLASSIFY.value))
    ds = load_csv(args.data, task=task, label_columns=_label_columns(args))
    records = _finetune_records(args, ds, ckpt, cfg)
    result = evaluate(records, ckpt)
    for key, value in result.items():
        if isinstance(value, float):
            value = f"{value:.6f}"
        elif isinstance(value, list):
            value = ",".join(str(v) for v in value)
        print(f"{key}={value}")
    return 0


def _cluster_scores(path: Path) -> Optional[Tuple[float, float]]:
    try:
        return cluster_report(path)
    except DegenerateClustering as exc:
        logger.warning("cluster metrics unavailable for %s: %s", path, exc)
        return None


def cmd_embed(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.ckpt) if args.ckpt is not None else None
    if args.compare and ckpt is None:
        raise UsageError("--compare needs --ckpt")
    cfg = _run_config(args, base=ckpt)
    ds = load_csv(args.data, label_columns=[])
    records = _finetune_records(args, ds, ckpt, cfg)
    level = EmbeddingLevel(args.level)
    population = Population(per_group=args.per_group)
    if args.top is not None:
        population.top_scaffolds = population.top_groups = args.top
    fgs = _model_groups(args, ckpt)
    runs = [(ckpt, args.out)]
    if args.compare:
        runs.append((None, args.out.with_name(f"{args.out.stem}_random{args.out.suffix}")))

    scores = []
    for init, path in runs:
        export_embeddings(
            records,
            init,
            level,
            path,
            cfg=cfg,
            group_names=fgs.names,
            population=population,
            seed=cfg.seed or 0,
        )
        result = _cluster_scores(path)
        scores.append(result)
        metrics = "" if result is None else f" dbi={result[0]:.6f} silhouette={result[1]:.6f}"
        print(f"embed level={level.value}{metrics} path={path}")
    if args.compare and all(s is not None for s in scores):
        (dbi, sil), (dbi_random, sil_random) = scores  # type: ignore[misc]
        print(
            f"delta_dbi={dbi - dbi_random:+.6f} "
            f"delta_silhouette={sil - sil_random:+.6f}"
        )
    return 0


def _component_decomposition(mol) -> Decomposition:
    components = sorted(
        tuple(sorted(c)) for c in nx.connected_components(mol.to_networkx())
    )
    frag_of_atom = [0] * mol.n_atoms
    for k, atoms in enumerate(components):
        for a in atoms:
            frag_of_atom[a] = k
    return Decomposition(fragments=tuple(components), frag_of_atom=tuple(frag_of_atom))


def cmd_inspect(args: argparse.Namespace) -> int:
    mol = parse_smiles(args.smiles)
    pm = perceive(mol)
    if args.vocab is not None:
        decomposition = decompose(mol, load_vocab(args.vocab), strict=False)
    else:
        decomposition = _component_decomposition(mol)
    fgs = _library(args)
    chg = build_chg(pm, decomposition)
    targets = compute_targets(pm, decomposition, fgs, args.bits)

    out = [f"#molecule {canonical_form(mol)}", dump_chg(chg).rstrip("\n"), "#targets"]
    for k, atoms in enumerate(decomposition.fragments):
        names = [fgs.names[c] for c in np.flatnonzero(targets.frag_fg[k])]
        members = ",".join(str(a) for a in atoms)
        out.append(f"F {k} atoms={members} groups={','.join(names) or '-'}")
    ring, aromatic, fused, hetero, bridged = targets.scaffold
    out.append(
        f"S rings={ring} aromatic_rings={aromatic} fused={int(fused)} "
        f"heterocyclic={int(hetero)} bridged={int(bridged)}"
    )
    out.append(f"T bits={args.bits} set={int(targets.topo_fp.sum())} hex={targets.topo_hex}")
    sys.stdout.write("\n".join(out) + "\n")
    return 0


def _configure(args: argparse.Namespace) -> None:
    level = "WARNING" if args.quiet else Settings().log_level.upper()
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)
    if Settings().float32:
        ad.set_default_dtype(np.float32)


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _configure(args)
        return int(args.handler(args))
    except UsageError as exc:
        print(f"error: {exc.module}: {exc}", file=sys.stderr)
        return 2
    except ChgError as exc:
        print(f"error: {exc.module}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0


def main() -> None:
    sys.exit(run())
