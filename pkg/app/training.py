"""
Pretraining and finetuning loops.

Random streams are split by purpose so each can be restored on resume:
parameter initialisation, batch shuffling and dropout each get their own
Philox stream keyed by the run seed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app import autodiff as ad
from app.autodiff import AdamState, Tensor
from app.checkpoint import Checkpoint, check_shapes, load_checkpoint, save_checkpoint
from app.chg import collate
from app.config import config_hash, resolve_seed
from app.data_ingestion import GraphRecord, split_indices, with_graph_variant
from app.encoder import (
    ENCODER_PREFIX,
    Params,
    encode,
    init_encoder_params,
    init_pretrain_heads,
    init_readout,
    predict_tasks,
    readout,
)
from app.exceptions import ConfigMismatch, EmptyInput, LabelArityMismatch, SingleClass
from app.metrics import multitask_roc_auc, rmse
from app.objectives import (
    LOSS_NAMES,
    active_losses,
    loss_total,
    pretrain_losses,
    stack_targets,
)
from app.schemas import MetricsReport, RunConfig, SeedResult, TaskType

logger = logging.getLogger(__name__)

STREAM_INIT = 0
STREAM_SHUFFLE = 1
STREAM_DROPOUT = 2

LOSS_COLUMNS = ["epoch"] + [f"L_{name}" for name in LOSS_NAMES] + ["L_total"]


@dataclass
class PretrainResult:
    final_checkpoint: Path
    best_checkpoint: Path
    losses_path: Path
    history: pd.DataFrame


@dataclass
class FinetuneOutcome:
    result: SeedResult
    params: Params


def _adam(cfg: RunConfig) -> AdamState:
    a = cfg.adam
    return AdamState(
        lr=a.lr,
        beta1=a.beta1,
        beta2=a.beta2,
        eps=a.eps,
        weight_decay=a.weight_decay,
        decoupled=a.decoupled,
    )


def _batches(n: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def _apply_gradients(
    tape: ad.Tape, total: Tensor, params: Params, adam: AdamState
) -> None:
    grads: Dict[str, np.ndarray] = {}
    if total.requires_grad:
        leaves = ad.backward(tape, total)
        grads = {name: leaves[t] for name, t in params.items() if t in leaves}
    ad.adam_step(adam, params, grads)
    for tensor in params.values():
        tensor.grad = None


def _snapshot(params: Params) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.items()}


# Pretraining


def init_pretrain_params(
    cfg: RunConfig, n_groups: int, fingerprint_bits: int, seed: int
) -> Params:
    rng = ad.make_rng(seed, STREAM_INIT)
    params = init_encoder_params(cfg.encoder, rng)
    params.update(init_pretrain_heads(cfg.encoder, n_groups, fingerprint_bits, rng))
    return params


def pretrain_step(
    records: Sequence[GraphRecord],
    params: Params,
    adam: AdamState,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> Dict[str, float]:
    """One optimizer step on one mini-batch; returns the loss values."""
    graphs = [r.chg for r in records]
    batch = collate(graphs)
    targets = stack_targets(graphs, [r.targets for r in records])
    with ad.Tape() as tape:
        terms = pretrain_losses(batch, targets, params, cfg, training=True, rng=rng)
        total = loss_total(terms, cfg.weights)
    _apply_gradients(tape, total, params, adam)
    values = {name: (np.nan if t is None else t.item()) for name, t in terms.items()}
    values["total"] = total.item()
    return values


def pretrain(
    records: Sequence[GraphRecord],
    cfg: RunConfig,
    out_dir: Union[str, Path],
    resume: Optional[Union[str, Path, Checkpoint]] = None,
    seed: Optional[int] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> PretrainResult:
    """Jointly optimise the active pretraining losses.

    Writes ``pretrain_losses.csv`` (per-epoch batch means), the lowest-loss
    checkpoint ``pretrain_best.ckpt`` and ``pretrain_final.ckpt``.
    """
    if not records:
        raise ConfigMismatch("pretraining needs at least one molecule")
    out_dir = Path(out_dir)
    seed = resolve_seed(seed, cfg)
    cfg_hash = config_hash(cfg)
    records = with_graph_variant(records, cfg.ablation.graph)
    n_groups = records[0].targets.frag_fg.shape[1]
    bits = records[0].targets.topo_fp.size
    if bits != cfg.fingerprint_bits:
        raise ConfigMismatch(
            f"cached fingerprints have {bits} bits, config asks for {cfg.fingerprint_bits}"
        )
    active = active_losses(cfg.ablation)
    if not any(getattr(cfg.weights, name) for name in active):
        logger.warning("all active loss weights are zero; only weight decay will act")
    logger.info(
        "pretraining %d molecules, graph=%s, losses=%s, seed=%d",
        len(records),
        cfg.ablation.graph.value,
        ",".join(active) or "none",
        seed,
    )

    params = init_pretrain_params(cfg, n_groups, bits, seed)
    adam = _adam(cfg)
    shuffle_rng = ad.make_rng(seed, STREAM_SHUFFLE)
    dropout_rng = ad.make_rng(seed, STREAM_DROPOUT)
    history: List[Dict[str, float]] = []
    start_epoch, best_total = 0, np.inf

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        check_shapes(ckpt, params)
        if ckpt.config_hash != cfg_hash:
            logger.warning("resuming from a checkpoint written with another config")
        for name, tensor in params.items():
            tensor.data = ckpt.params[name].copy()
        if ckpt.adam is not None:
            adam = ckpt.adam
        shuffle_rng.bit_generator.state = ckpt.extra["shuffle_rng"]
        dropout_rng.bit_generator.state = ckpt.extra["dropout_rng"]
        start_epoch = int(ckpt.extra["epoch"])
        best_total = float(ckpt.extra.get("best_total", np.inf))
        history = list(ckpt.extra.get("history", []))
        logger.info("resumed at epoch %d", start_epoch + 1)

    out_dir.mkdir(parents=True, exist_ok=True)
    best_path = out_dir / "pretrain_best.ckpt"
    final_path = out_dir / "pretrain_final.ckpt"

    def extra(epoch: int) -> Dict[str, Any]:
        return {
            "kind": "pretrain",
            "epoch": epoch,
            "config": cfg.model_dump(mode="json"),
            "shuffle_rng": shuffle_rng.bit_generator.state,
            "dropout_rng": dropout_rng.bit_generator.state,
            "best_total": best_total,
            "history": history,
            **(meta or {}),
        }

    for epoch in range(start_epoch, cfg.pretrain_epochs):
        step_values = [
            pretrain_step([records[i] for i in idx], params, adam, cfg, dropout_rng)
            for idx in _batches(len(records), cfg.pretrain_batch, shuffle_rng)
        ]
        row: Dict[str, float] = {"epoch": epoch + 1}
        for name in LOSS_NAMES + ("total",):
            values = [v[name] for v in step_values if not np.isnan(v[name])]
            row[f"L_{name}"] = float(np.mean(values)) if values else float("nan")
        history.append(row)
        logger.info(
            "epoch %d/%d L_total=%.5f %s",
            epoch + 1,
            cfg.pretrain_epochs,
            row["L_total"],
            " ".join(f"L_{n}={row[f'L_{n}']:.4f}" for n in active),
        )
        if row["L_total"] < best_total:
            best_total = row["L_total"]
            save_checkpoint(best_path, params, adam, cfg_hash, extra(epoch + 1))
        save_checkpoint(final_path, params, adam, cfg_hash, extra(epoch + 1))

    frame = pd.DataFrame(history, columns=LOSS_COLUMNS)
    losses_path = out_dir / "pretrain_losses.csv"
    frame.to_csv(losses_path, index=False, float_format="%.6f")
    return PretrainResult(
        final_checkpoint=final_path,
        best_checkpoint=best_path,
        losses_path=losses_path,
        history=frame,
    )


# Finetuning


def classification_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """BCE with logits averaged over observed labels; NaN labels are masked."""
    labels = np.asarray(labels, dtype=np.float64)
    mask = ~np.isnan(labels)
    y = np.where(mask, labels, 0.0)
    per_entry = (ad.softplus(logits) - logits * y) * mask.astype(np.float64)
    return per_entry.sum() * (1.0 / max(int(mask.sum()), 1))


def regression_loss(preds: Tensor, labels: np.ndarray) -> Tensor:
    """Mean squared error over observed labels."""
    labels = np.asarray(labels, dtype=np.float64)
    mask = ~np.isnan(labels)
    diff = (preds - np.where(mask, labels, 0.0)) * mask.astype(np.float64)
    return (diff * diff).sum() * (1.0 / max(int(mask.sum()), 1))


def init_finetune_params(
    cfg: RunConfig, n_tasks: int, seed: int, init: Optional[Checkpoint] = None
) -> Params:
    """Encoder (random or transferred) plus a fresh linear readout."""
    rng = ad.make_rng(seed, STREAM_INIT)
    params = init_encoder_params(cfg.encoder, rng)
    if init is not None:
        check_shapes(init, params, prefixes=(ENCODER_PREFIX,))
        for name, tensor in params.items():
            tensor.data = init.params[name].copy()
    params.update(init_readout(cfg.encoder, n_tasks, rng))
    return params


def predict(
    records: Sequence[GraphRecord], params: Params, cfg: RunConfig, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode readout predictions, [n, n_tasks]."""
    blocks = []
    for start in range(0, len(records), batch_size):
        batch = collate([r.chg for r in records[start : start + batch_size]])
        emb = encode(batch, params, cfg.encoder, training=False)
        blocks.append(predict_tasks(readout(emb, batch), params).data)
    return np.concatenate(blocks, axis=0)


def _labels(records: Sequence[GraphRecord]) -> np.ndarray:
    if not records or any(r.labels is None for r in records):
        raise LabelArityMismatch("finetuning needs a label vector on every record")
    widths = {len(r.labels) for r in records}  # type: ignore[arg-type]
    if len(widths) != 1 or 0 in widths:
        raise LabelArityMismatch(f"label vectors have differing lengths {sorted(widths)}")
    return np.stack([r.labels for r in records]).astype(np.float64)  # type: ignore[misc]


def score(
    task: TaskType, preds: np.ndarray, labels: np.ndarray
) -> Tuple[float, List[int]]:
    """ROC-AUC for classification, RMSE for regression."""
    if TaskType(task) is TaskType.CLASSIFY:
        return multitask_roc_auc(preds, labels)
    return rmse(preds, labels), []


def metric_name(task: TaskType) -> str:
    return "roc_auc" if TaskType(task) is TaskType.CLASSIFY else "rmse"


def _improves(task: TaskType, new: float, old: Optional[float]) -> bool:
    if old is None:
        return True
    return new > old if TaskType(task) is TaskType.CLASSIFY else new < old


def finetune(
    train: Sequence[GraphRecord],
    valid: Sequence[GraphRecord],
    test: Sequence[GraphRecord],
    task: TaskType,
    cfg: RunConfig,
    init: Optional[Checkpoint] = None,
    seed: int = 0,
) -> FinetuneOutcome:
    """Train encoder and readout end to end; keep the best-validation epoch.

    Ties keep the earlier epoch. When the validation metric is undefined
    (a single class everywhere) the latest epoch is kept. An undefined test
    metric is recorded as NaN with every task skipped.
    """
    task = TaskType(task)
    y_train, y_valid, y_test = _labels(train), _labels(valid), _labels(test)
    n_tasks = y_train.shape[1]
    if y_valid.shape[1] != n_tasks or y_test.shape[1] != n_tasks:
        raise LabelArityMismatch("splits disagree on the number of tasks")
    loss_fn = classification_loss if task is TaskType.CLASSIFY else regression_loss

    params = init_finetune_params(cfg, n_tasks, seed, init)
    adam = _adam(cfg)
    shuffle_rng = ad.make_rng(seed, STREAM_SHUFFLE)
    dropout_rng = ad.make_rng(seed, STREAM_DROPOUT)

    best: Optional[float] = None
    best_epoch = 0
    best_params = _snapshot(params)
    for epoch in range(1, cfg.finetune_epochs + 1):
        for idx in _batches(len(train), cfg.finetune_batch, shuffle_rng):
            batch = collate([train[i].chg for i in idx])
            with ad.Tape() as tape:
                emb = encode(batch, params, cfg.encoder, training=True, rng=dropout_rng)
                loss = loss_fn(predict_tasks(readout(emb, batch), params), y_train[idx])
            _apply_gradients(tape, loss, params, adam)

        try:
            valid_metric, _ = score(task, predict(valid, params, cfg), y_valid)
        except (SingleClass, EmptyInput):
            valid_metric = float("nan")
        if np.isnan(valid_metric) or _improves(task, valid_metric, best):
            best = None if np.isnan(valid_metric) else valid_metric
            best_epoch = epoch
            best_params = _snapshot(params)
        logger.debug(
            "seed %d epoch %d valid %s=%.4f", seed, epoch, metric_name(task), valid_metric
        )

    for name, tensor in params.items():
        tensor.data = best_params[name]
    try:
        test_metric, skipped = score(task, predict(test, params, cfg), y_test)
    except (SingleClass, EmptyInput) as exc:
        logger.warning("seed %d: test metric undefined: %s", seed, exc)
        test_metric, skipped = float("nan"), list(range(n_tasks))
    result = SeedResult(
        seed=seed,
        metric=test_metric,
        valid_metric=float("nan") if best is None else best,
        best_epoch=best_epoch,
        skipped_tasks=skipped,
    )
    logger.info(
        "seed %d: best epoch %d, test %s=%.4f",
        seed,
        best_epoch,
        metric_name(task),
        test_metric,
    )
    return FinetuneOutcome(result=result, params=params)


def finetune_seeds(
    records: Sequence[GraphRecord],
    task: TaskType,
    cfg: RunConfig,
    init: Optional[Checkpoint] = None,
    seeds: Optional[Sequence[int]] = None,
    out_dir: Optional[Union[str, Path]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> MetricsReport:
    """Repeat split + finetune per seed; report mean and std of the test metric.

    Each seed drives both the random split and the model, so pretrained and
    random initialisations see identical splits for the same seed.
    """
    task = TaskType(task)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    records = with_graph_variant(records, cfg.ablation.graph)
    results: List[SeedResult] = []
    for seed in seeds:
        spec = cfg.split.model_copy(update={"seed": seed})
        train_idx, valid_idx, test_idx = split_indices(len(records), spec)
        outcome = finetune(
            [records[i] for i in train_idx],
            [records[i] for i in valid_idx],
            [records[i] for i in test_idx],
            task,
            cfg,
            init=init,
            seed=seed,
        )
        results.append(outcome.result)
        if out_dir is not None:
            save_checkpoint(
                Path(out_dir) / f"finetune_seed{seed}.ckpt",
                outcome.params,
                None,
                config_hash(cfg),
                {
                    "kind": "finetune",
                    "task": task.value,
                    "seed": seed,
                    "config": cfg.model_dump(mode="json"),
                    **(meta or {}),
                },
            )
    values = np.array([r.metric for r in results])
    undefined = np.isnan(values)
    if undefined.any():
        logger.warning(
            "%d of %d seeds have no defined test metric; left out of mean and std",
            int(undefined.sum()),
            len(values),
        )
    values = values[~undefined]
    return MetricsReport(
        task=task,
        metric=metric_name(task),
        init="random" if init is None else "pretrained",
        per_seed=results,
        mean=float(values.mean()) if values.size else float("nan"),
        std=float(values.std()) if values.size else float("nan"),
    )


def compare_inits(
    records: Sequence[GraphRecord],
    task: TaskType,
    cfg: RunConfig,
    ckpt: Checkpoint,
    seeds: Optional[Sequence[int]] = None,
) -> Tuple[MetricsReport, MetricsReport]:
    """Pretrained vs random initialisation on the same splits.

    The pretrained report carries ``extra["delta_vs_random"]``.
    """
    pretrained = finetune_seeds(records, task, cfg, init=ckpt, seeds=seeds)
    random_init = finetune_seeds(records, task, cfg, init=None, seeds=seeds)
    delta = pretrained.mean - random_init.mean
    pretrained.extra["delta_vs_random"] = delta
    logger.info(
        "%s pretrained %.4f +/- %.4f vs random %.4f +/- %.4f (delta %+.4f)",
        pretrained.metric,
        pretrained.mean,
        pretrained.std,
        random_init.mean,
        random_init.std,
        delta,
    )
    return pretrained, random_init


def model_from_checkpoint(ckpt: Checkpoint) -> Tuple[Params, RunConfig]:
    if "config" not in ckpt.extra:
        raise ConfigMismatch("checkpoint does not record its run configuration")
    return ckpt.tensors(), RunConfig.model_validate(ckpt.extra["config"])


def evaluate(records: Sequence[GraphRecord], ckpt: Checkpoint) -> Dict[str, Any]:
    """Score a finetuned checkpoint on labelled records."""
    params, cfg = model_from_checkpoint(ckpt)
    if "readout.W" not in params:
        raise ConfigMismatch("checkpoint has no readout; finetune it first")
    task = TaskType(ckpt.extra.get("task", TaskType.CLASSIFY.value))
    labels = _labels(records)
    n_tasks = params["readout.W"].shape[1]
    if labels.shape[1] != n_tasks:
        raise LabelArityMismatch(
            f"data has {labels.shape[1]} label columns, checkpoint predicts {n_tasks}"
        )
    records = with_graph_variant(records, cfg.ablation.graph)
    value, skipped = score(task, predict(records, params, cfg), labels)
    return {
        "task": task.value,
        "metric": metric_name(task),
        "value": value,
        "n": len(records),
        "skipped_tasks": skipped,
    }
