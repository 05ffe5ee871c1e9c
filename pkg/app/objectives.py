"""
Pretraining objectives: atom/bond fragment contrast, fragment functional
groups, topological fingerprint and scaffold properties.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor
from app.chem.labels import MAX_RING_CLASS, PretrainTargets
from app.chg import CHGraph, GraphBatch
from app.encoder import (
    Params,
    encode,
    pool_by_type,
    pool_rows,
    predict_frag,
    predict_scaffold,
    predict_topo,
    project_contrastive,
)
from app.exceptions import DimensionMismatch, NoValidFragments
from app.schemas import AblationFlags, GraphVariant, LossVariant, LossWeights, RunConfig

logger = logging.getLogger(__name__)

LOSS_NAMES = ("ab", "frag", "topo", "scaf")

_LOSS_VARIANTS: Dict[LossVariant, tuple] = {
    LossVariant.FULL: LOSS_NAMES,
    LossVariant.NO_AB: ("frag", "topo", "scaf"),
    LossVariant.NO_FRAG: ("ab", "topo", "scaf"),
    LossVariant.NO_TOPO: ("ab", "frag", "scaf"),
    LossVariant.NO_SCAF: ("ab", "frag", "topo"),
    LossVariant.NO_GRAPH_LEVEL: ("ab", "frag"),
    LossVariant.NO_LOCAL: ("topo", "scaf"),
}

# Node types each loss needs beyond atoms.
_LOSS_NEEDS = {"ab": {"bond", "frag"}, "frag": {"frag"}, "topo": set(), "scaf": set()}
_VARIANT_TYPES = {
    GraphVariant.ATOM: {"atom"},
    GraphVariant.HIERARCHICAL: {"atom", "frag", "graph"},
    GraphVariant.FULL: {"atom", "bond", "frag", "graph"},
}


def active_losses(flags: AblationFlags) -> List[str]:
    present = _VARIANT_TYPES[GraphVariant(flags.graph)]
    return [
        name
        for name in _LOSS_VARIANTS[LossVariant(flags.loss)]
        if _LOSS_NEEDS[name] <= present
    ]


@dataclass
class FragmentViews:
    za: Optional[Tensor]
    zb: Optional[Tensor]
    frag_ids: np.ndarray

    @property
    def n(self) -> int:
        return len(self.frag_ids)


@dataclass
class BatchTargets:
    frag_fg: np.ndarray  # [n_frags in batch, C]
    topo_fp: np.ndarray  # [n_graphs, D]
    scaffold: np.ndarray  # [n_graphs, 5]


def stack_targets(
    graphs: Sequence[CHGraph], targets: Sequence[PretrainTargets]
) -> BatchTargets:
    """Batch-aligned targets; fragment rows only for graphs that keep fragments."""
    frag_rows = [t.frag_fg for g, t in zip(graphs, targets) if g.n_frags]
    width = targets[0].frag_fg.shape[1] if targets else 0
    return BatchTargets(
        frag_fg=np.concatenate(frag_rows, axis=0) if frag_rows else np.zeros((0, width)),
        topo_fp=np.stack([t.topo_fp for t in targets]).astype(np.float64),
        scaffold=np.array([t.scaffold for t in targets], dtype=np.int64),
    )


def valid_view_fragments(batch: GraphBatch) -> np.ndarray:
    """Fragments with at least two atoms and one internal bond."""
    return np.flatnonzero((batch.frag_atom_counts >= 2) & (batch.frag_bond_counts >= 1))


def fragment_views(emb: Tensor, batch: GraphBatch, params: Params) -> FragmentViews:
    """Projected mean atom view and mean bond view of every valid fragment."""
    valid = valid_view_fragments(batch)
    if not valid.size:
        return FragmentViews(za=None, zb=None, frag_ids=valid)
    remap = np.full(batch.n_frags, -1, dtype=np.int64)
    remap[valid] = np.arange(valid.size)

    atom_ids = remap[batch.frag_atom_ids]
    keep_atoms = atom_ids >= 0
    bond_ids = remap[batch.frag_bond_ids]
    keep_bonds = bond_ids >= 0
    atom_mean = pool_rows(
        emb, batch.frag_atom_rows[keep_atoms], atom_ids[keep_atoms], valid.size
    )
    bond_mean = pool_rows(
        emb, batch.frag_bond_rows[keep_bonds], bond_ids[keep_bonds], valid.size
    )
    return FragmentViews(
        za=project_contrastive(atom_mean, params, "atom"),
        zb=project_contrastive(bond_mean, params, "bond"),
        frag_ids=valid,
    )


def loss_ab(views: FragmentViews, tau: float) -> Tensor:
    """Symmetric NT-Xent between atom and bond views of the same fragment.

    Every other fragment in the batch is a negative, including fragments of
    the same substructure type in other molecules.
    """
    if views.n == 0 or views.za is None or views.zb is None:
        raise NoValidFragments()
    if views.za.shape != views.zb.shape:
        raise DimensionMismatch(f"views differ: {views.za.shape} vs {views.zb.shape}")
    a = ad.l2_normalize(views.za, axis=1)
    b = ad.l2_normalize(views.zb, axis=1)
    sim = (a @ b.T) * (1.0 / tau)
    positives = (sim * np.eye(views.n)).sum(axis=1)
    a_to_b = ad.log_sum_exp(sim, axis=1) - positives
    b_to_a = ad.log_sum_exp(sim, axis=0) - positives
    return (a_to_b.sum() + b_to_a.sum()) * (1.0 / (2 * views.n))


def _bce_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    return (ad.softplus(logits) - logits * labels).sum()


def _check_aligned(logits: Tensor, labels: np.ndarray, what: str) -> None:
    if logits.shape != labels.shape:
        raise DimensionMismatch(f"{what}: logits {logits.shape} vs labels {labels.shape}")


def loss_frag(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over fragments of the per-class binary cross-entropy sum."""
    labels = np.asarray(labels, dtype=np.float64)
    _check_aligned(logits, labels, "loss_frag")
    if logits.shape[0] == 0:
        return Tensor(0.0)
    return _bce_sum(logits, labels) * (1.0 / logits.shape[0])


def loss_topo(logits: Tensor, bits: np.ndarray) -> Tensor:
    """Binary cross-entropy averaged over the D bits (and over molecules)."""
    bits = np.asarray(bits, dtype=np.float64)
    _check_aligned(logits, bits, "loss_topo")
    return _bce_sum(logits, bits) * (1.0 / max(bits.size, 1))


def _cross_entropy(logits: Tensor, classes: np.ndarray) -> Tensor:
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(classes)), classes] = 1.0
    picked = (logits * onehot).sum(axis=1)
    return (ad.log_sum_exp(logits, axis=1) - picked).mean()


def loss_scaf(
    ring_logits: Tensor,
    aro_logits: Tensor,
    bin_logits: Tensor,
    targets: np.ndarray,
) -> Tensor:
    """Ring-count CE + aromatic-ring-count CE + mean BCE of the three flags.

    ``targets`` rows are (ring, aromatic ring, fused, heterocyclic, bridged);
    counts are clamped to the 0..8 classes.
    """
    targets = np.atleast_2d(np.asarray(targets))
    n_classes = MAX_RING_CLASS + 1
    if ring_logits.shape[1:] != (n_classes,) or aro_logits.shape[1:] != (n_classes,):
        raise DimensionMismatch(f"count heads need {n_classes} logits")
    if bin_logits.shape[1:] != (3,) or targets.shape[1] != 5:
        raise DimensionMismatch("scaffold flags need 3 logits and 5 target columns")
    ring = np.clip(targets[:, 0], 0, MAX_RING_CLASS).astype(np.int64)
    aro = np.clip(targets[:, 1], 0, MAX_RING_CLASS).astype(np.int64)
    flags = targets[:, 2:5].astype(np.float64)
    l_bin = _bce_sum(bin_logits, flags) * (1.0 / flags.size)
    return _cross_entropy(ring_logits, ring) + _cross_entropy(aro_logits, aro) + l_bin


def loss_total(terms: Dict[str, Optional[Tensor]], w: LossWeights) -> Tensor:
    """Weighted sum; absent terms contribute nothing."""
    total: Tensor = Tensor(0.0)
    for name, weight in w.as_dict().items():
        term = terms.get(name)
        if term is not None and weight:
            total = total + term * weight
    return total


def graph_vector(emb: Tensor, batch: GraphBatch) -> Tensor:
    """Graph-node rows, or mean-pooled atoms when the graph node is absent."""
    if len(batch.graph_rows) == batch.n_graphs:
        return ad.gather_rows(emb, batch.graph_rows)
    return pool_by_type(emb, batch, "atom")


def pretrain_losses(
    batch: GraphBatch,
    targets: BatchTargets,
    params: Params,
    cfg: RunConfig,
    training: bool = True,
    rng: Optional[np.random.Generator] = None,
) -> Dict[str, Optional[Tensor]]:
    """Encode the batch and evaluate every active loss; skipped terms are None."""
    active = active_losses(cfg.ablation)
    emb = encode(batch, params, cfg.encoder, training=training, rng=rng)
    terms: Dict[str, Optional[Tensor]] = {name: None for name in LOSS_NAMES}

    if "ab" in active:
        try:
            terms["ab"] = loss_ab(fragment_views(emb, batch, params), cfg.weights.tau)
        except NoValidFragments:
            logger.warning("no valid fragments in batch; contrastive term skipped")
    if "frag" in active:
        multi_atom = np.flatnonzero(batch.frag_atom_counts >= 2)
        if multi_atom.size:
            frag_emb = ad.gather_rows(emb, batch.rows["frag"][multi_atom])
            logits = predict_frag(frag_emb, params)
            terms["frag"] = loss_frag(logits, targets.frag_fg[multi_atom])
    if "topo" in active or "scaf" in active:
        g = graph_vector(emb, batch)
        if "topo" in active:
            terms["topo"] = loss_topo(predict_topo(g, params), targets.topo_fp)
        if "scaf" in active:
            terms["scaf"] = loss_scaf(*predict_scaffold(g, params), targets.scaffold)
    return terms
