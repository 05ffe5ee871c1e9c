"""
Embedding export for cluster analysis at graph, fragment and bond level.

The exported CSV has columns ``id,key,e0..e{H-1}``; ``key`` is the grouping
used for coloring and for the Davies-Bouldin / silhouette scores, which are
computed on the raw hidden-dimension vectors.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app import autodiff as ad
from app.checkpoint import Checkpoint
from app.chem.perception import murcko_scaffold
from app.chem.smiles import canonical_form, parse_smiles
from app.chg import apply_graph_variant, collate
from app.data_ingestion import GraphRecord
from app.encoder import Params, encode, init_encoder_params
from app.exceptions import ConfigMismatch
from app.metrics import cluster_metrics
from app.schemas import EmbeddingLevel, RunConfig
from app.training import STREAM_INIT, model_from_checkpoint

logger = logging.getLogger(__name__)

KEY_COLUMN = "key"


@dataclass
class Population:
    """Selection caps for each export level."""

    top_scaffolds: int = 10
    top_groups: int = 8
    per_group: int = 100


@dataclass
class _Item:
    item_id: str
    key: str
    vector: np.ndarray


def _encoder_for(
    ckpt: Optional[Checkpoint], cfg: Optional[RunConfig], seed: int
) -> Tuple[Params, RunConfig]:
    if ckpt is not None:
        return model_from_checkpoint(ckpt)
    if cfg is None:
        raise ConfigMismatch("a random-init export needs a run configuration")
    return init_encoder_params(cfg.encoder, ad.make_rng(seed, STREAM_INIT)), cfg


def _scaffold_key(smiles: str) -> str:
    scaffold = murcko_scaffold(parse_smiles(smiles))
    return canonical_form(scaffold) if scaffold.n_atoms else ""


def _collect(
    records: Sequence[GraphRecord],
    params: Params,
    cfg: RunConfig,
    level: EmbeddingLevel,
    group_names: Sequence[str],
    batch_size: int,
) -> List[_Item]:
    """Every candidate item with its key, before population capping."""
    items: List[_Item] = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        graphs = [apply_graph_variant(r.chg, cfg.ablation.graph) for r in chunk]
        batch = collate(graphs)
        emb = encode(batch, params, cfg.encoder, training=False).data
        base = 0
        for offset, (record, graph) in enumerate(zip(chunk, graphs)):
            mol_id = start + offset
            atoms = base + graph.offsets["atom"]
            full = record.chg
            if level is EmbeddingLevel.GRAPH:
                key = _scaffold_key(record.smiles)
                if key:
                    if graph.n_graph:
                        vec = emb[base + graph.offsets["graph"]]
                    else:
                        vec = emb[atoms : atoms + graph.n_atoms].mean(axis=0)
                    items.append(_Item(f"m{mol_id}", key, vec))
            elif level is EmbeddingLevel.FRAGMENT:
                fg = record.targets.frag_fg
                for k, members in enumerate(full.frag_atom_members):
                    if fg[k].sum() != 1:
                        continue
                    if graph.n_frags:
                        vec = emb[base + graph.offsets["frag"] + k]
                    else:
                        vec = emb[[atoms + a for a in members]].mean(axis=0)
                    key = group_names[int(np.argmax(fg[k]))]
                    items.append(_Item(f"m{mol_id}.f{k}", key, vec))
            else:
                ends = full.edges["a"]
                for b, order in enumerate(full.bond_orders):
                    if graph.n_bonds:
                        vec = emb[base + graph.offsets["bond"] + b]
                    else:
                        u, v = ends[b]
                        vec = (emb[atoms + u] + emb[atoms + v]) / 2.0
                    items.append(_Item(f"m{mol_id}.b{b}", order.value, vec))
            base += graph.n_nodes
    return items


def _select(items: List[_Item], level: EmbeddingLevel, pop: Population) -> List[_Item]:
    counts = Counter(item.key for item in items)
    if level is EmbeddingLevel.BOND:
        keep = set(counts)
    else:
        top = pop.top_scaffolds if level is EmbeddingLevel.GRAPH else pop.top_groups
        ranked = sorted(counts, key=lambda k: (-counts[k], k))
        keep = set(ranked[:top])
    taken: Dict[str, int] = Counter()
    chosen = []
    for item in items:
        if item.key in keep and taken[item.key] < pop.per_group:
            taken[item.key] += 1
            chosen.append(item)
    return chosen


def export_embeddings(
    records: Sequence[GraphRecord],
    ckpt: Optional[Checkpoint],
    level: EmbeddingLevel,
    path: Union[str, Path],
    cfg: Optional[RunConfig] = None,
    group_names: Sequence[str] = (),
    population: Optional[Population] = None,
    seed: int = 0,
    batch_size: int = 128,
) -> Path:
    """Write selected embeddings at ``level`` to a CSV.

    Graph level groups molecules by Murcko scaffold (acyclic molecules are
    left out), fragment level groups fragments that carry exactly one
    functional group by that group's name, bond level groups by bond type.
    With ``ckpt=None`` a randomly initialised encoder built from ``cfg`` is
    used.
    """
    level = EmbeddingLevel(level)
    pop = population or Population()
    params, run_cfg = _encoder_for(ckpt, cfg, seed)
    if level is EmbeddingLevel.FRAGMENT and not group_names:
        raise ConfigMismatch("fragment-level export needs the functional group names")
    items = _select(
        _collect(records, params, run_cfg, level, group_names, batch_size), level, pop
    )
    hidden = run_cfg.encoder.hidden
    frame = pd.DataFrame(
        np.stack([item.vector for item in items]) if items else np.zeros((0, hidden)),
        columns=[f"e{i}" for i in range(hidden)],
    )
    frame.insert(0, KEY_COLUMN, [item.key for item in items])
    frame.insert(0, "id", [item.item_id for item in items])

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.8g")
    logger.info(
        "exported %d %s embeddings in %d groups to %s",
        len(items),
        level.value,
        frame[KEY_COLUMN].nunique(),
        path,
    )
    return path


def read_embeddings(path: Union[str, Path]) -> Tuple[np.ndarray, np.ndarray]:
    frame = pd.read_csv(path, keep_default_na=False)
    columns = [c for c in frame.columns if c.startswith("e") and c[1:].isdigit()]
    return frame[columns].to_numpy(dtype=np.float64), frame[KEY_COLUMN].astype(str).to_numpy()


def cluster_report(path: Union[str, Path]) -> Tuple[float, float]:
    """Davies-Bouldin index and silhouette of an exported CSV."""
    vectors, keys = read_embeddings(path)
    dbi, silhouette = cluster_metrics(vectors, keys)
    logger.info("%s: DBI=%.4f silhouette=%.4f", path, dbi, silhouette)
    return dbi, silhouette
