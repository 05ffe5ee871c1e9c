"""
GIN encoder over batched CHGraphs with a jumping-knowledge sum, plus heads.

Parameter names are grouped by prefix so checkpoints can be transferred
selectively: ``enc.`` (shared encoder), ``proj.``/``proj_b.`` (contrastive
projection), ``head.`` (pretraining heads) and ``readout.`` (finetuning).
"""

from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor
from app.chg import GraphBatch
from app.exceptions import ShapeMismatch
from app.schemas import EncoderConfig

logger = logging.getLogger(__name__)

Params = Dict[str, Tensor]

ENCODER_PREFIX = "enc."
N_RING_CLASSES = 9
N_SCAFFOLD_BITS = 3
_NORM_EPS = 1e-5


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _linear(
    params: Params, name: str, rng: np.random.Generator, fan_in: int, fan_out: int
) -> None:
    params[f"{name}.W"] = ad.parameter(_glorot(rng, fan_in, fan_out), name=f"{name}.W")
    params[f"{name}.b"] = ad.parameter(np.zeros(fan_out), name=f"{name}.b")


def init_encoder_params(cfg: EncoderConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    _linear(params, "enc.embed", rng, cfg.input_dim, cfg.hidden)
    for layer in range(cfg.layers):
        prefix = f"enc.gin{layer}"
        params[f"{prefix}.eps"] = ad.parameter(np.zeros(1), name=f"{prefix}.eps")
        _linear(params, f"{prefix}.mlp1", rng, cfg.hidden, cfg.hidden)
        _linear(params, f"{prefix}.mlp2", rng, cfg.hidden, cfg.hidden)
        if cfg.norm:
            gamma, beta = f"{prefix}.gamma", f"{prefix}.beta"
            params[gamma] = ad.parameter(np.ones(cfg.hidden), name=gamma)
            params[beta] = ad.parameter(np.zeros(cfg.hidden), name=beta)
    return params


def init_pretrain_heads(
    cfg: EncoderConfig, n_groups: int, fingerprint_bits: int, rng: np.random.Generator
) -> Params:
    params: Params = {}
    views = ("proj",) if cfg.share_projection else ("proj", "proj_b")
    for view in views:
        _linear(params, f"{view}.l1", rng, cfg.hidden, cfg.hidden)
        _linear(params, f"{view}.l2", rng, cfg.hidden, cfg.proj_dim)
    _linear(params, "head.frag", rng, cfg.hidden, n_groups)
    _linear(params, "head.topo", rng, cfg.hidden, fingerprint_bits)
    _linear(params, "head.ring", rng, cfg.hidden, N_RING_CLASSES)
    _linear(params, "head.aro", rng, cfg.hidden, N_RING_CLASSES)
    _linear(params, "head.bin", rng, cfg.hidden, N_SCAFFOLD_BITS)
    return params


def init_readout(cfg: EncoderConfig, n_tasks: int, rng: np.random.Generator) -> Params:
    params: Params = {}
    _linear(params, "readout", rng, 4 * cfg.hidden, n_tasks)
    return params


def encoder_params(params: Params) -> Params:
    return {k: v for k, v in params.items() if k.startswith(ENCODER_PREFIX)}


def _dense(x: Tensor, params: Params, name: str) -> Tensor:
    W = params[f"{name}.W"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"{name}: input dim {x.shape[-1]} != {W.shape[0]}")
    return x @ W + params[f"{name}.b"]


def _layer_norm(h: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    width = h.shape[1]
    average = Tensor(np.full((width, 1), 1.0 / width))
    centered = h - h @ average
    variance = (centered * centered) @ average
    return centered * ad.power(variance + _NORM_EPS, -0.5) * gamma + beta


def encode(
    batch: GraphBatch,
    params: Params,
    cfg: EncoderConfig,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    """Node embeddings [n_nodes, hidden]: the sum of every GIN layer's output.

    Each layer computes MLP((1 + eps) * h + sum of neighbours) over the union
    of all six edge sets, in both directions. ReLU follows every layer but
    the last; dropout follows every layer in training mode.
    """
    features = batch.features
    if features.shape[1] != cfg.input_dim:
        raise ShapeMismatch(
            f"features have {features.shape[1]} columns, expected {cfg.input_dim}"
        )
    n = batch.n_nodes
    senders = np.concatenate([batch.src, batch.dst])
    receivers = np.concatenate([batch.dst, batch.src])

    h = _dense(Tensor(features), params, "enc.embed")
    jk: Optional[Tensor] = None
    for layer in range(cfg.layers):
        prefix = f"enc.gin{layer}"
        neighbours = ad.segment_sum(ad.gather_rows(h, senders), receivers, n)
        z = h + h * params[f"{prefix}.eps"] + neighbours
        z = _dense(ad.relu(_dense(z, params, f"{prefix}.mlp1")), params, f"{prefix}.mlp2")
        if cfg.norm:
            z = _layer_norm(z, params[f"{prefix}.gamma"], params[f"{prefix}.beta"])
        if layer < cfg.layers - 1:
            z = ad.relu(z)
        h = ad.dropout(z, cfg.dropout, rng, training)
        jk = h if jk is None else jk + h
    assert jk is not None
    return jk


def pool_rows(emb: Tensor, rows: np.ndarray, owner: np.ndarray, n_segments: int) -> Tensor:
    """Mean of ``emb[rows]`` per owner segment; empty segments pool to zero."""
    counts = np.bincount(owner, minlength=n_segments).astype(np.float64)
    inverse = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    total = ad.segment_sum(ad.gather_rows(emb, rows), owner, n_segments)
    return total * inverse[:, None]


def pool_by_type(emb: Tensor, batch: GraphBatch, node_type: str) -> Tensor:
    """Per-molecule mean over one node type: [n_graphs, hidden]."""
    if node_type not in batch.rows:
        raise ValueError(f"unknown node type {node_type!r}")
    return pool_rows(emb, batch.rows[node_type], batch.owner[node_type], batch.n_graphs)


def readout(emb: Tensor, batch: GraphBatch) -> Tensor:
    """concat(mean atoms, mean bonds, mean fragments, graph node): [n_graphs, 4*hidden]."""
    return ad.concat(
        [pool_by_type(emb, batch, t) for t in ("atom", "bond", "frag", "graph")], axis=1
    )


def project_contrastive(vec: Tensor, params: Params, view: str = "atom") -> Tensor:
    name = "proj_b" if view == "bond" and "proj_b.l1.W" in params else "proj"
    return _dense(ad.relu(_dense(vec, params, f"{name}.l1")), params, f"{name}.l2")


def predict_frag(vec: Tensor, params: Params) -> Tensor:
    return _dense(vec, params, "head.frag")


def predict_topo(vec: Tensor, params: Params) -> Tensor:
    return _dense(vec, params, "head.topo")


def predict_scaffold(vec: Tensor, params: Params) -> Tuple[Tensor, Tensor, Tensor]:
    return (
        _dense(vec, params, "head.ring"),
        _dense(vec, params, "head.aro"),
        _dense(vec, params, "head.bin"),
    )


def predict_tasks(vec: Tensor, params: Params) -> Tensor:
    return _dense(vec, params, "readout")
