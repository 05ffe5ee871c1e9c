"""
Dataset loading, splitting, preprocessing into CHGraphs and the graph cache,
plus a deterministic synthetic molecule generator for desk-scale runs.
"""

import hashlib
import json
import logging
import pickle
from dataclasses import dataclass, field, replace
from functools import partial
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.chem.functional_groups import FunctionalGroupSet
from app.chem.labels import PretrainTargets, compute_targets
from app.chem.perception import perceive
from app.chem.psm_vocab import FragmentVocab, decompose
from app.chem.smiles import Molecule, canonical_form, parse_smiles
from app.chg import CHGraph, apply_graph_variant, build_chg
from app.exceptions import (
    CacheFormatError,
    ChgError,
    DatasetError,
    EmptyDataset,
    MissingSmilesColumn,
    TooSmall,
)
from app.schemas import GraphVariant, RunConfig, SplitSpec, TaskType

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"CHGCACHE1"
SMILES_COLUMN = "smiles"


@dataclass
class MoleculeRecord:
    smiles: str
    mol: Molecule = field(repr=False)
    labels: Optional[np.ndarray] = None  # NaN marks a missing label
    row: int = -1


@dataclass
class Dataset:
    records: List[MoleculeRecord]
    task: TaskType
    label_names: List[str] = field(default_factory=list)
    skipped: List[Tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_tasks(self) -> int:
        return len(self.label_names)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            records=[self.records[i] for i in indices],
            task=self.task,
            label_names=list(self.label_names),
        )

    def label_matrix(self) -> np.ndarray:
        if not self.label_names:
            return np.zeros((len(self.records), 0))
        return np.stack([r.labels for r in self.records]).astype(np.float64)


@dataclass
class GraphRecord:
    smiles: str
    chg: CHGraph
    targets: PretrainTargets
    labels: Optional[np.ndarray] = None


@dataclass
class GraphCache:
    records: List[GraphRecord]
    meta: Dict[str, Any]


def _infer_task(labels: pd.DataFrame) -> TaskType:
    if labels.shape[1] == 0:
        return TaskType.PRETRAIN
    values = labels.to_numpy(dtype=np.float64)
    present = values[~np.isnan(values)]
    if np.isin(present, (0.0, 1.0)).all():
        return TaskType.CLASSIFY
    return TaskType.REGRESS


def load_csv(
    path: Union[str, Path],
    task: Optional[TaskType] = None,
    label_columns: Optional[Sequence[str]] = None,
) -> Dataset:
    """Read ``smiles[,label...]``; empty label cells become NaN.

    ``label_columns`` restricts the labels to the named columns; by default
    every non-SMILES column is a label.

    Rows whose SMILES cannot be parsed or perceived are skipped and logged.
    """
    try:
        frame = pd.read_csv(path, dtype={SMILES_COLUMN: str}, skipinitialspace=True)
    except pd.errors.EmptyDataError as exc:
        raise EmptyDataset(f"{path}: file is empty") from exc
    frame.columns = [str(c).strip() for c in frame.columns]
    if SMILES_COLUMN not in frame.columns:
        raise MissingSmilesColumn(f"{path}: header lacks a '{SMILES_COLUMN}' column")

    label_names = [c for c in frame.columns if c != SMILES_COLUMN]
    if label_columns is not None:
        missing = [c for c in label_columns if c not in label_names]
        if missing:
            raise DatasetError(f"{path}: no label column(s) {missing}")
        label_names = list(label_columns)
    labels = frame[label_names].apply(pd.to_numeric, errors="coerce")
    task = TaskType(task) if task is not None else _infer_task(labels)
    if task is TaskType.CLASSIFY:
        values = labels.to_numpy(dtype=np.float64)
        bad = ~np.isnan(values) & ~np.isin(values, (0.0, 1.0))
        if bad.any():
            raise DatasetError(f"{path}: classification labels must be 0, 1 or empty")

    records: List[MoleculeRecord] = []
    skipped: List[Tuple[int, str]] = []
    for row, smiles in enumerate(frame[SMILES_COLUMN].tolist()):
        if not isinstance(smiles, str) or not smiles.strip():
            skipped.append((row, "empty SMILES"))
            continue
        smiles = smiles.strip()
        try:
            mol = parse_smiles(smiles)
            perceive(mol)
        except ChgError as exc:
            skipped.append((row, f"{exc.module}: {exc}"))
            continue
        label_row = labels.iloc[row].to_numpy(dtype=np.float64) if label_names else None
        records.append(MoleculeRecord(smiles=smiles, mol=mol, labels=label_row, row=row))

    for row, reason in skipped:
        logger.warning("%s: row %d skipped (%s)", path, row + 1, reason)
    if not records:
        raise EmptyDataset(f"{path}: no usable molecules")
    logger.info(
        "loaded %d molecules from %s (%d skipped, task=%s, %d label columns)",
        len(records),
        path,
        len(skipped),
        task.value,
        len(label_names),
    )
    return Dataset(records=records, task=task, label_names=label_names, skipped=skipped)


def split_indices(
    n: int, spec: SplitSpec
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded random split; sizes floor(r0*n), floor(r1*n) and the remainder."""
    if n < 5:
        raise TooSmall(f"need at least 5 molecules to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.ratios[0] * n + 1e-9))
    n_valid = int(np.floor(spec.ratios[1] * n + 1e-9))
    train = order[:n_train]
    valid = order[n_train : n_train + n_valid]
    test = order[n_train + n_valid :]
    return train, valid, test


def split(ds: Dataset, spec: SplitSpec) -> Tuple[Dataset, Dataset, Dataset]:
    train, valid, test = split_indices(len(ds), spec)
    return ds.subset(train), ds.subset(valid), ds.subset(test)


def _graph_record(
    record: MoleculeRecord, vocab: FragmentVocab, fgs: FunctionalGroupSet, bits: int
) -> GraphRecord:
    pm = perceive(record.mol)
    decomposition = decompose(record.mol, vocab, strict=False)
    return GraphRecord(
        smiles=record.smiles,
        chg=build_chg(pm, decomposition),
        targets=compute_targets(pm, decomposition, fgs, bits),
        labels=record.labels,
    )


def preprocess(
    ds: Dataset,
    vocab: FragmentVocab,
    fgs: FunctionalGroupSet,
    cfg: RunConfig,
    threads: int = 1,
    quiet: bool = False,
) -> List[GraphRecord]:
    """Full CHGraphs and pretraining targets, in dataset order.

    Graph variants are applied later with ``with_graph_variant`` so a single
    cache serves every ablation.
    """
    worker = partial(_graph_record, vocab=vocab, fgs=fgs, bits=cfg.fingerprint_bits)
    progress = dict(total=len(ds), desc="preprocess", disable=quiet or None)
    if threads <= 1:
        records = [worker(r) for r in tqdm(ds.records, **progress)]
    else:
        with Pool(threads) as pool:
            stream = pool.imap(worker, ds.records, chunksize=16)
            records = list(tqdm(stream, **progress))
    logger.info("preprocessed %d molecules with %d worker(s)", len(records), threads)
    return records


def with_graph_variant(
    records: Sequence[GraphRecord], variant: GraphVariant
) -> List[GraphRecord]:
    return [replace(r, chg=apply_graph_variant(r.chg, variant)) for r in records]


def corpus_hash(smiles: Sequence[str]) -> str:
    digest = hashlib.sha256("\n".join(smiles).encode("utf-8"))
    return digest.hexdigest()[:16]


def preprocess_hash(cfg: RunConfig) -> str:
    """Hash of the config fields that change preprocessing output."""
    payload = json.dumps(
        {"fingerprint_bits": cfg.fingerprint_bits, "n_groups": cfg.n_groups},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def cache_meta(
    ds: Dataset, vocab: FragmentVocab, fgs: FunctionalGroupSet, cfg: RunConfig
) -> Dict[str, Any]:
    return {
        "corpus": corpus_hash([r.smiles for r in ds.records]),
        "vocab": vocab.digest(),
        "config": preprocess_hash(cfg),
        "task": ds.task.value,
        "label_names": list(ds.label_names),
        "groups": fgs.names,
        "fingerprint_bits": cfg.fingerprint_bits,
        "n_records": len(ds),
    }


def save_cache(
    records: Sequence[GraphRecord], meta: Dict[str, Any], path: Union[str, Path]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = CACHE_MAGIC + b" " + json.dumps(meta, sort_keys=True).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(header + b"\n")
        pickle.dump(list(records), fh, protocol=pickle.HIGHEST_PROTOCOL)
    logger.info("wrote graph cache %s (%d records)", path, len(records))
    return path


def load_cache(
    path: Union[str, Path], expected: Optional[Dict[str, Any]] = None
) -> GraphCache:
    """Read a cache; ``expected`` keys must match the stored metadata."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            header = fh.readline()
            if not header.startswith(CACHE_MAGIC + b" "):
                raise CacheFormatError(f"{path}: missing CHGCACHE1 header")
            meta = json.loads(header[len(CACHE_MAGIC) + 1 :].decode("utf-8"))
            records = pickle.load(fh)
    except FileNotFoundError as exc:
        raise CacheFormatError(f"{path}: no such cache") from exc
    except (json.JSONDecodeError, UnicodeDecodeError, pickle.UnpicklingError, EOFError) as exc:
        raise CacheFormatError(f"{path}: corrupt cache ({exc})") from exc

    for key, value in (expected or {}).items():
        if meta.get(key) != value:
            raise CacheFormatError(
                f"{path}: stale cache, {key}={meta.get(key)!r} but expected {value!r}"
            )
    return GraphCache(records=records, meta=meta)


class MoleculeCorpusGenerator:
    """Deterministic synthetic molecules for desk-scale runs.

    Molecules are linear assemblies ``[left][linker][core]([linker][core])[right]``
    of small SMILES pieces, so every product is valid by construction.
    """

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

        self.cores = [
            "c1ccccc1",
            "c1ccncc1",
            "c1ccc2ccccc2c1",
            "c1ccoc1",
            "c1ccsc1",
            "c1cc[nH]c1",
            "c1ccc2[nH]ccc2c1",
            "C1CCCCC1",
            "C1CCNCC1",
            "C1CCOC1",
            "C1CC1",
            "C1CC2CCC1C2",
        ]

        # Last atom bonds to what follows.
        self.left_groups = [
            "C",
            "CC",
            "CC(C)",
            "O",
            "N",
            "CO",
            "Cl",
            "F",
            "Br",
            "N#C",
            "O=C(O)",
            "CC(=O)N",
            "FC(F)(F)",
            "CS(=O)(=O)",
            "[O-][N+](=O)",
            "CN(C)",
        ]

        # First atom bonds to what precedes.
        self.right_groups = [
            "",
            "C",
            "O",
            "N",
            "OC",
            "C(=O)O",
            "C(=O)OC",
            "C#N",
            "C(F)(F)F",
            "Cl",
            "F",
            "C(=O)N",
            "S",
            "CC(C)C",
            "C=O",
            "C(=O)C",
            "NC(C)C",
        ]

        self.linkers = ["", "", "C", "CC", "OCC", "C(=O)N", "CN", "C=C", "COC"]

    def _pick(self, items: Sequence[str]) -> str:
        return items[int(self.rng.integers(len(items)))]

    @staticmethod
    def _shift_ring_digits(core: str, shift: int) -> str:
        return "".join(str(int(ch) + shift) if ch.isdigit() else ch for ch in core)

    def generate_smiles(self) -> str:
        parts = [self._pick(self.left_groups), self._pick(self.linkers), self._pick(self.cores)]
        if self.rng.random() < 0.35:
            parts.append(self._pick([link for link in self.linkers if link]))
            parts.append(self._shift_ring_digits(self._pick(self.cores), 2))
        parts.append(self._pick(self.right_groups))
        return "".join(parts)

    def generate_corpus(self, n: int, max_attempts: Optional[int] = None) -> List[str]:
        """``n`` molecules with distinct canonical forms (fewer if exhausted)."""
        seen, corpus = set(), []
        attempts = max_attempts or 50 * n
        for _ in range(attempts):
            if len(corpus) >= n:
                break
            smiles = self.generate_smiles()
            key = canonical_form(parse_smiles(smiles))
            if key in seen:
                continue
            seen.add(key)
            corpus.append(smiles)
        if len(corpus) < n:
            logger.warning("generator produced %d of %d requested molecules", len(corpus), n)
        return corpus

    @staticmethod
    def nitrogen_rule(mol: Molecule) -> int:
        return int(any(atom.element == "N" for atom in mol.atoms))

    @staticmethod
    def size_descriptor(mol: Molecule) -> float:
        hetero = sum(atom.element not in ("C", "H") for atom in mol.atoms)
        aromatic = sum(atom.aromatic for atom in mol.atoms)
        return 0.25 * mol.n_atoms - 0.5 * hetero + 0.1 * aromatic

    def generate_labeled(self, n: int, noise: float = 0.05) -> pd.DataFrame:
        """Toy task: ``active`` (nitrogen present, flipped with prob. ``noise``)
        and ``score`` (linear structural descriptor plus Gaussian noise)."""
        rows = []
        for smiles in self.generate_corpus(n):
            mol = parse_smiles(smiles)
            active = self.nitrogen_rule(mol)
            if self.rng.random() < noise:
                active = 1 - active
            score = self.size_descriptor(mol) + float(self.rng.normal(0.0, 0.1))
            rows.append({"smiles": smiles, "active": active, "score": round(score, 4)})
        return pd.DataFrame(rows, columns=["smiles", "active", "score"])

    def write_corpus(self, path: Union[str, Path], n: int = 500) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"smiles": self.generate_corpus(n)}).to_csv(path, index=False)
        return path

    def write_task(self, path: Union[str, Path], n: int = 400, noise: float = 0.05) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.generate_labeled(n, noise).to_csv(path, index=False)
        return path
