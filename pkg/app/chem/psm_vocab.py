"""
Principal-subgraph vocabulary mining and greedy fragment decomposition.

Mining starts with every atom as its own fragment and repeatedly merges the
most frequent adjacent fragment pair across the corpus. Occurrences of a
candidate key are counted non-overlapping, scanning pairs in ascending atom
index, and the winning key is merged with the same scan.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.chem.smiles import Molecule, canonical_form
from app.exceptions import EmptyCorpus, UnknownElement, VocabFormatError

logger = logging.getLogger(__name__)

VOCAB_HEADER = "#psm-vocab v1"

Fragment = FrozenSet[int]


@dataclass(frozen=True)
class VocabEntry:
    key: str
    frequency: int
    atom_count: int


@dataclass
class FragmentVocab:
    entries: List[VocabEntry]
    target_size: int
    _index: Dict[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        self._index = {entry.key: i for i, entry in enumerate(self.entries)}
        if len(self._index) != len(self.entries):
            raise VocabFormatError("vocabulary keys must be unique")

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, key: object) -> bool:
        return key in self._index

    def frequency(self, key: str) -> int:
        return self.entries[self._index[key]].frequency

    def keys(self) -> List[str]:
        return [entry.key for entry in self.entries]

    def to_text(self) -> str:
        lines = [f"{VOCAB_HEADER} size={len(self.entries)}"]
        lines.extend(f"{e.key}\t{e.frequency}\t{e.atom_count}" for e in self.entries)
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Decomposition:
    fragments: Tuple[Tuple[int, ...], ...]
    frag_of_atom: Tuple[int, ...]

    @property
    def n_fragments(self) -> int:
        return len(self.fragments)


class _KeyCache:
    """Canonical keys of induced subgraphs, memoized per molecule."""

    def __init__(self, mol: Molecule) -> None:
        self.mol = mol
        self._keys: Dict[Fragment, str] = {}

    def key(self, atoms: Fragment) -> str:
        cached = self._keys.get(atoms)
        if cached is None:
            cached = canonical_form(self.mol.subgraph(atoms))
            self._keys[atoms] = cached
        return cached


def atom_key(mol: Molecule, atom: int) -> str:
    return canonical_form(mol.subgraph([atom]))


def _adjacent_pairs(mol: Molecule, frag_of_atom: Sequence[int]) -> List[Tuple[int, int]]:
    """Adjacent fragment id pairs, ordered by their lowest bridging atom index."""
    first_seen: Dict[Tuple[int, int], Tuple[int, int]] = {}
    for bond in mol.bonds:
        fa, fb = frag_of_atom[bond.begin], frag_of_atom[bond.end]
        if fa == fb:
            continue
        pair = (min(fa, fb), max(fa, fb))
        rank = (min(bond.begin, bond.end), max(bond.begin, bond.end))
        if pair not in first_seen or rank < first_seen[pair]:
            first_seen[pair] = rank
    return sorted(first_seen, key=lambda p: first_seen[p])


class _MoleculeState:
    """Fragment partition of one molecule during mining."""

    def __init__(self, mol: Molecule) -> None:
        self.mol = mol
        self.cache = _KeyCache(mol)
        self.frag_of_atom = list(range(mol.n_atoms))
        self.fragments: Dict[int, Fragment] = {i: frozenset([i]) for i in range(mol.n_atoms)}
        self.counts: Counter = Counter()
        self.recount()

    def _merged_key(self, fa: int, fb: int) -> str:
        return self.cache.key(self.fragments[fa] | self.fragments[fb])

    def occurrences(self) -> Dict[str, List[Tuple[int, int]]]:
        """Non-overlapping occurrences per merged key, first-come by atom index."""
        by_key: Dict[str, List[Tuple[int, int]]] = {}
        used: Dict[str, set] = {}
        for fa, fb in _adjacent_pairs(self.mol, self.frag_of_atom):
            key = self._merged_key(fa, fb)
            taken = used.setdefault(key, set())
            if fa in taken or fb in taken:
                continue
            taken.update((fa, fb))
            by_key.setdefault(key, []).append((fa, fb))
        return by_key

    def recount(self) -> None:
        self.counts = Counter({k: len(v) for k, v in self.occurrences().items()})

    def merge(self, key: str) -> int:
        merged = 0
        for fa, fb in self.occurrences().get(key, []):
            keep, drop = min(fa, fb), max(fa, fb)
            atoms = self.fragments[keep] | self.fragments.pop(drop)
            self.fragments[keep] = atoms
            for a in atoms:
                self.frag_of_atom[a] = keep
            merged += 1
        if merged:
            self.recount()
        return merged


def build_vocab(
    corpus: Sequence[Molecule],
    target_size: int,
    seed: int = 0,
    sample_size: Optional[int] = None,
) -> FragmentVocab:
    """Mine a principal-subgraph vocabulary of at most ``target_size`` keys.

    ``seed`` only matters when ``sample_size`` subsamples the corpus; the
    merge loop itself is deterministic with lexicographic tie-breaking.
    """
    if not corpus:
        raise EmptyCorpus()
    molecules = list(corpus)
    if sample_size is not None and sample_size < len(molecules):
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(molecules), size=sample_size, replace=False))
        molecules = [molecules[i] for i in chosen]

    atom_counts: Counter = Counter()
    for mol in molecules:
        for atom in mol.atoms:
            atom_counts[atom_key(mol, atom.index)] += 1
    entries = [VocabEntry(key, atom_counts[key], 1) for key in sorted(atom_counts)]
    if target_size < len(entries):
        raise VocabFormatError(
            f"target size {target_size} is below the {len(entries)} distinct atom keys"
        )

    states = [_MoleculeState(mol) for mol in molecules]
    totals: Counter = Counter()
    for state in states:
        totals.update(state.counts)
    known = {entry.key for entry in entries}

    while len(entries) < target_size:
        candidates = [(count, key) for key, count in totals.items() if key not in known]
        if not candidates:
            break
        best_count = max(count for count, _ in candidates)
        if best_count < 2:
            break
        best_key = min(key for count, key in candidates if count == best_count)
        atom_count = 0
        for state in states:
            if best_key not in state.counts:
                continue
            before = state.counts
            occurrences = state.occurrences()[best_key]
            if not atom_count:
                fa, fb = occurrences[0]
                atom_count = len(state.fragments[fa] | state.fragments[fb])
            state.merge(best_key)
            totals.subtract(before)
            totals.update(state.counts)
        totals = +totals
        entries.append(VocabEntry(best_key, best_count, atom_count))
        known.add(best_key)
        logger.debug("vocab step %d: %s x%d", len(entries), best_key, best_count)

    logger.info("mined %d vocabulary entries from %d molecules", len(entries), len(molecules))
    return FragmentVocab(entries=entries, target_size=target_size)


def decompose(mol: Molecule, vocab: FragmentVocab, strict: bool = True) -> Decomposition:
    """Greedy merge of adjacent fragments whose merged key is in ``vocab``.

    The pair with the highest vocabulary frequency merges first; ties go to
    the lexicographically smaller key, then the lowest atom index. With
    ``strict=False`` atoms whose key is missing stay single-atom fragments.
    """
    cache = _KeyCache(mol)
    for atom in mol.atoms:
        key = cache.key(frozenset([atom.index]))
        if key not in vocab:
            if strict:
                raise UnknownElement(key)
            logger.warning("atom key %s missing from vocabulary", key)

    frag_of_atom = list(range(mol.n_atoms))
    fragments: Dict[int, Fragment] = {i: frozenset([i]) for i in range(mol.n_atoms)}
    while True:
        best: Optional[Tuple[int, str, int, int, int]] = None
        for fa, fb in _adjacent_pairs(mol, frag_of_atom):
            atoms = fragments[fa] | fragments[fb]
            key = cache.key(atoms)
            if key not in vocab:
                continue
            rank = (-vocab.frequency(key), key, min(atoms), fa, fb)
            if best is None or rank < best:
                best = rank
        if best is None:
            break
        _, _, _, fa, fb = best
        keep, drop = min(fa, fb), max(fa, fb)
        fragments[keep] = fragments[keep] | fragments.pop(drop)
        for a in fragments[keep]:
            frag_of_atom[a] = keep

    ordered = sorted(fragments.values(), key=min)
    remap = {min(atoms): k for k, atoms in enumerate(ordered)}
    frag_ids = tuple(remap[min(fragments[frag_of_atom[a]])] for a in range(mol.n_atoms))
    return Decomposition(
        fragments=tuple(tuple(sorted(atoms)) for atoms in ordered),
        frag_of_atom=frag_ids,
    )


def save_vocab(vocab: FragmentVocab, path: Union[str, Path]) -> None:
    Path(path).write_text(vocab.to_text(), encoding="utf-8")


def load_vocab(path: Union[str, Path]) -> FragmentVocab:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(VOCAB_HEADER):
        raise VocabFormatError(f"{path}: missing '{VOCAB_HEADER}' header")
    try:
        declared = int(lines[0].split("size=")[1])
    except (IndexError, ValueError) as exc:
        raise VocabFormatError(f"{path}: malformed header {lines[0]!r}") from exc
    entries = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 3:
            raise VocabFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        entries.append(VocabEntry(parts[0], int(parts[1]), int(parts[2])))
    if declared != len(entries):
        raise VocabFormatError(f"{path}: header size {declared} != {len(entries)} entries")
    return FragmentVocab(entries=entries, target_size=len(entries))


def fragment_keys(mol: Molecule, decomposition: Decomposition) -> List[str]:
    cache = _KeyCache(mol)
    return [cache.key(frozenset(atoms)) for atoms in decomposition.fragments]


def vocab_from_keys(keys: Iterable[str]) -> FragmentVocab:
    """Vocabulary with unit frequencies; handy for hand-built decompositions."""
    from app.chem.smiles import parse_smiles

    entries = [
        VocabEntry(key, 1, parse_smiles(key).n_atoms) for key in dict.fromkeys(keys)
    ]
    return FragmentVocab(entries=entries, target_size=len(entries))
