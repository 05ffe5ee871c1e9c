"""Self-supervised targets: fragment functional groups, path fingerprint, scaffold classes."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Tuple

import numpy as np

from app.chem.functional_groups import FunctionalGroupSet, embeds, fragment_graph
from app.chem.perception import PerceivedMolecule, ScaffoldTargets, scaffold_descriptors
from app.chem.psm_vocab import Decomposition
from app.chem.smiles import BondOrder
from app.exceptions import InvalidFingerprintSize

logger = logging.getLogger(__name__)

MAX_PATH_BONDS = 7
MAX_RING_CLASS = 8

_ORDER_TOKEN = {
    BondOrder.SINGLE: "-",
    BondOrder.DOUBLE: "=",
    BondOrder.TRIPLE: "#",
    BondOrder.AROMATIC: ":",
}


@dataclass(frozen=True)
class PretrainTargets:
    frag_fg: np.ndarray  # [n_frags, C] uint8
    topo_fp: np.ndarray  # [D] uint8
    scaffold: Tuple[int, int, int, int, int]

    @property
    def topo_hex(self) -> str:
        return np.packbits(self.topo_fp).tobytes().hex()


def match_groups(
    pm: PerceivedMolecule, atoms: Iterable[int], fgs: FunctionalGroupSet
) -> np.ndarray:
    """Bit c is set when pattern c embeds in the fragment's induced subgraph."""
    graph = fragment_graph(pm, atoms)
    return np.array([embeds(p, graph) for p in fgs.patterns], dtype=np.uint8)


def check_fingerprint_size(D: int) -> None:
    if D < 64 or D > 4096 or D & (D - 1):
        raise InvalidFingerprintSize(D)


def _atom_token(pm: PerceivedMolecule, atom: int) -> str:
    a = pm.base.atoms[atom]
    return a.element.lower() if a.aromatic else a.element


def _simple_paths(
    pm: PerceivedMolecule, max_bonds: int
) -> Iterator[Tuple[List[int], List[int]]]:
    """All simple paths of 1..max_bonds bonds, yielded from both ends."""
    mol = pm.base
    stack: List[Tuple[List[int], List[int]]] = [([a], []) for a in range(mol.n_atoms)]
    while stack:
        atoms, bonds = stack.pop()
        if bonds:
            yield atoms, bonds
        if len(bonds) == max_bonds:
            continue
        for nbr, b in mol.adjacency[atoms[-1]]:
            if nbr not in atoms:
                stack.append((atoms + [nbr], bonds + [b]))


def _encode(pm: PerceivedMolecule, atoms: List[int], bonds: List[int]) -> str:
    parts = [_atom_token(pm, atoms[0])]
    for atom, bond in zip(atoms[1:], bonds):
        parts.append(_ORDER_TOKEN[pm.base.bonds[bond].order])
        parts.append(_atom_token(pm, atom))
    return " ".join(parts)


def path_hash(encoding: str) -> int:
    digest = hashlib.blake2b(encoding.encode("ascii"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def topo_fingerprint(pm: PerceivedMolecule, D: int) -> np.ndarray:
    """Hashed linear-path fingerprint; each path is keyed by the smaller of
    its two directional encodings so traversal direction does not matter."""
    check_fingerprint_size(D)
    bits = np.zeros(D, dtype=np.uint8)
    for atoms, bonds in _simple_paths(pm, MAX_PATH_BONDS):
        forward = _encode(pm, atoms, bonds)
        backward = _encode(pm, atoms[::-1], bonds[::-1])
        bits[path_hash(min(forward, backward)) % D] = 1
    return bits


def scaffold_targets(pm: PerceivedMolecule) -> ScaffoldTargets:
    s = scaffold_descriptors(pm)
    return ScaffoldTargets(
        ring_count=min(s.ring_count, MAX_RING_CLASS),
        aromatic_ring_count=min(s.aromatic_ring_count, MAX_RING_CLASS),
        fused=s.fused,
        heterocyclic=s.heterocyclic,
        bridged=s.bridged,
    )


def compute_targets(
    pm: PerceivedMolecule,
    decomposition: Decomposition,
    fgs: FunctionalGroupSet,
    D: int,
) -> PretrainTargets:
    if decomposition.fragments:
        frag_fg = np.stack(
            [match_groups(pm, atoms, fgs) for atoms in decomposition.fragments]
        )
    else:
        frag_fg = np.zeros((0, fgs.C), dtype=np.uint8)
    scaffold = scaffold_targets(pm)
    return PretrainTargets(
        frag_fg=frag_fg,
        topo_fp=topo_fingerprint(pm, D),
        scaffold=tuple(int(v) for v in scaffold.as_tuple()),  # type: ignore[arg-type]
    )
