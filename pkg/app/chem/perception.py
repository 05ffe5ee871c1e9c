"""Derived chemistry: hydrogens, hybridization, rings, scaffold descriptors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Set, Tuple

import networkx as nx

from app.chem.elements import allowed_valences
from app.chem.smiles import BondOrder, Molecule
from app.exceptions import ValenceViolation

logger = logging.getLogger(__name__)

MAX_RING_SIZE = 12


class Hybridization(str, Enum):
    S = "S"
    SP = "SP"
    SP2 = "SP2"
    SP3 = "SP3"
    SP3D = "SP3D"
    SP3D2 = "SP3D2"
    OTHER = "OTHER"


HYBRIDIZATION_ORDER: Tuple[Hybridization, ...] = tuple(Hybridization)


@dataclass(frozen=True)
class RingInfo:
    rings: Tuple[Tuple[int, ...], ...]
    bond_rings: Tuple[Tuple[int, ...], ...]
    atom_ring_count: Tuple[int, ...]
    bond_ring_count: Tuple[int, ...]
    ring_count: int
    ring_too_large: bool = False

    def is_ring_atom(self, atom: int) -> bool:
        return self.atom_ring_count[atom] > 0


@dataclass(frozen=True)
class ScaffoldTargets:
    ring_count: int
    aromatic_ring_count: int
    fused: bool
    heterocyclic: bool
    bridged: bool

    def as_tuple(self) -> Tuple[int, int, bool, bool, bool]:
        return (
            self.ring_count,
            self.aromatic_ring_count,
            self.fused,
            self.heterocyclic,
            self.bridged,
        )


@dataclass(frozen=True)
class PerceivedMolecule:
    base: Molecule
    implicit_h: Tuple[int, ...]
    degree: Tuple[int, ...]
    hybridization: Tuple[Hybridization, ...]
    radical_electrons: Tuple[int, ...]
    rings: RingInfo

    @property
    def n_atoms(self) -> int:
        return self.base.n_atoms

    def total_h(self, atom: int) -> int:
        return self.implicit_h[atom] + (self.base.atoms[atom].explicit_h or 0)


def _hybridization(mol: Molecule, atom: int, total_h: int) -> Hybridization:
    a = mol.atoms[atom]
    if a.element == "H":
        return Hybridization.S
    doubles = triples = 0
    aromatic = a.aromatic
    for _, b in mol.adjacency[atom]:
        order = mol.bonds[b].order
        if order is BondOrder.DOUBLE:
            doubles += 1
        elif order is BondOrder.TRIPLE:
            triples += 1
        elif order is BondOrder.AROMATIC:
            aromatic = True
    if triples or doubles >= 2:
        return Hybridization.SP
    if doubles == 1 or aromatic:
        return Hybridization.SP2
    steric = mol.degree(atom) + total_h
    if not allowed_valences(a.element, a.formal_charge):
        return Hybridization.S if steric == 0 else Hybridization.OTHER
    if steric == 5:
        return Hybridization.SP3D
    if steric == 6:
        return Hybridization.SP3D2
    if steric > 6:
        return Hybridization.OTHER
    return Hybridization.SP3


def _radicals(mol: Molecule, atom: int) -> int:
    a = mol.atoms[atom]
    if not a.bracket or a.aromatic:
        return 0
    used = mol.bond_order_sum(atom) + (a.explicit_h or 0)
    for valence in allowed_valences(a.element, a.formal_charge):
        if valence >= used:
            return valence - used
    return 0


def perceive(mol: Molecule) -> PerceivedMolecule:
    """Compute hydrogens, degrees, hybridization, radicals and rings."""
    implicit: List[int] = []
    hybrid: List[Hybridization] = []
    radicals: List[int] = []
    for atom in mol.atoms:
        i = atom.index
        valences = allowed_valences(atom.element, atom.formal_charge)
        used = mol.bond_order_sum(i) + (atom.explicit_h or 0)
        if valences and used > max(valences):
            raise ValenceViolation(
                i, f"{atom.element} uses {used}, allowed {list(valences)}"
            )
        h = mol.implicit_hydrogens(i)
        implicit.append(h)
        hybrid.append(_hybridization(mol, i, h + (atom.explicit_h or 0)))
        radicals.append(_radicals(mol, i))
    return PerceivedMolecule(
        base=mol,
        implicit_h=tuple(implicit),
        degree=tuple(mol.degree(i) for i in range(mol.n_atoms)),
        hybridization=tuple(hybrid),
        radical_electrons=tuple(radicals),
        rings=find_rings(mol),
    )


def _normalize_cycle(cycle: List[int]) -> Tuple[int, ...]:
    start = cycle.index(min(cycle))
    rotated = cycle[start:] + cycle[:start]
    if len(rotated) > 2 and rotated[-1] < rotated[1]:
        rotated = [rotated[0]] + rotated[1:][::-1]
    return tuple(rotated)


def _cycle_bonds(mol: Molecule, cycle: Tuple[int, ...]) -> Tuple[int, ...]:
    bonds = []
    for k, a in enumerate(cycle):
        bond = mol.bond_between(a, cycle[(k + 1) % len(cycle)])
        assert bond is not None
        bonds.append(bond.index)
    return tuple(sorted(bonds))


def find_rings(mol: Molecule) -> RingInfo:
    """Smallest set of smallest rings (size <= 12).

    Candidates are the shortest cycle through every bond; independent ones are
    kept in (size, atoms) order by elimination over GF(2) bond-incidence masks.
    """
    graph = mol.to_networkx()
    cyclomatic = mol.n_bonds - mol.n_atoms + (mol.n_components if mol.n_atoms else 0)

    candidates: Dict[Tuple[int, ...], Tuple[int, ...]] = {}
    if cyclomatic > 0:
        for bond in mol.bonds:
            view = nx.restricted_view(graph, [], [(bond.begin, bond.end)])
            try:
                path = nx.shortest_path(view, bond.begin, bond.end)
            except nx.NetworkXNoPath:
                continue
            if len(path) <= MAX_RING_SIZE:
                cycle = _normalize_cycle(path)
                candidates.setdefault(_cycle_bonds(mol, cycle), cycle)

    selected = _independent_cycles(candidates, cyclomatic)
    if len(selected) < cyclomatic:
        for cycle_nodes in nx.cycle_basis(graph):
            if len(cycle_nodes) <= MAX_RING_SIZE:
                cycle = _normalize_cycle(list(cycle_nodes))
                candidates.setdefault(_cycle_bonds(mol, cycle), cycle)
        selected = _independent_cycles(candidates, cyclomatic)

    too_large = len(selected) < cyclomatic
    if too_large:
        logger.warning(
            "ring larger than %d atoms in %s; ring count falls back to %d",
            MAX_RING_SIZE,
            mol.source_smiles or "<molecule>",
            cyclomatic,
        )

    rings = tuple(cycle for _, cycle in selected)
    bond_rings = tuple(bonds for bonds, _ in selected)
    atom_count = [0] * mol.n_atoms
    bond_count = [0] * mol.n_bonds
    for cycle, bonds in zip(rings, bond_rings):
        for a in cycle:
            atom_count[a] += 1
        for b in bonds:
            bond_count[b] += 1
    return RingInfo(
        rings=rings,
        bond_rings=bond_rings,
        atom_ring_count=tuple(atom_count),
        bond_ring_count=tuple(bond_count),
        ring_count=max(cyclomatic, 0),
        ring_too_large=too_large,
    )


def _independent_cycles(
    candidates: Dict[Tuple[int, ...], Tuple[int, ...]], limit: int
) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
    ordered = sorted(candidates.items(), key=lambda item: (len(item[1]), item[1]))
    basis: Dict[int, int] = {}  # pivot bit -> reduced mask
    selected = []
    for bonds, cycle in ordered:
        if len(selected) >= limit:
            break
        mask = 0
        for b in bonds:
            mask |= 1 << b
        while mask:
            pivot = mask.bit_length() - 1
            if pivot not in basis:
                basis[pivot] = mask
                selected.append((bonds, cycle))
                break
            mask ^= basis[pivot]
    return sorted(selected, key=lambda item: (len(item[1]), item[1]))


def scaffold_descriptors(pm: PerceivedMolecule) -> ScaffoldTargets:
    """(ring count, aromatic ring count, fused, heterocyclic, bridged).

    Pinned definitions: a ring is aromatic when every ring bond is aromatic;
    two rings are fused when they share exactly one bond; they are bridged
    when they share three or more atoms, or two atoms that are not bonded.
    """
    mol = pm.base
    rings = pm.rings
    aromatic = sum(
        all(mol.bonds[b].order is BondOrder.AROMATIC for b in bonds)
        for bonds in rings.bond_rings
    )
    heterocyclic = any(
        any(mol.atoms[a].element != "C" for a in cycle) for cycle in rings.rings
    )
    fused = bridged = False
    atom_sets: List[FrozenSet[int]] = [frozenset(c) for c in rings.rings]
    bond_sets: List[Set[int]] = [set(b) for b in rings.bond_rings]
    for i in range(len(atom_sets)):
        for j in range(i + 1, len(atom_sets)):
            shared_atoms = atom_sets[i] & atom_sets[j]
            shared_bonds = bond_sets[i] & bond_sets[j]
            if len(shared_bonds) == 1:
                fused = True
            if len(shared_atoms) >= 3:
                bridged = True
            elif len(shared_atoms) == 2:
                a, b = tuple(shared_atoms)
                if mol.bond_between(a, b) is None:
                    bridged = True
    return ScaffoldTargets(
        ring_count=rings.ring_count,
        aromatic_ring_count=aromatic,
        fused=fused,
        heterocyclic=heterocyclic,
        bridged=bridged,
    )


def murcko_scaffold(mol: Molecule) -> Molecule:
    """Ring systems plus linkers: prune non-ring atoms of degree <= 1."""
    graph = mol.to_networkx()
    ring_atoms: Set[int] = set()
    bridges = set(map(frozenset, nx.bridges(graph))) if mol.n_bonds else set()
    for bond in mol.bonds:
        if bond.endpoints not in bridges:
            ring_atoms.update(bond.endpoints)

    changed = True
    while changed:
        changed = False
        for atom in sorted(graph.nodes):
            if atom not in ring_atoms and graph.degree(atom) <= 1:
                graph.remove_node(atom)
                changed = True
    return mol.subgraph(graph.nodes)
