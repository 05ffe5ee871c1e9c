"""
Compositional hierarchical graph (CHG) construction and batching.

Node blocks are laid out atoms, bonds, fragments, then the graph node. Edges
carry no features and are stored per edge set in local indices of the node
types they join:

    a   (atom, atom)       one per molecule bond
    b   (bond, bond)       bonds sharing an atom (line graph)
    f   (frag, frag)       fragments joined by at least one bond
    af  (atom, frag)       every atom to its fragment
    bf  (bond, frag)       bonds with both ends inside one fragment
    fg  (frag, graph)      every fragment to the graph node
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import networkx as nx
import numpy as np

from app.chem.elements import HALOGENS, atomic_mass
from app.chem.perception import HYBRIDIZATION_ORDER, Hybridization, PerceivedMolecule
from app.chem.psm_vocab import Decomposition
from app.chem.smiles import BondOrder, Chirality, Direction, Molecule
from app.exceptions import PartitionMismatch
from app.schemas import GraphVariant

logger = logging.getLogger(__name__)

N_FEATURES = 15
NODE_TYPES = ("atom", "bond", "frag", "graph")
EDGE_SETS = ("a", "b", "f", "af", "bf", "fg")
EDGE_ENDS: Dict[str, Tuple[str, str]] = {
    "a": ("atom", "atom"),
    "b": ("bond", "bond"),
    "f": ("frag", "frag"),
    "af": ("atom", "frag"),
    "bf": ("bond", "frag"),
    "fg": ("frag", "graph"),
}

STEREO_ORDER = ("none", "any", "Z", "E", "cis", "trans", "other")
_CHIRALITY_CODE = {Chirality.NONE: 0, Chirality.ANTICLOCKWISE: 1, Chirality.CLOCKWISE: 2}
_DIRECTION_CODE = {Direction.NONE: 0, Direction.UP: 1, Direction.DOWN: 2}
_BOND_TYPE_SLOT = {BondOrder.SINGLE: 1, BondOrder.DOUBLE: 2, BondOrder.TRIPLE: 3}


def _empty_edges() -> np.ndarray:
    return np.zeros((0, 2), dtype=np.int64)


@dataclass
class CHGraph:
    n_atoms: int
    n_bonds: int
    n_frags: int
    n_graph: int
    x: Dict[str, np.ndarray]
    edges: Dict[str, np.ndarray]
    frag_atom_members: Tuple[Tuple[int, ...], ...] = ()
    frag_bond_members: Tuple[Tuple[int, ...], ...] = ()
    bond_orders: Tuple[BondOrder, ...] = ()
    smiles: str = ""

    @property
    def counts(self) -> Dict[str, int]:
        return {
            "atom": self.n_atoms,
            "bond": self.n_bonds,
            "frag": self.n_frags,
            "graph": self.n_graph,
        }

    @property
    def offsets(self) -> Dict[str, int]:
        offsets, total = {}, 0
        for node_type in NODE_TYPES:
            offsets[node_type] = total
            total += self.counts[node_type]
        return offsets

    @property
    def n_nodes(self) -> int:
        return sum(self.counts.values())

    @property
    def n_edges(self) -> int:
        return sum(len(e) for e in self.edges.values())

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.x[t] for t in NODE_TYPES], axis=0)

    @property
    def node_types(self) -> List[str]:
        return [t for t in NODE_TYPES for _ in range(self.counts[t])]

    def edge_counts(self) -> Dict[str, int]:
        return {name: len(self.edges[name]) for name in EDGE_SETS}

    def global_edges(self) -> np.ndarray:
        """All edges as a [E, 2] array of global node indices."""
        offsets = self.offsets
        blocks = []
        for name in EDGE_SETS:
            pairs = self.edges[name]
            if len(pairs):
                src_type, dst_type = EDGE_ENDS[name]
                blocks.append(pairs + np.array([offsets[src_type], offsets[dst_type]]))
        return np.concatenate(blocks, axis=0) if blocks else _empty_edges()


def build_bond_graph(m: Molecule) -> List[Tuple[int, int]]:
    """Edges of the line graph, as sorted pairs of bond indices."""
    graph = m.to_networkx()
    line = nx.line_graph(graph)
    edges = set()
    for e1, e2 in line.edges():
        b1 = graph.edges[e1]["index"]
        b2 = graph.edges[e2]["index"]
        edges.add((min(b1, b2), max(b1, b2)))
    return sorted(edges)


def atom_features(pm: PerceivedMolecule, atom_index: int) -> np.ndarray:
    atom = pm.base.atoms[atom_index]
    x = np.zeros(N_FEATURES)
    x[0] = atom.atomic_number
    x[1] = pm.degree[atom_index]
    x[2] = atom.formal_charge
    x[3] = pm.radical_electrons[atom_index]
    x[4 + HYBRIDIZATION_ORDER.index(pm.hybridization[atom_index])] = 1.0
    x[11] = atomic_mass(atom.element) / 100.0
    x[12] = pm.total_h(atom_index)
    x[13] = 0.0 if atom.chirality is Chirality.NONE else 1.0
    x[14] = _CHIRALITY_CODE[atom.chirality]
    return x


def _side_sign(mol: Molecule, atom: int, double_bond: int) -> int:
    """+1/-1 for the first direction-marked single bond at ``atom``, 0 if none.

    A mark written before the double-bond atom (``F/C=``) points the other way
    from the same mark written after it (``=C/F``).
    """
    for _, b in mol.adjacency[atom]:
        bond = mol.bonds[b]
        if b == double_bond or bond.direction is Direction.NONE:
            continue
        sign = 1 if bond.direction is Direction.UP else -1
        return sign if bond.begin == atom else -sign
    return 0


def bond_stereo(mol: Molecule, bond_index: int) -> str:
    bond = mol.bonds[bond_index]
    if bond.order is not BondOrder.DOUBLE:
        return "none"
    left = _side_sign(mol, bond.begin, bond_index)
    right = _side_sign(mol, bond.end, bond_index)
    if not left or not right:
        return "none"
    return "Z" if left == right else "E"


def bond_features(pm: PerceivedMolecule, bond_index: int) -> np.ndarray:
    mol = pm.base
    bond = mol.bonds[bond_index]
    a, b = mol.atoms[bond.begin], mol.atoms[bond.end]
    x = np.zeros(N_FEATURES)
    x[0] = 1.0
    if bond.order in _BOND_TYPE_SLOT:
        x[_BOND_TYPE_SLOT[bond.order]] = 1.0
    x[4] = float(a.element != b.element)
    x[5] = _DIRECTION_CODE[bond.direction]
    lo, hi = sorted((bond.begin, bond.end))
    x[6] = mol.atoms[hi].formal_charge - mol.atoms[lo].formal_charge
    planar = (Hybridization.SP, Hybridization.SP2)
    x[7] = float(
        bond.order is BondOrder.AROMATIC
        or (
            bond.order is BondOrder.SINGLE
            and pm.hybridization[bond.begin] in planar
            and pm.hybridization[bond.end] in planar
        )
    )
    x[8 + STEREO_ORDER.index(bond_stereo(mol, bond_index))] = 1.0
    return x


def _intra_bonds(mol: Molecule, members: Sequence[int]) -> List[int]:
    inside = set(members)
    return [b.index for b in mol.bonds if b.begin in inside and b.end in inside]


def fragment_features(pm: PerceivedMolecule, atoms: Sequence[int]) -> np.ndarray:
    mol = pm.base
    members = sorted(atoms)
    bonds = [mol.bonds[b] for b in _intra_bonds(mol, members)]
    elements = [mol.atoms[a].element for a in members]
    inner_degree = {a: 0 for a in members}
    for bond in bonds:
        inner_degree[bond.begin] += 1
        inner_degree[bond.end] += 1
    n = len(members)
    x = np.zeros(N_FEATURES)
    x[0] = n
    x[1] = len(bonds)
    x[2] = sum(e not in ("C", "H") for e in elements)
    x[3] = elements.count("C")
    x[4] = elements.count("N")
    x[5] = elements.count("O")
    x[6] = sum(e in HALOGENS for e in elements)
    x[7] = sum(b.order is BondOrder.SINGLE for b in bonds)
    x[8] = sum(b.order is BondOrder.DOUBLE for b in bonds)
    x[9] = sum(b.order is BondOrder.TRIPLE for b in bonds)
    x[10] = sum(atomic_mass(e) for e in elements) / n / 100.0 if n else 0.0
    x[11] = sum(inner_degree.values()) / n if n else 0.0
    x[12] = sum(mol.atoms[a].formal_charge for a in members)
    x[13] = sum(pm.total_h(a) for a in members)
    induced = mol.subgraph(members)
    x[14] = sum(induced.bond_order_sum(i) for i in range(induced.n_atoms)) + x[13]
    return x


def graph_features(
    frag_atom_counts: Sequence[int],
    frag_bond_counts: Sequence[int],
    n_atoms: int,
    n_bonds: int,
) -> np.ndarray:
    """Fragment-size statistics only; ring statistics would leak targets."""
    sizes = np.asarray(frag_atom_counts, dtype=np.float64)
    inner = np.asarray(frag_bond_counts, dtype=np.float64)
    x = np.zeros(N_FEATURES)
    x[0], x[1], x[2] = n_atoms, n_bonds, len(sizes)
    if len(sizes):
        x[3], x[4], x[5] = sizes.mean(), sizes.max(), sizes.min()
        x[6], x[7], x[8] = inner.mean(), inner.max(), inner.min()
        x[9] = np.sum((sizes >= 2) & (sizes <= 3))
        x[10] = np.sum((sizes >= 4) & (sizes <= 8))
        x[11] = np.sum(sizes >= 9)
        x[12] = np.sum(sizes == 1)
        x[13], x[14] = sizes.var(), inner.var()
    return x


def _check_partition(pm: PerceivedMolecule, d: Decomposition) -> None:
    n = pm.n_atoms
    if len(d.frag_of_atom) != n:
        raise PartitionMismatch(
            f"decomposition covers {len(d.frag_of_atom)} atoms, molecule has {n}"
        )
    seen = sorted(a for frag in d.fragments for a in frag)
    if seen != list(range(n)):
        raise PartitionMismatch("fragments do not partition the atom set")
    for k, frag in enumerate(d.fragments):
        if any(d.frag_of_atom[a] != k for a in frag):
            raise PartitionMismatch(f"frag_of_atom disagrees with fragment {k}")


def _as_int(values: Sequence[int]) -> np.ndarray:
    return np.asarray(values, dtype=np.int64)


def _pairs(rows: Sequence[Tuple[int, int]]) -> np.ndarray:
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def build_chg(pm: PerceivedMolecule, d: Decomposition) -> CHGraph:
    _check_partition(pm, d)
    mol = pm.base

    frag_bonds: List[List[int]] = [[] for _ in d.fragments]
    bf_rows, f_rows = [], set()
    for bond in mol.bonds:
        fa, fb = d.frag_of_atom[bond.begin], d.frag_of_atom[bond.end]
        if fa == fb:
            frag_bonds[fa].append(bond.index)
            bf_rows.append((bond.index, fa))
        else:
            f_rows.add((min(fa, fb), max(fa, fb)))

    frag_x = [fragment_features(pm, atoms) for atoms in d.fragments]
    graph_x = graph_features(
        [len(atoms) for atoms in d.fragments],
        [len(bonds) for bonds in frag_bonds],
        mol.n_atoms,
        mol.n_bonds,
    )
    x = {
        "atom": np.stack([atom_features(pm, i) for i in range(mol.n_atoms)])
        if mol.n_atoms
        else np.zeros((0, N_FEATURES)),
        "bond": np.stack([bond_features(pm, b) for b in range(mol.n_bonds)])
        if mol.n_bonds
        else np.zeros((0, N_FEATURES)),
        "frag": np.stack(frag_x) if frag_x else np.zeros((0, N_FEATURES)),
        "graph": graph_x[None, :],
    }
    edges = {
        "a": _pairs([(b.begin, b.end) for b in mol.bonds]),
        "b": _pairs(build_bond_graph(mol)),
        "f": _pairs(sorted(f_rows)),
        "af": _pairs([(a, d.frag_of_atom[a]) for a in range(mol.n_atoms)]),
        "bf": _pairs(bf_rows),
        "fg": _pairs([(k, 0) for k in range(len(d.fragments))]),
    }
    return CHGraph(
        n_atoms=mol.n_atoms,
        n_bonds=mol.n_bonds,
        n_frags=len(d.fragments),
        n_graph=1,
        x=x,
        edges=edges,
        frag_atom_members=tuple(tuple(f) for f in d.fragments),
        frag_bond_members=tuple(tuple(b) for b in frag_bonds),
        bond_orders=tuple(b.order for b in mol.bonds),
        smiles=mol.source_smiles,
    )


def apply_graph_variant(chg: CHGraph, variant: GraphVariant) -> CHGraph:
    """Drop node types and edge sets for the atom-only and hierarchical variants."""
    variant = GraphVariant(variant)
    if variant is GraphVariant.FULL:
        return chg
    x = dict(chg.x)
    edges = dict(chg.edges)
    x["bond"] = np.zeros((0, N_FEATURES))
    for name in ("b", "bf"):
        edges[name] = _empty_edges()
    if variant is GraphVariant.HIERARCHICAL:
        return replace(
            chg,
            n_bonds=0,
            x=x,
            edges=edges,
            frag_bond_members=tuple(() for _ in chg.frag_bond_members),
        )
    x["frag"] = np.zeros((0, N_FEATURES))
    x["graph"] = np.zeros((0, N_FEATURES))
    for name in ("f", "af", "fg"):
        edges[name] = _empty_edges()
    return replace(
        chg,
        n_bonds=0,
        n_frags=0,
        n_graph=0,
        x=x,
        edges=edges,
        frag_atom_members=(),
        frag_bond_members=(),
    )


def dump_chg(chg: CHGraph) -> str:
    lines = [
        f"#chg v1 atoms={chg.n_atoms} bonds={chg.n_bonds} "
        f"frags={chg.n_frags} nodes={chg.n_nodes} edges={chg.n_edges}"
    ]
    for index, (node_type, row) in enumerate(zip(chg.node_types, chg.features)):
        feats = " ".join(f"{v:.6g}" for v in row)
        lines.append(f"N {index} {node_type} {feats}")
    offsets = chg.offsets
    for name in EDGE_SETS:
        src_type, dst_type = EDGE_ENDS[name]
        for u, v in chg.edges[name]:
            lines.append(f"E {name} {u + offsets[src_type]} {v + offsets[dst_type]}")
    return "\n".join(lines) + "\n"


@dataclass
class GraphBatch:
    """Disjoint union of CHGraphs; per-type rows carry their molecule id."""

    graphs: List[CHGraph]
    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    rows: Dict[str, np.ndarray]
    owner: Dict[str, np.ndarray]
    frag_atom_rows: np.ndarray
    frag_atom_ids: np.ndarray
    frag_bond_rows: np.ndarray
    frag_bond_ids: np.ndarray
    frag_atom_counts: np.ndarray
    frag_bond_counts: np.ndarray
    graph_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_graphs(self) -> int:
        return len(self.graphs)

    @property
    def n_nodes(self) -> int:
        return len(self.features)

    @property
    def n_frags(self) -> int:
        return len(self.rows["frag"])


def collate(graphs: Sequence[CHGraph]) -> GraphBatch:
    """Concatenate graphs into one batch; fragment ids are batch-global."""
    features, edge_blocks = [], []
    rows: Dict[str, List[np.ndarray]] = {t: [] for t in NODE_TYPES}
    owner: Dict[str, List[np.ndarray]] = {t: [] for t in NODE_TYPES}
    fa_rows, fa_ids, fb_rows, fb_ids = [], [], [], []
    fa_counts, fb_counts = [], []
    base = frag_base = 0
    for g_id, chg in enumerate(graphs):
        offsets = chg.offsets
        features.append(chg.features)
        edge_blocks.append(chg.global_edges() + base)
        for node_type in NODE_TYPES:
            count = chg.counts[node_type]
            rows[node_type].append(base + offsets[node_type] + np.arange(count))
            owner[node_type].append(np.full(count, g_id, dtype=np.int64))
        atom_base = base + offsets["atom"]
        bond_base = base + offsets["bond"]
        for k in range(chg.n_frags):
            atoms = chg.frag_atom_members[k]
            bonds = chg.frag_bond_members[k] if chg.n_bonds else ()
            fa_rows.extend(atom_base + a for a in atoms)
            fa_ids.extend([frag_base + k] * len(atoms))
            fb_rows.extend(bond_base + b for b in bonds)
            fb_ids.extend([frag_base + k] * len(bonds))
            fa_counts.append(len(atoms))
            fb_counts.append(len(bonds))
        base += chg.n_nodes
        frag_base += chg.n_frags

    edges = np.concatenate(edge_blocks, axis=0) if edge_blocks else _empty_edges()
    cat = {t: np.concatenate(rows[t]) if rows[t] else _as_int([]) for t in NODE_TYPES}
    own = {t: np.concatenate(owner[t]) if owner[t] else _as_int([]) for t in NODE_TYPES}
    return GraphBatch(
        graphs=list(graphs),
        features=np.concatenate(features, axis=0) if features else np.zeros((0, N_FEATURES)),
        src=edges[:, 0].astype(np.int64),
        dst=edges[:, 1].astype(np.int64),
        rows=cat,
        owner=own,
        frag_atom_rows=_as_int(fa_rows),
        frag_atom_ids=_as_int(fa_ids),
        frag_bond_rows=_as_int(fb_rows),
        frag_bond_ids=_as_int(fb_ids),
        frag_atom_counts=_as_int(fa_counts),
        frag_bond_counts=_as_int(fb_counts),
        graph_rows=cat["graph"],
    )
