"""
Functional-group pattern library and subgraph matching.

A pattern is a small SMILES graph (elements, aromatic flags, charges and bond
orders) plus optional per-atom constraints evaluated on the whole molecule:

    h=<lo>[-<hi>]   total hydrogen count
    d=<lo>[-<hi>]   heavy-atom degree
    el=A|B|...      alternative elements
    a=*             aromatic or aliphatic

Library files hold one pattern per line, ``name<TAB>smiles[<TAB>constraints]``
with constraints written as ``<atom>:<key>=<value>,...;<atom>:...``.

Default library (C = 16; ``R`` is any carbon, aromatic or not):

    hydroxyl          R-O(H1)           carbonyl     R=O
    carboxyl          C(=O)-O(H1)       ester        C(=O)-O-R
    ether             R-O-R             primary      R-N(H2)
    secondary amine   R-N(H1)-R         tertiary     R-N(H0)(-R)-R
    amide             C(=O)-N           nitro        [N+](=O)[O-]
    nitrile           C#N               halide       R-X (F Cl Br I)
    thiol             R-S(H1)           sulfonyl     S(=O)=O
    aldehyde          C(H1-2)=O         ketone       R-C(=O)-R
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import networkx as nx
from networkx.algorithms import isomorphism

from app.chem.perception import PerceivedMolecule
from app.chem.smiles import BondOrder, parse_smiles
from app.exceptions import ChgError, PatternError

logger = logging.getLogger(__name__)

MAX_PATTERN_ATOMS = 8


@dataclass(frozen=True)
class AtomConstraint:
    elements: Tuple[str, ...]
    aromatic: Optional[bool]
    charge: int = 0
    h_range: Optional[Tuple[int, int]] = None
    degree_range: Optional[Tuple[int, int]] = None

    def accepts(self, element: str, aromatic: bool, charge: int, h: int, degree: int) -> bool:
        if element not in self.elements or charge != self.charge:
            return False
        if self.aromatic is not None and aromatic != self.aromatic:
            return False
        if self.h_range and not self.h_range[0] <= h <= self.h_range[1]:
            return False
        if self.degree_range and not self.degree_range[0] <= degree <= self.degree_range[1]:
            return False
        return True


@dataclass(frozen=True)
class FunctionalGroup:
    name: str
    smiles: str
    constraints: str = ""
    graph: nx.Graph = field(default=None, compare=False, repr=False)  # type: ignore[assignment]

    @property
    def n_atoms(self) -> int:
        return self.graph.number_of_nodes()


@dataclass(frozen=True)
class FunctionalGroupSet:
    patterns: Tuple[FunctionalGroup, ...]

    @property
    def C(self) -> int:
        return len(self.patterns)

    @property
    def names(self) -> List[str]:
        return [p.name for p in self.patterns]

    def __len__(self) -> int:
        return len(self.patterns)


_DEFAULT_PATTERNS: Tuple[Tuple[str, str, str], ...] = (
    ("hydroxyl", "CO", "0:a=*;1:h=1"),
    ("carbonyl", "C=O", "0:a=*"),
    ("carboxyl", "C(=O)O", "2:h=1"),
    ("ester", "C(=O)OC", "3:a=*"),
    ("ether", "COC", "0:a=*;2:a=*"),
    ("primary_amine", "CN", "0:a=*;1:h=2"),
    ("secondary_amine", "CNC", "0:a=*;1:h=1;2:a=*"),
    ("tertiary_amine", "CN(C)C", "0:a=*;1:h=0;2:a=*;3:a=*"),
    ("amide", "C(=O)N", ""),
    ("nitro", "[N+](=O)[O-]", ""),
    ("nitrile", "C#N", ""),
    ("halide", "CF", "0:a=*;1:el=F|Cl|Br|I"),
    ("thiol", "CS", "0:a=*;1:h=1"),
    ("sulfonyl", "S(=O)=O", ""),
    ("aldehyde", "C=O", "0:h=1-2"),
    ("ketone", "CC(=O)C", "0:a=*;3:a=*"),
)

_RANGE = re.compile(r"^(\d+)(?:-(\d+))?$")


def _parse_range(text: str, where: str) -> Tuple[int, int]:
    match = _RANGE.match(text)
    if not match:
        raise PatternError(f"{where}: bad range {text!r}")
    lo = int(match.group(1))
    hi = int(match.group(2)) if match.group(2) else lo
    return lo, hi


def _parse_constraints(text: str, n_atoms: int, where: str) -> Dict[int, Dict[str, str]]:
    parsed: Dict[int, Dict[str, str]] = {}
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        head, _, body = chunk.partition(":")
        if not head.isdigit() or int(head) >= n_atoms:
            raise PatternError(f"{where}: bad atom reference {head!r}")
        items = parsed.setdefault(int(head), {})
        for item in filter(None, body.split(",")):
            key, _, value = item.partition("=")
            if key not in ("h", "d", "el", "a"):
                raise PatternError(f"{where}: unknown constraint {key!r}")
            items[key] = value
    return parsed


def compile_pattern(name: str, smiles: str, constraints: str = "") -> FunctionalGroup:
    """Turn a pattern SMILES plus constraint string into a matchable graph."""
    try:
        mol = parse_smiles(smiles, allow_dot=False)
    except ChgError as exc:
        raise PatternError(f"pattern {name!r}: {exc}") from exc
    if mol.n_atoms > MAX_PATTERN_ATOMS:
        raise PatternError(f"pattern {name!r} has more than {MAX_PATTERN_ATOMS} atoms")
    extra = _parse_constraints(constraints, mol.n_atoms, f"pattern {name!r}")

    graph = nx.Graph()
    for atom in mol.atoms:
        items = extra.get(atom.index, {})
        elements = tuple(items["el"].split("|")) if "el" in items else (atom.element,)
        aromatic: Optional[bool] = None if items.get("a") == "*" else atom.aromatic
        graph.add_node(
            atom.index,
            constraint=AtomConstraint(
                elements=elements,
                aromatic=aromatic,
                charge=atom.formal_charge,
                h_range=_parse_range(items["h"], name) if "h" in items else None,
                degree_range=_parse_range(items["d"], name) if "d" in items else None,
            ),
        )
    for bond in mol.bonds:
        graph.add_edge(bond.begin, bond.end, order=bond.order)
    return FunctionalGroup(name=name, smiles=smiles, constraints=constraints, graph=graph)


def _make_set(patterns: Iterable[FunctionalGroup]) -> FunctionalGroupSet:
    patterns = tuple(patterns)
    names = [p.name for p in patterns]
    if len(set(names)) != len(names):
        raise PatternError("functional-group names must be unique")
    return FunctionalGroupSet(patterns=patterns)


def default_library() -> FunctionalGroupSet:
    return _make_set(compile_pattern(*spec) for spec in _DEFAULT_PATTERNS)


def load_library(path: Union[str, Path]) -> FunctionalGroupSet:
    patterns = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) not in (2, 3):
            raise PatternError(f"{path}:{lineno}: expected name<TAB>smiles[<TAB>constraints]")
        patterns.append(compile_pattern(*(p.strip() for p in parts)))
    logger.info("loaded %d functional-group patterns from %s", len(patterns), path)
    return _make_set(patterns)


def fragment_graph(pm: PerceivedMolecule, atoms: Iterable[int]) -> nx.Graph:
    """Induced heavy-atom graph annotated with whole-molecule perception."""
    mol = pm.base
    members = set(atoms)
    graph = nx.Graph()
    for i in sorted(members):
        atom = mol.atoms[i]
        graph.add_node(
            i,
            element=atom.element,
            aromatic=atom.aromatic,
            charge=atom.formal_charge,
            h=pm.total_h(i),
            degree=pm.degree[i],
        )
    for bond in mol.bonds:
        if bond.begin in members and bond.end in members:
            graph.add_edge(bond.begin, bond.end, order=bond.order)
    return graph


def _node_match(target: dict, pattern: dict) -> bool:
    return pattern["constraint"].accepts(
        target["element"], target["aromatic"], target["charge"], target["h"], target["degree"]
    )


def _edge_match(target: dict, pattern: dict) -> bool:
    order: BondOrder = pattern["order"]
    return target["order"] is order


def embeds(pattern: FunctionalGroup, target: nx.Graph) -> bool:
    if pattern.n_atoms > target.number_of_nodes():
        return False
    matcher = isomorphism.GraphMatcher(
        target, pattern.graph, node_match=_node_match, edge_match=_edge_match
    )
    return matcher.subgraph_is_monomorphic()


def select_frequent_groups(
    corpus: Sequence[PerceivedMolecule],
    library: FunctionalGroupSet,
    C: int,
) -> FunctionalGroupSet:
    """Keep the ``C`` patterns present in the most corpus molecules.

    Ties keep library order.
    """
    graphs = [fragment_graph(pm, range(pm.n_atoms)) for pm in corpus]
    counts = [sum(embeds(p, g) for g in graphs) for p in library.patterns]
    order = sorted(range(len(library.patterns)), key=lambda k: (-counts[k], k))
    chosen = [library.patterns[k] for k in order[:C]]
    for k in order[:C]:
        logger.debug("functional group %s present in %d molecules", library.patterns[k].name, counts[k])
    return FunctionalGroupSet(patterns=tuple(chosen))
