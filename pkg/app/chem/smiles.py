"""
SMILES subset parser, writer and canonical form.

Supported subset:
    - organic-subset atoms B C N O P S F Cl Br I and aromatic b c n o p s
    - bracket atoms with isotope (parsed and discarded), aromatic se/as,
      chirality @/@@, hydrogen count, charge and atom class (discarded)
    - bond symbols - = # : / \\
    - branches, ring closures 0-9 and %nn
    - disconnected components with '.'

Chirality and bond direction marks are stored on the atoms/bonds but never
change the graph; the writer and the canonical form drop them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from app.chem.elements import (
    AROMATIC_ELEMENTS,
    ELEMENTS,
    ORGANIC_SUBSET,
    allowed_valences,
    default_hydrogens,
)
from app.exceptions import (
    SmilesError,
    UnbalancedParenthesis,
    UnclosedRingBond,
    UnknownSymbol,
    UnsupportedFeature,
)

logger = logging.getLogger(__name__)


class BondOrder(str, Enum):
    SINGLE = "single"
    DOUBLE = "double"
    TRIPLE = "triple"
    AROMATIC = "aromatic"

    @property
    def value_float(self) -> float:
        return _ORDER_VALUES[self]


_ORDER_VALUES = {
    BondOrder.SINGLE: 1.0,
    BondOrder.DOUBLE: 2.0,
    BondOrder.TRIPLE: 3.0,
    BondOrder.AROMATIC: 1.5,
}


class Chirality(str, Enum):
    NONE = "none"
    ANTICLOCKWISE = "anticlockwise"
    CLOCKWISE = "clockwise"


class Direction(str, Enum):
    NONE = "none"
    UP = "up"
    DOWN = "down"


@dataclass(frozen=True)
class Atom:
    element: str
    atomic_number: int
    index: int
    formal_charge: int = 0
    explicit_h: Optional[int] = None
    aromatic: bool = False
    chirality: Chirality = Chirality.NONE

    @property
    def bracket(self) -> bool:
        return self.explicit_h is not None


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder
    index: int
    direction: Direction = Direction.NONE

    @property
    def endpoints(self) -> FrozenSet[int]:
        return frozenset((self.begin, self.end))

    def other(self, atom: int) -> int:
        return self.end if atom == self.begin else self.begin


@dataclass(frozen=True)
class Molecule:
    atoms: Tuple[Atom, ...]
    bonds: Tuple[Bond, ...]
    source_smiles: str = ""
    multi_component: bool = field(default=False)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    @property
    def n_bonds(self) -> int:
        return len(self.bonds)

    @cached_property
    def adjacency(self) -> Tuple[Tuple[Tuple[int, int], ...], ...]:
        """Per atom: (neighbor, bond index) pairs in bond order."""
        adj: List[List[Tuple[int, int]]] = [[] for _ in self.atoms]
        for bond in self.bonds:
            adj[bond.begin].append((bond.end, bond.index))
            adj[bond.end].append((bond.begin, bond.index))
        return tuple(tuple(a) for a in adj)

    @cached_property
    def _bond_lookup(self) -> Dict[FrozenSet[int], int]:
        return {bond.endpoints: bond.index for bond in self.bonds}

    def neighbors(self, atom: int) -> List[int]:
        return [n for n, _ in self.adjacency[atom]]

    def degree(self, atom: int) -> int:
        return len(self.adjacency[atom])

    def bond_between(self, a: int, b: int) -> Optional[Bond]:
        idx = self._bond_lookup.get(frozenset((a, b)))
        return None if idx is None else self.bonds[idx]

    def bond_order_sum(self, atom: int, hydrogens: Optional[int] = None) -> int:
        """Valence used by bonds; aromatic bonds count 1.5, rounded down.

        Lone-pair donors (furan O, thiophene S, pyrrole [nH]) cannot host the
        extra half bonds; for them aromatic bonds count 1.
        """
        plain = 0
        n_aromatic = 0
        for _, b in self.adjacency[atom]:
            order = self.bonds[b].order
            if order is BondOrder.AROMATIC:
                n_aromatic += 1
            else:
                plain += int(order.value_float)
        if n_aromatic == 0:
            return plain
        full = plain + (3 * n_aromatic) // 2
        a = self.atoms[atom]
        valences = allowed_valences(a.element, a.formal_charge)
        h = self.atoms[atom].explicit_h if hydrogens is None else hydrogens
        if valences and full + (h or 0) > min(valences):
            return plain + n_aromatic
        return full

    def implicit_hydrogens(self, atom: int) -> int:
        a = self.atoms[atom]
        if a.bracket:
            return 0
        return default_hydrogens(a.element, a.formal_charge, self.bond_order_sum(atom))

    def total_hydrogens(self, atom: int) -> int:
        a = self.atoms[atom]
        return (a.explicit_h or 0) + self.implicit_hydrogens(atom)

    def to_networkx(self) -> nx.Graph:
        graph = nx.Graph()
        for atom in self.atoms:
            graph.add_node(atom.index, element=atom.element, aromatic=atom.aromatic)
        for bond in self.bonds:
            graph.add_edge(bond.begin, bond.end, order=bond.order, index=bond.index)
        return graph

    @cached_property
    def n_components(self) -> int:
        if not self.atoms:
            return 0
        return nx.number_connected_components(self.to_networkx())

    def subgraph(self, atom_ids: Iterable[int]) -> "Molecule":
        """Induced sub-molecule, atoms renumbered in ascending original order."""
        keep = sorted(set(atom_ids))
        remap = {old: new for new, old in enumerate(keep)}
        atoms = tuple(replace(self.atoms[old], index=remap[old]) for old in keep)
        bonds: List[Bond] = []
        for bond in self.bonds:
            if bond.begin in remap and bond.end in remap:
                bonds.append(
                    replace(
                        bond,
                        begin=remap[bond.begin],
                        end=remap[bond.end],
                        index=len(bonds),
                    )
                )
        sub = Molecule(atoms=atoms, bonds=tuple(bonds), source_smiles="")
        return replace(sub, multi_component=sub.n_components > 1)


# ---------------------------------------------------------------------------
# Parsing


class _Tokenizer:
    """Character cursor over a SMILES string."""

    __slots__ = ("text", "pos")

    def __init__(self, text: str) -> None:
        self.text = text
        self.pos = 0

    def peek(self, offset: int = 0) -> Optional[str]:
        pos = self.pos + offset
        return self.text[pos] if pos < len(self.text) else None

    def next(self) -> Optional[str]:
        char = self.peek()
        if char is not None:
            self.pos += 1
        return char

    def read_digits(self) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos].isdigit():
            self.pos += 1
        return self.text[start : self.pos]

    def eof(self) -> bool:
        return self.pos >= len(self.text)


_BOND_SYMBOLS = {
    "-": (BondOrder.SINGLE, Direction.NONE),
    "=": (BondOrder.DOUBLE, Direction.NONE),
    "#": (BondOrder.TRIPLE, Direction.NONE),
    ":": (BondOrder.AROMATIC, Direction.NONE),
    "/": (BondOrder.SINGLE, Direction.UP),
    "\\": (BondOrder.SINGLE, Direction.DOWN),
}

_UNSUPPORTED_TOKENS = {
    "*": "wildcard atom",
    "$": "quadruple bond",
    "~": "any bond",
    ">": "reaction SMILES",
    "<": "dative bond",
}


@dataclass
class _PendingBond:
    order: Optional[BondOrder] = None
    direction: Direction = Direction.NONE
    position: int = -1


@dataclass
class _ParserState:
    atoms: List[Atom] = field(default_factory=list)
    bonds: List[Tuple[int, int, Optional[BondOrder], Direction]] = field(
        default_factory=list
    )
    # ring number -> (atom, pending bond at opening)
    open_rings: Dict[int, Tuple[int, _PendingBond]] = field(default_factory=dict)
    branch_stack: List[Tuple[int, int]] = field(default_factory=list)
    prev_atom: Optional[int] = None
    pending: Optional[_PendingBond] = None
    saw_dot: bool = False


class SmilesParser:
    """Parser for the supported SMILES subset.

    >>> mol = SmilesParser(allow_dot=True).parse("CCO")
    >>> mol.n_atoms
    3
    """

    def __init__(self, allow_dot: bool = True) -> None:
        self.allow_dot = allow_dot

    def parse(self, text: str) -> Molecule:
        if not text:
            raise SmilesError("empty SMILES string", error_code="empty_smiles")
        for pos, char in enumerate(text):
            if not char.isascii() or char.isspace():
                raise UnknownSymbol(pos, char)

        tok = _Tokenizer(text)
        state = _ParserState()

        while not tok.eof():
            pos = tok.pos
            char = tok.peek()
            assert char is not None
            if char in _UNSUPPORTED_TOKENS:
                raise UnsupportedFeature(_UNSUPPORTED_TOKENS[char], pos)
            if char == "(":
                if state.prev_atom is None or state.pending is not None:
                    raise UnknownSymbol(pos, char)
                state.branch_stack.append((state.prev_atom, pos))
                tok.next()
            elif char == ")":
                if not state.branch_stack or state.pending is not None:
                    raise UnbalancedParenthesis(pos)
                state.prev_atom, _ = state.branch_stack.pop()
                tok.next()
            elif char in _BOND_SYMBOLS:
                if state.prev_atom is None or state.pending is not None:
                    raise UnknownSymbol(pos, char)
                order, direction = _BOND_SYMBOLS[char]
                state.pending = _PendingBond(order, direction, pos)
                tok.next()
            elif char == ".":
                if not self.allow_dot:
                    raise UnsupportedFeature("disconnected components '.'", pos)
                if state.prev_atom is None or state.pending is not None:
                    raise UnknownSymbol(pos, char)
                if state.branch_stack:
                    raise UnsupportedFeature("'.' inside a branch", pos)
                state.prev_atom = None
                state.saw_dot = True
                tok.next()
            elif char.isdigit() or char == "%":
                self._ring_closure(tok, state)
            elif char == "[":
                self._add_atom(state, self._bracket_atom(tok, len(state.atoms)))
            else:
                self._add_atom(state, self._organic_atom(tok, len(state.atoms)))

        if state.pending is not None:
            raise UnknownSymbol(state.pending.position, "dangling bond")
        if state.branch_stack:
            raise UnbalancedParenthesis(state.branch_stack[-1][1])
        if state.open_rings:
            raise UnclosedRingBond(min(state.open_rings))

        return self._assemble(text, state)

    # -- atoms --------------------------------------------------------------

    def _organic_atom(self, tok: _Tokenizer, index: int) -> Atom:
        pos = tok.pos
        char = tok.next()
        assert char is not None
        two = char + (tok.peek() or "")
        if two in ("Cl", "Br"):
            tok.next()
            return Atom(two, ELEMENTS[two].atomic_number, index)
        if char in ORGANIC_SUBSET:
            return Atom(char, ELEMENTS[char].atomic_number, index)
        upper = char.upper()
        if char.islower() and upper in ORGANIC_SUBSET and upper in AROMATIC_ELEMENTS:
            return Atom(upper, ELEMENTS[upper].atomic_number, index, aromatic=True)
        raise UnknownSymbol(pos, char)

    def _bracket_atom(self, tok: _Tokenizer, index: int) -> Atom:
        start = tok.pos
        tok.next()  # '['
        tok.read_digits()  # isotope, discarded

        pos = tok.pos
        char = tok.next()
        if char is None:
            raise UnknownSymbol(pos, "[")
        if char == "*":
            raise UnsupportedFeature("wildcard atom", pos)
        aromatic = False
        symbol: Optional[str] = None
        if char.islower():
            two = char + (tok.peek() or "")
            if two in ("se", "as"):
                tok.next()
                symbol, aromatic = two.capitalize(), True
            elif char.upper() in AROMATIC_ELEMENTS:
                symbol, aromatic = char.upper(), True
        elif char.isupper():
            nxt = tok.peek()
            if nxt is not None and nxt.islower() and (char + nxt) in ELEMENTS:
                tok.next()
                symbol = char + nxt
            elif char in ELEMENTS:
                symbol = char
        if symbol is None:
            raise UnknownSymbol(pos, char)

        chirality = Chirality.NONE
        if tok.peek() == "@":
            tok.next()
            chirality = Chirality.ANTICLOCKWISE
            if tok.peek() == "@":
                tok.next()
                chirality = Chirality.CLOCKWISE
            if tok.peek() in ("T", "S", "A", "O"):
                raise UnsupportedFeature("extended chirality class", tok.pos)

        hydrogens = 0
        if tok.peek() == "H":
            tok.next()
            digits = tok.read_digits()
            hydrogens = int(digits) if digits else 1

        charge = 0
        sign_char = tok.peek()
        if sign_char in ("+", "-"):
            sign = 1 if sign_char == "+" else -1
            tok.next()
            digits = tok.read_digits()
            if digits:
                charge = sign * int(digits)
            else:
                charge = sign
                while tok.peek() == sign_char:
                    tok.next()
                    charge += sign

        if tok.peek() == ":":
            tok.next()
            if not tok.read_digits():
                raise UnknownSymbol(tok.pos, ":")

        if tok.peek() != "]":
            raise UnknownSymbol(tok.pos, tok.peek() or "end of input")
        tok.next()
        logger.debug("bracket atom %s at %d", symbol, start)
        return Atom(
            symbol,
            ELEMENTS[symbol].atomic_number,
            index,
            formal_charge=charge,
            explicit_h=hydrogens,
            aromatic=aromatic,
            chirality=chirality,
        )

    def _add_atom(self, state: _ParserState, atom: Atom) -> None:
        state.atoms.append(atom)
        if state.prev_atom is not None:
            pending = state.pending or _PendingBond()
            state.bonds.append(
                (state.prev_atom, atom.index, pending.order, pending.direction)
            )
        state.pending = None
        state.prev_atom = atom.index

    # -- ring closures ------------------------------------------------------

    def _ring_closure(self, tok: _Tokenizer, state: _ParserState) -> None:
        pos = tok.pos
        if state.prev_atom is None:
            raise UnknownSymbol(pos, tok.peek() or "")
        char = tok.next()
        if char == "%":
            if tok.peek() == "(":
                raise UnsupportedFeature("three-digit ring closure", pos)
            digits = tok.text[tok.pos : tok.pos + 2]
            if len(digits) != 2 or not digits.isdigit():
                raise UnknownSymbol(pos, "%")
            tok.pos += 2
            number = int(digits)
        else:
            assert char is not None
            number = int(char)

        pending = state.pending or _PendingBond()
        state.pending = None
        if number not in state.open_rings:
            state.open_rings[number] = (state.prev_atom, pending)
            return

        partner, opening = state.open_rings.pop(number)
        if partner == state.prev_atom:
            raise UnsupportedFeature("ring closure to the same atom", pos)
        order = pending.order
        if opening.order is not None:
            if order is not None and order is not opening.order:
                raise UnsupportedFeature("conflicting ring-closure bond symbols", pos)
            order = opening.order
        direction = (
            pending.direction if pending.direction is not Direction.NONE else opening.direction
        )
        state.bonds.append((partner, state.prev_atom, order, direction))

    # -- assembly -----------------------------------------------------------

    def _assemble(self, text: str, state: _ParserState) -> Molecule:
        seen: set = set()
        bonds: List[Bond] = []
        for begin, end, order, direction in state.bonds:
            key = frozenset((begin, end))
            if key in seen:
                raise UnsupportedFeature(f"duplicate bond between atoms {begin} and {end}")
            seen.add(key)
            if order is None:
                both_aromatic = state.atoms[begin].aromatic and state.atoms[end].aromatic
                order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
            bonds.append(Bond(begin, end, order, len(bonds), direction))
        mol = Molecule(atoms=tuple(state.atoms), bonds=tuple(bonds), source_smiles=text)
        return replace(mol, multi_component=mol.n_components > 1)


_default_parser = SmilesParser()


def parse_smiles(text: str, allow_dot: bool = True) -> Molecule:
    """Parse ``text`` into a :class:`Molecule`."""
    if allow_dot:
        return _default_parser.parse(text)
    return SmilesParser(allow_dot=False).parse(text)


# ---------------------------------------------------------------------------
# Writing


def _charge_text(charge: int) -> str:
    if charge == 0:
        return ""
    sign = "+" if charge > 0 else "-"
    return sign if abs(charge) == 1 else f"{sign}{abs(charge)}"


def _atom_token(mol: Molecule, i: int) -> str:
    atom = mol.atoms[i]
    symbol = atom.element.lower() if atom.aromatic else atom.element
    total_h = mol.total_hydrogens(i)
    bare_ok = (
        atom.element in ORGANIC_SUBSET
        and atom.formal_charge == 0
        and total_h
        == default_hydrogens(atom.element, 0, mol.bond_order_sum(i, hydrogens=0))
    )
    if bare_ok:
        return symbol
    h_text = "" if total_h == 0 else ("H" if total_h == 1 else f"H{total_h}")
    return f"[{symbol}{h_text}{_charge_text(atom.formal_charge)}]"


def _bond_token(mol: Molecule, bond: Bond) -> str:
    a, b = mol.atoms[bond.begin], mol.atoms[bond.end]
    if bond.order is BondOrder.SINGLE:
        return "-" if a.aromatic and b.aromatic else ""
    if bond.order is BondOrder.DOUBLE:
        return "="
    if bond.order is BondOrder.TRIPLE:
        return "#"
    return "" if a.aromatic and b.aromatic else ":"


def _ring_label(number: int) -> str:
    return str(number) if number < 10 else f"%{number:02d}"


def write_smiles(mol: Molecule, ranks: Optional[Sequence[int]] = None) -> str:
    """Write ``mol`` as SMILES, traversing atoms in ascending ``ranks``.

    Each component starts at its lowest-ranked atom; neighbors are visited in
    rank order. Stereo and direction marks are not written.
    """
    n = mol.n_atoms
    if n == 0:
        return ""
    order_key = list(ranks) if ranks is not None else list(range(n))

    visited = [False] * n
    visit_index = [0] * n
    tree_children: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    counter = 0

    def explore(root: int) -> None:
        # marking on pop keeps the visit order identical to a recursive DFS
        nonlocal counter
        stack: List[Tuple[int, int]] = [(root, -1)]
        while stack:
            atom, via = stack.pop()
            if visited[atom]:
                continue
            visited[atom] = True
            visit_index[atom] = counter
            counter += 1
            if via >= 0:
                parent = mol.bonds[via].other(atom)
                tree_children[parent].append((atom, via))
            nbrs = sorted(mol.adjacency[atom], key=lambda nb: order_key[nb[0]])
            for nbr, b in reversed(nbrs):
                if not visited[nbr]:
                    stack.append((nbr, b))

    roots: List[int] = []
    for atom in sorted(range(n), key=lambda i: order_key[i]):
        if not visited[atom]:
            roots.append(atom)
            explore(atom)

    tree_bonds = {b for children in tree_children for _, b in children}
    ring_bonds = [bond.index for bond in mol.bonds if bond.index not in tree_bonds]

    openers: Dict[int, List[int]] = {i: [] for i in range(n)}
    closers: Dict[int, List[int]] = {i: [] for i in range(n)}
    for b in ring_bonds:
        bond = mol.bonds[b]
        first, second = sorted((bond.begin, bond.end), key=lambda i: visit_index[i])
        openers[first].append(b)
        closers[second].append(b)
    for i in range(n):
        openers[i].sort(key=lambda b: (visit_index[mol.bonds[b].other(i)], b))

    free_digits: List[int] = []
    next_digit = 1
    ring_digit: Dict[int, int] = {}

    def take_digit() -> int:
        nonlocal next_digit
        if free_digits:
            free_digits.sort()
            return free_digits.pop(0)
        digit = next_digit
        next_digit += 1
        return digit

    out: List[str] = []

    def emit(root: int) -> None:
        stack: List[object] = [root]
        while stack:
            item = stack.pop()
            if isinstance(item, str):
                out.append(item)
                continue
            atom = int(item)  # type: ignore[call-overload]
            out.append(_atom_token(mol, atom))
            for b in sorted(closers[atom], key=lambda b: ring_digit[b]):
                digit = ring_digit.pop(b)
                out.append(_ring_label(digit))
                free_digits.append(digit)
            for b in openers[atom]:
                digit = take_digit()
                ring_digit[b] = digit
                out.append(_bond_token(mol, mol.bonds[b]) + _ring_label(digit))
            children = tree_children[atom]
            pending: List[object] = []
            for k, (child, b) in enumerate(children):
                last = k == len(children) - 1
                if not last:
                    pending.extend(["(" + _bond_token(mol, mol.bonds[b]), child, ")"])
                else:
                    pending.extend([_bond_token(mol, mol.bonds[b]), child])
            stack.extend(reversed(pending))

    for k, root in enumerate(roots):
        if k:
            out.append(".")
        emit(root)
    return "".join(out)


def random_smiles(mol: Molecule, rng: np.random.Generator) -> str:
    """A randomized (non-canonical) SMILES writing of ``mol``."""
    return write_smiles(mol, list(rng.permutation(mol.n_atoms)))


# ---------------------------------------------------------------------------
# Canonical form

_MAX_TIE_LEAVES = 256


def _initial_invariants(mol: Molecule) -> List[Tuple]:
    return [
        (
            atom.atomic_number,
            int(atom.aromatic),
            atom.formal_charge,
            mol.total_hydrogens(atom.index),
            mol.degree(atom.index),
        )
        for atom in mol.atoms
    ]


def _ranks_from_keys(keys: Sequence) -> List[int]:
    ordered = sorted(set(keys))
    lookup = {key: r for r, key in enumerate(ordered)}
    return [lookup[key] for key in keys]


_ORDER_CODE = {
    BondOrder.SINGLE: 1,
    BondOrder.DOUBLE: 2,
    BondOrder.TRIPLE: 3,
    BondOrder.AROMATIC: 4,
}


def _refine(mol: Molecule, ranks: List[int]) -> List[int]:
    """Iterate neighborhood refinement until the partition is stable."""
    n_classes = len(set(ranks))
    while True:
        keys = [
            (
                ranks[i],
                tuple(
                    sorted(
                        (ranks[nbr], _ORDER_CODE[mol.bonds[b].order])
                        for nbr, b in mol.adjacency[i]
                    )
                ),
            )
            for i in range(mol.n_atoms)
        ]
        new_ranks = _ranks_from_keys(keys)
        new_classes = len(set(new_ranks))
        if new_classes == n_classes:
            return new_ranks
        ranks, n_classes = new_ranks, new_classes


def canonical_ranks(mol: Molecule) -> List[int]:
    """Stable refinement ranks (ties possible between symmetric atoms)."""
    return _refine(mol, _ranks_from_keys(_initial_invariants(mol)))


def canonical_form(mol: Molecule) -> str:
    """Deterministic SMILES string shared by every writing of one structure.

    Atoms are ranked by iterative neighborhood refinement of (element,
    aromatic, charge, hydrogens, degree). Remaining ties are broken by trying
    each member of the lowest tied class, refining again, and keeping the
    lexicographically smallest resulting string.
    """
    if mol.n_atoms == 0:
        return ""
    best: List[Optional[str]] = [None]
    leaves = [0]
    truncated = [False]

    def search(ranks: List[int]) -> None:
        if leaves[0] >= _MAX_TIE_LEAVES and best[0] is not None:
            truncated[0] = True
            return
        counts: Dict[int, int] = {}
        for r in ranks:
            counts[r] = counts.get(r, 0) + 1
        tied = [r for r, c in counts.items() if c > 1]
        if not tied:
            leaves[0] += 1
            text = write_smiles(mol, ranks)
            if best[0] is None or text < best[0]:
                best[0] = text
            return
        target = min(tied)
        candidates = [i for i, r in enumerate(ranks) if r == target]
        for n_tried, chosen in enumerate(candidates, start=1):
            keys = [(2 * r + (0 if r != target or i == chosen else 1)) for i, r in enumerate(ranks)]
            search(_refine(mol, _ranks_from_keys(keys)))
            if leaves[0] >= _MAX_TIE_LEAVES:
                truncated[0] = truncated[0] or n_tried < len(candidates)
                break

    search(canonical_ranks(mol))
    if truncated[0]:
        logger.debug(
            "canonical tie search stopped at %d leaves for %s",
            leaves[0],
            mol.source_smiles or "<fragment>",
        )
    assert best[0] is not None
    return best[0]
