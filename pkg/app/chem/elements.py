"""Element data and the pinned valence rules."""

from typing import Dict, NamedTuple, Optional, Tuple


class ElementInfo(NamedTuple):
    atomic_number: int
    mass: float
    # empty tuple: no valence model, hydrogens are never implied
    valences: Tuple[int, ...]


ELEMENTS: Dict[str, ElementInfo] = {
    "H": ElementInfo(1, 1.008, (1,)),
    "Li": ElementInfo(3, 6.94, ()),
    "B": ElementInfo(5, 10.81, (3,)),
    "C": ElementInfo(6, 12.011, (4,)),
    "N": ElementInfo(7, 14.007, (3,)),
    "O": ElementInfo(8, 15.999, (2,)),
    "F": ElementInfo(9, 18.998, (1,)),
    "Na": ElementInfo(11, 22.990, ()),
    "Mg": ElementInfo(12, 24.305, ()),
    "Al": ElementInfo(13, 26.982, ()),
    "Si": ElementInfo(14, 28.085, (4,)),
    "P": ElementInfo(15, 30.974, (3, 5)),
    "S": ElementInfo(16, 32.06, (2, 4, 6)),
    "Cl": ElementInfo(17, 35.45, (1,)),
    "K": ElementInfo(19, 39.098, ()),
    "Ca": ElementInfo(20, 40.078, ()),
    "Mn": ElementInfo(25, 54.938, ()),
    "Fe": ElementInfo(26, 55.845, ()),
    "Co": ElementInfo(27, 58.933, ()),
    "Cu": ElementInfo(29, 63.546, ()),
    "Zn": ElementInfo(30, 65.38, ()),
    "As": ElementInfo(33, 74.922, (3, 5)),
    "Se": ElementInfo(34, 78.971, (2, 4, 6)),
    "Br": ElementInfo(35, 79.904, (1,)),
    "Ag": ElementInfo(47, 107.868, ()),
    "Sn": ElementInfo(50, 118.71, ()),
    "I": ElementInfo(53, 126.904, (1,)),
    "Pt": ElementInfo(78, 195.084, ()),
    "Au": ElementInfo(79, 196.967, ()),
    "Hg": ElementInfo(80, 200.59, ()),
}

ORGANIC_SUBSET = frozenset({"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"})
AROMATIC_ELEMENTS = frozenset({"B", "C", "N", "O", "P", "S", "Se", "As"})
HALOGENS = frozenset({"F", "Cl", "Br", "I"})

# Isoelectronic shift of the default valences with formal charge:
# boron-like elements lose a bond per positive charge, carbon loses one per
# unit of either sign, pnictogens/chalcogens/halogens gain one per positive
# charge (N+ -> 4, O- -> 1).
_SHIFT_SIGN = {"B": -1, "Al": -1, "C": 0, "Si": 0}


def allowed_valences(symbol: str, charge: int = 0) -> Tuple[int, ...]:
    info = ELEMENTS.get(symbol)
    if info is None or not info.valences:
        return ()
    if charge == 0:
        return info.valences
    sign = _SHIFT_SIGN.get(symbol, 1)
    if sign == 0:
        shifted = tuple(v - abs(charge) for v in info.valences)
    else:
        shifted = tuple(v + sign * charge for v in info.valences)
    return tuple(v for v in shifted if v >= 0)


def default_hydrogens(symbol: str, charge: int, bond_sum: int) -> int:
    """Smallest allowed valence not below ``bond_sum``, minus ``bond_sum``."""
    for valence in allowed_valences(symbol, charge):
        if valence >= bond_sum:
            return valence - bond_sum
    return 0


def atomic_number(symbol: str) -> int:
    return ELEMENTS[symbol].atomic_number


def atomic_mass(symbol: str) -> float:
    return ELEMENTS[symbol].mass


def lookup(symbol: str) -> Optional[ElementInfo]:
    return ELEMENTS.get(symbol)
