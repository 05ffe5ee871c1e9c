import logging

import numpy as np
import pytest

from app.chem.smiles import (
    BondOrder,
    Chirality,
    Direction,
    canonical_form,
    parse_smiles,
    random_smiles,
    write_smiles,
)
from app.exceptions import (
    SmilesError,
    UnbalancedParenthesis,
    UnclosedRingBond,
    UnknownSymbol,
    UnsupportedFeature,
)


class TestParser:
    """Parsing the supported SMILES subset."""

    def test_single_atom(self):
        """Methane has one carbon and no bonds."""
        mol = parse_smiles("C")
        assert mol.n_atoms == 1
        assert mol.n_bonds == 0
        assert mol.atoms[0].element == "C"

    def test_benzene_ring_closure(self):
        """Lowercase atoms joined by a ring closure give six aromatic bonds."""
        mol = parse_smiles("c1ccccc1")
        assert mol.n_atoms == 6
        assert all(atom.aromatic for atom in mol.atoms)
        assert mol.n_bonds == 6
        assert all(bond.order is BondOrder.AROMATIC for bond in mol.bonds)
        assert all(mol.degree(i) == 2 for i in range(6))

    def test_branches(self):
        """Branches hang off the atom before the parenthesis."""
        mol = parse_smiles("C(C)(C)O")
        assert mol.n_atoms == 4
        assert mol.n_bonds == 3
        assert mol.degree(0) == 3

    def test_unclosed_ring(self):
        """An opened ring digit that never closes is reported with its number."""
        with pytest.raises(UnclosedRingBond) as info:
            parse_smiles("C1CC")
        assert info.value.number == 1
        assert info.value.error_code == "unclosed_ring_bond"

    def test_unbalanced_parenthesis(self):
        with pytest.raises(UnbalancedParenthesis):
            parse_smiles("CC(C")
        with pytest.raises(UnbalancedParenthesis):
            parse_smiles("CC)C")

    def test_unknown_symbol(self):
        with pytest.raises(UnknownSymbol):
            parse_smiles("CXC")

    def test_empty_string(self):
        with pytest.raises(SmilesError):
            parse_smiles("")

    def test_wildcard_unsupported(self):
        with pytest.raises(UnsupportedFeature):
            parse_smiles("C[*]")

    def test_bond_symbols(self):
        """Explicit bond symbols set the bond order."""
        mol = parse_smiles("C=CC#N")
        orders = [bond.order for bond in mol.bonds]
        assert orders == [BondOrder.DOUBLE, BondOrder.SINGLE, BondOrder.TRIPLE]

    def test_two_digit_ring_closure(self):
        """%nn closes like a single digit."""
        assert parse_smiles("C%10CCCCC%10").n_bonds == parse_smiles("C1CCCCC1").n_bonds

    def test_bracket_atom(self):
        """Bracket atoms carry charge, hydrogens and chirality; isotopes are dropped."""
        mol = parse_smiles("[13CH3][C@@H](N)[O-]")
        assert mol.atoms[0].explicit_h == 3
        assert mol.atoms[1].chirality is Chirality.CLOCKWISE
        assert mol.atoms[3].formal_charge == -1

    def test_direction_marks_kept(self):
        """Direction marks are stored on the bond without changing topology."""
        mol = parse_smiles("F/C=C/F")
        assert mol.n_bonds == 3
        assert mol.bonds[0].direction is Direction.UP
        assert mol.bonds[0].order is BondOrder.SINGLE

    def test_disconnected_components(self):
        mol = parse_smiles("CCO.O")
        assert mol.n_atoms == 4
        assert mol.multi_component
        assert mol.n_components == 2

    def test_dot_rejected_when_disallowed(self):
        with pytest.raises(UnsupportedFeature):
            parse_smiles("C.C", allow_dot=False)

    def test_degree_sum(self, fixture_molecules):
        """The sum of degrees is twice the bond count."""
        for smiles in fixture_molecules:
            mol = parse_smiles(smiles)
            assert sum(mol.degree(i) for i in range(mol.n_atoms)) == 2 * mol.n_bonds


class TestCanonicalForm:
    """One canonical string per structure."""

    def test_two_writings(self):
        assert canonical_form(parse_smiles("OCC")) == canonical_form(parse_smiles("CCO"))

    def test_implicit_hydrogens_normalized(self):
        assert canonical_form(parse_smiles("C")) == canonical_form(parse_smiles("[CH4]"))

    def test_distinct_molecules(self):
        assert canonical_form(parse_smiles("CCO")) != canonical_form(parse_smiles("CCN"))

    def test_capped_tie_search_is_logged(self, caplog):
        caplog.set_level(logging.DEBUG, logger="app.chem.smiles")
        crowded = parse_smiles("CC(C)(C)C(C(C)(C)C)(C(C)(C)C)C(C)(C)C")
        rewritten = parse_smiles(random_smiles(crowded, np.random.default_rng(0)))
        assert canonical_form(crowded) == canonical_form(rewritten)
        assert "canonical tie search stopped" in caplog.text

        caplog.clear()
        canonical_form(parse_smiles("c1ccccc1"))
        assert "canonical tie search stopped" not in caplog.text

    def test_fixed_point(self, fixture_molecules):
        """parse -> canonical -> parse -> canonical is stable."""
        for smiles in fixture_molecules:
            first = canonical_form(parse_smiles(smiles))
            assert canonical_form(parse_smiles(first)) == first

    def test_randomized_rewritings(self, plain_molecules):
        """Every randomized writing maps to the same canonical form."""
        rng = np.random.default_rng(7)
        for smiles in plain_molecules:
            mol = parse_smiles(smiles)
            expected = canonical_form(mol)
            for _ in range(5):
                rewritten = parse_smiles(random_smiles(mol, rng))
                assert rewritten.n_atoms == mol.n_atoms
                assert canonical_form(rewritten) == expected

    def test_writer_round_trip_keeps_graph(self, fixture_molecules):
        for smiles in fixture_molecules:
            mol = parse_smiles(smiles)
            again = parse_smiles(write_smiles(mol))
            assert (again.n_atoms, again.n_bonds) == (mol.n_atoms, mol.n_bonds)
