import numpy as np
import pytest

from app.chem.functional_groups import (
    compile_pattern,
    default_library,
    load_library,
    select_frequent_groups,
)
from app.chem.labels import (
    MAX_RING_CLASS,
    compute_targets,
    match_groups,
    scaffold_targets,
    topo_fingerprint,
)
from app.chem.perception import perceive
from app.chem.smiles import parse_smiles, random_smiles
from app.exceptions import InvalidFingerprintSize, PatternError
from tests.conftest import atom_fragments, random_decomposition, single_fragment


def _groups(smiles, atoms=None):
    fgs = default_library()
    pm = perceive(parse_smiles(smiles))
    bits = match_groups(pm, range(pm.n_atoms) if atoms is None else atoms, fgs)
    return {name for name, bit in zip(fgs.names, bits) if bit}


class TestFunctionalGroups:
    """Pattern library and fragment matching."""

    def test_default_library(self):
        fgs = default_library()
        assert fgs.C == 16
        assert len(set(fgs.names)) == 16
        assert fgs.names[0] == "hydroxyl"

    def test_acetic_acid(self):
        assert "carboxyl" in _groups("CC(=O)O")

    def test_ethane_has_no_groups(self):
        assert _groups("CC") == set()

    def test_ethanol(self):
        groups = _groups("CCO")
        assert "hydroxyl" in groups
        assert "ether" not in groups

    @pytest.mark.parametrize(
        "smiles,name",
        [
            ("COC", "ether"),
            ("CN", "primary_amine"),
            ("CNC", "secondary_amine"),
            ("CN(C)C", "tertiary_amine"),
            ("CC(=O)N", "amide"),
            ("C[N+](=O)[O-]", "nitro"),
            ("CC#N", "nitrile"),
            ("CCCl", "halide"),
            ("CCS", "thiol"),
            ("CS(=O)(=O)C", "sulfonyl"),
            ("CC=O", "aldehyde"),
            ("CC(C)=O", "ketone"),
            ("CC(=O)OC", "ester"),
            ("Oc1ccccc1", "hydroxyl"),
        ],
    )
    def test_single_groups(self, smiles, name):
        assert name in _groups(smiles)

    def test_ketone_is_not_aldehyde(self):
        groups = _groups("CC(C)=O")
        assert "aldehyde" not in groups
        assert "carbonyl" in groups

    def test_fragment_bits_subset_of_molecule(self, plain_molecules):
        """A fragment never carries a group the whole molecule lacks."""
        fgs = default_library()
        rng = np.random.default_rng(0)
        for smiles in plain_molecules:
            mol = parse_smiles(smiles)
            pm = perceive(mol)
            whole = match_groups(pm, range(mol.n_atoms), fgs)
            for atoms in random_decomposition(mol, rng).fragments:
                assert np.all(match_groups(pm, atoms, fgs) <= whole)

    def test_library_file(self, tmp_path):
        path = tmp_path / "groups.tsv"
        path.write_text("# custom\nhydroxyl\tCO\t0:a=*;1:h=1\nnitrile\tC#N\n")
        fgs = load_library(path)
        assert fgs.names == ["hydroxyl", "nitrile"]

    def test_bad_pattern(self):
        with pytest.raises(PatternError):
            compile_pattern("broken", "C1CC")
        with pytest.raises(PatternError):
            compile_pattern("too_big", "CCCCCCCCC")
        with pytest.raises(PatternError):
            compile_pattern("bad_key", "CO", "1:q=1")

    def test_select_frequent_groups(self):
        corpus = [perceive(parse_smiles(s)) for s in ("CCO", "OCCO", "CC#N")]
        chosen = select_frequent_groups(corpus, default_library(), 2)
        assert chosen.names == ["hydroxyl", "nitrile"]


class TestFingerprint:
    """Hashed linear-path fingerprint."""

    def test_methane_is_empty(self):
        assert topo_fingerprint(perceive(parse_smiles("C")), 512).sum() == 0

    def test_ethanol_paths(self):
        bits = topo_fingerprint(perceive(parse_smiles("CCO")), 512)
        assert bits.shape == (512,)
        assert bits.sum() >= 2

    def test_two_writings(self):
        a = topo_fingerprint(perceive(parse_smiles("OCC")), 512)
        b = topo_fingerprint(perceive(parse_smiles("CCO")), 512)
        assert np.array_equal(a, b)

    def test_invariance_under_rewriting(self, plain_molecules):
        rng = np.random.default_rng(11)
        for smiles in plain_molecules:
            mol = parse_smiles(smiles)
            expected = topo_fingerprint(perceive(mol), 1024)
            for _ in range(5):
                other = parse_smiles(random_smiles(mol, rng))
                assert np.array_equal(topo_fingerprint(perceive(other), 1024), expected)

    @pytest.mark.parametrize("size", [32, 100, 8192])
    def test_invalid_size(self, size):
        with pytest.raises(InvalidFingerprintSize):
            topo_fingerprint(perceive(parse_smiles("CC")), size)


class TestTargets:
    """Per-molecule pretraining targets."""

    def test_scaffold_clamped(self):
        # nine cyclopropane rings in a chain
        smiles = "C1CC1" + "".join("C2CC2" for _ in range(8))
        s = scaffold_targets(perceive(parse_smiles(smiles)))
        assert s.ring_count == MAX_RING_CLASS

    def test_compute_targets_shapes(self):
        mol = parse_smiles("CC(=O)O")
        pm = perceive(mol)
        fgs = default_library()
        targets = compute_targets(pm, atom_fragments(mol), fgs, 256)
        assert targets.frag_fg.shape == (4, 16)
        assert targets.topo_fp.shape == (256,)
        assert targets.scaffold == (0, 0, 0, 0, 0)
        assert len(targets.topo_hex) == 64

    def test_whole_fragment_matches_molecule(self):
        mol = parse_smiles("CC(=O)O")
        pm = perceive(mol)
        fgs = default_library()
        targets = compute_targets(pm, single_fragment(mol), fgs, 256)
        assert np.array_equal(targets.frag_fg[0], match_groups(pm, range(4), fgs))

    def test_deterministic(self):
        mol = parse_smiles("c1ccncc1CCO")
        pm = perceive(mol)
        a = compute_targets(pm, single_fragment(mol), default_library(), 512)
        b = compute_targets(pm, single_fragment(mol), default_library(), 512)
        assert a.topo_hex == b.topo_hex
        assert np.array_equal(a.frag_fg, b.frag_fg)
