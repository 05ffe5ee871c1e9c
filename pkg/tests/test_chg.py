from math import comb

import numpy as np
import pytest

from app.chem.perception import perceive
from app.chem.psm_vocab import Decomposition, decompose
from app.chem.smiles import parse_smiles, random_smiles
from app.chg import (
    EDGE_SETS,
    N_FEATURES,
    apply_graph_variant,
    atom_features,
    bond_features,
    build_bond_graph,
    build_chg,
    collate,
    dump_chg,
    fragment_features,
    graph_features,
)
from app.exceptions import PartitionMismatch
from app.schemas import GraphVariant
from tests.conftest import atom_fragments, chg_of, single_fragment


def _sorted_rows(x):
    return np.sort(x, axis=0)


class TestBondGraph:
    """Line graph over molecule bonds."""

    def test_propane(self):
        assert build_bond_graph(parse_smiles("CCC")) == [(0, 1)]

    def test_methane(self):
        assert build_bond_graph(parse_smiles("C")) == []

    def test_benzene_is_a_six_cycle(self):
        edges = build_bond_graph(parse_smiles("c1ccccc1"))
        assert len(edges) == 6
        counts = np.bincount(np.array(edges).ravel(), minlength=6)
        assert counts.tolist() == [2] * 6

    def test_handshake(self, fixture_molecules):
        """|E_b| equals the sum of C(degree, 2) over atoms."""
        for smiles in fixture_molecules:
            mol = parse_smiles(smiles)
            expected = sum(comb(mol.degree(i), 2) for i in range(mol.n_atoms))
            assert len(build_bond_graph(mol)) == expected


class TestBuildChg:
    """Node and edge layout of the hierarchical graph."""

    def test_ethanol_single_fragment(self):
        chg = chg_of("CCO")
        assert chg.n_nodes == 7
        assert chg.n_edges == 9
        assert chg.edge_counts() == {"a": 2, "b": 1, "f": 0, "af": 3, "bf": 2, "fg": 1}

    def test_ethanol_atom_fragments(self):
        chg = chg_of("CCO", atom_fragments)
        counts = chg.edge_counts()
        assert counts["f"] == 2
        assert counts["bf"] == 0
        assert chg.n_frags == 3

    def test_methane(self):
        chg = chg_of("C")
        assert chg.counts == {"atom": 1, "bond": 0, "frag": 1, "graph": 1}
        assert chg.edge_counts() == {"a": 0, "b": 0, "f": 0, "af": 1, "bf": 0, "fg": 1}

    def test_benzene_counts(self):
        chg = chg_of("c1ccccc1")
        assert chg.counts == {"atom": 6, "bond": 6, "frag": 1, "graph": 1}
        assert chg.edge_counts()["b"] == 6

    def test_partition_mismatch(self):
        mol = parse_smiles("CCO")
        bad = Decomposition(fragments=((0, 1),), frag_of_atom=(0, 0))
        with pytest.raises(PartitionMismatch):
            build_chg(perceive(mol), bad)
        overlapping = Decomposition(fragments=((0, 1), (1, 2)), frag_of_atom=(0, 0, 1))
        with pytest.raises(PartitionMismatch):
            build_chg(perceive(mol), overlapping)

    def test_structure_invariants(self, fixture_molecules, small_vocab):
        """Edge-set sizes follow from the molecule and its partition."""
        for smiles in fixture_molecules:
            mol = parse_smiles(smiles)
            d = decompose(mol, small_vocab, strict=False)
            chg = build_chg(perceive(mol), d)
            counts = chg.edge_counts()
            assert counts["a"] == mol.n_bonds
            assert counts["af"] == mol.n_atoms
            assert counts["fg"] == d.n_fragments
            crossing = sum(
                d.frag_of_atom[b.begin] != d.frag_of_atom[b.end] for b in mol.bonds
            )
            assert counts["bf"] + crossing == mol.n_bonds
            assert sorted(chg.edges["af"][:, 0].tolist()) == list(range(mol.n_atoms))
            assert all(chg.x[t].shape[1] == N_FEATURES for t in chg.x)

    def test_invariance_under_rewriting(self, plain_molecules):
        """Rewritten SMILES give the same sorted features and edge counts."""
        rng = np.random.default_rng(5)
        for smiles in plain_molecules:
            for decomposition in (single_fragment, atom_fragments):
                mol = parse_smiles(smiles)
                reference = build_chg(perceive(mol), decomposition(mol))
                other_mol = parse_smiles(random_smiles(mol, rng))
                other = build_chg(perceive(other_mol), decomposition(other_mol))
                assert other.edge_counts() == reference.edge_counts()
                for node_type in reference.x:
                    np.testing.assert_allclose(
                        _sorted_rows(other.x[node_type]),
                        _sorted_rows(reference.x[node_type]),
                        atol=1e-12,
                    )


class TestFeatures:
    """Pinned 15-slot feature layouts."""

    def test_methane_atom(self):
        pm = perceive(parse_smiles("C"))
        expected = [6, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0.12011, 4, 0, 0]
        np.testing.assert_allclose(atom_features(pm, 0), expected)

    def test_benzene_atom(self):
        x = atom_features(perceive(parse_smiles("c1ccccc1")), 0)
        assert x[6] == 1.0
        assert x[12] == 1

    def test_chiral_atom(self):
        x = atom_features(perceive(parse_smiles("C[C@H](N)C(=O)O")), 1)
        assert x[13] == 1
        assert x[14] == 1

    def test_ethane_bond(self):
        expected = [1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0]
        np.testing.assert_array_equal(bond_features(perceive(parse_smiles("CC")), 0), expected)

    def test_aromatic_bond(self):
        x = bond_features(perceive(parse_smiles("c1ccccc1")), 0)
        assert x[1:4].tolist() == [0, 0, 0]
        assert x[7] == 1

    def test_hetero_bond(self):
        assert bond_features(perceive(parse_smiles("CCO")), 1)[4] == 1

    def test_trans_double_bond(self):
        pm = perceive(parse_smiles("F/C=C/F"))
        assert bond_features(pm, 0)[5] == 1
        assert bond_features(pm, 1)[11] == 1  # E

    def test_cis_double_bond(self):
        pm = perceive(parse_smiles("F/C=C\\F"))
        assert bond_features(pm, 1)[10] == 1  # Z

    def test_methane_fragment(self):
        pm = perceive(parse_smiles("C"))
        expected = [1, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0.12011, 0, 0, 4, 4]
        np.testing.assert_allclose(fragment_features(pm, [0]), expected)

    def test_ethanol_fragment(self):
        x = fragment_features(perceive(parse_smiles("CCO")), [0, 1, 2])
        assert x[:8].tolist() == [3, 2, 1, 2, 0, 1, 0, 2]
        assert x[12] == 0
        assert x[14] == 10

    def test_partial_fragment_counts_inner_bonds_only(self):
        x = fragment_features(perceive(parse_smiles("CCO")), (0, 1))
        assert x[1] == 1
        assert x[11] == 1
        assert x[13] == 5
        assert x[14] == 7

    def test_aromatic_fragment_valence(self):
        pm = perceive(parse_smiles("Cc1ccccc1"))
        assert fragment_features(pm, range(1, 7))[14] == 18 + 5
        assert fragment_features(pm, range(7))[14] == 20 + 8

    def test_methane_graph(self):
        expected = [1, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 1, 0, 0]
        np.testing.assert_array_equal(graph_features([1], [0], 1, 0), expected)

    def test_ethanol_graph_variants(self):
        one = chg_of("CCO").x["graph"][0]
        assert one[3:6].tolist() == [3, 3, 3]
        assert one[13] == one[14] == 0
        three = chg_of("CCO", atom_fragments).x["graph"][0]
        assert three[12] == 3
        assert three[13] == three[14] == 0


class TestVariantsAndDump:
    """Ablation variants, batching and the text dump."""

    def test_atom_variant(self):
        chg = apply_graph_variant(chg_of("CCO"), GraphVariant.ATOM)
        counts = chg.edge_counts()
        assert counts["a"] == 2
        assert sum(v for k, v in counts.items() if k != "a") == 0
        assert chg.counts == {"atom": 3, "bond": 0, "frag": 0, "graph": 0}

    def test_hierarchical_variant(self):
        chg = apply_graph_variant(chg_of("CCO"), GraphVariant.HIERARCHICAL)
        counts = chg.edge_counts()
        assert counts["b"] == counts["bf"] == 0
        assert counts["af"] == 3
        assert chg.n_bonds == 0
        assert chg.n_frags == 1

    def test_full_variant_is_identity(self):
        chg = chg_of("CCO")
        assert apply_graph_variant(chg, GraphVariant.FULL) is chg

    def test_dump_header(self):
        first = dump_chg(chg_of("CCO")).splitlines()[0]
        assert first == "#chg v1 atoms=3 bonds=2 frags=1 nodes=7 edges=9"

    def test_dump_lists_every_node_and_edge(self):
        lines = dump_chg(chg_of("CCO")).splitlines()[1:]
        assert sum(line.startswith("N ") for line in lines) == 7
        assert sum(line.startswith("E ") for line in lines) == 9

    def test_collate_offsets(self):
        graphs = [chg_of("CCO"), chg_of("C"), chg_of("CC", atom_fragments)]
        batch = collate(graphs)
        assert batch.n_graphs == 3
        assert batch.n_nodes == sum(g.n_nodes for g in graphs)
        assert len(batch.src) == sum(g.n_edges for g in graphs)
        assert batch.n_frags == 1 + 1 + 2
        assert batch.owner["atom"].tolist() == [0, 0, 0, 1, 2, 2]
        assert batch.frag_atom_ids.tolist() == [0, 0, 0, 1, 2, 3]
        assert set(EDGE_SETS) == set(graphs[0].edges)
