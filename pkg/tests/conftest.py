from pathlib import Path

import numpy as np
import pytest

from app import autodiff as ad
from app.chem.functional_groups import default_library
from app.chem.perception import perceive
from app.chem.psm_vocab import Decomposition, build_vocab
from app.chem.smiles import parse_smiles
from app.chg import build_chg
from app.data_ingestion import MoleculeCorpusGenerator, MoleculeRecord, _graph_record
from app.schemas import EncoderConfig, RunConfig

REPO_ROOT = Path(__file__).resolve().parent.parent

# No stereo marks, no chirality, no charges: every randomized rewriting keeps
# the same features.
PLAIN_MOLECULES = [
    "CC",
    "CCC",
    "CCO",
    "CC(C)C",
    "C=C",
    "C#N",
    "CC(=O)O",
    "CC(=O)OC",
    "CN(C)C",
    "CC(=O)N",
    "CCCl",
    "CS(=O)(=O)C",
    "CC(C)=O",
    "C1CCCCC1",
    "c1ccccc1",
    "Cc1ccccc1",
    "c1ccncc1",
    "c1ccc2ccccc2c1",
    "c1ccoc1",
    "c1ccsc1",
    "c1cc[nH]c1",
    "C1CC2CCC1C2",
    "c1ccc(-c2ccccc2)cc1",
    "OC(=O)c1ccccc1",
    "CC(=O)Nc1ccccc1",
    "C1CCNCC1",
    "FC(F)(F)c1ccccc1",
    "c1ccc2[nH]ccc2c1",
    "N#Cc1ccccc1",
    "CC(C)CC(=O)O",
]

FIXTURE_MOLECULES = PLAIN_MOLECULES + [
    "C",
    "C#C",
    "COC",
    "CN",
    "CNC",
    "CC#N",
    "CCS",
    "CC=O",
    "c1ccccc1O",
    "Nc1ccccc1",
    "C1CCOC1",
    "C1CC1",
    "CCOC(=O)C",
    "ClC(Cl)Cl",
    "BrCCBr",
    "OCCO",
    "C[N+](=O)[O-]",
    "C[C@H](N)C(=O)O",
    "F/C=C/F",
    "CCO.O",
]


@pytest.fixture(scope="session")
def fixture_molecules():
    """The 50-molecule hand-curated fixture set."""
    return list(FIXTURE_MOLECULES)


@pytest.fixture(scope="session")
def plain_molecules():
    return list(PLAIN_MOLECULES)


def single_fragment(mol) -> Decomposition:
    """Whole molecule as one fragment (assumes one component)."""
    return Decomposition(
        fragments=(tuple(range(mol.n_atoms)),), frag_of_atom=(0,) * mol.n_atoms
    )


def atom_fragments(mol) -> Decomposition:
    return Decomposition(
        fragments=tuple((a,) for a in range(mol.n_atoms)),
        frag_of_atom=tuple(range(mol.n_atoms)),
    )


def random_decomposition(mol, rng: np.random.Generator, merges: int = 4) -> Decomposition:
    """Connected partition from a few random merges of bonded fragments."""
    frag_of_atom = list(range(mol.n_atoms))
    for _ in range(merges):
        crossing = [b for b in mol.bonds if frag_of_atom[b.begin] != frag_of_atom[b.end]]
        if not crossing:
            break
        bond = crossing[int(rng.integers(len(crossing)))]
        keep, drop = sorted((frag_of_atom[bond.begin], frag_of_atom[bond.end]))
        frag_of_atom = [keep if f == drop else f for f in frag_of_atom]
    groups = {}
    for atom, frag in enumerate(frag_of_atom):
        groups.setdefault(frag, []).append(atom)
    fragments = sorted(tuple(atoms) for atoms in groups.values())
    lookup = {atom: k for k, atoms in enumerate(fragments) for atom in atoms}
    return Decomposition(
        fragments=tuple(fragments),
        frag_of_atom=tuple(lookup[a] for a in range(mol.n_atoms)),
    )


def chg_of(smiles: str, decomposition=None):
    mol = parse_smiles(smiles)
    d = decomposition(mol) if callable(decomposition) else decomposition
    return build_chg(perceive(mol), d if d is not None else single_fragment(mol))


@pytest.fixture
def small_config():
    """A tiny encoder that keeps finite-difference checks fast."""
    return RunConfig(
        encoder=EncoderConfig(hidden=8, layers=2, dropout=0.0, proj_dim=8),
        fingerprint_bits=64,
        pretrain_batch=8,
        finetune_batch=8,
        pretrain_epochs=2,
        finetune_epochs=2,
    )


@pytest.fixture(scope="session")
def small_vocab():
    mols = [parse_smiles(s) for s in PLAIN_MOLECULES]
    return build_vocab(mols, target_size=40)


@pytest.fixture(scope="session")
def graph_records(small_vocab):
    """GraphRecords for the plain molecules, 64-bit fingerprints."""
    fgs = default_library()
    return [
        _graph_record(MoleculeRecord(smiles=s, mol=parse_smiles(s)), small_vocab, fgs, 64)
        for s in PLAIN_MOLECULES
    ]


@pytest.fixture
def rng():
    return ad.make_rng(1234)


@pytest.fixture
def corpus_csv(tmp_path):
    path = tmp_path / "corpus.csv"
    MoleculeCorpusGenerator(seed=0).write_corpus(path, n=40)
    return path


@pytest.fixture
def task_csv(tmp_path):
    path = tmp_path / "task.csv"
    MoleculeCorpusGenerator(seed=1).write_task(path, n=40)
    return path


def numeric_grad(f, tensor, index, h: float = 1e-6) -> float:
    """Central difference of the scalar ``f()`` in one entry of ``tensor``."""
    original = tensor.data[index]
    tensor.data[index] = original + h
    up = f()
    tensor.data[index] = original - h
    down = f()
    tensor.data[index] = original
    return (up - down) / (2 * h)
