import numpy as np
import pytest

from app import autodiff as ad
from app.chem.functional_groups import default_library
from app.chem.labels import compute_targets
from app.chem.perception import perceive
from app.chem.psm_vocab import Decomposition
from app.chem.smiles import parse_smiles
from app.chg import build_chg, collate
from app.encoder import encode, init_encoder_params, init_pretrain_heads
from app.exceptions import DimensionMismatch, NoValidFragments
from app.objectives import (
    FragmentViews,
    active_losses,
    fragment_views,
    loss_ab,
    loss_frag,
    loss_scaf,
    loss_topo,
    loss_total,
    pretrain_losses,
    stack_targets,
)
from app.schemas import AblationFlags, LossWeights
from tests.conftest import chg_of, numeric_grad, random_decomposition

LN2 = np.log(2.0)


def _views(za, zb):
    za, zb = np.asarray(za, dtype=float), np.asarray(zb, dtype=float)
    return FragmentViews(za=ad.Tensor(za), zb=ad.Tensor(zb), frag_ids=np.arange(len(za)))


class TestContrastive:
    """Symmetric NT-Xent between atom and bond views."""

    def test_single_pair_is_zero(self):
        assert loss_ab(_views([[1.0, 2.0]], [[0.5, -1.0]]), 0.1).item() == pytest.approx(0.0)

    def test_two_orthogonal_pairs(self):
        eye = np.eye(2)
        value = loss_ab(_views(eye, eye), 1.0).item()
        assert value == pytest.approx(np.log(1.0 + np.exp(-1.0)))
        assert value == pytest.approx(0.31326, abs=1e-5)

    def test_symmetric_in_views(self):
        rng = np.random.default_rng(0)
        za, zb = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        forward = loss_ab(_views(za, zb), 0.2).item()
        assert loss_ab(_views(zb, za), 0.2).item() == pytest.approx(forward)

    def test_rotation_invariant(self):
        rng = np.random.default_rng(1)
        za, zb = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
        expected = loss_ab(_views(za, zb), 0.5).item()
        assert loss_ab(_views(za @ q, zb @ q), 0.5).item() == pytest.approx(expected)

    def test_scale_invariant(self):
        rng = np.random.default_rng(2)
        za, zb = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        expected = loss_ab(_views(za, zb), 0.1).item()
        assert loss_ab(_views(3.0 * za, 0.5 * zb), 0.1).item() == pytest.approx(expected)

    def test_no_views(self):
        with pytest.raises(NoValidFragments):
            loss_ab(FragmentViews(za=None, zb=None, frag_ids=np.zeros(0, dtype=int)), 0.1)

    def test_mismatched_views(self):
        with pytest.raises(DimensionMismatch):
            loss_ab(_views(np.ones((2, 3)), np.ones((2, 4))), 0.1)


class TestFragmentViews:
    """Which fragments get an atom view and a bond view."""

    def _embed(self, chg, small_config):
        params = {
            **init_encoder_params(small_config.encoder, ad.make_rng(0)),
            **init_pretrain_heads(small_config.encoder, 16, 64, ad.make_rng(1)),
        }
        batch = collate([chg])
        return encode(batch, params, small_config.encoder), batch, params

    def test_single_atom_fragments_omitted(self, small_config):
        emb, batch, params = self._embed(chg_of("C"), small_config)
        assert fragment_views(emb, batch, params).n == 0

    def test_two_fragments(self, small_config):
        mol = parse_smiles("CCCC")
        d = Decomposition(fragments=((0, 1), (2, 3)), frag_of_atom=(0, 0, 1, 1))
        emb, batch, params = self._embed(build_chg(perceive(mol), d), small_config)
        views = fragment_views(emb, batch, params)
        assert views.n == 2
        assert views.za.shape == views.zb.shape == (2, small_config.encoder.proj_dim)


class TestPropertyLosses:
    """Closed forms of the fragment, fingerprint and scaffold losses."""

    def test_frag_zero_logits(self):
        labels = np.array([[1, 0, 1], [0, 0, 0]])
        value = loss_frag(ad.Tensor(np.zeros((2, 3))), labels).item()
        assert value == pytest.approx(3 * LN2)

    def test_frag_hand_case(self):
        value = loss_frag(ad.Tensor([[0.0, np.log(3.0)]]), np.array([[1, 1]])).item()
        assert value == pytest.approx(LN2 + np.log(4.0 / 3.0))
        assert value == pytest.approx(0.98083, abs=1e-5)

    def test_frag_confident_and_right(self):
        labels = np.array([[1, 0]])
        value = loss_frag(ad.Tensor([[40.0, -40.0]]), labels).item()
        assert value < 1e-15

    def test_frag_shape_checked(self):
        with pytest.raises(DimensionMismatch):
            loss_frag(ad.Tensor(np.zeros((2, 3))), np.zeros((2, 4)))

    def test_topo_zero_logits(self):
        assert loss_topo(ad.Tensor(np.zeros((1, 64))), np.ones((1, 64))).item() == pytest.approx(LN2)

    def test_topo_two_bits(self):
        value = loss_topo(ad.Tensor([[0.0, np.log(3.0)]]), np.array([[1, 1]])).item()
        assert value == pytest.approx((LN2 + np.log(4.0 / 3.0)) / 2)

    def test_scaf_zero_logits(self):
        value = loss_scaf(
            ad.Tensor(np.zeros((1, 9))),
            ad.Tensor(np.zeros((1, 9))),
            ad.Tensor(np.zeros((1, 3))),
            np.array([[1, 1, 0, 1, 0]]),
        ).item()
        assert value == pytest.approx(2 * np.log(9.0) + LN2)
        assert value == pytest.approx(5.0875, abs=1e-4)

    def test_scaf_counts_clamped(self):
        zeros9 = ad.Tensor(np.zeros((1, 9)))
        value = loss_scaf(zeros9, zeros9, ad.Tensor(np.zeros((1, 3))), np.array([[20, 12, 1, 1, 1]]))
        assert np.isfinite(value.item())

    def test_scaf_head_width_checked(self):
        with pytest.raises(DimensionMismatch):
            loss_scaf(
                ad.Tensor(np.zeros((1, 8))),
                ad.Tensor(np.zeros((1, 9))),
                ad.Tensor(np.zeros((1, 3))),
                np.zeros((1, 5)),
            )


class TestTotal:
    """Weighted combination and ablation variants."""

    def test_default_weights(self):
        terms = {name: ad.Tensor(1.0) for name in ("ab", "frag", "topo", "scaf")}
        assert loss_total(terms, LossWeights()).item() == pytest.approx(1.4)

    def test_all_zero_weights(self):
        terms = {name: ad.Tensor(5.0) for name in ("ab", "frag", "topo", "scaf")}
        weights = LossWeights(ab=0, frag=0, topo=0, scaf=0)
        assert loss_total(terms, weights).item() == 0.0

    def test_contrastive_only(self):
        weights = LossWeights(frag=0, topo=0, scaf=0)
        terms = {"ab": ad.Tensor(2.5), "frag": ad.Tensor(1.0), "topo": None, "scaf": None}
        assert loss_total(terms, weights).item() == pytest.approx(0.5)

    @pytest.mark.parametrize(
        "graph,loss,expected",
        [
            ("full", "full", ["ab", "frag", "topo", "scaf"]),
            ("atom", "full", ["topo", "scaf"]),
            ("hierarchical", "full", ["frag", "topo", "scaf"]),
            ("full", "no_ab", ["frag", "topo", "scaf"]),
            ("full", "no_frag", ["ab", "topo", "scaf"]),
            ("full", "no_topo", ["ab", "frag", "scaf"]),
            ("full", "no_scaf", ["ab", "frag", "topo"]),
            ("full", "no_graph_level", ["ab", "frag"]),
            ("full", "no_local", ["topo", "scaf"]),
        ],
    )
    def test_active_losses(self, graph, loss, expected):
        assert active_losses(AblationFlags(graph=graph, loss=loss)) == expected


class TestPretrainGradients:
    """Analytic gradients of the full pretraining loss on random small graphs."""

    CHECKED = ("enc.embed.W", "enc.gin1.mlp2.W", "proj.l2.W", "head.frag.W", "head.ring.W")

    def _batches(self, plain_molecules, n_graphs=20):
        rng = np.random.default_rng(17)
        fgs = default_library()
        records = []
        for smiles in plain_molecules[:n_graphs]:
            mol = parse_smiles(smiles)
            pm = perceive(mol)
            d = random_decomposition(mol, rng, merges=int(rng.integers(1, 5)))
            records.append((build_chg(pm, d), compute_targets(pm, d, fgs, 64)))
        return [records[i : i + 2] for i in range(0, len(records), 2)]

    def test_matches_finite_differences(self, small_config, plain_molecules):
        params = {
            **init_encoder_params(small_config.encoder, ad.make_rng(5)),
            **init_pretrain_heads(small_config.encoder, 16, 64, ad.make_rng(6)),
        }
        index_rng = np.random.default_rng(8)
        for pairs in self._batches(plain_molecules):
            graphs = [g for g, _ in pairs]
            batch = collate(graphs)
            targets = stack_targets(graphs, [t for _, t in pairs])

            def total():
                terms = pretrain_losses(batch, targets, params, small_config, training=False)
                return loss_total(terms, small_config.weights)

            with ad.Tape() as tape:
                loss = total()
            grads = ad.backward(tape, loss)
            f = lambda: total().item()  # noqa: E731
            for name in self.CHECKED:
                weight = params[name]
                index = tuple(int(index_rng.integers(s)) for s in weight.shape)
                analytic = grads.get(weight, np.zeros(weight.shape))[index]
                assert np.isclose(analytic, numeric_grad(f, weight, index), rtol=1e-4, atol=1e-6)
