import numpy as np
import pytest

from app import autodiff as ad
from app.chem.perception import perceive
from app.chem.smiles import parse_smiles, random_smiles
from app.chg import build_chg, collate
from app.encoder import (
    N_RING_CLASSES,
    encode,
    encoder_params,
    init_encoder_params,
    init_pretrain_heads,
    init_readout,
    pool_by_type,
    pool_rows,
    predict_frag,
    predict_scaffold,
    predict_topo,
    project_contrastive,
    readout,
)
from app.exceptions import ShapeMismatch
from app.schemas import EncoderConfig
from tests.conftest import chg_of, numeric_grad, single_fragment


@pytest.fixture
def enc_cfg(small_config):
    return small_config.encoder


@pytest.fixture
def enc_params(enc_cfg):
    return init_encoder_params(enc_cfg, ad.make_rng(0))


def _rows_by_type(emb, batch):
    return {t: np.sort(emb.data[batch.rows[t]], axis=0) for t in batch.rows}


class TestEncode:
    """GIN message passing with a jumping-knowledge sum."""

    def test_output_shape(self, enc_cfg, enc_params):
        batch = collate([chg_of("CCO"), chg_of("c1ccccc1")])
        emb = encode(batch, enc_params, enc_cfg)
        assert emb.shape == (batch.n_nodes, enc_cfg.hidden)

    def test_eval_is_deterministic(self, enc_cfg, enc_params):
        batch = collate([chg_of("CC(=O)O")])
        first = encode(batch, enc_params, enc_cfg).data
        second = encode(batch, enc_params, enc_cfg).data
        assert np.array_equal(first, second)

    def test_training_dropout_uses_rng(self, enc_params):
        cfg = EncoderConfig(hidden=8, layers=2, dropout=0.5, proj_dim=8)
        batch = collate([chg_of("CCCC")])
        a = encode(batch, enc_params, cfg, training=True, rng=ad.make_rng(1)).data
        b = encode(batch, enc_params, cfg, training=True, rng=ad.make_rng(1)).data
        c = encode(batch, enc_params, cfg, training=True, rng=ad.make_rng(2)).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_layer_norm_option(self):
        cfg = EncoderConfig(hidden=8, layers=2, dropout=0.0, proj_dim=8, norm=True)
        params = init_encoder_params(cfg, ad.make_rng(0))
        assert "enc.gin1.gamma" in params
        emb = encode(collate([chg_of("CCO")]), params, cfg)
        assert np.all(np.isfinite(emb.data))

    def test_feature_width_checked(self, enc_params):
        cfg = EncoderConfig(hidden=8, layers=2, dropout=0.0, input_dim=12)
        with pytest.raises(ShapeMismatch):
            encode(collate([chg_of("CCO")]), enc_params, cfg)

    def test_isomorphic_graphs(self, enc_cfg, enc_params, plain_molecules):
        """Rewritten SMILES give the same multiset of node embeddings per type."""
        rng = np.random.default_rng(21)
        for smiles in plain_molecules:
            mol = parse_smiles(smiles)
            other = parse_smiles(random_smiles(mol, rng))
            batches = [
                collate([build_chg(perceive(m), single_fragment(m))]) for m in (mol, other)
            ]
            rows = [_rows_by_type(encode(b, enc_params, enc_cfg), b) for b in batches]
            for node_type in rows[0]:
                np.testing.assert_allclose(
                    rows[0][node_type], rows[1][node_type], rtol=1e-9, atol=1e-9
                )

    def test_batching_matches_single_graphs(self, enc_cfg, enc_params):
        """A graph's embeddings do not depend on its batch neighbours."""
        graphs = [chg_of("CCO"), chg_of("c1ccncc1")]
        together = encode(collate(graphs), enc_params, enc_cfg).data
        alone = encode(collate(graphs[1:]), enc_params, enc_cfg).data
        np.testing.assert_allclose(together[graphs[0].n_nodes :], alone, atol=1e-12)

    def test_encoder_prefix(self, enc_params, enc_cfg):
        heads = init_pretrain_heads(enc_cfg, 16, 64, ad.make_rng(0))
        merged = {**enc_params, **heads}
        assert set(encoder_params(merged)) == set(enc_params)


class TestPooling:
    """Per-type mean pooling and the 4-view readout."""

    def test_mean_of_identical_rows(self):
        emb = ad.Tensor(np.tile([1.0, 2.0, 3.0], (4, 1)))
        pooled = pool_rows(emb, np.arange(4), np.zeros(4, dtype=np.int64), 1)
        assert pooled.data.tolist() == [[1.0, 2.0, 3.0]]

    def test_two_row_mean(self):
        emb = ad.Tensor(np.array([[1.0, 0.0], [3.0, 4.0], [9.0, 9.0]]))
        pooled = pool_rows(emb, np.array([0, 1]), np.array([0, 0]), 2)
        assert pooled.data.tolist() == [[2.0, 2.0], [0.0, 0.0]]

    def test_methane_bond_pool_is_zero(self, enc_cfg, enc_params):
        batch = collate([chg_of("C")])
        emb = encode(batch, enc_params, enc_cfg)
        assert np.all(pool_by_type(emb, batch, "bond").data == 0.0)

    def test_readout_width(self, enc_cfg, enc_params):
        batch = collate([chg_of("CCO"), chg_of("C")])
        vec = readout(encode(batch, enc_params, enc_cfg), batch)
        assert vec.shape == (2, 4 * enc_cfg.hidden)

    def test_readout_dim_for_hidden_300(self):
        params = init_readout(EncoderConfig(hidden=300), 2, ad.make_rng(0))
        assert params["readout.W"].shape == (1200, 2)

    def test_unknown_type(self, enc_cfg, enc_params):
        batch = collate([chg_of("C")])
        with pytest.raises(ValueError):
            pool_by_type(encode(batch, enc_params, enc_cfg), batch, "ring")


class TestHeads:
    """Projection and prediction heads."""

    @pytest.fixture
    def heads(self, enc_cfg):
        return init_pretrain_heads(enc_cfg, 16, 64, ad.make_rng(3))

    def test_output_dims(self, heads, enc_cfg):
        vec = ad.Tensor(np.ones((2, enc_cfg.hidden)))
        assert predict_frag(vec, heads).shape == (2, 16)
        assert predict_topo(vec, heads).shape == (2, 64)
        ring, aro, flags = predict_scaffold(vec, heads)
        assert ring.shape == aro.shape == (2, N_RING_CLASSES)
        assert flags.shape == (2, 3)
        assert project_contrastive(vec, heads).shape == (2, enc_cfg.proj_dim)

    def test_zero_head_zero_logits(self, heads, enc_cfg):
        for name in ("head.frag.W", "head.topo.W"):
            heads[name].data[:] = 0.0
        vec = ad.Tensor(np.zeros((1, enc_cfg.hidden)))
        assert np.all(predict_frag(vec, heads).data == 0.0)
        assert np.all(predict_topo(vec, heads).data == 0.0)

    def test_separate_bond_projection(self):
        cfg = EncoderConfig(hidden=8, layers=1, proj_dim=4, share_projection=False)
        heads = init_pretrain_heads(cfg, 4, 64, ad.make_rng(0))
        vec = ad.Tensor(np.ones((1, 8)))
        atom_view = project_contrastive(vec, heads, "atom").data
        bond_view = project_contrastive(vec, heads, "bond").data
        assert not np.allclose(atom_view, bond_view)

    @pytest.mark.parametrize("head", ["head.frag", "head.topo", "head.ring", "proj.l1"])
    def test_gradient_through_head(self, heads, enc_cfg, head):
        vec = ad.Tensor(np.random.default_rng(4).normal(size=(3, enc_cfg.hidden)))

        def build():
            outputs = [
                predict_frag(vec, heads),
                predict_topo(vec, heads),
                *predict_scaffold(vec, heads),
                project_contrastive(vec, heads),
            ]
            return sum((ad.power(o, 2.0).sum() for o in outputs[1:]), outputs[0].sum())

        weight = heads[f"{head}.W"]
        with ad.Tape() as tape:
            loss = build()
        grad = ad.backward(tape, loss)[weight]
        f = lambda: build().item()  # noqa: E731
        for index in [(0, 0), (1, 1)]:
            assert np.isclose(grad[index], numeric_grad(f, weight, index), rtol=1e-5, atol=1e-7)
