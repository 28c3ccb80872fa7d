import numpy as np
import pytest
import torch

from ssomotion.encoding import (
    EmbedTable,
    ReductionLayer,
    SceneEncoder,
    SceneEncoderConfig,
    encode_scene,
    hash_embed,
    load_embed_table,
    reduce_table,
    save_embed_table,
    scatter_semantic,
    semantic_feature_maps,
)
from ssomotion.store import LabelVocab
from ssomotion.triplane import LocalSSO, SensorGridConfig, decompose_triplane

VOCAB = LabelVocab(("empty", "floor", "wall", "sofa"))


def toy_triplanes(seed=0, counts=(9, 9, 9), n_labels=3):
    rng = np.random.default_rng(seed)
    occ = rng.random(counts) < 0.2
    rgb = np.where(occ[..., None], rng.random(counts + (3,)), 0.0)
    lab = np.where(occ, rng.integers(1, n_labels + 1, counts), 0).astype(np.int32)
    cfg = SensorGridConfig(counts=counts, extents=(1.8, 1.8, 1.6))
    return decompose_triplane(LocalSSO(occ, rgb, lab), cfg)


class TestTables:
    def test_load_round_trip(self, tmp_path):
        table = hash_embed(VOCAB, dim_high=512, seed=3)
        p = tmp_path / "emb.txt"
        save_embed_table(table, p)
        back = load_embed_table(p, VOCAB)
        assert back.dim_high == 512
        for name in VOCAB.names:
            np.testing.assert_array_equal(back.rows[name], table.rows[name])

    def test_missing_label_named_in_error(self, tmp_path):
        table = hash_embed(LabelVocab(("empty", "floor", "wall")), dim_high=8)
        p = tmp_path / "emb.txt"
        save_embed_table(table, p)
        with pytest.raises(KeyError, match="sofa"):
            load_embed_table(p, VOCAB)

    def test_duplicate_row_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("EMB 2\nempty\t0 0\nempty\t1 1\n")
        with pytest.raises(ValueError, match="duplicate"):
            load_embed_table(p, LabelVocab(("empty",)))

    def test_dim_mismatch_rejected(self, tmp_path):
        p = tmp_path / "emb.txt"
        p.write_text("EMB 3\nempty\t0 0\n")
        with pytest.raises(ValueError, match="expected 3"):
            load_embed_table(p, LabelVocab(("empty",)))

    def test_hash_embed_deterministic(self):
        a = hash_embed(VOCAB, 64, seed=9)
        b = hash_embed(VOCAB, 64, seed=9)
        for name in VOCAB.names:
            np.testing.assert_array_equal(a.rows[name], b.rows[name])

    def test_hash_embed_unit_norm(self):
        t = hash_embed(VOCAB, 128, seed=1)
        for vec in t.rows.values():
            assert abs(np.linalg.norm(vec) - 1.0) < 1e-9

    def test_hash_embed_seeds_differ(self):
        a = hash_embed(VOCAB, 32, seed=0)
        b = hash_embed(VOCAB, 32, seed=1)
        assert any(not np.array_equal(a.rows[n], b.rows[n]) for n in VOCAB.names)


class TestReduceScatter:
    def test_identity_reduction(self):
        table = hash_embed(VOCAB, 16, seed=5)
        layer = ReductionLayer(np.eye(16), np.zeros(16))
        red = reduce_table(table, layer)
        for name in VOCAB.names:
            np.testing.assert_array_equal(red[name], table.rows[name])

    def test_zero_weights_all_bias(self):
        table = hash_embed(VOCAB, 16, seed=5)
        b = np.arange(4.0)
        red = reduce_table(table, ReductionLayer(np.zeros((4, 16)), b))
        for name in VOCAB.names:
            np.testing.assert_array_equal(red[name], b)

    def test_shape_mismatch(self):
        table = hash_embed(VOCAB, 16, seed=5)
        with pytest.raises(ValueError, match="width"):
            reduce_table(table, ReductionLayer.init(8, 4))

    def test_scatter_uniform_and_checkerboard(self):
        table = hash_embed(VOCAB, 8, seed=2)
        red = reduce_table(table, ReductionLayer.init(8, 4, seed=0))
        uniform = np.full((5, 7), 2, dtype=np.int32)
        out = scatter_semantic(uniform, red, VOCAB)
        np.testing.assert_array_equal(out, np.broadcast_to(red["wall"], (5, 7, 4)))
        board = np.indices((6, 6)).sum(axis=0) % 2 + 1
        out = scatter_semantic(board, red, VOCAB)
        np.testing.assert_array_equal(out[0, 0], red["floor"])
        np.testing.assert_array_equal(out[0, 1], red["wall"])

    def test_scatter_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        table = hash_embed(VOCAB, 8, seed=2)
        red = reduce_table(table, ReductionLayer.init(8, 4, seed=0))
        labels = rng.integers(0, 4, (11, 13)).astype(np.int32)
        out = scatter_semantic(labels, red, VOCAB)
        for i in range(11):
            for j in range(13):
                np.testing.assert_array_equal(out[i, j], red[VOCAB.name_of(labels[i, j])])

    def test_scatter_unknown_id(self):
        red = reduce_table(hash_embed(VOCAB, 8), ReductionLayer.init(8, 4))
        with pytest.raises(KeyError, match="label id 9"):
            scatter_semantic(np.array([[9]]), red, VOCAB)

    def test_scatter_reduce_commutation_exact(self):
        # reduce-then-scatter must equal scatter-then-reduce bit for bit:
        # this equality licenses doing the linear map once per label
        rng = np.random.default_rng(8)
        table = hash_embed(VOCAB, 32, seed=4)
        layer = ReductionLayer.init(32, 6, seed=1)
        labels = rng.integers(0, 4, (10, 10)).astype(np.int32)
        a = scatter_semantic(labels, reduce_table(table, layer), VOCAB)
        high = scatter_semantic(labels, table.rows, VOCAB)
        b = np.empty_like(a)
        for i in range(10):
            for j in range(10):
                b[i, j] = layer.weights @ high[i, j] + layer.bias
        np.testing.assert_array_equal(a, b)


class TestSceneEncoder:
    def _tokens(self, seed=0):
        torch.manual_seed(11)
        cfg = SceneEncoderConfig(dim_low=4, conv_width=8, family_dim=16, tokens=(8, 64))
        enc = SceneEncoder(cfg)
        maps = toy_triplanes(seed)
        table = hash_embed(VOCAB, 16, seed=2)
        red = reduce_table(table, ReductionLayer.init(16, 4, seed=3))
        sem = semantic_feature_maps(maps, red, VOCAB)
        return enc, maps, sem

    def test_output_shape_is_token_block(self):
        enc, maps, sem = self._tokens()
        tokens = encode_scene(enc, maps, sem)
        assert tokens.shape == (8, 64)

    def test_purity(self):
        enc, maps, sem = self._tokens()
        a = encode_scene(enc, maps, sem)
        b = encode_scene(enc, maps, sem)
        assert torch.equal(a, b)

    def test_vocab_permutation_invariance(self):
        torch.manual_seed(11)
        cfg = SceneEncoderConfig(dim_low=4, conv_width=8, family_dim=16)
        enc = SceneEncoder(cfg)
        maps = toy_triplanes(3)
        table = hash_embed(VOCAB, 16, seed=2)
        red = reduce_table(table, ReductionLayer.init(16, 4, seed=3))
        sem = semantic_feature_maps(maps, red, VOCAB)
        base = encode_scene(enc, maps, sem)

        # permute non-empty ids: floor<->sofa (1 <-> 3), rows follow names
        perm_vocab = LabelVocab(("empty", "sofa", "wall", "floor"))
        remap = {0: 0, 1: 3, 2: 2, 3: 1}
        perm_maps = toy_triplanes(3)
        for m in perm_maps.values():
            m.label = np.vectorize(remap.get)(m.label).astype(np.int32)
        perm_sem = semantic_feature_maps(perm_maps, red, perm_vocab)
        out = encode_scene(enc, perm_maps, perm_sem)
        assert torch.equal(base, out)

    def test_gradients_match_finite_differences(self):
        enc, maps, sem = self._tokens(seed=7)
        probe = torch.randn(8, 64, dtype=torch.float64, generator=torch.Generator().manual_seed(0))

        def loss_value():
            return (encode_scene(enc, maps, sem) * probe).sum()

        loss = loss_value()
        loss.backward()
        params = list(enc.parameters())
        rng = np.random.default_rng(0)
        eps = 1e-6
        diffs, analytic = [], []
        for p in params:
            flat = p.detach().reshape(-1)
            grad = p.grad.reshape(-1)
            for k in rng.choice(flat.numel(), size=min(6, flat.numel()), replace=False):
                orig = flat[k].item()
                with torch.no_grad():
                    flat[k] = orig + eps
                    up = loss_value().item()
                    flat[k] = orig - eps
                    down = loss_value().item()
                    flat[k] = orig
                diffs.append((up - down) / (2 * eps))
                analytic.append(grad[k].item())
        diffs, analytic = np.array(diffs), np.array(analytic)
        rel = np.linalg.norm(diffs - analytic) / max(np.linalg.norm(diffs), 1e-12)
        assert rel <= 1e-4

    def test_semfeat_shape_validated(self):
        enc, maps, sem = self._tokens()
        sem["+x"] = sem["+x"][:, :, :2]
        with pytest.raises(ValueError, match="shape"):
            encode_scene(enc, maps, sem)
