"""Decoder substrate: exact gradients, causality, determinism, checkpoint format."""

import numpy as np
import pytest

from qfat.backbone import (
    CHECKPOINT_MAGIC,
    Decoder,
    ParameterStore,
    SequenceBatch,
    load_checkpoint,
    save_checkpoint,
)
from qfat.gradcheck import check_param_gradients, fd_gradient, rel_error


def tiny_decoder(dtype=np.float64, dropout=0.0, layers=1, heads=2, embed=8, max_len=4,
                 seed=0, randomize_pos: bool = True):
    rng = np.random.default_rng(seed)
    store = ParameterStore(dtype)
    dec = Decoder(store, "dec", layers=layers, heads=heads, embed_dim=embed,
                  max_len=max_len, dropout=dropout, rng=rng)
    if randomize_pos:
        store.params["dec.pos_emb"][...] = (0.1 * rng.standard_normal((max_len, embed))
                                            ).astype(dtype)
    return dec, store


class TestParameterStore:
    def test_rejects_duplicate_names(self):
        store = ParameterStore()
        store.add("w", np.zeros(3))
        with pytest.raises(ValueError):
            store.add("w", np.zeros(3))

    def test_grad_shapes_match(self):
        store = ParameterStore()
        store.add("w", np.zeros((2, 3)))
        with pytest.raises(ValueError):
            store.add_grad("w", np.zeros((3, 2)))

    def test_deterministic_order(self):
        store = ParameterStore()
        for name in ["b", "a", "c"]:
            store.add(name, np.zeros(1))
        assert store.names() == ["b", "a", "c"]


class TestSequenceBatch:
    def test_mask_strictly_causal(self):
        batch = SequenceBatch(np.zeros((2, 5, 4), dtype=np.float32))
        mask = batch.causal_mask
        assert mask.shape == (5, 5)
        for t in range(5):
            for s in range(5):
                assert mask[t, s] == (s <= t)


class TestForward:
    def test_zero_input_zero_projections_gives_zeros(self):
        dec, store = tiny_decoder(randomize_pos=False)
        # zero the residual-branch output projections
        for name in store.names():
            if name.endswith("attn.proj.w") or name.endswith("mlp.proj.w"):
                store.params[name][...] = 0.0
        y = dec.forward(np.zeros((2, 4, 8)))
        assert np.array_equal(y, np.zeros_like(y))

    def test_causality(self, rng):
        dec, _ = tiny_decoder(layers=2)
        x = rng.standard_normal((2, 4, 8))
        y0 = dec.forward(x)
        for t in range(4):
            xp = x.copy()
            xp[:, t, :] += 1.0
            yp = dec.forward(xp)
            assert np.array_equal(y0[:, :t], yp[:, :t])
            assert not np.allclose(y0[:, t], yp[:, t])

    def test_deterministic_eval_mode(self, rng):
        dec, _ = tiny_decoder()
        x = rng.standard_normal((3, 4, 8))
        assert np.array_equal(dec.forward(x), dec.forward(x))

    def test_train_mode_deterministic_given_rng(self, rng):
        dec, _ = tiny_decoder(dropout=0.3)
        x = rng.standard_normal((3, 4, 8))
        a = dec.forward(x, train_mode=True, rng=np.random.default_rng(5))
        b = dec.forward(x, train_mode=True, rng=np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_dropout_requires_rng(self, rng):
        dec, _ = tiny_decoder(dropout=0.3)
        with pytest.raises(ValueError):
            dec.forward(rng.standard_normal((1, 4, 8)), train_mode=True)

    def test_rejects_bad_shapes(self, rng):
        dec, _ = tiny_decoder()
        with pytest.raises(ValueError):
            dec.forward(rng.standard_normal((2, 4, 7)))
        with pytest.raises(ValueError):
            dec.forward(rng.standard_normal((2, 9, 8)))  # beyond max_len

    def test_embed_dim_divisibility_enforced(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            Decoder(ParameterStore(), "d", layers=1, heads=3, embed_dim=8,
                    max_len=4, dropout=0.0, rng=rng)

    def test_batch_permutation_covariance(self, rng):
        dec, _ = tiny_decoder()
        x = rng.standard_normal((4, 4, 8))
        y = dec.forward(x)
        perm = np.array([2, 0, 3, 1])
        assert np.array_equal(dec.forward(x[perm]), y[perm])

    def test_attention_rows_sum_to_one(self, rng):
        dec, _ = tiny_decoder()
        dec.forward(rng.standard_normal((2, 4, 8)))
        attn = dec.blocks[0].attn.last_attn
        assert attn.shape == (2, 2, 4, 4)
        assert np.allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
        # strictly causal: no weight above the diagonal
        assert np.all(attn[..., np.triu_indices(4, 1)[0], np.triu_indices(4, 1)[1]] == 0)

    def test_layernorm_output_statistics(self, rng):
        dec, _ = tiny_decoder(embed=16, heads=2)
        y = dec.forward(rng.standard_normal((3, 4, 16)))
        assert np.max(np.abs(y.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(y.var(axis=-1) - 1.0)) < 1e-4


class TestBackward:
    def test_single_linear_layer_closed_form(self, rng):
        from qfat.backbone import Linear

        store = ParameterStore(np.float64)
        lin = Linear(store, "lin", 3, 2, rng)
        x = rng.standard_normal((5, 3))
        lin.forward(x)
        lin.backward(np.ones((5, 2)))  # loss = sum of outputs
        assert np.allclose(store.grads["lin.w"], x.sum(axis=0)[:, None] @ np.ones((1, 2)))
        assert np.allclose(store.grads["lin.b"], 5.0)

    def test_backward_before_forward_rejected(self):
        dec, _ = tiny_decoder()
        with pytest.raises(RuntimeError):
            dec.backward(np.zeros((1, 4, 8)))

    def test_zero_upstream_gives_zero_grads(self, rng):
        dec, store = tiny_decoder()
        dec.forward(rng.standard_normal((2, 4, 8)))
        store.zero_grads()
        dec.backward(np.zeros((2, 4, 8)))
        assert all(np.all(g == 0) for g in store.grads.values())

    def test_gradcheck_double(self, rng):
        dec, store = tiny_decoder(np.float64, layers=1, heads=2, embed=8)
        x = rng.standard_normal((2, 4, 8))
        w = rng.standard_normal((2, 4, 8))
        store.zero_grads()
        dec.forward(x)
        gx = dec.backward(w)
        errs = check_param_gradients(lambda: float(np.sum(dec.forward(x) * w)),
                                     store.params, store.grads,
                                     np.random.default_rng(1),
                                     coords_per_param=4, step=1e-6)
        assert max(errs.values()) < 1e-5
        fd = fd_gradient(lambda v: float(np.sum(dec.forward(v.reshape(2, 4, 8)) * w)),
                         x.ravel(), 1e-6).reshape(2, 4, 8)
        assert rel_error(fd, gx) < 1e-5

    def test_gradcheck_single_precision(self, rng):
        dec, store = tiny_decoder(np.float32)
        x = rng.standard_normal((2, 4, 8)).astype(np.float32)
        w = rng.standard_normal((2, 4, 8)).astype(np.float32)
        store.zero_grads()
        dec.forward(x)
        dec.backward(w)
        errs = check_param_gradients(
            lambda: float(np.sum(dec.forward(x).astype(np.float64) * w)),
            store.params, store.grads, np.random.default_rng(1),
            coords_per_param=4, step=1e-2)
        assert max(errs.values()) < 1e-3

    def test_gradcheck_with_dropout_path(self, rng):
        # fixed dropout rng makes the dropped network a deterministic function
        dec, store = tiny_decoder(np.float64, dropout=0.25)
        x = rng.standard_normal((2, 4, 8))
        w = rng.standard_normal((2, 4, 8))

        def loss():
            return float(np.sum(dec.forward(x, train_mode=True,
                                            rng=np.random.default_rng(7)) * w))

        store.zero_grads()
        dec.forward(x, train_mode=True, rng=np.random.default_rng(7))
        dec.backward(w)
        errs = check_param_gradients(loss, store.params, store.grads,
                                     np.random.default_rng(2),
                                     coords_per_param=3, step=1e-6)
        assert max(errs.values()) < 1e-5

    def test_per_layer_type_coordinate_sweep(self, rng):
        # 100 random coordinates per layer type on a randomized tiny model
        dec, store = tiny_decoder(np.float64, layers=2, heads=2, embed=8, seed=3)
        x = rng.standard_normal((2, 4, 8))
        w = rng.standard_normal((2, 4, 8))
        store.zero_grads()
        dec.forward(x)
        dec.backward(w)
        groups: dict[str, list[str]] = {}
        for name in store.names():
            kind = name.split(".")[-2] if name.count(".") >= 2 else name
            groups.setdefault(kind, []).append(name)
        check_rng = np.random.default_rng(4)
        for kind, names in groups.items():
            errs = check_param_gradients(
                lambda: float(np.sum(dec.forward(x) * w)), store.params, store.grads,
                check_rng, names=names,
                coords_per_param=max(1, 100 // len(names)), step=1e-6)
            assert max(errs.values()) < 1e-5, kind


class TestCheckpointFormat:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        _, store = tiny_decoder(np.float32, seed=9)
        path = tmp_path / "model.qfat"
        save_checkpoint(store, str(path))
        loaded = load_checkpoint(str(path))
        assert loaded.names() == store.names()
        for name in store.names():
            assert np.array_equal(loaded.params[name], store.params[name])
            assert loaded.params[name].dtype == np.float32
        # byte-stable: saving the loaded store reproduces the file exactly
        path2 = tmp_path / "model2.qfat"
        save_checkpoint(loaded, str(path2))
        assert path.read_bytes() == path2.read_bytes()

    def test_header_layout(self, tmp_path):
        store = ParameterStore(np.float32)
        store.add("w", np.arange(6, dtype=np.float32).reshape(2, 3))
        path = tmp_path / "one.qfat"
        save_checkpoint(store, str(path))
        blob = path.read_bytes()
        assert blob[:4] == CHECKPOINT_MAGIC
        assert int.from_bytes(blob[4:8], "little") == 1       # version
        assert int.from_bytes(blob[8:12], "little") == 1      # count
        assert int.from_bytes(blob[12:14], "little") == 1     # name length
        assert blob[14:15] == b"w"
        assert blob[15] == 2                                  # rank
        dims = np.frombuffer(blob[16:24], dtype="<u4")
        assert list(dims) == [2, 3]
        payload = np.frombuffer(blob[24:], dtype="<f4")
        assert np.array_equal(payload.reshape(2, 3), store.params["w"])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.qfat"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "v9.qfat"
        path.write_bytes(CHECKPOINT_MAGIC + (9).to_bytes(4, "little") + (0).to_bytes(4, "little"))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(str(path))

    def test_truncated_payload_rejected(self, tmp_path):
        _, store = tiny_decoder(np.float32)
        path = tmp_path / "trunc.qfat"
        save_checkpoint(store, str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(str(path))

    def test_double_store_rejected(self, tmp_path):
        _, store = tiny_decoder(np.float64)
        with pytest.raises(ValueError):
            save_checkpoint(store, str(tmp_path / "d.qfat"))
