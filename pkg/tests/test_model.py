"""Encoder/decoder forward semantics, gradients, FLOP law, checkpoints."""

import numpy as np
import pytest

from mimsieve.errors import ContractError, DimensionError
from mimsieve.model import (
    FlopBreakdown,
    MimModel,
    ModelConfig,
    flop_breakdown,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_positions,
)
from mimsieve.tensor import Tensor, backward


def tiny_cfg(**kwargs):
    base = dict(
        image_size=32,
        patch_size=8,
        channels=1,
        embed_dim=16,
        encoder_depth=1,
        decoder_depth=1,
        heads=2,
        mlp_ratio=2.0,
    )
    base.update(kwargs)
    return ModelConfig(**base)


def random_patches(cfg, seed=0, batch=None, dtype=np.float64):
    rng = np.random.default_rng(seed)
    shape = (cfg.tokens, cfg.patch_values) if batch is None else (batch, cfg.tokens, cfg.patch_values)
    return rng.uniform(0, 1, size=shape).astype(dtype)


class TestEmbed:
    def test_zero_weights_give_pos_embed(self):
        model = MimModel(tiny_cfg(), seed=0, dtype=np.float64)
        model.params["patch_embed.weight"].data[:] = 0.0
        model.params["patch_embed.bias"].data[:] = 0.0
        out = model.embed_all(random_patches(tiny_cfg()))
        np.testing.assert_allclose(out.data, model.params["pos_embed"].data, atol=1e-12)

    def test_content_permutation_changes_only_projection(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=1, dtype=np.float64)
        patches = random_patches(cfg, seed=2)
        perm = np.random.default_rng(3).permutation(cfg.tokens)
        base = model.embed_all(patches).data
        permuted = model.embed_all(patches[perm]).data
        pos = model.params["pos_embed"].data
        np.testing.assert_allclose(permuted - pos, (base - pos)[perm], atol=1e-12)

    def test_wrong_patch_count_rejected(self):
        model = MimModel(tiny_cfg(), seed=0)
        with pytest.raises(DimensionError):
            model.embed_all(np.zeros((7, tiny_cfg().patch_values), dtype=np.float32))

    def test_gradient_of_embed_weight(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=4, dtype=np.float64)
        patches = random_patches(cfg, seed=5)
        w = model.params["patch_embed.weight"]
        loss = __import__("mimsieve.tensor", fromlist=["tsum"]).tsum(model.embed_all(patches))
        backward(loss)
        analytic = w.grad.copy()
        h = 1e-6
        rng = np.random.default_rng(6)
        for _ in range(10):
            i, j = rng.integers(0, w.data.shape[0]), rng.integers(0, w.data.shape[1])
            orig = w.data[i, j]
            w.data[i, j] = orig + h
            fp = float(model.embed_all(patches).data.sum())
            w.data[i, j] = orig - h
            fm = float(model.embed_all(patches).data.sum())
            w.data[i, j] = orig
            num = (fp - fm) / (2 * h)
            assert abs(analytic[i, j] - num) / max(abs(num), 1e-9) < 1e-4


class TestEncode:
    def test_singleton_attention_ignores_scores(self):
        # with one token the softmax weight is identically 1, so scaling the
        # query projection cannot change the output
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=7, dtype=np.float64)
        row = Tensor(np.random.default_rng(8).standard_normal((1, cfg.embed_dim)))
        base = model.encode(row).data.copy()
        model.params["encoder.0.attn.wq"].data *= 100.0
        np.testing.assert_allclose(model.encode(row).data, base, atol=1e-9)

    def test_zeroed_weights_identity(self):
        cfg = tiny_cfg(encoder_depth=2)
        model = MimModel(cfg, seed=9, dtype=np.float64)
        for name, p in model.params.items():
            if ".attn.w" in name or ".mlp.w" in name:
                p.data[:] = 0.0
            if name.endswith((".qb", ".kb", ".vb", ".ob", ".b1", ".b2")):
                p.data[:] = 0.0
        model.params["encoder.norm.gamma"].data[:] = 1.0
        model.params["encoder.norm.beta"].data[:] = 0.0
        x = np.random.default_rng(10).standard_normal((5, cfg.embed_dim))
        out = model.encode(Tensor(x)).data
        # blocks are identity; only the final norm acts
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-6)
        np.testing.assert_allclose(out, expected, atol=1e-9)

    def test_empty_visible_rejected(self):
        model = MimModel(tiny_cfg(), seed=0)
        with pytest.raises(ContractError):
            model.encode(Tensor(np.zeros((0, 16), dtype=np.float32)))

    def test_attention_flops_scale_quadratically(self):
        cfg = ModelConfig(image_size=224, patch_size=16, embed_dim=64, heads=4)
        small = flop_breakdown(cfg, 28, 49).encoder_attention
        large = flop_breakdown(cfg, 196, 49).encoder_attention
        assert small / large == pytest.approx((28 / 196) ** 2, rel=0.01)


class TestDecode:
    def test_duplicating_all_keys_leaves_output_unchanged(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=11, dtype=np.float64)
        rng = np.random.default_rng(12)
        latents = rng.standard_normal((3, cfg.embed_dim))
        token_r = np.array([0, 5, 9])
        base = model.decode(Tensor(latents), token_r).data
        doubled = model.decode(Tensor(np.vstack([latents, latents])), token_r).data
        np.testing.assert_allclose(doubled, base, atol=1e-9)

    def test_empty_targets_rejected(self):
        model = MimModel(tiny_cfg(), seed=0)
        with pytest.raises(ContractError):
            model.decode(Tensor(np.zeros((2, 16), dtype=np.float32)), np.array([], dtype=int))

    def test_output_shape(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=13)
        latents = Tensor(np.zeros((4, cfg.embed_dim), dtype=np.float32))
        out = model.decode(latents, np.array([1, 2]))
        assert out.shape == (2, cfg.patch_values)

    def test_narrow_decoder_knob(self):
        cfg = tiny_cfg(decoder_dim=8, heads=2)
        model = MimModel(cfg, seed=14)
        latents = Tensor(np.zeros((4, cfg.embed_dim), dtype=np.float32))
        out = model.decode(latents, np.array([0, 3, 7]))
        assert out.shape == (3, cfg.patch_values)


class TestLoss:
    def test_zero_residual(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=15, dtype=np.float64)
        patches = random_patches(cfg, seed=16)
        token_r = np.array([2, 5])
        target = patches[token_r]
        loss = model.reconstruction_loss(Tensor(target), patches, token_r, norm_pix=False)
        assert loss.item() == 0.0

    def test_unit_offset_gives_one(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=17, dtype=np.float64)
        patches = random_patches(cfg, seed=18)
        token_r = np.array([0, 1, 7])
        pred = Tensor(patches[token_r] + 1.0)
        loss = model.reconstruction_loss(pred, patches, token_r, norm_pix=False)
        assert loss.item() == pytest.approx(1.0, rel=1e-12)

    def test_norm_pix_constant_patch_target_is_zero(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=19, dtype=np.float64)
        patches = np.full((cfg.tokens, cfg.patch_values), 0.37)
        token_r = np.array([3])
        pred = Tensor(np.zeros((1, cfg.patch_values)))
        loss = model.reconstruction_loss(pred, patches, token_r, norm_pix=True)
        # standardized constant target is all zeros, so loss equals mean(pred^2) = 0
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_permutation_invariance_of_targets(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=20, dtype=np.float64)
        patches = random_patches(cfg, seed=21)
        latents = model.encode(model.embed_all(patches))
        order = np.array([1, 4, 9, 12])
        shuffled = order[[2, 0, 3, 1]]
        l1 = model.reconstruction_loss(model.decode(latents, order), patches, order)
        l2 = model.reconstruction_loss(model.decode(latents, shuffled), patches, shuffled)
        assert l1.item() == pytest.approx(l2.item(), rel=1e-12)


class TestFullPipelineGradients:
    def test_gradcheck_20_seeds(self):
        cfg = tiny_cfg()
        for seed in range(20):
            model = MimModel(cfg, seed=seed, dtype=np.float64)
            patches = random_patches(cfg, seed=100 + seed)
            rng = np.random.default_rng(200 + seed)
            perm = rng.permutation(cfg.tokens)
            encode_idx = np.sort(perm[:4])
            token_r = np.sort(perm[4:8])

            loss = model.forward_loss(patches, encode_idx, token_r)
            backward(loss)

            def loss_value():
                return float(model.forward_loss(patches, encode_idx, token_r).data)

            h = 1e-5
            checked = 0
            for name, p in model.trainable_params().items():
                assert p.grad is not None, f"missing grad for {name}"
                flat = p.data.reshape(-1)
                gflat = p.grad.reshape(-1)
                for k in rng.choice(flat.size, size=min(2, flat.size), replace=False):
                    orig = flat[k]
                    flat[k] = orig + h
                    fp = loss_value()
                    flat[k] = orig - h
                    fm = loss_value()
                    flat[k] = orig
                    num = (fp - fm) / (2 * h)
                    # rel err < 1e-4 with an absolute floor below finite-difference noise
                    tol = max(1e-4 * max(abs(num), abs(gflat[k])), 1e-9)
                    assert abs(gflat[k] - num) < tol, f"{name}[{k}] seed {seed}"
                    checked += 1
            assert checked > 30

    def test_encoder_never_reads_masked_content(self):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=30, dtype=np.float64)
        patches = random_patches(cfg, seed=31)
        encode_idx = np.array([0, 3, 6, 9])
        masked = np.setdiff1d(np.arange(cfg.tokens), encode_idx)

        def encode_output(p):
            emb = model.embed_all(p)
            vis = __import__("mimsieve.tensor", fromlist=["take_rows"]).take_rows(emb, encode_idx)
            return model.encode(vis).data

        base = encode_output(patches)
        perturbed = patches.copy()
        perturbed[masked] += np.random.default_rng(32).uniform(0.1, 0.5, size=(masked.size, cfg.patch_values))
        after = encode_output(perturbed)
        assert np.array_equal(base, after)  # bitwise


class TestCheckpoint:
    def test_roundtrip_byte_identical(self, tmp_path):
        model = MimModel(tiny_cfg(), seed=40)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        model.save(p1)
        arrays, version = load_checkpoint(p1)
        assert version == 1
        save_checkpoint(p2, arrays)
        assert p1.read_bytes() == p2.read_bytes()

    def test_magic_and_header(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_checkpoint(path, {"x": np.arange(4, dtype=np.float32)})
        blob = path.read_bytes()
        assert blob[:4] == b"SMAE"
        version, count = np.frombuffer(blob[4:12], dtype="<u4")
        assert (version, count) == (1, 1)

    def test_loaded_model_matches(self, tmp_path):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=41)
        path = tmp_path / "d.ckpt"
        model.save(path)
        again = MimModel.load(path, cfg)
        for name, p in model.params.items():
            np.testing.assert_array_equal(p.data, again.params[name].data)

    def test_shape_mismatch_rejected(self, tmp_path):
        cfg = tiny_cfg()
        model = MimModel(cfg, seed=42)
        arrays = model.state_arrays()
        arrays["head.bias"] = np.zeros(3, dtype=np.float32)
        path = tmp_path / "e.ckpt"
        save_checkpoint(path, arrays)
        with pytest.raises(ContractError):
            MimModel.load(path, cfg)


class TestPositions:
    def test_deterministic_in_n_and_d(self):
        np.testing.assert_array_equal(sinusoidal_positions(16, 8), sinusoidal_positions(16, 8))

    def test_rows_distinct(self):
        pos = sinusoidal_positions(64, 16)
        assert len({tuple(np.round(r, 9)) for r in pos}) == 64


class TestFlops:
    def test_selective_vs_baseline_decoder_ratio(self):
        cfg = ModelConfig(image_size=224, patch_size=16, embed_dim=64, heads=4)
        sel = flop_breakdown(cfg, 28, 49)
        base = flop_breakdown(cfg, 49, 147)
        assert sel.encoder_attention / base.encoder_attention <= (29 / 49) ** 2
        assert isinstance(sel, FlopBreakdown)
        assert sel.total < base.total
