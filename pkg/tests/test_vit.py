import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmq import quant, tensor as T, vit
from pmq.quant import QuantContext, QuantParams

import reference as R
from conftest import TINY, random_params


def _x(cfg, batch, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal((batch, cfg.patches, cfg.patch_dim)).astype(dtype)


class TestConfig:
    def test_heads_must_divide(self):
        with pytest.raises(ValueError):
            vit.ViTConfig(embed_dim=6, heads=4)

    def test_needs_two_patches(self):
        with pytest.raises(ValueError):
            vit.ViTConfig(patches=1)

    def test_census_partitions_parameters(self):
        for gran in ("block", "matrix"):
            census = vit.component_census(TINY, gran)
            owned = [p for spec in census.values() for p in spec.params]
            assert sorted(owned) == sorted(vit.param_shapes(TINY))
            assert list(census) == list(vit.component_census(TINY, gran))

    def test_block_census_kinds(self):
        labels = [c.label for c in vit.component_census(TINY)]
        assert labels == ["patch_embed", "msa.0", "mlp.0", "msa.1", "mlp.1", "head"]

    def test_params_shape_checked(self):
        p = random_params(TINY)
        with pytest.raises(T.DimensionError):
            p.with_arrays({"head.w": np.zeros((3, 3))})


class TestMSA:
    def test_zero_query_key_gives_uniform_attention(self):
        cfg = vit.ViTConfig(depth=1, embed_dim=4, heads=1, mlp_dim=4, patches=5, num_classes=2, patch_dim=3)
        p = random_params(cfg, 1)
        p = p.with_arrays({"blocks.0.wq": np.zeros((4, 4)), "blocks.0.wk": np.zeros((4, 4))})
        x = np.random.default_rng(2).standard_normal((5, 4))
        trace = vit.ForwardTrace()
        out = vit.msa_forward(x, 0, p, trace=trace).data
        np.testing.assert_allclose(trace.attn[0], np.full((1, 5, 5), 0.2))
        expected = (x @ p.arrays["blocks.0.wv"]).mean(axis=0) @ p.arrays["blocks.0.wo"]
        np.testing.assert_allclose(out, np.broadcast_to(expected, (5, 4)), atol=1e-12)

    def test_single_patch(self):
        p = random_params(TINY, 3)
        x = np.random.default_rng(4).standard_normal((1, 4))
        trace = vit.ForwardTrace()
        out = vit.msa_forward(x, 1, p, trace=trace).data
        np.testing.assert_array_equal(trace.attn[0], np.ones((2, 1, 1)))
        np.testing.assert_allclose(out, x @ p.arrays["blocks.1.wv"] @ p.arrays["blocks.1.wo"], atol=1e-12)

    def test_matches_reference(self):
        p = random_params(TINY, 5, dtype=np.float32)
        x = np.random.default_rng(6).standard_normal((3, 4)).astype(np.float32)
        trace = vit.ForwardTrace()
        out = vit.msa_forward(x, 0, p, trace=trace).data
        ref, maps = R.msa(x.astype(np.float64), {k: v.astype(np.float64) for k, v in p.arrays.items()}, 0, 2)
        np.testing.assert_allclose(out, ref, atol=1e-5)
        np.testing.assert_allclose(trace.attn[0], maps, atol=1e-6)

    def test_width_mismatch(self):
        with pytest.raises(T.DimensionError):
            vit.msa_forward(np.zeros((3, 5)), 0, random_params(TINY))


class TestBlock:
    def test_zero_weights_return_normalized_input(self):
        p = random_params(TINY)
        zeros = {k: np.zeros_like(v) for k, v in p.arrays.items() if k.startswith("blocks.0.")}
        zeros["blocks.0.ln.gamma"] = np.ones(4)
        p = p.with_arrays(zeros)
        x = np.random.default_rng(0).standard_normal((3, 4))
        trace = vit.ForwardTrace()
        out = vit.block_forward(x, 0, p, trace=trace).data
        np.testing.assert_allclose(out, R.layernorm(x, 1.0, 0.0, TINY.ln_eps), atol=1e-12)
        np.testing.assert_array_equal(out, trace.z[0])

    @pytest.mark.parametrize("shape", [(3, 4), (2, 3, 4)])
    def test_shape(self, shape):
        out = vit.block_forward(np.ones(shape), 1, random_params(TINY))
        assert out.shape == shape

    def test_matches_reference(self):
        p = random_params(TINY, 8, dtype=np.float32)
        x = np.random.default_rng(9).standard_normal((3, 4)).astype(np.float32)
        a64 = {k: v.astype(np.float64) for k, v in p.arrays.items()}
        ref = R.block(x.astype(np.float64), a64, 1, 2, TINY.ln_eps)
        np.testing.assert_allclose(vit.block_forward(x, 1, p).data, ref, atol=1e-5)


class TestModel:
    def test_trivial_config(self):
        cfg = vit.ViTConfig(depth=1, embed_dim=2, heads=1, mlp_dim=2, patches=2, num_classes=2, patch_dim=2)
        p = vit.ViTParams.init(cfg, np.random.default_rng(0))
        logits, trace = vit.model_forward(_x(cfg, 1), p)
        assert logits.shape == (1, 2) and np.all(np.isfinite(logits.data))
        np.testing.assert_allclose(trace.attn[0].sum(axis=-1), 1.0, atol=1e-6)

    def test_duplicate_rows(self):
        p = random_params(TINY, dtype=np.float32)
        x = _x(TINY, 1, dtype=np.float32)
        logits, _ = vit.model_forward(np.concatenate([x, _x(TINY, 1, 5, np.float32), x]), p)
        np.testing.assert_array_equal(logits.data[0], logits.data[2])

    def test_matches_reference(self):
        cfg = vit.ViTConfig()
        p = random_params(cfg, 11, std=0.2, dtype=np.float32)
        x = _x(cfg, 6, dtype=np.float32)
        np.testing.assert_allclose(vit.model_forward(x, p)[0].data, R.logits(x, p.arrays, cfg), atol=1e-4)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 3), st.sampled_from([(2, 1), (4, 2), (6, 3), (4, 4)]), st.integers(2, 5),
           st.integers(0, 2**31 - 1))
    def test_reference_property(self, depth, dh, n, seed):
        d, heads = dh
        cfg = vit.ViTConfig(depth=depth, embed_dim=d, heads=heads, mlp_dim=3, patches=n, num_classes=3, patch_dim=2)
        p = random_params(cfg, seed % 1000)
        x = _x(cfg, 2, seed % 997)
        logits, trace = vit.model_forward(x, p)
        np.testing.assert_allclose(logits.data, R.logits(x, p.arrays, cfg), atol=1e-10)
        for a in trace.attn:
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_input_shape_checked(self):
        with pytest.raises(T.DimensionError):
            vit.model_forward(np.zeros((2, 4, 3)), random_params(TINY))

    def test_patch_permutation_invariance(self):
        p = random_params(vit.ViTConfig(), 12, std=0.2, dtype=np.float32)
        x = _x(p.config, 4, dtype=np.float32)
        perm = np.random.default_rng(1).permutation(p.config.patches)
        q = p.with_arrays({"pos_embed": p.arrays["pos_embed"][perm]})
        a = vit.model_forward(x, p)[0].data
        b = vit.model_forward(x[:, perm], q)[0].data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_passthrough_context_is_bit_identical(self):
        p = random_params(vit.ViTConfig(), 13, std=0.2, dtype=np.float32)
        x = _x(p.config, 5, dtype=np.float32)
        ident = QuantParams.identity()
        rec = quant.ActivationRecorder()
        vit.model_forward(x, p, rec)
        ctx = QuantContext({m: ident for m in vit.quantized_matrices(p.config)},
                           {site: ident for site in rec.records},
                           patch_bits={l: (32,) * p.config.patches for l in range(p.config.depth)},
                           quantize_attn=True)
        assert vit.model_forward(x, p, ctx)[0].data.tobytes() == vit.model_forward(x, p)[0].data.tobytes()

    def test_exact_grid_weights_are_bit_identical(self):
        rng = np.random.default_rng(14)
        p = random_params(TINY, 14, dtype=np.float32)
        mats = vit.quantized_matrices(TINY)
        p = p.with_arrays({m: rng.integers(-3, 4, size=p.arrays[m].shape).astype(np.float32) for m in mats})
        ctx = QuantContext({m: QuantParams(1.0, 0, 8, True) for m in mats})
        x = _x(TINY, 3, dtype=np.float32)
        assert vit.model_forward(x, p, ctx)[0].data.tobytes() == vit.model_forward(x, p)[0].data.tobytes()

    def test_quantized_path_differs_at_low_bits(self):
        p = random_params(TINY, 15, dtype=np.float32)
        ctx = QuantContext({m: quant.weight_params(p.arrays[m], 2) for m in vit.quantized_matrices(TINY)})
        x = _x(TINY, 3, dtype=np.float32)
        assert not np.allclose(vit.model_forward(x, p, ctx)[0].data, vit.model_forward(x, p)[0].data)


class TestPerSampleGradients:
    def test_batch_of_one(self, tiny_params):
        x, y = _x(TINY, 1), [2]
        (g,) = vit.per_sample_gradients(x, y, tiny_params)
        _, ref = vit.loss_and_grads(x, y, tiny_params)
        for k in g:
            np.testing.assert_allclose(g[k], ref[k], atol=1e-14)

    def test_identical_samples(self, tiny_params):
        x = np.repeat(_x(TINY, 1), 2, axis=0)
        g0, g1 = vit.per_sample_gradients(x, [1, 1], tiny_params)
        for k in g0:
            np.testing.assert_array_equal(g0[k], g1[k])

    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_sum_equals_batch_gradient(self, dtype):
        p = random_params(TINY, 21, dtype=dtype)
        x, y = _x(TINY, 4, 3), [0, 1, 2, 1]
        per = vit.per_sample_gradients(x, y, p)
        _, batch = vit.loss_and_grads(x, y, p, reduction="sum")
        for k in batch:
            np.testing.assert_allclose(sum(g[k].astype(np.float64) for g in per), batch[k], atol=1e-5)

    def test_label_out_of_range(self, tiny_params):
        with pytest.raises(ValueError):
            vit.per_sample_gradients(_x(TINY, 2), [0, 3], tiny_params)


def _separable(n=128, seed=0):
    """Two classes that differ in the sign of one patch feature."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = 0.3 * rng.standard_normal((n, TINY.patches, TINY.patch_dim))
    x[:, 0, 0] += np.where(y == 1, 2.0, -2.0)
    return x.astype(np.float32), y


class TestTrain:
    def setup_method(self):
        self.cfg = vit.ViTConfig(depth=1, embed_dim=4, heads=2, mlp_dim=6, patches=3, num_classes=2, patch_dim=3)
        self.params = vit.ViTParams.init(self.cfg, np.random.default_rng(0))

    def test_zero_lr_leaves_params(self):
        x, y = _separable(32)
        res = vit.train_toy(self.params, x, y, epochs=2, lr=0.0)
        for k, v in self.params.arrays.items():
            np.testing.assert_array_equal(res.params.arrays[k], v)

    def test_zero_epochs_returns_init(self):
        x, y = _separable(32)
        res = vit.train_toy(self.params, x, y, epochs=0, lr=0.1)
        for k, v in self.params.arrays.items():
            np.testing.assert_array_equal(res.params.arrays[k], v)
        assert res.epoch_losses == []

    def test_separable_reaches_accuracy(self):
        x, y = _separable()
        res = vit.train_toy(self.params, x, y, epochs=30, lr=0.1, batch_size=16)
        assert res.train_accuracy >= 0.95
        assert res.final_loss <= 0.5 * res.initial_loss

    def test_divergence_raises_with_last_valid(self):
        x, y = _separable(32)
        with pytest.raises(vit.TrainingError) as err, np.errstate(all="ignore"):
            vit.train_toy(self.params, x * 1e30, y, epochs=3, lr=1e30, clip_norm=None, schedule="constant")
        assert all(np.isfinite(a).all() for a in err.value.last_valid.arrays.values())
