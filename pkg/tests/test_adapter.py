"""Tests for the attention adapter, refinement head, logits, and loss."""

import dataclasses

import numpy as np
import pytest

from fedadapt import qlora
from fedadapt import tensor as T
from fedadapt.adapter import (
    AdapterConfig,
    AdapterParams,
    adapter_forward,
    adapter_loss,
    attention_forward,
    ffn_forward,
    logits,
    refine,
)
from fedadapt.encoder import make_prototypes
from fedadapt.tensor import Matrix, ShapeMismatch, Tape

from oracles import (
    adapter_loss64,
    attention64,
    cross_entropy64,
    ffn64,
    finite_difference,
    refine64,
    relative_error,
    sigmoid64,
)


def make_params(dim=8, d_ff=16, seed=0, requires_grad=False, **cfg_kwargs):
    config = AdapterConfig(dim=dim, d_ff=d_ff, **cfg_kwargs)
    return AdapterParams.init(config, seed=seed, requires_grad=requires_grad)


def params_as_np(params):
    return {name: m.data.astype(np.float64) for name, m in params.named().items()}


class TestAdapterParams:
    def test_parameter_count_matches_config(self):
        config = AdapterConfig(dim=64, d_ff=128)
        params = AdapterParams.init(config, seed=0)
        total = sum(m.data.size for m in params.parameters())
        assert total == config.param_count == 3 * 64**2 + 64 * 128 + 128 + 128 * 64 + 64 + 64**2 + 64 + 1

    def test_init_deterministic(self):
        a = make_params(seed=5)
        b = make_params(seed=5)
        for n in a.named():
            assert np.array_equal(a.named()[n].data, b.named()[n].data)

    def test_log_s_initialized_to_ln_ten(self):
        assert make_params().log_s.item() == pytest.approx(np.log(10.0), rel=1e-6)

    def test_shape_mismatch_rejected(self):
        config = AdapterConfig(dim=8, d_ff=16)
        good = AdapterParams.init(config, seed=0)
        named = good.named()
        named["wq"] = Matrix(np.zeros((4, 4), dtype=np.float32))
        with pytest.raises(ShapeMismatch):
            AdapterParams.from_named(config, named)


class TestAttention:
    def test_single_row_softmax_is_value_projection(self):
        params = make_params()
        x = np.random.default_rng(0).standard_normal((1, 8)).astype(np.float32)
        out = attention_forward(params, Matrix(x))
        expected = x.astype(np.float64) @ params.wv.data.astype(np.float64)
        assert np.allclose(out.data, expected, atol=1e-6)

    def test_zero_query_key_gives_uniform_attention(self):
        params = make_params()
        params.wq.data = np.zeros_like(params.wq.data)
        params.wk.data = np.zeros_like(params.wk.data)
        rng = np.random.default_rng(1)
        x = rng.standard_normal((5, 8)).astype(np.float32)
        out = attention_forward(params, Matrix(x))
        v = x.astype(np.float64) @ params.wv.data.astype(np.float64)
        assert np.allclose(out.data, v.mean(axis=0, keepdims=True).repeat(5, axis=0), atol=1e-6)

    def test_matches_float64_oracle(self):
        params = make_params(seed=3)
        x = np.random.default_rng(2).standard_normal((3, 8)).astype(np.float32)
        out = attention_forward(params, Matrix(x))
        assert np.allclose(out.data, attention64(params_as_np(params), x.astype(np.float64)), atol=1e-5)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            attention_forward(make_params(), Matrix(np.zeros((2, 5), dtype=np.float32)))


class TestFfn:
    def test_zero_weights_give_bias(self):
        params = make_params()
        params.w1.data = np.zeros_like(params.w1.data)
        params.w2.data = np.zeros_like(params.w2.data)
        params.b2.data = np.arange(8, dtype=np.float32).reshape(1, 8)
        out = ffn_forward(params, Matrix(np.ones((3, 8), dtype=np.float32)))
        assert np.allclose(out.data, np.tile(np.arange(8), (3, 1)), atol=1e-7)

    def test_identity_sizing_transparent_on_nonnegative(self):
        config = AdapterConfig(dim=4, d_ff=4)
        params = AdapterParams.init(config, seed=0)
        eye = np.eye(4, dtype=np.float32)
        params.w1.data = eye.copy()
        params.w2.data = eye.copy()
        params.b1.data = np.zeros_like(params.b1.data)
        params.b2.data = np.zeros_like(params.b2.data)
        a = np.abs(np.random.default_rng(3).standard_normal((2, 4))).astype(np.float32)
        out = ffn_forward(params, Matrix(a))
        assert np.allclose(out.data, a, atol=1e-7)

    def test_matches_float64_oracle(self):
        params = make_params(seed=4)
        a = np.random.default_rng(4).standard_normal((3, 8)).astype(np.float32)
        out = ffn_forward(params, Matrix(a))
        assert np.allclose(out.data, ffn64(params_as_np(params), a.astype(np.float64)), atol=1e-5)


class TestRefine:
    def test_zero_gate_params_halve_input(self):
        params = make_params()
        params.wg.data = np.zeros_like(params.wg.data)
        f = np.random.default_rng(5).standard_normal((3, 8)).astype(np.float32)
        out = refine(params, Matrix(f))
        assert np.allclose(out.data, f / 2.0, atol=1e-6)

    def test_saturated_gate_passes_through(self):
        params = make_params()
        params.wg.data = np.zeros_like(params.wg.data)
        params.bg.data = np.full((1, 8), 20.0, dtype=np.float32)
        f = np.random.default_rng(6).standard_normal((2, 8)).astype(np.float32)
        out = refine(params, Matrix(f))
        assert np.allclose(out.data, f, atol=1e-6)

    def test_matches_float64_oracle(self):
        params = make_params(seed=7)
        f = np.random.default_rng(7).standard_normal((3, 8)).astype(np.float32)
        out = refine(params, Matrix(f))
        assert np.allclose(out.data, refine64(params_as_np(params), f.astype(np.float64)), atol=1e-5)


class TestAdapterForward:
    def test_output_rows_unit_norm(self):
        params = make_params(seed=8)
        x = np.random.default_rng(8).standard_normal((6, 8)).astype(np.float32)
        out = adapter_forward(params, Matrix(x))
        assert np.allclose(np.linalg.norm(out.data.astype(np.float64), axis=1), 1.0, atol=1e-5)

    def test_zero_parameters_give_normalized_half_input(self):
        # residuals: Att=0, r1=x, FFN=0, f=x, gate=0.5 -> normalize(x/2) = normalize(x)
        params = make_params()
        for name, m in params.named().items():
            m.data = np.zeros_like(m.data)
        x = np.random.default_rng(9).standard_normal((4, 8)).astype(np.float32)
        out = adapter_forward(params, Matrix(x))
        expected = x.astype(np.float64) / np.linalg.norm(x.astype(np.float64), axis=1, keepdims=True)
        assert np.isfinite(out.data).all()
        assert np.allclose(out.data, expected, atol=1e-5)

    def test_gradients_match_finite_differences(self):
        config = AdapterConfig(dim=5, d_ff=7)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        protos = make_prototypes(3, 5, seed=2).matrix
        labels = np.array([0, 1, 2, 0])
        params = AdapterParams.init(config, seed=11, requires_grad=True)
        with Tape() as tape:
            v = adapter_forward(params, Matrix(x))
            lg = logits(params, v, Matrix(protos))
            loss = adapter_loss(params, lg, labels)
            tape.backward(loss)

        names = list(params.named())

        def f64(arrays):
            p = dict(zip(names, arrays))
            return adapter_loss64(p, x.astype(np.float64), protos.astype(np.float64), labels)

        fd = finite_difference(f64, [params.named()[n].data for n in names], h=1e-3)
        for n, g in zip(names, fd):
            assert relative_error(params.named()[n].grad, g) < 1e-3, n


class TestLogits:
    def test_prototype_match_is_scaled_one_and_row_max(self):
        protos = make_prototypes(4, 16, seed=0)
        params = make_params(dim=16, d_ff=8)
        v = Matrix(protos.matrix[2:3])
        out = logits(params, v, protos)
        s = float(np.exp(params.log_s.item()))
        assert out.data[0, 2] == pytest.approx(s, rel=1e-5)
        assert out.data[0].argmax() == 2
        assert (out.data[0, 2] > np.delete(out.data[0], 2)).all()

    def test_unit_scale_gives_raw_cosines(self):
        protos = make_prototypes(4, 16, seed=1)
        params = make_params(dim=16, d_ff=8)
        params.log_s.data = np.zeros((1, 1), dtype=np.float32)
        rng = np.random.default_rng(1)
        v_raw = rng.standard_normal((3, 16))
        v_raw /= np.linalg.norm(v_raw, axis=1, keepdims=True)
        out = logits(params, Matrix(v_raw.astype(np.float32)), protos)
        expected = v_raw @ protos.matrix.astype(np.float64).T
        assert np.allclose(out.data, expected, atol=1e-5)

    def test_quantized_logits_within_block_scale_bound(self):
        params = make_params(dim=16, d_ff=8, quantize_logits=True, logit_bits=4, logit_block=8)
        protos = make_prototypes(4, 16, seed=2)
        rng = np.random.default_rng(3)
        v = rng.standard_normal((5, 16))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v = Matrix(v.astype(np.float32))
        quant = logits(params, v, protos)
        raw = logits(params.with_config(dataclasses.replace(params.config, quantize_logits=False)), v, protos)
        s = np.exp(params.log_s.item())
        q = qlora.quantize_blockwise((raw.data / s).astype(np.float32), 4, 8)
        bound = s * np.repeat(q.scales.astype(np.float64), 8)[: raw.data.size].reshape(raw.shape) / 2
        assert (np.abs(quant.data.astype(np.float64) - raw.data.astype(np.float64)) <= bound + 1e-6).all()

    def test_scale_change_preserves_argmax(self):
        protos = make_prototypes(5, 16, seed=3)
        params = make_params(dim=16, d_ff=8)
        rng = np.random.default_rng(4)
        v = rng.standard_normal((6, 16))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        v = Matrix(v.astype(np.float32))
        before = logits(params, v, protos).data.argmax(axis=1)
        params.log_s.data = params.log_s.data + np.float32(2.0)  # multiply s by e^2
        after = logits(params, v, protos).data.argmax(axis=1)
        assert np.array_equal(before, after)

    def test_straight_through_equals_unquantized_grads_on_lattice(self):
        # with block_size=1 the round-trip is exact, so the quantized forward
        # matches the raw forward and the straight-through grads must be equal
        base_cfg = dict(dim=6, d_ff=6, seed=13)
        protos = make_prototypes(3, 6, seed=5).matrix
        x = np.random.default_rng(6).standard_normal((4, 6)).astype(np.float32)
        labels = np.array([0, 1, 2, 1])
        grads = {}
        for quant in (True, False):
            params = make_params(
                quantize_logits=quant, logit_bits=8, logit_block=1, **base_cfg
            )
            for m in params.parameters():
                m.requires_grad = True
            with Tape() as tape:
                v = adapter_forward(params, Matrix(x))
                lg = logits(params, v, Matrix(protos))
                loss = adapter_loss(params, lg, labels)
                tape.backward(loss)
            grads[quant] = {n: m.grad.copy() for n, m in params.named().items()}
        for n in grads[True]:
            assert np.array_equal(grads[True][n], grads[False][n]), n


class TestAdapterLoss:
    def test_uniform_logits(self):
        params = make_params()
        lg = Matrix(np.zeros((4, 7), dtype=np.float32))
        loss = adapter_loss(params, lg, np.array([0, 1, 2, 3]))
        assert loss.item() == pytest.approx(np.log(7), abs=1e-6)

    def test_saturated_correct_logits_near_zero(self):
        params = make_params(sym_text_loss=True)
        lg = Matrix((np.eye(3) * 40 - 20).astype(np.float32))
        loss = adapter_loss(params, lg, np.array([0, 1, 2]))
        assert loss.item() == pytest.approx(0.0, abs=1e-6)

    def test_sym_text_loss_equals_transpose_cross_entropy(self):
        params = make_params(sym_text_loss=True)
        rng = np.random.default_rng(12)
        lg_np = rng.standard_normal((4, 4)).astype(np.float32)
        labels = np.array([2, 0, 3, 1])  # every class exactly once
        loss = adapter_loss(params, Matrix(lg_np), labels)
        # class c sits at row index np.where(labels == c)
        firsts = np.array([int(np.flatnonzero(labels == c)[0]) for c in range(4)])
        expected = cross_entropy64(lg_np, labels) + cross_entropy64(lg_np.T, firsts)
        assert loss.item() == pytest.approx(expected, abs=1e-5)

    def test_sym_text_skips_absent_classes(self):
        params = make_params(sym_text_loss=True)
        rng = np.random.default_rng(13)
        lg_np = rng.standard_normal((3, 5)).astype(np.float32)
        labels = np.array([0, 0, 2])  # classes 1, 3, 4 absent
        loss = adapter_loss(params, Matrix(lg_np), labels)
        expected = cross_entropy64(lg_np, labels) + cross_entropy64(
            lg_np.T[[0, 2]], np.array([0, 2])
        )
        assert loss.item() == pytest.approx(expected, abs=1e-5)

    def test_gradients_with_sym_text_match_finite_differences(self):
        config = AdapterConfig(dim=5, d_ff=6, sym_text_loss=True)
        rng = np.random.default_rng(14)
        x = rng.standard_normal((4, 5)).astype(np.float32)
        protos = make_prototypes(3, 5, seed=6).matrix
        labels = np.array([0, 1, 2, 1])
        params = AdapterParams.init(config, seed=15, requires_grad=True)
        with Tape() as tape:
            v = adapter_forward(params, Matrix(x))
            lg = logits(params, v, Matrix(protos))
            loss = adapter_loss(params, lg, labels)
            tape.backward(loss)
        names = list(params.named())

        def f64(arrays):
            p = dict(zip(names, arrays))
            return adapter_loss64(p, x.astype(np.float64), protos.astype(np.float64),
                                  labels, sym_text=True)

        fd = finite_difference(f64, [params.named()[n].data for n in names], h=1e-3)
        for n, g in zip(names, fd):
            assert relative_error(params.named()[n].grad, g) < 1e-3, n


class TestFrozenBackbone:
    def test_training_touches_only_adapter_parameters(self):
        from fedadapt.encoder import SyntheticEncoder

        config = AdapterConfig(dim=8, d_ff=12)
        enc = SyntheticEncoder(seed=0, raw_dim=6, embed_dim=8)
        protos = make_prototypes(3, 8, seed=7)
        enc_before = enc.fingerprint()
        protos_before = protos.fingerprint()

        rng = np.random.default_rng(20)
        raw = rng.standard_normal((12, 6)).astype(np.float32)
        labels = rng.integers(0, 3, 12)
        x = enc.encode_vectors(raw)
        params = AdapterParams.init(config, seed=1, requires_grad=True)
        opt = T.AdamState(params.parameters())
        for _ in range(5):
            with Tape() as tape:
                v = adapter_forward(params, Matrix(x))
                lg = logits(params, v, protos)
                loss = adapter_loss(params, lg, labels)
                tape.backward(loss)
            T.adam_step(params.parameters(), [p.grad for p in params.parameters()], opt, 1e-2)
            T.zero_grad(params.parameters())
        assert enc.fingerprint() == enc_before
        assert protos.fingerprint() == protos_before
