from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ternary_distill import autodiff as ad
from ternary_distill.autodiff import Tensor
from ternary_distill.quant import (
    FormatError,
    TernaryTensor,
    dequantize,
    fake_quant_activation_ste,
    fake_quant_weight_ste,
    pack_trits,
    quantize_activations_absmax,
    quantize_weights_absmean,
    unpack_trits,
)


def test_absmean_worked_example():
    t = quantize_weights_absmean(np.array([[0.5, -0.5, 0.1, -0.1]], np.float32))
    assert t.scale == pytest.approx(0.3, abs=1e-7)
    assert t.codes.tolist() == [[1, -1, 0, 0]]
    np.testing.assert_allclose(dequantize(t).data, [[0.3, -0.3, 0, 0]], atol=1e-7)


def test_absmean_exact_unit_ratio_and_zero():
    t = quantize_weights_absmean(np.array([[0.2, -0.2]], np.float32))
    assert t.codes.tolist() == [[1, -1]] and t.scale == pytest.approx(0.2)
    z = quantize_weights_absmean(np.zeros((3, 5), np.float32))
    assert z.scale == 0 and not z.codes.any()
    assert not dequantize(z).data.any()


def test_absmean_rejects_empty_and_non_2d():
    with pytest.raises(ValueError):
        quantize_weights_absmean(np.zeros((0, 4), np.float32))
    with pytest.raises(ValueError):
        quantize_weights_absmean(np.zeros(4, np.float32))


def test_absmax_worked_example_ties_to_even():
    q = quantize_activations_absmax(np.array([[1.0, -0.5, 0.25]], np.float32))
    assert q.scales.tolist() == [1.0]
    assert q.values.tolist() == [[127, -64, 32]]
    np.testing.assert_allclose(q.dequantize(), [[1.0, -0.5039, 0.2520]], atol=1e-4)


def test_absmax_zero_row():
    q = quantize_activations_absmax(np.zeros((2, 4), np.float32))
    assert not q.values.any() and not q.scales.any()


def test_absmax_error_bound_random_rows(rng):
    x = (rng.standard_normal((2000, 64)) * rng.uniform(0.01, 100, (2000, 1))).astype(np.float32)
    q = quantize_activations_absmax(x)
    err = np.abs(q.dequantize().astype(np.float64) - x)
    assert np.all(err <= q.scales[:, None].astype(np.float64) / 254 + 1e-6)


def test_absmean_activation_mode_is_available(rng):
    x = rng.standard_normal((4, 8)).astype(np.float32)
    q = quantize_activations_absmax(x, mode="absmean")
    np.testing.assert_allclose(q.scales, np.abs(x).mean(axis=1), rtol=1e-6)
    with pytest.raises(ValueError):
        quantize_activations_absmax(x, mode="median")


def test_pack_bit_layout():
    assert pack_trits(np.array([[0, 1, -1, 0]])).tolist() == [[0b00100100]]
    assert pack_trits(np.zeros((1, 5))).tolist() == [[0, 0]]


def test_pack_rejects_out_of_range():
    with pytest.raises(ValueError):
        pack_trits(np.array([[2, 0]]))


def test_unpack_rejects_invalid_code_with_position():
    with pytest.raises(FormatError, match="row 0, column 1"):
        unpack_trits(np.array([[0b00001100]], np.uint8), 4)


@settings(max_examples=60, deadline=None)
@given(arrays(np.int8, st.tuples(st.integers(1, 9), st.integers(1, 23)), elements=st.integers(-1, 1)))
def test_pack_roundtrip(codes):
    p = pack_trits(codes)
    assert p.shape == (codes.shape[0], (codes.shape[1] + 3) // 4)
    np.testing.assert_array_equal(unpack_trits(p, codes.shape[1]), codes)


def test_pack_roundtrip_7x13(rng):
    c = rng.integers(-1, 2, (7, 13))
    np.testing.assert_array_equal(unpack_trits(pack_trits(c), 13), c)


def test_quantize_dequantize_quantize_is_stable(rng):
    for _ in range(100):
        w = rng.standard_normal((rng.integers(1, 9), rng.integers(1, 17))).astype(np.float32)
        t = quantize_weights_absmean(w)
        again = quantize_weights_absmean(dequantize(t).data)
        np.testing.assert_array_equal(again.codes, t.codes)


def test_dequantize_definitional():
    t = TernaryTensor.from_codes(np.array([[1, -1, 0]]), 0.3)
    np.testing.assert_allclose(dequantize(t).data, [[0.3, -0.3, 0.0]], atol=1e-7)


def test_weight_ste_forward_and_identity_backward(rng):
    w = Tensor(rng.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
    a = rng.standard_normal((4, 6)).astype(np.float32)
    out = fake_quant_weight_ste(w)
    np.testing.assert_array_equal(out.data, dequantize(quantize_weights_absmean(w.data)).data)
    ad.sum_(ad.mul(out, a)).backward()
    np.testing.assert_array_equal(w.grad, a)


def test_activation_ste_fixed_point_and_identity_backward():
    g = 0.75
    x = Tensor(np.array([[g, 0.0, -g]], np.float32), requires_grad=True)
    out = fake_quant_activation_ste(x)
    np.testing.assert_array_equal(out.data, x.data)
    ad.sum_(out).backward()
    np.testing.assert_array_equal(x.grad, np.ones((1, 3)))


def test_activation_ste_leading_axes(rng):
    x = rng.standard_normal((2, 3, 5)).astype(np.float32)
    out = fake_quant_activation_ste(Tensor(x)).data
    ref = quantize_activations_absmax(x.reshape(-1, 5)).dequantize().reshape(x.shape)
    np.testing.assert_array_equal(out, ref)


def test_roundtrip_scale_stable_when_no_zero_codes(rng):
    # Magnitudes within [0.9, 1.1] of each other keep every |w|/mean|w| above 0.5.
    w = rng.choice([-1.0, 1.0], (6, 10)) * rng.uniform(0.9, 1.1, (6, 10))
    t = quantize_weights_absmean(w)
    assert np.all(t.codes != 0)
    again = quantize_weights_absmean(dequantize(t).data)
    np.testing.assert_array_equal(again.codes, t.codes)
    assert again.scale == t.scale
