from __future__ import annotations

import numpy as np
import pytest
from gradcheck import max_grad_error

from ternary_distill import autodiff as ad
from ternary_distill.autodiff import ShapeError, Tensor, no_grad


def _r(rng, *shape, scale=1.0):
    return (rng.standard_normal(shape) * scale).astype(np.float32)


def _weighted(t: Tensor, seed: int = 0) -> Tensor:
    """Scalar probe sum(t * c) with fixed random c, so every output entry matters."""
    c = np.random.default_rng(seed).standard_normal(t.shape).astype(np.float32)
    return ad.sum_(ad.mul(t, c))


CASES = {
    "add_broadcast": (lambda a, b: _weighted(ad.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: _weighted(ad.sub(a, b)), [(2, 3), (2, 3)]),
    "mul_broadcast": (lambda a, b: _weighted(ad.mul(a, b)), [(2, 3, 4), (4,)]),
    "matmul_shared": (lambda a, b: _weighted(ad.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: _weighted(ad.matmul(a, b)), [(2, 3, 4), (2, 4, 2)]),
    "exp": (lambda a: _weighted(ad.exp(a)), [(3, 3)]),
    "sigmoid": (lambda a: _weighted(ad.sigmoid(a)), [(3, 3)]),
    "silu": (lambda a: _weighted(ad.silu(a)), [(3, 5)]),
    "softmax": (lambda a: _weighted(ad.softmax(a)), [(3, 5)]),
    "log_softmax": (lambda a: _weighted(ad.log_softmax(a)), [(3, 5)]),
    "rms_norm": (lambda a, g: _weighted(ad.rms_norm(a, g)), [(3, 6), (6,)]),
    "l2_normalize": (lambda a: _weighted(ad.l2_normalize(a)), [(4, 3)]),
    "mean_axis": (lambda a: _weighted(ad.mean(a, axis=1)), [(3, 4)]),
    "transpose": (lambda a: _weighted(ad.transpose(a, (1, 0, 2))), [(2, 3, 4)]),
    "reshape": (lambda a: _weighted(ad.reshape(a, (6, 2))), [(3, 4)]),
    "concat": (lambda a, b: _weighted(ad.concat([a, b], axis=0)), [(2, 3), (1, 3)]),
    "stack_select": (lambda a, b: _weighted(ad.select(ad.stack([a, b]), 1)), [(2, 3), (2, 3)]),
    "scale_neg": (lambda a: _weighted(ad.neg(ad.scale(a, 2.5))), [(2, 2)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_match_finite_differences(name, rng):
    fn, shapes = CASES[name]
    arrays = [_r(rng, *s) for s in shapes]
    assert max_grad_error(fn, arrays) < 1e-3


def test_log_and_clamp_gradients(rng):
    a = np.abs(_r(rng, 3, 4)) + 0.5
    assert max_grad_error(lambda x: _weighted(ad.log(x)), [a]) < 1e-3
    b = _r(rng, 3, 4) + 0.05  # keep clear of the kink
    b[np.abs(b) < 0.01] = 0.5
    assert max_grad_error(lambda x: _weighted(ad.clamp_min(x, 0.0)), [b]) < 1e-3


def test_embedding_gradient_accumulates_repeated_ids(rng):
    table = _r(rng, 5, 3)
    ids = np.array([[0, 2, 2], [4, 0, 2]])
    assert max_grad_error(lambda t: _weighted(ad.embedding_lookup(t, ids)), [table]) < 1e-3


def test_cross_entropy_gradient_with_mask(rng):
    logits = _r(rng, 2, 3, 6)
    targets = rng.integers(0, 6, (2, 3))
    mask = np.array([[1, 0, 1], [0, 1, 1]], bool)
    assert max_grad_error(lambda z: ad.cross_entropy_logits(z, targets, mask), [logits]) < 1e-3


def test_cross_entropy_errors():
    z = Tensor(np.zeros((2, 4), np.float32))
    with pytest.raises(ValueError):
        ad.cross_entropy_logits(z, [0, 1], [False, False])
    with pytest.raises(IndexError):
        ad.cross_entropy_logits(z, [0, 4])


def test_backward_accumulates_over_shared_nodes():
    x = Tensor(np.array([2.0], np.float32), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.sum_(y).backward()
    assert x.grad[0] == pytest.approx(5.0)


def test_backward_requires_scalar_or_seed():
    x = Tensor(np.ones((2, 2), np.float32), requires_grad=True)
    y = ad.scale(x, 3.0)
    with pytest.raises(ValueError):
        y.backward()
    y.backward(np.ones((2, 2), np.float32))
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 3.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with no_grad():
        y = ad.sum_(ad.mul(x, x))
    assert not y.requires_grad and y.parents == ()


def test_shape_errors_name_both_shapes():
    a = Tensor(np.ones((2, 3), np.float32))
    b = Tensor(np.ones((4, 5), np.float32))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(a, b)
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3), np.float32)), Tensor(np.ones((2,), np.float32)))


def test_softmax_rejects_nan_but_accepts_neg_inf():
    x = np.array([[0.0, -np.inf, 1.0]], np.float32)
    p = ad.softmax(Tensor(x)).data
    assert p[0, 1] == 0 and abs(p.sum() - 1) < 1e-6
    with pytest.raises(FloatingPointError):
        ad.softmax(Tensor(np.array([[np.nan, 0.0]], np.float32)))


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        ad.embedding_lookup(Tensor(np.zeros((3, 2), np.float32)), np.array([3]))


def test_item_requires_single_element():
    assert Tensor(np.array([1.5], np.float32)).item() == 1.5
    with pytest.raises(ValueError):
        Tensor(np.ones(2, np.float32)).item()


def test_all_ops_stay_float32(rng):
    a = Tensor(_r(rng, 2, 3), requires_grad=True)
    out = ad.sum_(ad.softmax(ad.rms_norm(a, Tensor(np.ones(3, np.float32)))))
    out.backward()
    assert out.data.dtype == np.float32 and a.grad.dtype == np.float32
