from __future__ import annotations

import numpy as np
import pytest

from ternary_distill import autodiff as ad
from ternary_distill.autodiff import no_grad
from ternary_distill.checkpoint import dumps
from ternary_distill.model import (
    BitModel,
    ContractError,
    ModelConfig,
    export_weight_histogram,
    freeze_packed,
    generate,
    insert_subln,
    to_quantized,
)
from ternary_distill.quant import dequantize, fake_quant_weight


def _plain_reference(params: dict, cfg: ModelConfig, ids: np.ndarray) -> np.ndarray:
    """Independent float64 pre-norm transformer (complex-number rotary form)."""
    p = {k: v.astype(np.float64) for k, v in params.items()}
    B, L = ids.shape
    H, hd = cfg.n_heads, cfg.head_dim
    half = hd // 2

    def norm(x, g):
        return x / np.sqrt((x**2).mean(-1, keepdims=True) + cfg.norm_eps) * g

    freqs = cfg.rope_base ** (-np.arange(half) * 2.0 / hd)
    rot = np.exp(1j * np.outer(np.arange(L), freqs))  # [L, half]

    def rope(x):  # [B, H, L, hd]
        z = (x[..., :half] + 1j * x[..., half:]) * rot
        return np.concatenate([z.real, z.imag], axis=-1)

    x = p["embed"][ids]
    causal = np.tril(np.ones((L, L), bool))
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        h = norm(x, p[pre + "attn_norm"])
        q, k, v = ((h @ p[pre + n].T).reshape(B, L, H, hd).transpose(0, 2, 1, 3) for n in ("wq", "wk", "wv"))
        s = rope(q) @ rope(k).transpose(0, 1, 3, 2) / np.sqrt(hd)
        s = np.where(causal, s, -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = (a @ v).transpose(0, 2, 1, 3).reshape(B, L, -1)
        x = x + o @ p[pre + "wo"].T
        h = norm(x, p[pre + "ffn_norm"])
        g = h @ p[pre + "w_gate"].T
        x = x + ((h @ p[pre + "w_up"].T) * g / (1 + np.exp(-g))) @ p[pre + "w_down"].T
    return norm(x, p["final_norm"]) @ p["lm_head"].T


def _big_init(cfg, seed=0):
    """Larger-than-default init so the oracle comparison is not trivially small."""
    m = BitModel(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    for name, t in m.params.items():
        if t.ndim == 2:
            t.data[...] = (rng.standard_normal(t.shape) * 0.3).astype(np.float32)
        else:
            t.data[...] = (1 + 0.1 * rng.standard_normal(t.shape)).astype(np.float32)
    return m


def test_config_invariants():
    with pytest.raises(ContractError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ContractError):
        ModelConfig(ffn_hidden=0)
    with pytest.raises(ContractError):
        ModelConfig(vocab_size=256)
    assert ModelConfig().head_dim == 32


def test_logits_shape(tiny_cfg, rng):
    m = BitModel(tiny_cfg)
    for b, L in [(1, 1), (3, 7), (2, 16)]:
        logits, _ = m.forward(rng.integers(0, 260, (b, L)))
        assert logits.shape == (b, L, 260)


def test_matches_plain_transformer_reference(tiny_cfg, rng):
    m = _big_init(tiny_cfg)
    ids = rng.integers(0, 260, (2, 11))
    with no_grad():
        logits, _ = m.forward(ids)
    ref = _plain_reference({k: t.data for k, t in m.params.items()}, tiny_cfg, ids)
    assert np.abs(logits.data - ref).max() < 1e-5 * max(1.0, np.abs(ref).max())


def test_causality(tiny_cfg, rng):
    m = _big_init(tiny_cfg, seed=3)
    ids = rng.integers(0, 256, (1, 12))
    base, _ = m.forward(ids)
    for t in (0, 5, 11):
        pert = ids.copy()
        pert[0, t] = (pert[0, t] + 1) % 256
        out, _ = m.forward(pert)
        diff = np.abs(out.data - base.data).max(axis=-1)[0]
        assert np.all(diff[:t] == 0) and diff[t] > 0


def test_oversize_sequence_and_bad_ids(tiny_cfg):
    m = BitModel(tiny_cfg)
    with pytest.raises(ContractError):
        m.forward(np.zeros((1, 17), np.int64))
    with pytest.raises(IndexError):
        m.forward(np.array([[260]]))


def test_capture_states_pre_rotary(tiny_cfg, rng):
    m = _big_init(tiny_cfg)
    ids = rng.integers(0, 256, (2, 6))
    _, states = m.forward(ids, capture_layers=[0, -1])
    assert set(states.layers) == {0, 1}
    s = states[0]
    assert s.shape == (3, 2, tiny_cfg.n_heads, 6, tiny_cfg.head_dim)
    x = ad.rms_norm(ad.embedding_lookup(m.params["embed"], ids), m.params["layers.0.attn_norm"], 1e-6).data
    q = (x @ m.params["layers.0.wq"].data.T).reshape(2, 6, 2, -1).transpose(0, 2, 1, 3)
    np.testing.assert_allclose(s.data[0], q, rtol=1e-5, atol=1e-6)


def test_attention_rows_are_stochastic_and_causal(tiny_cfg, rng):
    m = _big_init(tiny_cfg)
    seen = []
    m.attn_probe = lambda layer, a: seen.append(a)
    m.forward(rng.integers(0, 256, (2, 9)))
    assert len(seen) == tiny_cfg.n_layers
    for a in seen:
        assert np.abs(a.sum(-1) - 1).max() < 1e-6
        assert not np.triu(a, 1).any()


def test_quantized_matmul_weights_have_three_values(tiny_cfg, rng):
    m = to_quantized(BitModel(tiny_cfg), subln=True)
    seen = {}
    m.probe = lambda name, w: seen.__setitem__(name, np.unique(w).size)
    m.forward(rng.integers(0, 256, (1, 5)))
    assert len(seen) == 7 * tiny_cfg.n_layers and max(seen.values()) <= 3


def test_insert_subln_surgery(tiny_cfg, rng):
    teacher = BitModel(tiny_cfg, seed=5)
    student = insert_subln(teacher)
    cfg = tiny_cfg
    assert student.num_parameters() - teacher.num_parameters() == cfg.n_layers * (cfg.d_model + cfg.ffn_hidden)
    for k, t in teacher.params.items():
        assert student.params[k].data.tobytes() == t.data.tobytes()
    for i in range(cfg.n_layers):
        assert np.all(student.params[f"layers.{i}.attn_subln"].data == 1.0)
        assert np.all(student.params[f"layers.{i}.ffn_subln"].data == 1.0)
    assert student.config.quantized and student.config.subln_enabled
    with pytest.raises(ContractError):
        insert_subln(student)
    ids = rng.integers(0, 256, (2, 8))
    assert not np.array_equal(teacher.forward(ids)[0].data, student.forward(ids)[0].data)


def test_subln_is_not_a_noop_without_quantization(tiny_cfg, rng):
    teacher = BitModel(tiny_cfg, seed=5)
    fp_subln = BitModel(
        ModelConfig(**{**tiny_cfg.to_dict(), "subln_enabled": True}), insert_subln(teacher).state_arrays()
    )
    ids = rng.integers(0, 256, (2, 8))
    assert not np.allclose(teacher.forward(ids)[0].data, fp_subln.forward(ids)[0].data)


def test_freeze_packed_agrees_with_fake_quant(rng):
    cfg = ModelConfig(d_model=32, n_layers=2, n_heads=2, ffn_hidden=48, max_seq_len=32)
    student = to_quantized(_big_init(cfg, seed=2), subln=True)
    packed = freeze_packed(student)
    for name, lin in packed.linears.items():
        np.testing.assert_array_equal(dequantize(lin.packed).data, fake_quant_weight(student.params[name].data))
    ids = rng.integers(0, 256, (32, 12))
    a, _ = student.forward(ids)
    b, _ = packed.forward(ids)
    assert np.mean(a.data.argmax(-1) == b.data.argmax(-1)) == 1.0
    assert packed.is_packed
    assert not any(n in packed.linears for n, t in packed.params.items() if t.requires_grad)


def test_freeze_packed_requires_quantized(tiny_cfg):
    with pytest.raises(ContractError):
        freeze_packed(BitModel(tiny_cfg))


def test_packed_checkpoint_smaller_than_sixth_for_default_config():
    student = to_quantized(BitModel(ModelConfig()), subln=True)
    assert len(dumps(freeze_packed(student))) * 6 < len(dumps(student))


def test_generate(tiny_cfg):
    m = BitModel(tiny_cfg, seed=1)
    assert generate(m, [256, 97], 0) == [256, 97]
    a = generate(m, [256, 97, 98], 5)
    assert a == generate(m, [256, 97, 98], 5) and len(a) == 8
    with pytest.raises(ContractError):
        generate(m, [], 3)


def test_weight_histogram_counts_and_fractions(tiny_cfg):
    m = BitModel(tiny_cfg, seed=4)
    h = export_weight_histogram(m, bins=20)
    assert set(h) == {"Attention-Q", "Attention-K", "Attention-V", "Attention-O", "FFN-Gate", "FFN-Up", "FFN-Down"}
    d, f, n = tiny_cfg.d_model, tiny_cfg.ffn_hidden, tiny_cfg.n_layers
    assert h["Attention-Q"]["counts"].sum() == n * d * d
    assert h["FFN-Down"]["counts"].sum() == n * d * f
    for fam in h.values():
        assert abs(sum(fam["code_fractions"].values()) - 1) < 1e-9
        assert 0 <= fam["near_threshold_fraction"] <= 1


def test_gradients_reach_latent_weights_and_subln_gains(tiny_cfg, rng):
    m = insert_subln(BitModel(tiny_cfg, seed=1))
    ids = rng.integers(0, 256, (2, 6))
    logits, _ = m.forward(ids)
    ad.cross_entropy_logits(logits, ids).backward()
    for name, t in m.params.items():
        assert t.grad is not None and np.any(t.grad != 0), name
