"""Toy decoder-only transformer in FP (teacher) and ternary QAT (student) form.

Blocks follow the pre-norm layout with optional SubLN:

    Y = X + SubLN(Concat(heads)) W_out
    X' = Y + SubLN((h W_up) * silu(h W_gate)) W_down,   h = RMSNorm(Y)

Every projection inside a block is a :class:`BitLinear`; embeddings, norms and
the output head stay full precision.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .kernels import ternary_int8_gemm
from .quant import (
    TernaryTensor,
    dequantize,
    fake_quant_activation_ste,
    fake_quant_weight_ste,
    quantize_activations_absmax,
    quantize_weights_absmean,
)

BOS, SEP, EOS, PAD = 256, 257, 258, 259

ATTN_PROJ = ("wq", "wk", "wv", "wo")
FFN_PROJ = ("w_gate", "w_up", "w_down")
FAMILY_NAMES = {
    "wq": "Attention-Q",
    "wk": "Attention-K",
    "wv": "Attention-V",
    "wo": "Attention-O",
    "w_gate": "FFN-Gate",
    "w_up": "FFN-Up",
    "w_down": "FFN-Down",
}


class ContractError(ValueError):
    """A documented precondition was violated."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 260
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_hidden: int = 256
    max_seq_len: int = 128
    rope_base: float = 10000.0
    subln_enabled: bool = False
    quantized: bool = False
    norm_eps: float = 1e-6
    act_quant: str = "absmax"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_hidden <= 0:
            raise ContractError("ffn_hidden must be positive")
        if self.vocab_size < 257:
            raise ContractError("vocab_size must cover 256 bytes plus specials")
        if (self.d_model // self.n_heads) % 2:
            raise ContractError("head_dim must be even for rotary embeddings")
        if self.act_quant not in ("absmax", "absmean"):
            raise ContractError(f"unknown act_quant {self.act_quant!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in known:
                raise ContractError(f"unknown model config key {k!r}")
            default = getattr(cls, k)
            if isinstance(default, bool):
                v = v if isinstance(v, bool) else str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            kwargs[k] = v
        return cls(**kwargs)


class BitLinear:
    """Bias-free projection y = x W^T in one of three modes.

    ``fp``               plain FP32 matmul
    ``fake_quant_train`` INT8 fake-quant of x, ternary fake-quant of W, STE backward
    ``packed_infer``     packed ternary x INT8 integer GEMM, no autograd
    """

    MODES = ("fp", "fake_quant_train", "packed_infer")

    def __init__(self, weight: Tensor, mode: str = "fp", packed: TernaryTensor | None = None, act_quant: str = "absmax"):
        if mode not in self.MODES:
            raise ContractError(f"unknown BitLinear mode {mode!r}")
        if mode == "packed_infer" and packed is None:
            raise ContractError("packed_infer mode needs a packed weight")
        self.weight = weight
        self.mode = mode
        self.packed = packed
        self.act_quant = act_quant

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def effective_weight(self) -> np.ndarray:
        """The weight values that actually enter the matmul."""
        if self.mode == "fp":
            return self.weight.data
        if self.mode == "packed_infer":
            return dequantize(self.packed).data
        return fake_quant_weight_ste(self.weight).data

    def __call__(self, x: Tensor, probe: Callable | None = None, name: str = "") -> Tensor:
        if self.mode == "packed_infer":
            flat = x.data.reshape(-1, x.shape[-1])
            if self.act_quant != "absmax":
                raise ContractError("packed inference supports absmax activations only")
            out = ternary_int8_gemm(self.packed, quantize_activations_absmax(flat))
            if probe is not None:
                probe(name, dequantize(self.packed).data)
            return Tensor(out.reshape(x.shape[:-1] + (self.packed.shape[0],)))
        if self.mode == "fake_quant_train":
            x = fake_quant_activation_ste(x, mode=self.act_quant)
            w = fake_quant_weight_ste(self.weight)
        else:
            w = self.weight
        if probe is not None:
            probe(name, w.data)
        return ad.matmul(x, ad.transpose(w))


@dataclass
class AttentionStates:
    """Captured pre-rotary Q/K/V per layer, each stacked as [3, B, heads, L, head_dim]."""

    layers: dict[int, Tensor]

    def __getitem__(self, layer: int) -> Tensor:
        return self.layers[layer]

    def __contains__(self, layer: int) -> bool:
        return layer in self.layers


def _rope_tables(seq_len: int, head_dim: int, base: float) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / (base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim))
    ang = np.outer(np.arange(seq_len, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(np.float32), np.sin(ang).astype(np.float32)


def apply_rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate-half rotary embedding over the last axis of [..., L, head_dim]."""
    half = x.shape[-1] // 2

    def rot(a):
        return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)

    def rot_t(a):
        return np.concatenate([a[..., half:], -a[..., :half]], axis=-1)

    out = x.data * cos + rot(x.data) * sin
    return ad.custom_op(out, (x,), lambda g: (g * cos + rot_t(g * sin),), "rotary")


def _causal_mask(seq_len: int) -> np.ndarray:
    m = np.zeros((seq_len, seq_len), dtype=np.float32)
    m[np.triu_indices(seq_len, 1)] = -np.inf
    return m


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.ffn_hidden, config.vocab_size
    std = 0.02
    out_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, s):
        return (rng.standard_normal(shape) * s).astype(np.float32)

    params = {"embed": normal((v, d), std)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        params[p + "attn_norm"] = np.ones(d, np.float32)
        params[p + "wq"] = normal((d, d), std)
        params[p + "wk"] = normal((d, d), std)
        params[p + "wv"] = normal((d, d), std)
        params[p + "wo"] = normal((d, d), out_std)
        params[p + "ffn_norm"] = np.ones(d, np.float32)
        params[p + "w_gate"] = normal((f, d), std)
        params[p + "w_up"] = normal((f, d), std)
        params[p + "w_down"] = normal((d, f), out_std)
        if config.subln_enabled:
            params[p + "attn_subln"] = np.ones(d, np.float32)
            params[p + "ffn_subln"] = np.ones(f, np.float32)
    params["final_norm"] = np.ones(d, np.float32)
    params["lm_head"] = normal((v, d), std)
    return params


def _is_projection(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ATTN_PROJ + FFN_PROJ


class BitModel:
    """Decoder transformer whose block projections are :class:`BitLinear`."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.config = config
        raw = init_params(config, seed) if params is None else params
        self._check_params(raw)
        mode = "fake_quant_train" if config.quantized else "fp"
        self.params: dict[str, Tensor] = {}
        self.linears: dict[str, BitLinear] = {}
        for name, arr in raw.items():
            if isinstance(arr, TernaryTensor):
                t = Tensor(dequantize(arr).data, requires_grad=False)
                self.linears[name] = BitLinear(t, "packed_infer", arr, config.act_quant)
                self.params[name] = t
                continue
            t = Tensor(np.array(arr, dtype=np.float32, copy=True), requires_grad=True)
            self.params[name] = t
            if _is_projection(name):
                self.linears[name] = BitLinear(t, mode, act_quant=config.act_quant)
        self._rope_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        # optional hooks: probe(name, weight actually used), attn_probe(layer, probs)
        self.probe: Callable | None = None
        self.attn_probe: Callable | None = None

    def _check_params(self, raw):
        expected = set(init_params_shapes(self.config))
        got = set(raw)
        if expected != got:
            missing, extra = sorted(expected - got), sorted(got - expected)
            raise ContractError(f"parameter set mismatch: missing={missing} unexpected={extra}")
        for name, shape in init_params_shapes(self.config).items():
            s = raw[name].shape
            if tuple(s) != shape:
                raise ContractError(f"{name}: shape {tuple(s)} != expected {shape}")

    # -- introspection ----------------------------------------------------------
    @property
    def is_packed(self) -> bool:
        return any(l.mode == "packed_infer" for l in self.linears.values())

    def trainable(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray | TernaryTensor]:
        out: dict[str, np.ndarray | TernaryTensor] = {}
        for name, t in self.params.items():
            lin = self.linears.get(name)
            out[name] = lin.packed if lin is not None and lin.mode == "packed_infer" else t.data
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> BitModel:
        state = {k: (v if isinstance(v, TernaryTensor) else v.copy()) for k, v in self.state_arrays().items()}
        return BitModel(self.config, state)

    # -- forward ----------------------------------------------------------------------
    def _rope(self, seq_len: int):
        if seq_len not in self._rope_cache:
            self._rope_cache[seq_len] = _rope_tables(seq_len, self.config.head_dim, self.config.rope_base)
        return self._rope_cache[seq_len]

    def _lin(self, name: str, x: Tensor) -> Tensor:
        return self.linears[name](x, self.probe, name)

    def forward(self, ids, capture_layers: Iterable[int] = ()) -> tuple[Tensor, AttentionStates]:
        """Logits [B, L, vocab] and the requested layers' Q/K/V states."""
        cfg = self.config
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        b, L = ids.shape
        if L > cfg.max_seq_len:
            raise ContractError(f"sequence length {L} exceeds max_seq_len {cfg.max_seq_len}")
        capture = {resolve_layer(i, cfg.n_layers) for i in capture_layers}
        h, dh = cfg.n_heads, cfg.head_dim
        cos, sin = self._rope(L)
        mask = _causal_mask(L)
        p = self.params
        x = ad.embedding_lookup(p["embed"], ids)
        states: dict[int, Tensor] = {}
        for i in range(cfg.n_layers):
            pre = f"layers.{i}."
            hn = ad.rms_norm(x, p[pre + "attn_norm"], cfg.norm_eps)
            q, k, v = (
                ad.transpose(ad.reshape(self._lin(pre + n, hn), (b, L, h, dh)), (0, 2, 1, 3)) for n in ("wq", "wk", "wv")
            )
            if i in capture:
                states[i] = ad.stack([q, k, v])
            qr, kr = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
            scores = ad.scale(ad.matmul(qr, ad.transpose(kr, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
            att = ad.softmax(ad.add(scores, mask), axis=-1)
            if self.attn_probe is not None:
                self.attn_probe(i, att.data)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, L, cfg.d_model))
            if cfg.subln_enabled:
                o = ad.rms_norm(o, p[pre + "attn_subln"], cfg.norm_eps)
            x = x + self._lin(pre + "wo", o)
            hn = ad.rms_norm(x, p[pre + "ffn_norm"], cfg.norm_eps)
            a = ad.mul(self._lin(pre + "w_up", hn), ad.silu(self._lin(pre + "w_gate", hn)))
            if cfg.subln_enabled:
                a = ad.rms_norm(a, p[pre + "ffn_subln"], cfg.norm_eps)
            x = x + self._lin(pre + "w_down", a)
        x = ad.rms_norm(x, p["final_norm"], cfg.norm_eps)
        logits = ad.matmul(x, ad.transpose(p["lm_head"]))
        return logits, AttentionStates(states)

    __call__ = forward


def init_params_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f, v = config.d_model, config.ffn_hidden, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed": (v, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            {
                p + "attn_norm": (d,),
                p + "wq": (d, d),
                p + "wk": (d, d),
                p + "wv": (d, d),
                p + "wo": (d, d),
                p + "ffn_norm": (d,),
                p + "w_gate": (f, d),
                p + "w_up": (f, d),
                p + "w_down": (d, f),
            }
        )
        if config.subln_enabled:
            shapes[p + "attn_subln"] = (d,)
            shapes[p + "ffn_subln"] = (f,)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (v, d)
    return shapes


def resolve_layer(i: int, n_layers: int) -> int:
    j = i + n_layers if i < 0 else i
    if not 0 <= j < n_layers:
        raise ContractError(f"layer index {i} out of range for {n_layers} layers")
    return j


# -- conversions -----------------------------------------------------------------------


def to_quantized(model: BitModel, subln: bool) -> BitModel:
    """Copy ``model`` into a QAT student, optionally inserting SubLN gains."""
    if model.config.subln_enabled and subln:
        raise ContractError("checkpoint already carries SubLN")
    if model.is_packed:
        raise ContractError("cannot convert a packed inference model")
    state = {k: v.copy() for k, v in model.state_arrays().items()}
    cfg = replace(model.config, quantized=True, subln_enabled=model.config.subln_enabled or subln)
    if subln:
        for i in range(cfg.n_layers):
            state[f"layers.{i}.attn_subln"] = np.ones(cfg.d_model, np.float32)
            state[f"layers.{i}.ffn_subln"] = np.ones(cfg.ffn_hidden, np.float32)
    return BitModel(cfg, state)


def insert_subln(teacher: BitModel) -> BitModel:
    """Stage-1 surgery: copy weights, add unit SubLN gains, switch to QAT."""
    return to_quantized(teacher, subln=True)


def freeze_packed(student: BitModel) -> BitModel:
    """Replace every block projection by its packed ternary form."""
    if not student.config.quantized:
        raise ContractError("freeze_packed expects a quantized (QAT) student")
    state: dict = {}
    for name, arr in student.state_arrays().items():
        state[name] = arr if isinstance(arr, TernaryTensor) or not _is_projection(name) else quantize_weights_absmean(arr)
    return BitModel(student.config, state)


# -- decoding ---------------------------------------------------------------------------


def generate(model: BitModel, prompt_ids, max_new: int, greedy: bool = True, stop: int | None = None) -> list[int]:
    """Greedy autoregressive continuation of one prompt."""
    out = generate_batch(model, [list(prompt_ids)], max_new, greedy, stop)
    return out[0]


def generate_batch(model: BitModel, prompts: list[list[int]], max_new: int, greedy: bool = True, stop: int | None = None) -> list[list[int]]:
    """Greedy decoding for equal-length prompts (grouped by length internally)."""
    if not greedy:
        raise ContractError("only greedy decoding is supported")
    if any(len(p) == 0 for p in prompts):
        raise ContractError("prompt must be nonempty")
    results: list[list[int] | None] = [None] * len(prompts)
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    for _, idxs in sorted(by_len.items()):
        seqs = np.array([prompts[i] for i in idxs], dtype=np.int64)
        done = np.zeros(len(idxs), dtype=bool)
        with no_grad():
            for _ in range(max_new):
                window = seqs[:, -model.config.max_seq_len:]
                logits, _ = model.forward(window)
                nxt = logits.data[:, -1, :].argmax(axis=-1)
                if stop is not None:
                    nxt = np.where(done, stop, nxt)
                    done |= nxt == stop
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                if stop is not None and done.all():
                    break
        for row, i in zip(seqs, idxs):
            results[i] = row.tolist()
    return results  # type: ignore[return-value]


# -- weight analysis -----------------------------------------------------------------------


def export_weight_histogram(model: BitModel, bins: int = 60, span: float = 3.0) -> dict[str, dict]:
    """Per projection family: histogram of latent w/Δ and ternary code fractions.

    Values are normalised by each tensor's own absmean scale so the code
    transition thresholds sit at ±0.5 for every tensor. Values beyond ±span
    are counted in the edge bins.
    """
    edges = np.linspace(-span, span, bins + 1)
    out: dict[str, dict] = {}
    for short, family in FAMILY_NAMES.items():
        counts = np.zeros(bins, dtype=np.int64)
        codes = np.zeros(3, dtype=np.int64)
        near = 0
        total = 0
        for i in range(model.config.n_layers):
            w = model.params[f"layers.{i}.{short}"].data
            t = quantize_weights_absmean(w)
            r = w.astype(np.float64) / max(t.scale, 1e-12)
            c, _ = np.histogram(np.clip(r, -span, span), bins=edges)
            counts += c
            u = t.codes
            codes += [(u == -1).sum(), (u == 0).sum(), (u == 1).sum()]
            near += int((np.abs(np.abs(r) - 0.5) < 0.1).sum())
            total += w.size
        out[family] = {
            "edges": edges,
            "counts": counts,
            "code_fractions": {-1: codes[0] / total, 0: codes[1] / total, 1: codes[2] / total},
            "near_threshold_fraction": near / total,
            "n": total,
        }
    return out


def code_distribution_tv(before: dict, after: dict) -> float:
    """Mean total-variation distance between ternary code distributions per family."""
    tvs = []
    for fam in before:
        b, a = before[fam]["code_fractions"], after[fam]["code_fractions"]
        tvs.append(0.5 * sum(abs(b[c] - a[c]) for c in (-1, 0, 1)))
    return float(np.mean(tvs))


def histogram_table(hist: dict[str, dict]) -> str:
    """key=value lines plus a comma-separated bin table."""
    lines = []
    for fam, h in hist.items():
        f = h["code_fractions"]
        lines.append(
            f"{fam}: n={h['n']} frac_neg={f[-1]:.6f} frac_zero={f[0]:.6f} frac_pos={f[1]:.6f} "
            f"near_threshold={h['near_threshold_fraction']:.6f}"
        )
    lines.append("family,bin_lo,bin_hi,count")
    for fam, h in hist.items():
        e = h["edges"]
        for j, c in enumerate(h["counts"]):
            lines.append(f"{fam},{e[j]:.4f},{e[j + 1]:.4f},{int(c)}")
    return "\n".join(lines) + "\n"


def clone_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)


def deepcopy_model(model: BitModel) -> BitModel:
    return copy.deepcopy(model)
