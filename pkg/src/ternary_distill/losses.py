"""Task cross-entropy, softened logits KL, and attention-relation KL.

The teacher side of both distillation terms is always evaluated without
gradient tracking. It goes through the same ops as the student side, so a
student that equals the teacher yields a loss of exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad

PROB_FLOOR = 1e-8


class LossConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DistillConfig:
    """Weights and shape knobs of the combined objective.

    ``gamma_loss`` weights the attention-relation term; the name keeps it
    apart from the activation scale used by the quantizer. The defaults are
    tuned for the toy model. The relation loss of a short sequence is orders
    of magnitude larger than that of a 512-token one, so the large-model
    weights (:meth:`classification`, :meth:`summarization`) swamp the task
    loss here.
    """

    tau: float = 5.0
    lambda_ld: float = 10.0
    gamma_loss: float = 10.0
    distill_layers: tuple[int, ...] = (-1,)
    alphas: tuple[float, ...] | None = None
    split_heads: int = 4
    relation_temperature: float = 1.0

    def __post_init__(self):
        if self.tau <= 0:
            raise LossConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_ld < 0 or self.gamma_loss < 0:
            raise LossConfigError("loss weights must be non-negative")
        if self.gamma_loss > 0 and not self.distill_layers:
            raise LossConfigError("distill_layers must be nonempty when gamma_loss > 0")
        if self.alphas is not None and len(self.alphas) != len(self.distill_layers):
            raise LossConfigError("alphas must have one entry per distill layer")
        if self.split_heads <= 0 or self.relation_temperature <= 0:
            raise LossConfigError("split_heads and relation_temperature must be positive")

    @classmethod
    def classification(cls, **kw) -> DistillConfig:
        return cls(**{"tau": 5.0, "lambda_ld": 10.0, "gamma_loss": 1e5, **kw})

    @classmethod
    def summarization(cls, **kw) -> DistillConfig:
        return cls(**{"tau": 5.0, "lambda_ld": 1.0, "gamma_loss": 1e3, **kw})

    def layer_weights(self) -> tuple[float, ...]:
        return self.alphas if self.alphas is not None else (1.0,) * len(self.distill_layers)


@dataclass
class LossBreakdown:
    l_ce: float
    l_ld: float
    l_ad: float
    total: float
    objective: Tensor | None = field(default=None, repr=False)


def _flat_rows(x: Tensor, mask) -> Tensor:
    """Rows of x[..., V] selected by a boolean mask over the leading axes."""
    v = x.shape[-1]
    flat = ad.reshape(x, (-1, v))
    if mask is None:
        return flat
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.shape[0] != flat.shape[0]:
        raise ad.ShapeError(f"mask covers {m.shape[0]} positions, logits have {flat.shape[0]}")
    idx = np.flatnonzero(m)
    if idx.size == 0:
        raise LossConfigError("mask selects no positions")
    return ad.embedding_lookup(flat, idx)


def ce_loss(logits: Tensor, targets, answer_mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over masked positions."""
    try:
        return ad.cross_entropy_logits(logits, targets, answer_mask)
    except ValueError as e:
        if isinstance(e, ad.ShapeError):
            raise
        raise LossConfigError(str(e)) from None


def logits_kl(teacher_logits, student_logits: Tensor, tau: float, answer_mask=None) -> Tensor:
    """Mean over masked positions of KL(softmax(z_T/tau) || softmax(z_S/tau)).

    No tau**2 factor is applied.
    """
    if tau <= 0:
        raise LossConfigError(f"tau must be positive, got {tau}")
    t = teacher_logits if isinstance(teacher_logits, Tensor) else Tensor(teacher_logits)
    if t.shape != student_logits.shape:
        raise ad.ShapeError(f"logits_kl: teacher {t.shape} vs student {student_logits.shape}")
    with no_grad():
        lt = ad.log_softmax(ad.scale(_flat_rows(t.detach(), answer_mask), 1.0 / tau))
    ls = ad.log_softmax(ad.scale(_flat_rows(student_logits, answer_mask), 1.0 / tau))
    pt = np.exp(lt.data.astype(np.float64)).astype(np.float32)
    per_row = ad.sum_(ad.mul(ad.add(ad.neg(ls), lt.data), pt), axis=-1)
    return ad.mean(per_row)


def _relation_log_probs(states: Tensor, split_heads: int, temperature: float) -> Tensor:
    """log of clamped row-softmax relation matrices, shape [B*split*L, L]."""
    b, h, L, d = states.shape
    if (h * d) % split_heads:
        raise LossConfigError(f"heads*head_dim={h * d} not divisible by split_heads={split_heads}")
    x = ad.reshape(ad.transpose(states, (0, 2, 1, 3)), (b, L, split_heads, -1))
    x = ad.l2_normalize(ad.transpose(x, (0, 2, 1, 3)), axis=-1)
    rel = ad.matmul(x, ad.transpose(x, (0, 1, 3, 2)))
    if temperature != 1.0:
        rel = ad.scale(rel, 1.0 / temperature)
    prob = ad.clamp_min(ad.softmax(rel, axis=-1), PROB_FLOOR)
    return ad.reshape(ad.log(prob), (-1, L))


def relation_matrices(states, split_heads: int, temperature: float = 1.0) -> np.ndarray:
    """Clamped relation probabilities [B, split, L, L] for one projection (no grad)."""
    s = states if isinstance(states, Tensor) else Tensor(np.asarray(states, dtype=np.float32))
    b, _, L, _ = s.shape
    with no_grad():
        lp = _relation_log_probs(s.detach(), split_heads, temperature)
    return np.exp(lp.data).reshape(b, split_heads, L, L)


def attention_relation_loss(student_states: Tensor, teacher_states, split_heads: int, relation_temperature: float = 1.0) -> Tensor:
    """Sum over Q, K, V of the row-mean KL between teacher and student relations.

    Both inputs are [3, B, heads, L, head_dim]; head layouts may differ
    between the two as long as each splits evenly into ``split_heads``.
    """
    t = teacher_states if isinstance(teacher_states, Tensor) else Tensor(teacher_states)
    if student_states.ndim != 5 or t.ndim != 5 or student_states.shape[0] != 3 or t.shape[0] != 3:
        raise ad.ShapeError(f"states must be [3, B, heads, L, d]: got {student_states.shape} and {t.shape}")
    if student_states.shape[1] != t.shape[1] or student_states.shape[3] != t.shape[3]:
        raise ad.ShapeError(f"batch/sequence mismatch: {student_states.shape} vs {t.shape}")
    L = t.shape[3]
    if L < 2:
        raise LossConfigError("relation loss needs sequence length >= 2")
    total = None
    for j in range(3):
        with no_grad():
            lt = _relation_log_probs(ad.select(t.detach(), j), split_heads, relation_temperature)
        ls = _relation_log_probs(ad.select(student_states, j), split_heads, relation_temperature)
        pt = np.exp(lt.data)
        rows = lt.shape[0]
        kl = ad.scale(ad.sum_(ad.mul(ad.add(ad.neg(ls), lt.data), pt)), 1.0 / rows)
        total = kl if total is None else ad.add(total, kl)
    return total


def layer_relation_loss(student_states, teacher_states, cfg: DistillConfig, n_layers: int) -> Tensor:
    """Alpha-weighted average of per-layer relation losses over the distill layers."""
    terms = None
    layers = [_resolve(i, n_layers) for i in cfg.distill_layers]
    for layer, alpha in zip(layers, cfg.layer_weights()):
        term = ad.scale(
            attention_relation_loss(student_states[layer], teacher_states[layer], cfg.split_heads, cfg.relation_temperature),
            alpha,
        )
        terms = term if terms is None else ad.add(terms, term)
    return ad.scale(terms, 1.0 / len(layers))


def _resolve(i: int, n_layers: int) -> int:
    j = i + n_layers if i < 0 else i
    if not 0 <= j < n_layers:
        raise LossConfigError(f"distill layer {i} out of range for {n_layers} layers")
    return j


def total_loss(l_ce, l_ld, l_ad, cfg: DistillConfig) -> LossBreakdown:
    """L = L_CE + lambda * L_LD + gamma * L_AD.

    Components may be Tensors (kept for backprop in ``objective``) or floats.
    """
    parts = [l_ce, l_ld, l_ad]
    vals = [float(p.item() if isinstance(p, Tensor) else p) for p in parts]
    if not all(np.isfinite(vals)):
        raise FloatingPointError(f"non-finite loss component: ce={vals[0]} ld={vals[1]} ad={vals[2]}")
    total = vals[0] + cfg.lambda_ld * vals[1] + cfg.gamma_loss * vals[2]
    objective = None
    if isinstance(l_ce, Tensor):
        objective = l_ce
        for p, w in ((l_ld, cfg.lambda_ld), (l_ad, cfg.gamma_loss)):
            if isinstance(p, Tensor) and w != 0:
                objective = ad.add(objective, ad.scale(p, w))
    return LossBreakdown(vals[0], vals[1], vals[2], total, objective)
