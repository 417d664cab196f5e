"""Ternary weight and INT8 activation quantizers, plus their STE wrappers.

Weights use one absmean scale per tensor and are stored as packed 2-bit
codes. Activations use one absmax scale per token (row). Rounding is nearest
with ties to even (``np.rint``).

The eps guard is applied as ``max(scale, eps)`` in the divisor. With the
additive form ``scale + eps`` a value sitting exactly on a rounding tie (for
example -0.5 in a row whose absmax is 1.0) would be nudged off the tie, and
a row already on the INT8 grid would not be a fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DTYPE, Tensor, custom_op

EPS = 1e-6

# 2-bit trit codes: element i of a row lives in bits 2*(i%4)..2*(i%4)+1 of byte i//4
CODE_ZERO, CODE_POS, CODE_NEG, CODE_INVALID = 0b00, 0b01, 0b10, 0b11


class FormatError(ValueError):
    """Packed ternary payload is malformed."""


def pack_trits(values: np.ndarray) -> np.ndarray:
    """Pack a [rows, cols] array of {-1, 0, +1} into [rows, ceil(cols/4)] uint8."""
    v = np.asarray(values)
    if v.ndim != 2:
        raise ValueError(f"pack_trits expects a 2-D array, got shape {v.shape}")
    if v.size and (v.min() < -1 or v.max() > 1 or not np.all(v == np.round(v))):
        raise ValueError("pack_trits: values must be in {-1, 0, +1}")
    rows, cols = v.shape
    nbytes = (cols + 3) // 4
    codes = np.zeros((rows, nbytes * 4), dtype=np.uint8)
    vi = v.astype(np.int8)
    codes[:, :cols] = np.where(vi == 1, CODE_POS, np.where(vi == -1, CODE_NEG, CODE_ZERO))
    codes = codes.reshape(rows, nbytes, 4)
    return (codes[..., 0] | (codes[..., 1] << 2) | (codes[..., 2] << 4) | (codes[..., 3] << 6)).astype(np.uint8)


_DECODE = np.array([0, 1, -1, 0], dtype=np.int8)


def unpack_trits(packed: np.ndarray, cols: int) -> np.ndarray:
    """Inverse of :func:`pack_trits`; returns int8 [rows, cols].

    Raises:
        FormatError: if any 2-bit field holds the invalid code 0b11.
    """
    p = np.asarray(packed, dtype=np.uint8)
    if p.ndim != 2 or p.shape[1] != (cols + 3) // 4:
        raise FormatError(f"packed shape {p.shape} does not hold {cols} columns")
    fields = np.stack([(p >> s) & 0b11 for s in (0, 2, 4, 6)], axis=-1).reshape(p.shape[0], -1)
    if np.any(fields == CODE_INVALID):
        r, c = np.argwhere(fields == CODE_INVALID)[0]
        raise FormatError(f"invalid trit code 0b11 at row {r}, column {c}")
    return _DECODE[fields[:, :cols]]


@dataclass(frozen=True)
class TernaryTensor:
    """Per-tensor scaled ternary matrix stored as packed 2-bit codes."""

    shape: tuple[int, int]
    packed: np.ndarray  # uint8 [rows, ceil(cols/4)]
    scale: float  # absmean, held as float32

    @property
    def codes(self) -> np.ndarray:
        return unpack_trits(self.packed, self.shape[1])

    @property
    def nbytes(self) -> int:
        return int(self.packed.nbytes)

    @classmethod
    def from_codes(cls, codes: np.ndarray, scale: float) -> TernaryTensor:
        codes = np.asarray(codes)
        return cls((int(codes.shape[0]), int(codes.shape[1])), pack_trits(codes), float(np.float32(scale)))


@dataclass(frozen=True)
class Int8TokenTensor:
    """Row-major INT8 activations with one absmax scale per row."""

    values: np.ndarray  # int8 [tokens, d]
    scales: np.ndarray  # float32 [tokens]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def dequantize(self) -> np.ndarray:
        return dequantize_int8(self.values, self.scales)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def absmean_scale(w: np.ndarray) -> np.float32:
    return np.float32(np.abs(w.astype(np.float64)).mean())


def ternary_codes(w: np.ndarray, scale: np.float32, eps: float = EPS) -> np.ndarray:
    y = w.astype(np.float64) / max(float(scale), eps)
    return np.clip(np.rint(y), -1, 1).astype(np.int8)


def quantize_weights_absmean(w, eps: float = EPS) -> TernaryTensor:
    """Absmean ternary quantization of a 2-D weight.

    >>> t = quantize_weights_absmean(np.array([[0.5, -0.5, 0.1, -0.1]]))
    >>> t.codes.tolist(), round(t.scale, 6)
    ([[1, -1, 0, 0]], 0.3)
    """
    arr = _as_array(w)
    if arr.ndim != 2:
        raise ValueError(f"weight must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("cannot quantize an empty weight")
    scale = absmean_scale(arr)
    codes = ternary_codes(arr, scale, eps)
    if scale == 0:
        codes[:] = 0
    return TernaryTensor.from_codes(codes, scale)


def dequantize(t: TernaryTensor) -> Tensor:
    """Δ·codes as FP32. Corrupt packed codes raise :class:`FormatError`."""
    return Tensor(dequantize_codes(t.codes, t.scale))


def dequantize_codes(codes: np.ndarray, scale: float) -> np.ndarray:
    return (codes.astype(DTYPE) * np.float32(scale)).astype(DTYPE)


def _absmax_rows(x: np.ndarray) -> np.ndarray:
    return np.abs(x).max(axis=-1).astype(DTYPE)


def _absmean_rows(x: np.ndarray) -> np.ndarray:
    return np.abs(x.astype(np.float64)).mean(axis=-1).astype(DTYPE)


def int8_codes(x: np.ndarray, scales: np.ndarray, eps: float = EPS) -> np.ndarray:
    denom = np.maximum(scales.astype(np.float64), eps)[..., None]
    q = np.rint(127.0 * x.astype(np.float64) / denom)
    return np.clip(q, -128, 127).astype(np.int8)


def dequantize_int8(values: np.ndarray, scales: np.ndarray) -> np.ndarray:
    return (scales.astype(np.float64)[..., None] * values.astype(np.float64) / 127.0).astype(DTYPE)


def quantize_activations_absmax(x, eps: float = EPS, mode: str = "absmax") -> Int8TokenTensor:
    """Per-token INT8 quantization; ``mode="absmean"`` swaps the row statistic."""
    arr = _as_array(x)
    if arr.ndim != 2:
        raise ValueError(f"activations must be 2-D [tokens, d], got shape {arr.shape}")
    scales = _row_scales(arr, mode)
    return Int8TokenTensor(int8_codes(arr, scales, eps), scales)


def _row_scales(arr: np.ndarray, mode: str) -> np.ndarray:
    if mode == "absmax":
        return _absmax_rows(arr)
    if mode == "absmean":
        return _absmean_rows(arr)
    raise ValueError(f"unknown activation quantization mode {mode!r}")


def fake_quant_weight(w: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Quantize-dequantize without the packing round trip (training hot path)."""
    scale = absmean_scale(w)
    codes = ternary_codes(w, scale, eps)
    if scale == 0:
        codes[:] = 0
    return dequantize_codes(codes, scale)


def fake_quant_weight_ste(w: Tensor, eps: float = EPS) -> Tensor:
    """Forward: quantize-dequantize. Backward: gradient passes unchanged."""
    return custom_op(fake_quant_weight(w.data, eps), (w,), lambda g: (g,), "fake_quant_w")


def fake_quant_activation_ste(x: Tensor, eps: float = EPS, mode: str = "absmax") -> Tensor:
    """Per-token INT8 fake quantization over the last axis, identity backward."""
    flat = x.data.reshape(-1, x.shape[-1])
    scales = _row_scales(flat, mode)
    out = dequantize_int8(int8_codes(flat, scales, eps), scales).reshape(x.shape)
    return custom_op(out, (x,), lambda g: (g,), "fake_quant_a")
