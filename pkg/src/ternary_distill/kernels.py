"""Packed ternary x INT8 GEMM kernels and the timing harness around them.

The fast path keeps weights packed (4 trits per byte), decodes one tile of
weight rows at a time into an int8 scratch buffer and reuses it across a tile
of tokens. The code-activation products are accumulated exactly in int32 and
the scales are applied once per output element:

    out[t, o] = f32( f64(acc[t, o]) * (f64(delta) * f64(gamma[t]) / 127) )

``reference_gemm`` computes the same quantity from unpacked codes with FP64
accumulation and the same final scaling expression, so the two agree bit for
bit.
"""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numba
import numpy as np

from .quant import Int8TokenTensor, TernaryTensor, pack_trits, unpack_trits

# Prefer OpenMP/workqueue; older system TBB builds only emit a warning.
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# byte -> its 4 decoded trits as one little-endian word; 0b11 decodes to 0 here,
# validation happens when a payload is loaded
_LUT = np.zeros((256, 4), dtype=np.int8)
for _b in range(256):
    for _j in range(4):
        _LUT[_b, _j] = (0, 1, -1, 0)[(_b >> (2 * _j)) & 0b11]
_LUT32 = _LUT.view("<u4").reshape(256).astype(np.uint32)


def pack(codes: np.ndarray) -> np.ndarray:
    return pack_trits(codes)


def unpack(packed: np.ndarray, cols: int) -> np.ndarray:
    return unpack_trits(packed, cols)


@dataclass(frozen=True)
class PackedGemmPlan:
    """A packed weight plus its cache-blocking tile sizes."""

    weight: TernaryTensor
    tile_rows: int = 32
    tile_tokens: int = 16

    def __post_init__(self):
        if self.tile_rows <= 0 or self.tile_tokens <= 0:
            raise ValueError("tile sizes must be positive")

    def __call__(self, x: Int8TokenTensor, threads: int = 1) -> np.ndarray:
        return ternary_int8_gemm(self.weight, x, self.tile_rows, self.tile_tokens, threads)


@numba.njit(cache=True)
def _tile(packed, lut32, xv, acc_out, r0, r1, tile_tokens, buf):
    m, k = xv.shape
    nb = packed.shape[1]
    words = buf.view(np.uint32)
    for r in range(r0, r1):
        w0 = (r - r0) * nb
        for b in range(nb):
            words[w0 + b] = lut32[packed[r, b]]
    stride = 4 * nb
    for t0 in range(0, m, tile_tokens):
        t1 = min(t0 + tile_tokens, m)
        for r in range(r0, r1):
            base = (r - r0) * stride
            row = buf[base:base + k]
            for t in range(t0, t1):
                xt = xv[t]
                # |sum| <= 128 * k < 2**31 for k <= 2**24, so the int32 store is exact
                acc = 0
                for i in range(k):
                    acc += row[i] * xt[i]
                acc_out[t, r] = acc


@numba.njit(cache=True)
def _accumulate_serial(packed, lut32, xv, acc_out, tile_rows, tile_tokens):
    n, nb = packed.shape
    buf = np.empty(tile_rows * nb * 4, dtype=np.int8)
    for r0 in range(0, n, tile_rows):
        _tile(packed, lut32, xv, acc_out, r0, min(r0 + tile_rows, n), tile_tokens, buf)


@numba.njit(cache=True, parallel=True)
def _accumulate_parallel(packed, lut32, xv, acc_out, tile_rows, tile_tokens):
    n, nb = packed.shape
    ntiles = (n + tile_rows - 1) // tile_rows
    for ti in numba.prange(ntiles):
        r0 = ti * tile_rows
        buf = np.empty(tile_rows * nb * 4, dtype=np.int8)
        _tile(packed, lut32, xv, acc_out, r0, min(r0 + tile_rows, n), tile_tokens, buf)


@numba.njit(cache=True)
def _apply_scales(acc, delta, gammas, out):
    m, n = acc.shape
    for t in range(m):
        s = np.float64(delta) * np.float64(gammas[t]) / 127.0
        for o in range(n):
            out[t, o] = np.float32(np.float64(acc[t, o]) * s)


def _accumulate(w: TernaryTensor, values: np.ndarray, tile_rows: int, tile_tokens: int, threads: int) -> np.ndarray:
    n, k = w.shape
    m, kx = values.shape
    if kx != k:
        raise ValueError(f"dimension mismatch: weight {w.shape} vs activations {values.shape}")
    if k > 2**24:
        raise ValueError("in-dimension above 2**24 could overflow the int32 accumulator")
    acc = np.empty((m, n), dtype=np.int32)
    args = (
        np.ascontiguousarray(w.packed),
        _LUT32,
        np.ascontiguousarray(values, dtype=np.int8),
        acc,
        int(tile_rows),
        int(tile_tokens),
    )
    if threads > 1:
        prev = numba.get_num_threads()
        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
        try:
            _accumulate_parallel(*args)
        finally:
            numba.set_num_threads(prev)
    else:
        _accumulate_serial(*args)
    return acc


def ternary_int8_gemm(
    w: TernaryTensor,
    x: Int8TokenTensor,
    tile_rows: int = 32,
    tile_tokens: int = 16,
    threads: int = 1,
) -> np.ndarray:
    """[tokens, in] INT8 activations times packed [out, in] ternary weight.

    Returns float32 [tokens, out].
    """
    acc = _accumulate(w, x.values, tile_rows, tile_tokens, threads)
    out = np.empty(acc.shape, dtype=np.float32)
    _apply_scales(acc, np.float32(w.scale), np.ascontiguousarray(x.scales, dtype=np.float32), out)
    return out


def integer_gemm(w: TernaryTensor, values: np.ndarray, threads: int = 1) -> np.ndarray:
    """Unscaled int32 accumulator sum_i code[o, i] * v[t, i]; [tokens, out]."""
    return _accumulate(w, np.asarray(values), 32, 16, threads)


def reference_gemm(w: TernaryTensor, x: Int8TokenTensor) -> np.ndarray:
    """Slow oracle: loop over output elements, FP64 dot of unpacked codes."""
    codes = unpack_trits(w.packed, w.shape[1]).astype(np.float64)
    vals = x.values.astype(np.float64)
    if codes.shape[1] != vals.shape[1]:
        raise ValueError(f"dimension mismatch: weight {w.shape} vs activations {x.values.shape}")
    m, n = vals.shape[0], codes.shape[0]
    out = np.empty((m, n), dtype=np.float32)
    delta = np.float64(np.float32(w.scale))
    for t in range(m):
        s = delta * np.float64(x.scales[t]) / 127.0
        for o in range(n):
            # integer-valued FP64 sums stay exact far beyond int32 range;
            # adding 0.0 maps a -0.0 sum to +0.0 as an integer sum would be
            acc = float(np.dot(codes[o], vals[t])) + 0.0
            out[t, o] = np.float32(acc * s)
    return out


@numba.njit(cache=True)
def _dense_fp32_naive(x, w, out):
    m, k = x.shape
    n = w.shape[0]
    for t in range(m):
        for o in range(n):
            acc = np.float32(0.0)
            for i in range(k):
                acc += x[t, i] * w[o, i]
            out[t, o] = acc


@numba.njit(cache=True, fastmath=True)
def _dense_fp32_reassoc(x, w, out):
    m, k = x.shape
    n = w.shape[0]
    for t in range(m):
        for o in range(n):
            acc = np.float32(0.0)
            for i in range(k):
                acc += x[t, i] * w[o, i]
            out[t, o] = acc


def dense_fp32_gemm(x: np.ndarray, w: np.ndarray, reassociate: bool = False) -> np.ndarray:
    """FP32 ``x @ w.T`` as a plain loop nest.

    The default keeps IEEE summation order (the naive baseline). With
    ``reassociate`` the compiler may reorder the reduction and vectorize it.
    """
    out = np.empty((x.shape[0], w.shape[0]), dtype=np.float32)
    fn = _dense_fp32_reassoc if reassociate else _dense_fp32_naive
    fn(np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(w, dtype=np.float32), out)
    return out


# -- benchmarking -------------------------------------------------------------------

# Published large-model figures (16 CPU threads), printed for context only.
REFERENCE_FIGURES = {
    "reference_fp16_tokens_per_s": 427,
    "reference_ternary_tokens_per_s": 1135,
    "reference_fp16_memory_gb": 1.20,
    "reference_ternary_memory_gb": 0.11,
    "reference_threads": 16,
}


@dataclass
class BenchRow:
    kernel: str
    m: int
    n: int
    k: int
    median_ns: float
    weight_bytes: int

    @property
    def tokens_per_s(self) -> float:
        return self.m / (self.median_ns * 1e-9)

    @property
    def elements_per_s(self) -> float:
        return self.m * self.n * self.k / (self.median_ns * 1e-9)


@dataclass
class BenchReport:
    threads: int
    repeats: int
    rows: list[BenchRow] = field(default_factory=list)
    fp32_bytes: int = 0
    packed_bytes: int = 0
    model_rows: list[tuple[str, float]] = field(default_factory=list)
    machine: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor() or platform.system()}")

    @property
    def memory_ratio(self) -> float:
        return self.fp32_bytes / self.packed_bytes if self.packed_bytes else float("nan")

    def totals(self, kernel: str) -> float:
        return sum(r.median_ns for r in self.rows if r.kernel == kernel)

    def model_tokens_per_s(self, kernel: str) -> float:
        """Tokens/s for one token through every benchmarked shape in sequence."""
        single = [r for r in self.rows if r.kernel == kernel and r.m == 1]
        total = sum(r.median_ns for r in single)
        return 1e9 / total if total else float("nan")

    def to_text(self) -> str:
        lines = [
            f"machine={self.machine}",
            f"threads={self.threads}",
            f"repeats={self.repeats}",
        ]
        lines += [f"{k}={v}" for k, v in REFERENCE_FIGURES.items()]
        for kernel in sorted({r.kernel for r in self.rows}):
            lines.append(f"model_tokens_per_s.{kernel}={self.model_tokens_per_s(kernel):.3f}")
        for name, value in self.model_rows:
            lines.append(f"{name}={value}")
        lines.append(f"fp32_bytes={self.fp32_bytes}")
        lines.append(f"fp16_bytes={self.fp32_bytes // 2}")
        lines.append(f"packed_bytes={self.packed_bytes}")
        lines.append(f"fp32_to_packed_ratio={self.memory_ratio:.4f}")
        lines.append(f"fp16_to_packed_ratio={self.memory_ratio / 2:.4f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = ["kernel,m,n,k,median_ns,tokens_per_s,weight_bytes"]
        for r in self.rows:
            out.append(f"{r.kernel},{r.m},{r.n},{r.k},{r.median_ns:.0f},{r.tokens_per_s:.3f},{r.weight_bytes}")
        return "\n".join(out) + "\n"


def _median_ns(fn, repeats: int, warmup: int = 2) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(statistics.median(times))


def bench_gemm(
    sizes: list[tuple[int, int, int]],
    repeats: int = 20,
    threads: int = 1,
    seed: int = 0,
    include_context: bool = True,
) -> BenchReport:
    """Time packed ternary GEMM against the naive FP32 loop for each (m, n, k).

    ``m`` is the token count, ``n`` the output features and ``k`` the input
    features. With ``include_context`` two stronger FP32 rows are added: the
    same loop with a reassociated (vectorized) reduction, and numpy/BLAS.
    """
    from .quant import quantize_activations_absmax, quantize_weights_absmean

    if any(min(s) <= 0 for s in sizes):
        raise ValueError(f"sizes must be positive, got {sizes}")
    rng = np.random.default_rng(seed)
    report = BenchReport(threads=threads, repeats=repeats)
    for m, n, k in sizes:
        w = rng.standard_normal((n, k)).astype(np.float32) * 0.02
        x = rng.standard_normal((m, k)).astype(np.float32)
        tw = quantize_weights_absmean(w)
        qx = quantize_activations_absmax(x)
        report.rows.append(
            BenchRow("ternary_int8", m, n, k, _median_ns(lambda: ternary_int8_gemm(tw, qx, threads=threads), repeats), tw.nbytes)
        )
        report.rows.append(BenchRow("fp32_naive", m, n, k, _median_ns(lambda: dense_fp32_gemm(x, w), repeats), w.nbytes))
        if include_context:
            wt = np.ascontiguousarray(w.T)
            report.rows.append(
                BenchRow("fp32_reassoc", m, n, k, _median_ns(lambda: dense_fp32_gemm(x, w, True), repeats), w.nbytes)
            )
            report.rows.append(BenchRow("fp32_blas", m, n, k, _median_ns(lambda: x @ wt, repeats), w.nbytes))
        report.fp32_bytes += w.nbytes
        report.packed_bytes += tw.nbytes
    return report
