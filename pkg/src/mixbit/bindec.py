"""Binary decomposition: exact mixed-precision convolution with AND + popcount.

An M-bit integer matrix is split into M {0,1} bit-planes. The product of two
such matrices becomes one binary GEMM over packed 64-bit words, followed by a
stride-(M, K) windowed sum against the power-of-two kernel ``2**(m+k)``.

Signed weights on the grid ``2c/(2**M-1) - 1`` are handled with an affine
correction: ``w = ws*c_w - 1`` so ``w.x = ws*xs*(c_w.c_x) - xs*sum(c_x)``.
"""

from __future__ import annotations

import logging
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .numerics import conv_output_size, im2col_array

logger = logging.getLogger(__name__)

WORD = 64
MAGIC = b"MBBD"
VERSION = 1
_NIBBLE = np.array([bin(i).count("1") for i in range(16)], dtype=np.uint8)
_TILE_WORDS = 1 << 19


def kernel_threads() -> int:
    try:
        return max(1, int(os.environ.get("MIXBIT_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# bit-plane packing
# ---------------------------------------------------------------------------

@dataclass
class BitPlaneMatrix:
    """Row-major bit-planes: plane-row ``r*bits + m`` is bit m of source row r."""

    logical_rows: int
    logical_cols: int
    bits: int
    packed: np.ndarray  # uint64, (logical_rows*bits, words)

    @property
    def words(self) -> int:
        return self.packed.shape[1]

    @property
    def plane_rows(self) -> int:
        return self.packed.shape[0]

    def unpack(self) -> np.ndarray:
        """The {0,1} plane matrix, shape (logical_rows*bits, logical_cols)."""
        as_bytes = self.packed.astype("<u8").view(np.uint8).reshape(self.plane_rows, -1)
        return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :self.logical_cols]

    def codes(self) -> np.ndarray:
        planes = self.unpack().reshape(self.logical_rows, self.bits, self.logical_cols).astype(np.int64)
        weights = (1 << np.arange(self.bits, dtype=np.int64))[None, :, None]
        return (planes * weights).sum(axis=1)


def pack_bits(planes: np.ndarray) -> np.ndarray:
    """Pack a {0,1} matrix into little-endian bit order, 64 entries per word, zero tail."""
    rows, cols = planes.shape
    words = max(1, -(-cols // WORD))
    padded = np.zeros((rows, words * WORD), dtype=np.uint8)
    padded[:, :cols] = planes
    return np.packbits(padded, axis=1, bitorder="little").view("<u8").astype(np.uint64)


def decompose_bits(codes: np.ndarray, b: int) -> BitPlaneMatrix:
    codes = np.asarray(codes)
    if codes.ndim != 2:
        raise ValueError("decompose_bits expects a 2-D integer matrix")
    if not np.issubdtype(codes.dtype, np.integer):
        if np.any(codes != np.round(codes)):
            raise ValueError("codes must be integers")
        codes = codes.astype(np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << b)):
        raise ValueError(f"codes must lie in [0, {(1 << b) - 1}] for {b} bits")
    rows, cols = codes.shape
    shifts = np.arange(b, dtype=np.int64)[None, :, None]
    planes = ((codes.astype(np.int64)[:, None, :] >> shifts) & 1).astype(np.uint8)
    return BitPlaneMatrix(rows, cols, b, pack_bits(planes.reshape(rows * b, cols)))


# ---------------------------------------------------------------------------
# binary GEMM and recombination
# ---------------------------------------------------------------------------

def popcount_native(words: np.ndarray) -> np.ndarray:
    return np.bitwise_count(words)


def popcount_table(words: np.ndarray) -> np.ndarray:
    """Portable nibble-table popcount."""
    w = np.asarray(words, dtype=np.uint64)
    total = np.zeros(w.shape, dtype=np.uint8)
    for shift in range(0, WORD, 4):
        total += _NIBBLE[((w >> np.uint64(shift)) & np.uint64(0xF)).astype(np.intp)]
    return total


POPCOUNT = {"native": popcount_native, "table": popcount_table}


@dataclass
class OpCounts:
    and_words: int = 0
    shift_adds: int = 0


def binary_gemm(bw: BitPlaneMatrix, bx: BitPlaneMatrix, popcount: str = "native",
                threads: Optional[int] = None, counts: Optional[OpCounts] = None) -> np.ndarray:
    """P[i, j] = popcount(AND(row i of Bw, row j of Bx)), both packed along the inner axis.

    ``bx`` holds the activation planes column-major, i.e. it is the decomposition
    of the transposed activation code matrix.
    """
    if bw.logical_cols != bx.logical_cols:
        raise ValueError(f"inner extents differ: {bw.logical_cols} vs {bx.logical_cols}")
    pc = POPCOUNT[popcount]
    a, b = bw.packed, bx.packed
    rows, cols, words = a.shape[0], b.shape[0], a.shape[1]
    out = np.empty((rows, cols), dtype=np.int64)
    tile = max(1, _TILE_WORDS // max(1, cols * words))

    def work(r0: int) -> None:
        r1 = min(rows, r0 + tile)
        anded = np.bitwise_and(a[r0:r1, None, :], b[None, :, :])
        out[r0:r1] = pc(anded).sum(axis=2, dtype=np.int64)

    starts = range(0, rows, tile)
    n_threads = kernel_threads() if threads is None else threads
    if n_threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            list(pool.map(work, starts))
    else:
        for r0 in starts:
            work(r0)
    if counts is not None:
        counts.and_words += rows * cols * words
    return out


@dataclass(frozen=True)
class CoeffSpec:
    m_bits: int
    k_bits: int

    @property
    def delta_w(self) -> np.ndarray:
        return 1 << np.arange(self.m_bits, dtype=np.int64)

    @property
    def delta_x(self) -> np.ndarray:
        return 1 << np.arange(self.k_bits, dtype=np.int64)

    @property
    def kernel(self) -> np.ndarray:
        return np.outer(self.delta_w, self.delta_x)


def recombine(p: np.ndarray, coeff: CoeffSpec, counts: Optional[OpCounts] = None) -> np.ndarray:
    """Stride-(M, K) windowed sum of P against the kernel 2**(m+k), using shifts only."""
    m_bits, k_bits = coeff.m_bits, coeff.k_bits
    rows, cols = p.shape
    if rows % m_bits or cols % k_bits:
        raise ValueError(f"P shape {p.shape} not divisible by (M, K)=({m_bits}, {k_bits})")
    blocks = p.reshape(rows // m_bits, m_bits, cols // k_bits, k_bits)
    out = np.zeros((rows // m_bits, cols // k_bits), dtype=np.int64)
    for m in range(m_bits):
        for k in range(k_bits):
            out += blocks[:, m, :, k] << (m + k)
    if counts is not None:
        counts.shift_adds += out.size * m_bits * k_bits
    return out


def bd_matmul(codes_w: np.ndarray, codes_x: np.ndarray, m_bits: int, k_bits: int,
              popcount: str = "native", counts: Optional[OpCounts] = None) -> np.ndarray:
    """Integer product ``codes_w @ codes_x`` computed through bit-planes."""
    bw = decompose_bits(codes_w, m_bits)
    bx = decompose_bits(np.asarray(codes_x).T, k_bits)
    p = binary_gemm(bw, bx, popcount, counts=counts)
    return recombine(p, CoeffSpec(m_bits, k_bits), counts)


# ---------------------------------------------------------------------------
# quantized codes and img2col
# ---------------------------------------------------------------------------

def im2col(x: np.ndarray, kernel: Tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """(N, C*kh*kw, OH*OW) column matrices of an NCHW tensor."""
    kh, kw = kernel
    if x.ndim != 4:
        raise ValueError("im2col expects NCHW input")
    return im2col_array(np.asarray(x), kh, kw, stride, pad)


def to_codes(values, b: int, signed: bool, alpha: float = 1.0, tol: float = 1e-6) -> np.ndarray:
    """Integer codes in [0, 2**b - 1] of values lying on a b-bit grid."""
    n = (1 << b) - 1
    v = np.asarray(values, dtype=np.float64)
    raw = (v + 1.0) * n / 2.0 if signed else v * n / alpha
    codes = np.rint(raw)
    if np.any(np.abs(raw - codes) > tol * max(1.0, n)) or np.any(codes < 0) or np.any(codes > n):
        raise ValueError(f"values are not on the {b}-bit {'signed' if signed else 'activation'} grid")
    return codes.astype(np.int64)


def activation_codes(x: np.ndarray, alpha: float, k_bits: int) -> np.ndarray:
    """Quantize real activations straight to integer codes (clip, scale, round half up)."""
    n = (1 << k_bits) - 1
    return np.floor(np.clip(x, 0.0, alpha) / alpha * n + 0.5).astype(np.int64)


# ---------------------------------------------------------------------------
# deployable layers
# ---------------------------------------------------------------------------

@dataclass
class BDLayer:
    name: str
    c_out: int
    c_in: int
    kh: int
    kw: int
    stride: int
    pad: int
    m_bits: int
    k_bits: int
    alpha: float
    bn_scale: np.ndarray
    bn_shift: np.ndarray
    planes: BitPlaneMatrix

    @property
    def coeff(self) -> CoeffSpec:
        return CoeffSpec(self.m_bits, self.k_bits)

    @property
    def weight_scale(self) -> float:
        return 2.0 / ((1 << self.m_bits) - 1)

    weight_offset = -1.0

    @property
    def act_scale(self) -> float:
        return self.alpha / ((1 << self.k_bits) - 1)

    @property
    def inner(self) -> int:
        return self.c_in * self.kh * self.kw

    @classmethod
    def from_codes(cls, name: str, weight_codes: np.ndarray, stride: int, pad: int, m_bits: int,
                   k_bits: int, alpha: float, bn_scale, bn_shift) -> "BDLayer":
        co, ci, kh, kw = weight_codes.shape
        planes = decompose_bits(weight_codes.reshape(co, -1), m_bits)
        return cls(name, co, ci, kh, kw, stride, pad, m_bits, k_bits, float(alpha),
                   np.asarray(bn_scale, dtype=np.float64), np.asarray(bn_shift, dtype=np.float64), planes)

    def integer_core(self, codes_x: np.ndarray, popcount: str = "native",
                     counts: Optional[OpCounts] = None) -> Tuple[np.ndarray, np.ndarray]:
        """(O, colsum) for activation code columns ``codes_x`` of shape (s, n)."""
        bx = decompose_bits(codes_x.T, self.k_bits)
        p = binary_gemm(self.planes, bx, popcount, counts=counts)
        return recombine(p, self.coeff, counts), codes_x.sum(axis=0)

    def conv_codes(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, int, int]:
        n, c, h, w = x.shape
        if c != self.c_in:
            raise ValueError(f"{self.name}: expected {self.c_in} input channels, got {c}")
        codes = activation_codes(x, self.alpha, self.k_bits)
        cols = im2col_array(codes, self.kh, self.kw, self.stride, self.pad)  # (N, s, L)
        oh = conv_output_size(h, self.kh, self.stride, self.pad)
        ow = conv_output_size(w, self.kw, self.stride, self.pad)
        flat = cols.transpose(1, 0, 2).reshape(self.inner, -1)  # (s, N*L)
        return flat, cols, oh, ow

    def __call__(self, x: np.ndarray, popcount: str = "native") -> np.ndarray:
        return bd_conv2d(self, x, popcount)


def bd_conv2d(layer: BDLayer, x: np.ndarray, popcount: str = "native",
              counts: Optional[OpCounts] = None) -> np.ndarray:
    """Quantize, encode, binary GEMM, recombine, correct and apply the folded BN."""
    n = x.shape[0]
    flat, _, oh, ow = layer.conv_codes(np.asarray(x, dtype=np.float64))
    o_codes, colsum = layer.integer_core(flat, popcount, counts)
    xs = layer.act_scale
    out = layer.weight_scale * xs * o_codes.astype(np.float64) + layer.weight_offset * xs * colsum[None, :]
    out = out.reshape(layer.c_out, n, oh, ow).transpose(1, 0, 2, 3)
    return out * layer.bn_scale[None, :, None, None] + layer.bn_shift[None, :, None, None]


# ---------------------------------------------------------------------------
# export / load
# ---------------------------------------------------------------------------

class ExportError(ValueError):
    pass


def lower_layer(conv, m_bits: int, k_bits: int) -> BDLayer:
    """Build the BD form of a quantized ConvBN unit under a fixed (M, K)."""
    from .numerics import Tensor
    from .quantizer import quantize_weights

    if m_bits > 16 or k_bits > 16:
        raise ExportError(f"{conv.name}: bitwidths ({m_bits}, {k_bits}) are not deployable")
    w_hat = quantize_weights(Tensor(conv.weight.data), m_bits).data
    codes = to_codes(w_hat, m_bits, signed=True)
    scale, shift = conv.bn.folded()
    spec = conv.spec
    return BDLayer.from_codes(conv.name, codes, spec.stride, spec.pad, m_bits, k_bits,
                              float(conv.alpha.data[0]), scale, shift)


def lower_network(net) -> Dict[str, BDLayer]:
    if net.mode != "fixed" or net.ctx.plan is None:
        raise ExportError("only fixed-plan networks can be lowered; call set_fixed(plan) first")
    if not getattr(net, "frozen", False):
        raise ExportError("batch-norm statistics are not frozen; call net.freeze() after training")
    return {c.name: lower_layer(c, *net.ctx.plan[c.name]) for c in net.quantized_layers()}


def _write_layer(f: BinaryIO, layer: BDLayer) -> None:
    f.write(struct.pack("<8H", layer.c_out, layer.c_in, layer.kh, layer.kw, layer.stride,
                        layer.pad, layer.m_bits, layer.k_bits))
    f.write(np.array([layer.alpha], dtype="<f8").tobytes())
    f.write(np.asarray(layer.bn_scale, dtype="<f8").tobytes())
    f.write(np.asarray(layer.bn_shift, dtype="<f8").tobytes())
    f.write(np.ascontiguousarray(layer.planes.packed, dtype="<u8").tobytes())


def plane_bytes(c_out: int, inner: int, m_bits: int) -> int:
    return -(-inner // WORD) * 8 * c_out * m_bits


def layer_bytes(layer: BDLayer) -> Dict[str, int]:
    """Byte accounting for one exported layer.

    ``coefficients`` is the recombination kernel: M*K shift amounts, one byte each.
    """
    return {
        "planes": plane_bytes(layer.c_out, layer.inner, layer.m_bits),
        "geometry": 16,
        "affine": 8 * (1 + 2 * layer.c_out),
        "coefficients": layer.m_bits * layer.k_bits,
    }


def save_bd(layers: Sequence[BDLayer], path) -> Path:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HH", VERSION, len(layers)))
        for layer in layers:
            _write_layer(f, layer)
    os.replace(tmp, path)
    return path


def export_bd_model(net, path) -> Path:
    layers = lower_network(net)
    return save_bd([layers[c.name] for c in net.quantized_layers()], path)


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ValueError("truncated BD model file")
    return data


def load_bd(path, names: Optional[Sequence[str]] = None) -> List[BDLayer]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != MAGIC:
            raise ValueError(f"{path}: not a BD model file")
        version, count = struct.unpack("<HH", _read_exact(f, 4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported BD version {version}")
        if names is not None and len(names) != count:
            raise ValueError(f"{path}: holds {count} layers, model expects {len(names)}")
        layers = []
        for i in range(count):
            co, ci, kh, kw, stride, pad, m, k = struct.unpack("<8H", _read_exact(f, 16))
            alpha = float(np.frombuffer(_read_exact(f, 8), dtype="<f8")[0])
            scale = np.frombuffer(_read_exact(f, 8 * co), dtype="<f8").astype(np.float64)
            shift = np.frombuffer(_read_exact(f, 8 * co), dtype="<f8").astype(np.float64)
            inner = ci * kh * kw
            words = max(1, -(-inner // WORD))
            packed = np.frombuffer(_read_exact(f, 8 * words * co * m), dtype="<u8")
            packed = packed.astype(np.uint64).reshape(co * m, words)
            name = names[i] if names is not None else f"layer{i}"
            layers.append(BDLayer(name, co, ci, kh, kw, stride, pad, m, k, alpha, scale, shift,
                                  BitPlaneMatrix(co, inner, m, packed)))
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} layers")
    return layers


def attach(net, layers: Sequence[BDLayer]) -> Dict[str, BDLayer]:
    """Map loaded layers onto ``net``'s quantized convs, checking geometry."""
    convs = net.quantized_layers()
    if len(convs) != len(layers):
        raise ValueError(f"model has {len(convs)} quantized layers, BD file has {len(layers)}")
    out = {}
    for conv, layer in zip(convs, layers):
        s = conv.spec
        if (layer.c_out, layer.c_in, layer.kh, layer.kw, layer.stride, layer.pad) != \
                (s.out_ch, s.in_ch, s.kernel, s.kernel, s.stride, s.pad):
            raise ValueError(f"BD layer geometry does not match {conv.name}")
        layer.name = conv.name
        out[conv.name] = layer
    return out


# ---------------------------------------------------------------------------
# micro-benchmark
# ---------------------------------------------------------------------------

def bench_kernel(shape: Tuple[int, int, int, int], m_bits: int, k_bits: int, reps: int = 10,
                 seed: int = 0, popcount: str = "native") -> dict:
    """Time binary GEMM + recombination for a (c_out, c_in, kernel, hw) conv layer.

    Operands are packed once up front; only the binary core is timed. Reports the
    median wall time per call and the closed-form op counts.
    """
    if reps < 10:
        raise ValueError("reps must be >= 10")
    c_out, c_in, k, hw = shape
    rng = np.random.default_rng(seed)
    s = c_in * k * k
    n = hw * hw
    bw = decompose_bits(rng.integers(0, 1 << m_bits, size=(c_out, s)), m_bits)
    bx = decompose_bits(rng.integers(0, 1 << k_bits, size=(n, s)), k_bits)
    coeff = CoeffSpec(m_bits, k_bits)
    counts = OpCounts()
    recombine(binary_gemm(bw, bx, popcount, counts=counts), coeff, counts)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        recombine(binary_gemm(bw, bx, popcount), coeff)
        times.append(time.perf_counter_ns() - t0)
    return {
        "shape": list(shape), "M": m_bits, "K": k_bits, "reps": reps,
        "ns_per_call": float(np.median(times)),
        "and_word_ops": counts.and_words,
        "shift_adds": counts.shift_adds,
        "expected_and_word_ops": -(-s // WORD) * c_out * m_bits * n * k_bits,
        "expected_shift_adds": c_out * n * m_bits * k_bits,
    }
