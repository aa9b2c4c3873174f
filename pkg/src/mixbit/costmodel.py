"""FLOPs accounting for mixed-precision networks.

One full-precision multiply-accumulate counts as one FLOP; an M-bit by K-bit
MAC counts as ``M*K/64`` of one. Layers flagged as unquantized (first conv,
final dense) always cost their full MAC count.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence, Union

import numpy as np

from .numerics import Tensor, _result, softmax
from .plan import FULL_PRECISION, NetworkPlan

WORD_BITS = 64


@dataclass(frozen=True)
class LayerCost:
    name: str
    macs: int
    quantized: bool = True

    def __post_init__(self):
        if self.macs <= 0:
            raise ValueError(f"layer {self.name}: macs must be positive")


@dataclass
class CostReport:
    expected_mflops: float
    target_mflops: float
    lam: float
    per_layer: Dict[str, float] = field(default_factory=dict)

    @property
    def penalty(self) -> float:
        return self.lam * max(0.0, self.expected_mflops - self.target_mflops)

    def rows(self) -> List[dict]:
        return [{"layer": k, "mflops": fmt_mflops(v / 1e6)} for k, v in self.per_layer.items()]


def fmt_mflops(v: float) -> str:
    return f"{v:.3g}"


def flop_pair(macs: float, m: float, k: float, quantized: bool = True) -> float:
    if not quantized or m >= FULL_PRECISION or k >= FULL_PRECISION:
        return float(macs)
    if m <= 0 or k <= 0:
        raise ValueError("bitwidths must be positive")
    return macs * m * k / WORD_BITS


def network_flops(plan: NetworkPlan, costs: Sequence[LayerCost]) -> float:
    total = 0.0
    for lc in costs:
        if lc.quantized:
            bw, bx = plan[lc.name]
            total += flop_pair(lc.macs, bw, bx)
        else:
            total += lc.macs
    return total


def per_layer_flops(plan: NetworkPlan, costs: Sequence[LayerCost]) -> Dict[str, float]:
    out = {}
    for lc in costs:
        out[lc.name] = flop_pair(lc.macs, *plan[lc.name]) if lc.quantized else float(lc.macs)
    return out


def full_precision_flops(costs: Sequence[LayerCost]) -> float:
    return float(sum(lc.macs for lc in costs))


def _effective_bits(coeffs: Tensor, bits: np.ndarray) -> Tensor:
    value = float(np.dot(coeffs.data, bits))

    def backward(g):
        coeffs._accumulate(float(g) * bits)

    return _result(np.array(value), (coeffs,), backward, "effective_bits")


def _bilinear(m: Tensor, k: Tensor, weight: float) -> Tensor:
    def backward(g):
        if m.requires_grad:
            m._accumulate(float(g) * weight * k.data)
        if k.requires_grad:
            k._accumulate(float(g) * weight * m.data)

    return _result(weight * m.data * k.data, (m, k), backward, "bilinear_cost")


def expected_flops(
    costs: Sequence[LayerCost],
    strengths: Mapping[str, Mapping[str, Tensor]],
    bits: Sequence[int],
) -> Tensor:
    """Expected FLOPs under softmax(r), softmax(s), as a differentiable scalar.

    ``strengths[name]`` holds ``{"r": Tensor, "s": Tensor}`` for each quantized
    layer. The same expression serves deterministic and stochastic search.
    """
    b = np.asarray(bits, dtype=np.float64)
    constant = sum(float(lc.macs) for lc in costs if not lc.quantized)
    terms = []
    for lc in costs:
        if not lc.quantized:
            continue
        if lc.name not in strengths:
            raise KeyError(f"no strengths for quantized layer {lc.name!r}")
        st = strengths[lc.name]
        m = _effective_bits(softmax(st["r"]), b)
        k = _effective_bits(softmax(st["s"]), b)
        terms.append(_bilinear(m, k, lc.macs / WORD_BITS))
    return _sum_scalars(terms, constant)


def _sum_scalars(terms: Sequence[Tensor], constant: float) -> Tensor:
    value = constant + sum(float(t.data) for t in terms)

    def backward(g):
        for t in terms:
            if t.requires_grad:
                t._accumulate(g)

    return _result(np.array(value), tuple(terms), backward, "sum_scalars")


def flops_penalty(expected: Union[Tensor, float], target: float, lam: float) -> Union[Tensor, float]:
    """``lam * max(0, expected - target)``; zero subgradient at equality."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if not isinstance(expected, Tensor):
        return lam * max(0.0, float(expected) - target)
    active = float(expected.data) > target
    value = lam * (float(expected.data) - target) if active else 0.0

    def backward(g):
        if active:
            expected._accumulate(float(g) * lam)

    return _result(np.array(value), (expected,), backward, "flops_penalty")


def cost_report(
    costs: Sequence[LayerCost],
    strengths: Mapping[str, Mapping[str, Tensor]],
    bits: Sequence[int],
    target_mflops: float,
    lam: float,
) -> CostReport:
    b = np.asarray(bits, dtype=np.float64)
    per_layer = {}
    for lc in costs:
        if lc.quantized:
            st = strengths[lc.name]
            m = float(np.dot(softmax(st["r"]).data, b))
            k = float(np.dot(softmax(st["s"]).data, b))
            per_layer[lc.name] = flop_pair(lc.macs, m, k)
        else:
            per_layer[lc.name] = float(lc.macs)
    total = sum(per_layer.values()) / 1e6
    return CostReport(total, target_mflops, lam, per_layer)
