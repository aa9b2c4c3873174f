"""Fixed-point quantizers with straight-through gradients.

Weights are squashed through tanh, normalized to [0, 1], snapped to a uniform
``2**b - 1`` level grid and mapped back to [-1, 1]. Activations are clipped to
[0, alpha] with a learnable per-layer alpha and snapped to ``alpha * k / (2**b - 1)``.

The ``mixed_*`` functions implement the aggregated quantizers used during
bitwidth search: every candidate bitwidth quantizes the *same* tensor and the
results are blended with one coefficient vector, so a layer still runs a single
convolution no matter how many bitwidths are in play.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import Param, Tensor, _result

ALPHA_INIT = 6.0
ALPHA_FLOOR = 1e-3
DOMAIN_SLACK = 1e-9


def levels(b: int) -> int:
    if b < 1:
        raise ValueError(f"bitwidth must be >= 1, got {b}")
    return (1 << b) - 1


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def quantize_grid(x, b: int):
    """Snap values in [0, 1] to the grid ``{k / (2**b - 1)}``, halves rounding up."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < -DOMAIN_SLACK or x.max() > 1 + DOMAIN_SLACK):
        raise ValueError("quantize_grid expects inputs in [0, 1]")
    n = levels(b)
    return round_half_up(np.clip(x, 0.0, 1.0) * n) / n


# ---------------------------------------------------------------------------
# weights
# ---------------------------------------------------------------------------

def _weight_unit(w: np.ndarray):
    """Map raw weights into [0, 1]; returns (u, backward) where backward maps dL/du -> dL/dw.

    The normalization is differentiated exactly, including the max term, whose
    subgradient goes to the first element of largest magnitude.
    """
    t = np.tanh(w)
    flat = np.abs(t).reshape(-1)
    k = int(np.argmax(flat))
    m = float(flat[k])
    if m == 0.0:
        return None, None
    u = t / (2.0 * m) + 0.5

    def backward(gu: np.ndarray) -> np.ndarray:
        gt = gu / (2.0 * m)
        sign = np.sign(t.reshape(-1)[k])
        gt.reshape(-1)[k] -= sign * float(np.sum(gu * t)) / (2.0 * m * m)
        return gt * (1.0 - t * t)

    return u, backward


def quantize_weights(w: Tensor, b: int) -> Tensor:
    """b-bit signed weights on the grid ``{2k/(2**b - 1) - 1}``.

    An all-zero tensor quantizes to zeros.
    """
    if w.size == 0:
        raise ValueError("cannot quantize an empty weight tensor")
    if b >= 32:
        return w
    u, unit_backward = _weight_unit(w.data)
    if u is None:
        return _result(np.zeros_like(w.data), (w,), lambda g: None, "quantize_weights")
    out = 2.0 * quantize_grid(u, b) - 1.0

    def backward(g):
        # STE: rounding passes gradients unchanged, the 2x affine map is exact
        w._accumulate(unit_backward(2.0 * g))

    return _result(out, (w,), backward, "quantize_weights")


def weight_branches(w: np.ndarray, bits: Sequence[int]) -> np.ndarray:
    """Stack of quantized weights, one per bitwidth (plain arrays, no graph)."""
    u, _ = _weight_unit(w)
    if u is None:
        return np.zeros((len(bits),) + w.shape)
    return np.stack([2.0 * quantize_grid(u, b) - 1.0 for b in bits])


def mixed_weights(w: Tensor, bits: Sequence[int], coeffs: Tensor) -> Tensor:
    """Convex blend ``sum_i coeffs_i * quantize_weights(w, bits_i)`` as one graph node."""
    if coeffs.shape != (len(bits),):
        raise ValueError(f"need {len(bits)} coefficients, got shape {coeffs.shape}")
    u, unit_backward = _weight_unit(w.data)
    if u is None:
        branches = np.zeros((len(bits),) + w.shape)
    else:
        branches = np.stack([2.0 * quantize_grid(u, b) - 1.0 for b in bits])
    c = coeffs.data
    out = np.tensordot(c, branches, axes=1)

    def backward(g):
        if coeffs.requires_grad:
            coeffs._accumulate(branches.reshape(len(bits), -1) @ g.reshape(-1))
        if w.requires_grad and u is not None:
            w._accumulate(unit_backward(2.0 * float(c.sum()) * g))

    return _result(out, (w, coeffs), backward, "mixed_weights")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def clip_param(init: float = ALPHA_INIT, name: str = "alpha") -> Param:
    return Param(np.array([init]), name=name)


def project_alpha(alpha: Param) -> None:
    np.maximum(alpha.data, ALPHA_FLOOR, out=alpha.data)


def _alpha_value(alpha) -> float:
    a = float(np.asarray(alpha.data if isinstance(alpha, Tensor) else alpha).reshape(-1)[0])
    if a <= 0:
        raise ValueError(f"clipping parameter must be positive, got {a}")
    return a


def activation_codes_unit(x: np.ndarray, a: float) -> np.ndarray:
    return np.clip(x, 0.0, a) / a


def ste_backward(upstream, x, alpha) -> np.ndarray:
    """Straight-through gradient of the activation quantizer w.r.t. its input."""
    upstream = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError("upstream gradient and input shapes differ")
    return np.where(x <= _alpha_value(alpha), upstream, 0.0)


def alpha_gradient(x, alpha, coeffs, upstream, bits: Sequence[int]) -> float:
    """dL/dalpha of the (possibly aggregated) activation quantizer.

    Per element the local derivative is 1 where the input saturates (x > alpha)
    and ``sum_i c_i (X^i - x/alpha)`` otherwise, X^i being the normalized b_i-bit
    code of x.
    """
    a = _alpha_value(alpha)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if len(coeffs) != len(bits):
        raise ValueError("one coefficient per bitwidth required")
    unit = activation_codes_unit(x, a)
    inner = sum(c * (quantize_grid(unit, b) - x / a) for c, b in zip(coeffs, bits))
    local = np.where(x > a, 1.0, inner)
    return float(np.sum(local * np.asarray(upstream, dtype=np.float64)))


def quantize_activations(x: Tensor, alpha: Tensor, b: int) -> Tensor:
    """alpha * quantize_grid(clip(x, 0, alpha) / alpha, b)."""
    a = _alpha_value(alpha)
    if b >= 32:
        return x
    out = a * quantize_grid(activation_codes_unit(x.data, a), b)

    def backward(g):
        if x.requires_grad:
            x._accumulate(ste_backward(g, x.data, a))
        if alpha.requires_grad:
            ga = alpha_gradient(x.data, a, [1.0], g, [b])
            alpha._accumulate(np.full(alpha.shape, ga))

    return _result(out, (x, alpha), backward, "quantize_activations")


def mixed_activations(x: Tensor, alpha: Tensor, bits: Sequence[int], coeffs: Tensor) -> Tensor:
    """``alpha * sum_i coeffs_i * quantize_grid(clip(x, 0, alpha)/alpha, bits_i)``."""
    if coeffs.shape != (len(bits),):
        raise ValueError(f"need {len(bits)} coefficients, got shape {coeffs.shape}")
    a = _alpha_value(alpha)
    unit = activation_codes_unit(x.data, a)
    codes = np.stack([quantize_grid(unit, b) for b in bits])
    c = coeffs.data
    out = a * np.tensordot(c, codes, axes=1)

    def backward(g):
        if coeffs.requires_grad:
            coeffs._accumulate(a * (codes.reshape(len(bits), -1) @ g.reshape(-1)))
        csum = float(c.sum())
        if x.requires_grad:
            x._accumulate(csum * ste_backward(g, x.data, a))
        if alpha.requires_grad:
            sat = x.data > a
            inner = np.tensordot(c, codes, axes=1) - csum * x.data / a
            ga = float(np.sum(np.where(sat, csum, inner) * g))
            alpha._accumulate(np.full(alpha.shape, ga))

    return _result(out, (x, alpha, coeffs), backward, "mixed_activations")


def activation_residuals(x: np.ndarray, alpha: float, bits: Sequence[int]) -> np.ndarray:
    """Per-branch rounding residuals ``X^i - min(x, alpha)/alpha``, stacked on axis 0."""
    a = _alpha_value(alpha)
    x = np.asarray(x, dtype=np.float64)
    unit = activation_codes_unit(x, a)
    return np.stack([quantize_grid(unit, b) - np.minimum(x, a) / a for b in bits])


def surrogate_mixed_activations(x: Tensor, alpha: Tensor, bits: Sequence[int], coeffs: Tensor,
                                residuals: np.ndarray) -> Tensor:
    """``sum_i c_i (min(x, alpha) + alpha * rho_i)`` with the residuals ``rho`` held fixed.

    With ``rho`` taken at the current point this equals ``mixed_activations``
    there. The straight-through backward is its exact derivative, so finite
    differences of this function are the reference for that backward.
    """
    a = _alpha_value(alpha)
    if residuals.shape != (len(bits),) + x.shape:
        raise ValueError("residuals must stack one array per bitwidth")
    top = np.minimum(x.data, a)
    branches = top[None] + a * residuals
    c = coeffs.data
    out = np.tensordot(c, branches, axes=1)

    def backward(g):
        csum = float(c.sum())
        if coeffs.requires_grad:
            coeffs._accumulate(branches.reshape(len(bits), -1) @ g.reshape(-1))
        if x.requires_grad:
            x._accumulate(csum * np.where(x.data <= a, g, 0.0))
        if alpha.requires_grad:
            local = np.where(x.data > a, csum, 0.0) + np.tensordot(c, residuals, axes=1)
            alpha._accumulate(np.full(alpha.shape, float(np.sum(local * g))))

    return _result(out, (x, alpha, coeffs), backward, "surrogate_mixed_activations")


def on_grid(values, b: int, scale: float = 1.0, signed: bool = False, tol: float = 1e-9) -> bool:
    """True when every value sits on the b-bit grid (after undoing scale/sign)."""
    v = np.asarray(values, dtype=np.float64) / scale
    if signed:
        v = (v + 1.0) / 2.0
    k = v * levels(b)
    return bool(np.all(np.abs(k - np.round(k)) <= tol * max(1, levels(b)))
                and np.all(k >= -tol) and np.all(k <= levels(b) + tol))
