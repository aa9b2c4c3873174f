"""Finite-difference checks of the search-mode gradients.

Backprop through a quantizer uses the straight-through rule, which is the
exact derivative of a surrogate forward with every rounding residual held at
its current value. ``reference="surrogate"`` differentiates that surrogate
numerically. ``reference="true"`` differentiates the real quantized forward.
That forward is piecewise constant in any strength whose layer output is
quantized again downstream, so the two references disagree by design.

Both references are only piecewise smooth (clip and ReLU kinks, plus rounding
for the true forward). A coordinate is accepted only when the central
difference is symmetric, i.e. ``f(+h) - f(0)`` and ``f(0) - f(-h)`` agree to
well below the gradient scale; otherwise it is redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .numerics import Param, Tensor
from .quantizer import activation_residuals, mixed_activations, surrogate_mixed_activations

GRAD_FLOOR = 1e-6


@dataclass
class CheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    worst: Optional[Tuple[str, int, float, float]] = None  # (param, flat index, analytic, numeric)


def rel_error(analytic: float, numeric: float, floor: float = GRAD_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(numeric), floor)


def central_difference(f: Callable[[], float], arr: np.ndarray, i: int, h: float,
                       f0: Optional[float] = None) -> Tuple[float, bool]:
    """(numeric derivative, smooth) for flat coordinate ``i`` of ``arr`` (mutated and restored)."""
    flat = arr.reshape(-1)
    orig = flat[i]
    if f0 is None:
        f0 = f()
    flat[i] = orig + h
    fp = f()
    flat[i] = orig - h
    fm = f()
    flat[i] = orig
    numeric = (fp - fm) / (2 * h)
    asym = abs((fp - f0) - (f0 - fm))
    smooth = asym <= 1e-3 * abs(fp - fm) + 1e-12
    return numeric, smooth


def check_params(
    loss: Callable[[], Tensor],
    params: Sequence[Param],
    n_coords: int,
    rng: np.random.Generator,
    h: float = 1e-5,
    max_tries: int = 20,
) -> CheckResult:
    """Compare backprop against central differences on ``n_coords`` sampled coordinates.

    Coordinates are drawn without replacement while possible. Each draw that
    lands on a non-smooth point is retried up to ``max_tries`` times.
    """
    for p in params:
        p.grad = None
    base = loss()
    base.backward()
    f0 = float(base.data)
    analytic = {id(p): np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params}

    def value() -> float:
        return float(loss().data)

    pool = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    order = list(rng.permutation(len(pool)))
    while len(order) < n_coords + max_tries * n_coords:
        order += list(rng.permutation(len(pool)))
    worst, worst_err, checked, skipped, cursor = None, 0.0, 0, 0, 0
    while checked < n_coords and cursor < len(order):
        k, i = pool[order[cursor]]
        cursor += 1
        p = params[k]
        numeric, smooth = central_difference(value, p.data, i, h, f0)
        if not smooth:
            skipped += 1
            continue
        a = float(analytic[id(p)].reshape(-1)[i])
        err = rel_error(a, numeric)
        checked += 1
        if err >= worst_err:
            worst_err, worst = err, (p.name, i, a, numeric)
    return CheckResult(worst_err, checked, skipped, worst)


def net_loss(net, x: np.ndarray, y: np.ndarray, reference: str = "surrogate") -> Callable[[], Tensor]:
    """Search-mode loss on one batch, with BN using batch statistics.

    For the surrogate reference the residuals are recorded by the first call
    and reused by every later one.
    """
    if reference not in ("surrogate", "true"):
        raise ValueError(f"unknown reference {reference!r}")
    net.ctx.residuals = {} if reference == "surrogate" else None

    def loss() -> Tensor:
        return nx.softmax_xent(net.forward(x, training=True), y)
    return loss


def freeze_gumbel(net, x: np.ndarray) -> None:
    """Run one forward and pin the drawn Gumbel noise for all later forwards."""
    net.ctx.frozen_noise = None
    net.forward(x, training=False)
    net.ctx.frozen_noise = {k: (gr.copy(), gs.copy()) for k, (gr, gs) in net.ctx.last_noise.items()}


def prepare(arch: str = "resnet20", mode: str = "det", seed: int = 0, batch: int = 4,
            input_hw: int = 8, tau: float = 1.0):
    """A search-mode net with non-trivial strengths and a small labelled batch."""
    from .network import build

    rng = np.random.default_rng(seed)
    net = build(arch, 10, seed=seed, input_hw=input_hw)
    for p in net.strength_params():
        p.data = rng.normal(0.0, 0.5, p.data.shape)
    for a in net.alpha_params():
        a.data = np.array([rng.uniform(1.0, 3.0)])
    net.set_search(mode, tau)
    x = rng.normal(0.0, 1.0, (batch, 3, input_hw, input_hw))
    y = rng.integers(0, 10, batch)
    if mode == "sto":
        freeze_gumbel(net, x)
    return net, x, y


def strength_gradcheck(arch: str = "resnet20", mode: str = "det", samples: int = 100, seed: int = 0,
                       include_alpha: bool = True, reference: str = "surrogate") -> Dict[str, CheckResult]:
    """Check ``samples`` coordinates each of r, of s and (optionally) of alpha.

    Layers have one alpha each, so the alpha group is capped at the layer count.
    """
    net, x, y = prepare(arch, mode, seed)
    loss = net_loss(net, x, y, reference)
    rng = np.random.default_rng(seed + 1)
    layers = net.quantized_layers()
    groups: Dict[str, List[Param]] = {"r": [c.r for c in layers], "s": [c.s for c in layers]}
    if include_alpha:
        groups["alpha"] = [c.alpha for c in layers]
    return {k: check_params(loss, ps, min(samples, sum(p.data.size for p in ps)), rng)
            for k, ps in groups.items()}


# ---------------------------------------------------------------------------
# clipping parameter, single layer
# ---------------------------------------------------------------------------

def alpha_gradcheck(n_cases: int = 100, seed: int = 0, bits: Sequence[int] = (1, 2, 3, 4, 5),
                    h: float = 1e-6) -> Dict[str, CheckResult]:
    """Backprop alpha gradient of one aggregated activation quantizer against both references.

    Away from rounding boundaries the true derivative is ``sum_i c_i X^i`` per
    unsaturated element. The straight-through value subtracts ``x/alpha`` from it.
    """
    rng = np.random.default_rng(seed)
    errs: Dict[str, List[float]] = {"surrogate": [], "true": []}
    skipped = {"surrogate": 0, "true": 0}
    while len(errs["surrogate"]) < n_cases:
        x = Tensor(rng.normal(0.5, 1.0, (4, 8)))
        a0 = float(rng.uniform(0.5, 2.0))
        g = rng.normal(size=x.shape)
        coeffs = Tensor(nx.softmax(Tensor(rng.normal(size=len(bits)))).data)
        alpha = Param(np.array([a0]), "alpha")
        nx.sum_all(nx.mul(mixed_activations(x, alpha, bits, coeffs), Tensor(g))).backward()
        analytic = float(alpha.grad[0])
        rho = activation_residuals(x.data, a0, bits)
        refs = {
            "surrogate": lambda a: surrogate_mixed_activations(x, a, bits, coeffs, rho),
            "true": lambda a: mixed_activations(x, a, bits, coeffs),
        }
        for name, fwd in refs.items():
            arr = np.array([a0])
            f = lambda: float(np.sum(g * fwd(Tensor(arr)).data))
            numeric, smooth = central_difference(f, arr, 0, h)
            if not smooth:
                skipped[name] += 1
                continue
            errs[name].append(rel_error(analytic, numeric))
    return {name: CheckResult(max(e) if e else float("nan"), len(e), skipped[name])
            for name, e in errs.items()}
