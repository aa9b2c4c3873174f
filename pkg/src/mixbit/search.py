"""Efficient bitwidth search: strength parameters, aggregation and the bilevel loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .costmodel import LayerCost, expected_flops, flops_penalty, network_flops
from .numerics import Adam, NumericalError, Param, SGD, Tensor, _result, cosine_lr, softmax
from .plan import BitwidthSet, NetworkPlan
from .quantizer import project_alpha

logger = logging.getLogger(__name__)

MODES = ("det", "sto")


# ---------------------------------------------------------------------------
# coefficients
# ---------------------------------------------------------------------------

def softmax_coeffs(strengths):
    """Softmax over a strength vector; returns a Tensor for Tensor input, else an array."""
    if isinstance(strengths, Tensor):
        return softmax(strengths)
    z = np.asarray(strengths, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def _perturb(strengths: Tensor, noise: np.ndarray, tau: float) -> Tensor:
    out = (strengths.data + noise) / tau

    def backward(g):
        strengths._accumulate(g / tau)

    return _result(out, (strengths,), backward, "gumbel_perturb")


def sample_gumbel(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.gumbel(0.0, 1.0, size=n)


def gumbel_coeffs(
    strengths: Tensor, tau: float, rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> Tensor:
    """Gumbel-Softmax relaxation: softmax((log p + g) / tau) with p = softmax(r).

    log p differs from r by a constant, which softmax ignores, so r is used directly.
    Pass ``noise`` to freeze g (gradient checks); otherwise it is drawn from ``rng``.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if not isinstance(strengths, Tensor):
        strengths = nx.tensor(strengths)
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or explicit noise")
        noise = sample_gumbel(rng, strengths.size)
    return softmax(_perturb(strengths, np.asarray(noise, dtype=np.float64), tau))


def aggregate_quantized(branches: Sequence[Tensor], coeffs: Tensor) -> Tensor:
    """Elementwise convex combination ``sum_i coeffs_i * branches_i``."""
    if len(branches) != coeffs.size:
        raise ValueError(f"{len(branches)} branches but {coeffs.size} coefficients")
    shape = branches[0].shape
    if any(b.shape != shape for b in branches):
        raise ValueError("all branches must share one shape")
    stacked = np.stack([b.data for b in branches])
    c = coeffs.data.reshape(-1)
    out = np.tensordot(c, stacked, axes=1)

    def backward(g):
        if coeffs.requires_grad:
            coeffs._accumulate((stacked.reshape(len(branches), -1) @ g.reshape(-1)).reshape(coeffs.shape))
        for ci, b in zip(c, branches):
            if b.requires_grad:
                b._accumulate(ci * g)

    return _result(out, tuple(branches) + (coeffs,), backward, "aggregate")


def select_plan(strengths: Dict[str, Dict[str, object]], bits: Sequence[int]) -> NetworkPlan:
    """Pick argmax bitwidths per layer; ties go to the smallest bitwidth."""
    bits = BitwidthSet(tuple(bits)).bits
    layers, kept = {}, {}
    for name, st in strengths.items():
        r = np.asarray(st["r"].data if isinstance(st["r"], Tensor) else st["r"], dtype=np.float64)
        s = np.asarray(st["s"].data if isinstance(st["s"], Tensor) else st["s"], dtype=np.float64)
        if len(r) != len(bits) or len(s) != len(bits):
            raise ValueError(f"layer {name}: strength length differs from bitwidth set")
        # np.argmax returns the first maximum, i.e. the smallest bitwidth
        layers[name] = (bits[int(np.argmax(r))], bits[int(np.argmax(s))])
        kept[name] = {"r": r.tolist(), "s": s.tolist()}
    return NetworkPlan(layers, kept)


# ---------------------------------------------------------------------------
# reference DNAS-style layer (test oracle only)
# ---------------------------------------------------------------------------

class ConvCounter:
    def __init__(self):
        self.calls = 0

    def conv2d(self, x: Tensor, w: Tensor, stride: int, pad: int) -> Tensor:
        self.calls += 1
        return nx.conv2d(x, w, stride, pad)


def dnas_reference_forward(
    x_hat: Tensor,
    meta_weights: Sequence[Tensor],
    strengths: Tensor,
    bits: Sequence[int],
    stride: int = 1,
    pad: int = 0,
    counter: Optional[ConvCounter] = None,
) -> Tensor:
    """``sum_i softmax(r)_i * (quantize_weights(W_i, b_i) * x_hat)``, one conv per branch."""
    from .quantizer import quantize_weights

    if len(meta_weights) != len(bits):
        raise ValueError("one meta weight tensor per branch is required")
    counter = counter or ConvCounter()
    coeffs = softmax(strengths)
    outs = [counter.conv2d(x_hat, quantize_weights(w, b), stride, pad)
            for w, b in zip(meta_weights, bits)]
    return aggregate_quantized(outs, coeffs)


# ---------------------------------------------------------------------------
# bilevel search
# ---------------------------------------------------------------------------

@dataclass
class SearchConfig:
    epochs: int = 40
    batch_size: int = 64
    weight_lr: float = 0.01
    weight_momentum: float = 0.9
    weight_decay: float = 5e-4
    arch_lr: float = 0.02
    lam: float = 0.06
    target_mflops: float = 1.0
    mode: str = "det"
    tau_start: float = 1.0
    tau_end: float = 0.4
    seed: int = 0
    pretrain_epochs: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.target_mflops <= 0:
            raise ValueError("FLOPs target must be positive")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class SearchOptimizers:
    weights: SGD
    strengths: Adam
    steps_done: int = 0
    total_steps: int = 0
    base_lr: float = 0.01


def make_optimizers(net, cfg: SearchConfig, total_steps: int = 0) -> SearchOptimizers:
    return SearchOptimizers(
        SGD(net.weight_params(), cfg.weight_lr, cfg.weight_momentum, cfg.weight_decay),
        Adam(net.strength_params(), cfg.arch_lr),
        total_steps=total_steps,
        base_lr=cfg.weight_lr,
    )


def tau_at(epoch: int, epochs: int, tau_start: float = 1.0, tau_end: float = 0.4) -> float:
    """Linear per-epoch anneal from tau_start (first epoch) to tau_end (last epoch)."""
    if epochs <= 1:
        return tau_start
    return tau_start + (tau_end - tau_start) * epoch / (epochs - 1)


def _check_loss(loss: Tensor, what: str) -> None:
    if not math.isfinite(float(loss.data)):
        raise NumericalError(f"non-finite {what} loss")


def search_step(
    net,
    train_batch: Tuple[np.ndarray, np.ndarray],
    valid_batch: Tuple[np.ndarray, np.ndarray],
    opt: SearchOptimizers,
    lam: float,
    flops_target_mflops: float,
    mode: str = "det",
    tau: float = 1.0,
) -> Tuple[float, float, float]:
    """One alternating iteration: weights on the train batch, then strengths on the valid batch."""
    xt, yt = train_batch
    xv, yv = valid_batch
    if len(yt) == 0 or len(yv) == 0:
        raise ValueError("search batches must be non-empty")
    net.set_search(mode, tau)

    if opt.total_steps:
        opt.weights.lr = cosine_lr(opt.base_lr, opt.steps_done, opt.total_steps)
    net.zero_grad()
    loss_t = nx.softmax_xent(net.forward(xt, training=True), yt)
    _check_loss(loss_t, "train")
    loss_t.backward()
    opt.weights.step()
    for a in net.alpha_params():
        project_alpha(a)

    net.zero_grad()
    loss_v = nx.softmax_xent(net.forward(xv, training=True), yv)
    _check_loss(loss_v, "valid")
    e_flops = expected_flops(net.layer_costs(), net.strengths(), net.bits)
    e_mflops = nx.mul_const(e_flops, 1e-6)
    objective = nx.add(loss_v, flops_penalty(e_mflops, flops_target_mflops, lam))
    objective.backward()
    opt.strengths.step()
    net.zero_grad()
    opt.steps_done += 1
    return float(loss_t.data), float(loss_v.data), float(e_mflops.data)


def evaluate(net, dataset, idx: np.ndarray, batch_size: int = 256, plan: Optional[NetworkPlan] = None) -> Tuple[float, float]:
    """(mean loss, accuracy) over ``idx`` with BN in eval mode."""
    total_loss, correct = 0.0, 0
    for b in range(0, len(idx), batch_size):
        sel = idx[b:b + batch_size]
        logits = net.forward(dataset.inputs(sel), training=False)
        y = dataset.labels[sel]
        total_loss += float(nx.softmax_xent(logits, y).data) * len(sel)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    n = max(len(idx), 1)
    return total_loss / n, correct / n


def pretrain_float(net, dataset, idx: np.ndarray, epochs: int, lr: float, batch_size: int, seed: int) -> None:
    """Full-precision warm-up of the meta weights before search."""
    if epochs <= 0:
        return
    net.set_float()
    opt = SGD(net.weight_params(), lr, 0.9, 5e-4)
    rng = np.random.default_rng(seed + 7)
    steps = epochs * math.ceil(len(idx) / batch_size)
    step = 0
    for _ in range(epochs):
        for sel in iterate(idx, batch_size, rng):
            opt.lr = cosine_lr(lr, step, steps)
            net.zero_grad()
            loss = nx.softmax_xent(net.forward(dataset.inputs(sel), training=True), dataset.labels[sel])
            _check_loss(loss, "pretrain")
            loss.backward()
            opt.step()
            step += 1
    net.zero_grad()


def iterate(idx, batch_size, rng):
    from .dataio import iterate_batches

    return iterate_batches(idx, batch_size, rng)


HISTORY_FIELDS = ("epoch", "train_loss", "valid_loss", "valid_acc", "expected_mflops", "tau")


def run_search(net, dataset, cfg: SearchConfig) -> Tuple[NetworkPlan, List[dict]]:
    """Alternating bilevel search; returns the plan from the best-validation epoch."""
    from .dataio import search_split

    train_idx, valid_idx = search_split(dataset, cfg.seed)
    pretrain_float(net, dataset, train_idx, cfg.pretrain_epochs, cfg.weight_lr * 4,
                   cfg.batch_size, cfg.seed)
    steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    opt = make_optimizers(net, cfg, total_steps=cfg.epochs * steps_per_epoch)
    rng = np.random.default_rng(cfg.seed)
    net.reseed_gumbel(cfg.seed + 1)

    best_acc, best_strengths = -1.0, net.strength_snapshot()
    history: List[dict] = []
    for epoch in range(cfg.epochs):
        tau = tau_at(epoch, cfg.epochs, cfg.tau_start, cfg.tau_end) if cfg.mode == "sto" else 1.0
        t_losses, v_losses, e_mflops = [], [], 0.0
        valid_iter = iterate(valid_idx, cfg.batch_size, rng)
        for sel_t in iterate(train_idx, cfg.batch_size, rng):
            sel_v = next(valid_iter, None)
            if sel_v is None:
                valid_iter = iterate(valid_idx, cfg.batch_size, rng)
                sel_v = next(valid_iter)
            lt, lv, e_mflops = search_step(
                net,
                (dataset.inputs(sel_t), dataset.labels[sel_t]),
                (dataset.inputs(sel_v), dataset.labels[sel_v]),
                opt, cfg.lam, cfg.target_mflops, cfg.mode, tau,
            )
            t_losses.append(lt)
            v_losses.append(lv)
        # validation accuracy uses the expected (softmax) coefficients in both modes
        net.set_search("det", tau)
        _, acc = evaluate(net, dataset, valid_idx)
        row = {
            "epoch": epoch + 1,
            "train_loss": float(np.mean(t_losses)),
            "valid_loss": float(np.mean(v_losses)),
            "valid_acc": acc,
            "expected_mflops": e_mflops,
            "tau": tau,
        }
        history.append(row)
        logger.info("search epoch %d: %s", epoch + 1, row)
        if acc >= best_acc:
            best_acc, best_strengths = acc, net.strength_snapshot()

    plan = select_plan(best_strengths, net.bits)
    return plan, history


# ---------------------------------------------------------------------------
# random-search baseline
# ---------------------------------------------------------------------------

class InfeasibleRange(ValueError):
    pass


def sample_random_plan(
    costs: Sequence[LayerCost],
    flops_range: Tuple[float, float],
    rng: np.random.Generator,
    bits: Sequence[int] = (1, 2, 3, 4, 5),
    max_draws: int = 10_000,
) -> NetworkPlan:
    """Rejection-sample uniform per-layer bitwidths until total FLOPs land in range."""
    lo, hi = flops_range
    if lo > hi:
        raise ValueError("empty FLOPs range")
    names = [lc.name for lc in costs if lc.quantized]
    bits = np.asarray(bits)
    for _ in range(max_draws):
        draw = rng.choice(bits, size=(len(names), 2))
        plan = NetworkPlan({n: (int(bw), int(bx)) for n, (bw, bx) in zip(names, draw)})
        f = network_flops(plan, costs)
        if lo <= f <= hi:
            return plan
    raise InfeasibleRange(f"no plan with FLOPs in [{lo}, {hi}] after {max_draws} draws")
