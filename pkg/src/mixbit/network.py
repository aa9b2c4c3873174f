"""Mixed-precision network assembly and forward modes.

A network is a small tree of ``ConvBN`` units, residual blocks and a dense
head. Every conv owns exactly one meta weight tensor; in search mode the
quantized branches for all candidate bitwidths are derived from it and blended
before a single convolution.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .costmodel import LayerCost
from .numerics import NumericalError, Param, SGD, Tensor, cosine_lr
from .plan import FULL_PRECISION, BitwidthSet, NetworkPlan
from .quantizer import (
    activation_residuals,
    clip_param,
    mixed_activations,
    mixed_weights,
    project_alpha,
    quantize_activations,
    quantize_weights,
    surrogate_mixed_activations,
)
from .search import gumbel_coeffs, sample_gumbel, softmax_coeffs

logger = logging.getLogger(__name__)

MODES = ("float", "det", "sto", "fixed")


@dataclass
class LayerSpec:
    kind: str  # conv | dense | bn | relu | avgpool | residual-add
    name: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    quantize: bool = False
    in_hw: int = 0


class Context:
    """Forward-mode switches shared by all layers of one network."""

    def __init__(self, bits: Sequence[int]):
        self.bits = tuple(bits)
        self.mode = "float"
        self.tau = 1.0
        self.plan: Optional[NetworkPlan] = None
        self.rng = np.random.default_rng(0)
        self.frozen_noise: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None
        self.last_noise: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
        self.bd: Optional[Dict[str, Callable[[np.ndarray], np.ndarray]]] = None
        self.training = False
        self.probe: Optional[Callable[[str, np.ndarray, np.ndarray], None]] = None
        # straight-through surrogate: per-layer rounding residuals, filled on first use
        self.residuals: Optional[Dict[str, np.ndarray]] = None


class BatchNorm:
    def __init__(self, name: str, channels: int):
        self.name = name
        self.gamma = Param(np.ones(channels), f"{name}.gamma")
        self.beta = Param(np.zeros(channels), f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = 0.1
        self.eps = 1e-5

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return nx.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            training, self.momentum, self.eps)

    def folded(self) -> Tuple[np.ndarray, np.ndarray]:
        """Eval-mode BN as per-channel (scale, shift)."""
        scale = self.gamma.data / np.sqrt(self.running_var + self.eps)
        return scale, self.beta.data - self.running_mean * scale


class ConvBN:
    """conv -> BN, with optional activation/weight quantization on the conv."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int, stride: int, pad: int,
                 quantize: bool, in_hw: int, ctx: Context, rng: np.random.Generator):
        self.name = name
        self.spec = LayerSpec("conv", name, in_ch, out_ch, kernel, stride, pad, quantize, in_hw)
        self.ctx = ctx
        fan_in = in_ch * kernel * kernel
        self.weight = Param(rng.normal(0.0, math.sqrt(2.0 / fan_in), (out_ch, in_ch, kernel, kernel)),
                            f"{name}.weight")
        self.bn = BatchNorm(f"{name}.bn", out_ch)
        self.out_hw = nx.conv_output_size(in_hw, kernel, stride, pad)
        self.conv_calls = 0
        self.quantize = quantize
        if quantize:
            n = len(ctx.bits)
            self.alpha = clip_param(name=f"{name}.alpha")
            self.r = Param(np.zeros(n), f"{name}.r")
            self.s = Param(np.zeros(n), f"{name}.s")

    @property
    def macs(self) -> int:
        s = self.spec
        return s.out_ch * s.in_ch * s.kernel * s.kernel * self.out_hw * self.out_hw

    def _coeffs(self) -> Tuple[Tensor, Tensor]:
        ctx = self.ctx
        if ctx.mode == "det":
            return softmax_coeffs(self.r), softmax_coeffs(self.s)
        if ctx.frozen_noise is not None and self.name in ctx.frozen_noise:
            gr, gs = ctx.frozen_noise[self.name]
        else:
            n = len(ctx.bits)
            gr, gs = sample_gumbel(ctx.rng, n), sample_gumbel(ctx.rng, n)
        ctx.last_noise[self.name] = (gr, gs)
        return gumbel_coeffs(self.r, ctx.tau, noise=gr), gumbel_coeffs(self.s, ctx.tau, noise=gs)

    def quantized_inputs(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """(activation, weight) tensors that feed this layer's single convolution."""
        ctx = self.ctx
        if not self.quantize or ctx.mode == "float":
            return x, self.weight
        if ctx.mode in ("det", "sto"):
            cw, cx = self._coeffs()
            wq = mixed_weights(self.weight, ctx.bits, cw)
            if ctx.residuals is not None:
                rho = ctx.residuals.get(self.name)
                if rho is None:
                    rho = ctx.residuals[self.name] = activation_residuals(x.data, self.alpha, ctx.bits)
                return surrogate_mixed_activations(x, self.alpha, ctx.bits, cx, rho), wq
            return mixed_activations(x, self.alpha, ctx.bits, cx), wq
        bw, bx = ctx.plan[self.name]
        return quantize_activations(x, self.alpha, bx), quantize_weights(self.weight, bw)

    def __call__(self, x: Tensor) -> Tensor:
        ctx = self.ctx
        if ctx.bd is not None and self.name in ctx.bd:
            return Tensor(ctx.bd[self.name](x.data))
        xq, wq = self.quantized_inputs(x)
        if ctx.probe is not None and self.quantize:
            ctx.probe(self.name, xq.data, wq.data)
        self.conv_calls += 1
        out = nx.conv2d(xq, wq, self.spec.stride, self.spec.pad)
        return self.bn(out, ctx.training)

    def params(self) -> List[Param]:
        ps = [self.weight, self.bn.gamma, self.bn.beta]
        if self.quantize:
            ps.append(self.alpha)
        return ps


class BasicBlock:
    def __init__(self, name: str, in_ch: int, out_ch: int, stride: int, in_hw: int,
                 ctx: Context, rng: np.random.Generator):
        self.name = name
        self.conv1 = ConvBN(f"{name}.conv1", in_ch, out_ch, 3, stride, 1, True, in_hw, ctx, rng)
        hw = self.conv1.out_hw
        self.conv2 = ConvBN(f"{name}.conv2", out_ch, out_ch, 3, 1, 1, True, hw, ctx, rng)
        self.shortcut = None
        if stride != 1 or in_ch != out_ch:
            self.shortcut = ConvBN(f"{name}.shortcut", in_ch, out_ch, 1, stride, 0, True, in_hw, ctx, rng)
        self.out_hw = hw

    def __call__(self, x: Tensor) -> Tensor:
        out = nx.relu(self.conv1(x))
        out = self.conv2(out)
        short = x if self.shortcut is None else self.shortcut(x)
        return nx.relu(nx.add(out, short))

    def convs(self) -> List[ConvBN]:
        cs = [self.conv1, self.conv2]
        if self.shortcut is not None:
            cs.append(self.shortcut)
        return cs


class ConvStage:
    """conv -> BN -> ReLU, used by TinyNet."""

    def __init__(self, conv: ConvBN):
        self.conv = conv
        self.out_hw = conv.out_hw

    def __call__(self, x: Tensor) -> Tensor:
        return nx.relu(self.conv(x))

    def convs(self) -> List[ConvBN]:
        return [self.conv]


class Dense:
    def __init__(self, name: str, in_f: int, out_f: int, rng: np.random.Generator):
        self.name = name
        self.spec = LayerSpec("dense", name, in_f, out_f)
        self.weight = Param(rng.normal(0.0, math.sqrt(1.0 / in_f), (out_f, in_f)), f"{name}.weight")
        self.bias = Param(np.zeros(out_f), f"{name}.bias")

    @property
    def macs(self) -> int:
        return self.spec.in_ch * self.spec.out_ch

    def __call__(self, x: Tensor) -> Tensor:
        return nx.dense(x, self.weight, self.bias)


class MixedPrecNet:
    def __init__(self, arch: str, num_classes: int, input_hw: int, bits: Sequence[int], seed: int,
                 stem: ConvBN, body: list, head: Dense, ctx: Context):
        self.arch = arch
        self.num_classes = num_classes
        self.input_hw = input_hw
        self.bits = tuple(bits)
        self.seed = seed
        self.stem, self.body, self.head, self.ctx = stem, body, head, ctx
        self.frozen = False

    # -- structure --------------------------------------------------------
    def convs(self) -> List[ConvBN]:
        out = [self.stem]
        for blk in self.body:
            out.extend(blk.convs())
        return out

    def quantized_layers(self) -> List[ConvBN]:
        return [c for c in self.convs() if c.quantize]

    def layer_names(self) -> List[str]:
        return [c.name for c in self.quantized_layers()]

    def layer_specs(self) -> List[LayerSpec]:
        return [c.spec for c in self.convs()] + [self.head.spec]

    def layer_costs(self) -> List[LayerCost]:
        costs = [LayerCost(c.name, c.macs, c.quantize) for c in self.convs()]
        costs.append(LayerCost(self.head.name, self.head.macs, False))
        return costs

    def params(self) -> List[Param]:
        ps = []
        for c in self.convs():
            ps.extend(c.params())
        return ps + [self.head.weight, self.head.bias]

    def weight_params(self) -> List[Param]:
        return self.params()

    def alpha_params(self) -> List[Param]:
        return [c.alpha for c in self.quantized_layers()]

    def strength_params(self) -> List[Param]:
        out = []
        for c in self.quantized_layers():
            out += [c.r, c.s]
        return out

    def strengths(self) -> Dict[str, Dict[str, Param]]:
        return {c.name: {"r": c.r, "s": c.s} for c in self.quantized_layers()}

    def strength_snapshot(self) -> Dict[str, Dict[str, List[float]]]:
        return {c.name: {"r": c.r.data.tolist(), "s": c.s.data.tolist()} for c in self.quantized_layers()}

    def meta_weight_count(self, name: str) -> int:
        layer = {c.name: c for c in self.convs()}[name]
        return sum(1 for p in layer.params() if p.name.endswith(".weight"))

    def zero_grad(self) -> None:
        for p in self.params() + self.strength_params():
            p.grad = None

    def reset_counters(self) -> None:
        for c in self.convs():
            c.conv_calls = 0

    def conv_counts(self) -> Dict[str, int]:
        return {c.name: c.conv_calls for c in self.convs()}

    # -- modes --------------------------------------------------------------
    @property
    def mode(self) -> str:
        return self.ctx.mode

    def set_float(self) -> None:
        self.ctx.mode, self.ctx.plan = "float", None

    def set_search(self, mode: str = "det", tau: float = 1.0) -> None:
        if mode not in ("det", "sto"):
            raise ValueError(f"unknown search mode {mode!r}")
        self.ctx.mode, self.ctx.tau = mode, tau

    def set_fixed(self, plan: NetworkPlan) -> None:
        plan.validate(self.layer_names())
        self.ctx.mode, self.ctx.plan = "fixed", plan

    def reseed_gumbel(self, seed: int) -> None:
        self.ctx.rng = np.random.default_rng(seed)

    def freeze(self) -> None:
        """Mark BN running statistics as final (required before BD export)."""
        self.frozen = True

    # -- execution ----------------------------------------------------------
    def forward(self, x, training: bool = False, bd=None) -> Tensor:
        ctx = self.ctx
        if training:
            self.frozen = False
        ctx.training = training
        ctx.bd = bd
        if not isinstance(x, Tensor):
            x = Tensor(x)
        try:
            out = nx.relu(self.stem(x))
            for blk in self.body:
                out = blk(out)
            return self.head(nx.global_avg_pool(out))
        finally:
            ctx.bd = None

    __call__ = forward

    def predict(self, x: np.ndarray, batch_size: int = 256, bd=None) -> np.ndarray:
        outs = [self.forward(x[i:i + batch_size], training=False, bd=bd).data
                for i in range(0, len(x), batch_size)]
        return np.concatenate(outs)


def build_resnet20(num_classes: int = 10, bits: Sequence[int] = (1, 2, 3, 4, 5),
                   seed: int = 0, input_hw: int = 32) -> MixedPrecNet:
    """CIFAR ResNet-20: 3 stages x 3 basic blocks, widths 16/32/64, 1x1 projection shortcuts."""
    BitwidthSet(tuple(bits))
    rng = np.random.default_rng(seed)
    ctx = Context(bits)
    stem = ConvBN("stem", 3, 16, 3, 1, 1, False, input_hw, ctx, rng)
    body, in_ch, hw = [], 16, stem.out_hw
    for stage, width in enumerate((16, 32, 64)):
        for i in range(3):
            stride = 2 if stage > 0 and i == 0 else 1
            blk = BasicBlock(f"layer{stage + 1}.{i}", in_ch, width, stride, hw, ctx, rng)
            body.append(blk)
            in_ch, hw = width, blk.out_hw
    head = Dense("fc", 64, num_classes, rng)
    return MixedPrecNet("resnet20", num_classes, input_hw, bits, seed, stem, body, head, ctx)


def build_tinynet(num_classes: int = 10, bits: Sequence[int] = (1, 2, 3, 4, 5),
                  seed: int = 0, input_hw: int = 16) -> MixedPrecNet:
    """conv(3->8) then three quantized conv stages 8->16 (s1), 16->32 (s2), 32->32 (s1)."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    BitwidthSet(tuple(bits))
    rng = np.random.default_rng(seed)
    ctx = Context(bits)
    stem = ConvBN("stem", 3, 8, 3, 1, 1, False, input_hw, ctx, rng)
    body, hw = [], stem.out_hw
    for i, (ci, co, st) in enumerate(((8, 16, 1), (16, 32, 2), (32, 32, 1))):
        stage = ConvStage(ConvBN(f"q{i + 1}", ci, co, 3, st, 1, True, hw, ctx, rng))
        body.append(stage)
        hw = stage.out_hw
    head = Dense("fc", 32, num_classes, rng)
    return MixedPrecNet("tinynet", num_classes, input_hw, bits, seed, stem, body, head, ctx)


ARCHS = {"resnet20": build_resnet20, "tinynet": build_tinynet}


def build(arch: str, num_classes: int = 10, bits: Sequence[int] = (1, 2, 3, 4, 5),
          seed: int = 0, input_hw: Optional[int] = None) -> MixedPrecNet:
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; choose from {sorted(ARCHS)}")
    kwargs = {} if input_hw is None else {"input_hw": input_hw}
    return ARCHS[arch](num_classes=num_classes, bits=bits, seed=seed, **kwargs)


def parameter_count(net: MixedPrecNet) -> int:
    return int(sum(p.data.size for p in net.params() if not p.name.endswith(".alpha")))


def forward_search(net: MixedPrecNet, batch: np.ndarray, mode: str = "det", tau: float = 1.0,
                   training: bool = False) -> Tensor:
    net.set_search(mode, tau)
    return net.forward(batch, training=training)


def forward_fixed(net: MixedPrecNet, batch: np.ndarray, plan: NetworkPlan, training: bool = False) -> Tensor:
    net.set_fixed(plan)
    return net.forward(batch, training=training)


def full_precision_plan(net: MixedPrecNet) -> NetworkPlan:
    """Sentinel plan that bypasses quantization on every layer."""
    return NetworkPlan.uniform(net.layer_names(), FULL_PRECISION)


# ---------------------------------------------------------------------------
# retraining
# ---------------------------------------------------------------------------

@dataclass
class RetrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.04
    momentum: float = 0.9
    weight_decay_high: float = 5e-4
    weight_decay_low: float = 1e-4
    seed: int = 0


def is_low_bit(plan: NetworkPlan) -> bool:
    bits = [b for pair in plan.layers.values() for b in pair]
    return bool(bits) and float(np.mean(bits)) < 3.0


def retrain(net: MixedPrecNet, dataset, plan: NetworkPlan, cfg: RetrainConfig,
            train_split: str = "train", test_split: str = "test") -> dict:
    """Retrain meta weights and alphas under a fixed plan; no strengths, no FLOPs penalty.

    Low-bit plans use the smaller weight decay and leave alpha undecayed.
    """
    from .dataio import augment_batch, iterate_batches
    from .search import evaluate

    net.set_fixed(plan)
    train_idx = dataset.split(train_split)
    test_idx = dataset.split(test_split)
    low = is_low_bit(plan)
    wd = cfg.weight_decay_low if low else cfg.weight_decay_high
    opt = SGD(net.weight_params(), cfg.lr, cfg.momentum, wd,
              no_decay=net.alpha_params() if low else ())
    rng = np.random.default_rng(cfg.seed)
    total = cfg.epochs * math.ceil(len(train_idx) / cfg.batch_size)
    step = 0
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for sel in iterate_batches(train_idx, cfg.batch_size, rng):
            x = dataset.inputs(sel)
            if dataset.augment:
                x = augment_batch(x, rng)
            opt.lr = cosine_lr(cfg.lr, step, total)
            net.zero_grad()
            loss = nx.softmax_xent(net.forward(x, training=True), dataset.labels[sel])
            if not math.isfinite(float(loss.data)):
                raise NumericalError("non-finite retraining loss")
            loss.backward()
            opt.step()
            for a in net.alpha_params():
                project_alpha(a)
            losses.append(float(loss.data))
            step += 1
        history.append({"epoch": epoch + 1, "train_loss": float(np.mean(losses))})
    net.zero_grad()
    net.freeze()
    _, train_acc = evaluate(net, dataset, train_idx)
    test_loss, test_acc = evaluate(net, dataset, test_idx)
    return {"train_acc": train_acc, "test_acc": test_acc, "test_loss": test_loss,
            "epochs": cfg.epochs, "history": history}


# ---------------------------------------------------------------------------
# checkpoints: JSON manifest + little-endian f64 blob
# ---------------------------------------------------------------------------

CKPT_MANIFEST = "manifest.json"
CKPT_BLOB = "tensors.bin"


def _state_arrays(net: MixedPrecNet) -> Iterator[Tuple[str, np.ndarray]]:
    for p in net.params():
        yield p.name, p.data
    for c in net.convs():
        yield f"{c.bn.name}.running_mean", c.bn.running_mean
        yield f"{c.bn.name}.running_var", c.bn.running_var


def save_checkpoint(net: MixedPrecNet, path, plan: Optional[NetworkPlan] = None,
                    include_strengths: bool = True) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    table, offset = [], 0
    with open(d / CKPT_BLOB, "wb") as blob:
        for name, arr in _state_arrays(net):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blob.write(raw)
            offset += len(raw)
    manifest = {
        "format": "mixbit-checkpoint",
        "version": 1,
        "architecture": {"name": net.arch, "num_classes": net.num_classes,
                         "input_hw": net.input_hw, "bits": list(net.bits), "seed": net.seed},
        "layers": [asdict(s) for s in net.layer_specs()],
        "mode": net.mode,
        "frozen": bool(net.frozen),
        "plan": plan.to_json() if plan is not None else None,
        "alpha": {a.name: float(a.data[0]) for a in net.alpha_params()},
        "strengths": net.strength_snapshot() if include_strengths else None,
        "tensors": table,
    }
    with open(d / CKPT_MANIFEST, "w", newline="\n") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return d


def load_checkpoint(path) -> Tuple[MixedPrecNet, Optional[NetworkPlan], dict]:
    d = Path(path)
    with open(d / CKPT_MANIFEST) as f:
        manifest = json.load(f)
    arch = manifest["architecture"]
    net = build(arch["name"], arch["num_classes"], arch["bits"], arch["seed"], arch["input_hw"])
    load_weights(net, d, manifest)
    if manifest.get("strengths"):
        for c in net.quantized_layers():
            st = manifest["strengths"][c.name]
            c.r.data = np.array(st["r"], dtype=np.float64)
            c.s.data = np.array(st["s"], dtype=np.float64)
    plan = NetworkPlan.from_json(manifest["plan"]) if manifest.get("plan") else None
    if plan is not None:
        net.set_fixed(plan)
    net.frozen = bool(manifest.get("frozen", False))
    return net, plan, manifest


def load_weights(net: MixedPrecNet, path, manifest: Optional[dict] = None) -> None:
    """Copy tensors from a checkpoint into ``net``; shapes must match exactly.

    Meta weights do not depend on bitwidths, so a checkpoint trained under one
    plan initializes a net for any other plan (progressive initialization).
    """
    d = Path(path)
    if manifest is None:
        with open(d / CKPT_MANIFEST) as f:
            manifest = json.load(f)
    raw = (d / CKPT_BLOB).read_bytes()
    entries = {e["name"]: e for e in manifest["tensors"]}
    for name, arr in _state_arrays(net):
        if name not in entries:
            raise KeyError(f"checkpoint lacks tensor {name!r}")
        e = entries[name]
        if tuple(e["shape"]) != arr.shape:
            raise ValueError(f"{name}: checkpoint shape {e['shape']} != model shape {arr.shape}")
        arr[...] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(arr.shape)),
                                 offset=e["offset"]).reshape(arr.shape)
