"""Command-line driver: search -> select -> retrain -> export-bd -> infer-bd.

Exit codes: 0 success, 2 configuration error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .costmodel import CostReport, fmt_mflops, full_precision_flops, network_flops, per_layer_flops
from .plan import FULL_PRECISION, BitwidthSet, NetworkPlan

logger = logging.getLogger("mixbit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DATASET_KEYS = {"kind", "num_classes", "n_per_class", "hw", "seed", "path", "subset", "normalize"}


@dataclass
class RunConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic"})
    arch: str = "tinynet"
    bits: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    mode: str = "det"
    lam: float = 0.06
    target_mflops: float = 1.0
    search_epochs: int = 40
    pretrain_epochs: int = 0
    retrain_epochs: int = 30
    batch_size: int = 64
    retrain_batch_size: int = 128
    weight_lr: float = 0.01
    arch_lr: float = 0.02
    retrain_lr: float = 0.04
    tau_start: float = 1.0
    tau_end: float = 0.4
    seed: int = 0
    out_dir: str = "run"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as f:
                doc = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(doc)

    def validate(self) -> None:
        from .network import ARCHS

        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        try:
            BitwidthSet(tuple(self.bits))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.mode not in ("det", "sto"):
            raise ConfigError("mode must be 'det' or 'sto'")
        if self.lam < 0:
            raise ConfigError("lam must be >= 0")
        if self.target_mflops <= 0:
            raise ConfigError("target_mflops must be > 0")
        if min(self.search_epochs, self.retrain_epochs, self.pretrain_epochs) < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be > 0")
        unknown = sorted(set(self.dataset) - DATASET_KEYS)
        if unknown:
            raise ConfigError(f"unknown dataset keys: {unknown}")
        kind = self.dataset.get("kind", "synthetic")
        if kind not in ("synthetic", "cifar10"):
            raise ConfigError(f"unknown dataset kind {kind!r}")
        if kind == "cifar10":
            path = self.dataset.get("path")
            if not path or not Path(path).is_dir():
                raise ConfigError(f"CIFAR-10 directory not found: {path!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def load_dataset(cfg: RunConfig):
    from .dataio import gen_synthetic, load_cifar10

    d = dict(cfg.dataset)
    if d.get("kind", "synthetic") == "cifar10":
        return load_cifar10(d["path"], normalize=d.get("normalize", True), subset=d.get("subset"),
                            seed=d.get("seed", cfg.seed))
    return gen_synthetic(d.get("num_classes", 10), d.get("n_per_class", 60), d.get("hw", 16),
                         d.get("seed", cfg.seed))


def build_net(cfg: RunConfig, dataset):
    from .network import build

    return build(cfg.arch, dataset.num_classes, cfg.bits, cfg.seed, dataset.hw)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k)) for k in header})


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def emit_report(history: Sequence[dict], plan: Optional[NetworkPlan], cost: Optional[CostReport],
                out_dir) -> List[Path]:
    """Write history.csv, plan.json, distribution.csv (and cost.csv when given)."""
    from .search import HISTORY_FIELDS

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "history.csv"]
    _write_csv(written[0], HISTORY_FIELDS, history)
    if plan is not None:
        plan.save(out / "plan.json")
        rows = [{"layer_index": i, "layer": n, "b_w": bw, "b_x": bx}
                for i, (n, (bw, bx)) in enumerate(plan.layers.items())]
        _write_csv(out / "distribution.csv", ("layer_index", "layer", "b_w", "b_x"), rows)
        written += [out / "plan.json", out / "distribution.csv"]
    if cost is not None:
        write_cost_csv(cost, out / "cost.csv")
        written.append(out / "cost.csv")
    return written


def write_cost_csv(cost: CostReport, path) -> None:
    rows = cost.rows() + [
        {"layer": "TOTAL", "mflops": fmt_mflops(cost.expected_mflops)},
        {"layer": "TARGET", "mflops": fmt_mflops(cost.target_mflops)},
        {"layer": "PENALTY", "mflops": fmt_mflops(cost.penalty)},
    ]
    _write_csv(Path(path), ("layer", "mflops"), rows)


def write_manifest(out_dir, command: str, cfg: Optional[RunConfig], extra: Optional[dict] = None) -> Path:
    doc = {
        "command": command,
        "config": cfg.to_dict() if cfg else None,
        "config_sha256": cfg.digest() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "versions": {"mixbit": __version__, "numpy": np.__version__, "python": platform.python_version()},
    }
    doc.update(extra or {})
    path = Path(out_dir) / f"manifest-{command}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    return path


def write_predictions(path, labels: np.ndarray) -> None:
    rows = [{"index": i, "label": int(y)} for i, y in enumerate(labels)]
    _write_csv(Path(path), ("index", "label"), rows)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _out(args, cfg: Optional[RunConfig]) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.out_dir if cfg else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_search(args) -> int:
    from .costmodel import cost_report
    from .network import save_checkpoint
    from .search import SearchConfig, run_search

    cfg = RunConfig.load(args.config)
    out = _out(args, cfg)
    ds = load_dataset(cfg)
    net = build_net(cfg, ds)
    scfg = SearchConfig(cfg.search_epochs, cfg.batch_size, cfg.weight_lr, 0.9, 5e-4, cfg.arch_lr,
                        cfg.lam, cfg.target_mflops, cfg.mode, cfg.tau_start, cfg.tau_end, cfg.seed,
                        cfg.pretrain_epochs)
    plan, history = run_search(net, ds, scfg)
    # keep the best-epoch strengths on the saved net so `select` reproduces the plan
    for c in net.quantized_layers():
        c.r.data = np.array(plan.strengths[c.name]["r"])
        c.s.data = np.array(plan.strengths[c.name]["s"])
    save_checkpoint(net, out / "search_ckpt")
    cost = cost_report(net.layer_costs(), net.strengths(), net.bits, cfg.target_mflops, cfg.lam)
    emit_report(history, plan, cost, out)
    mflops = network_flops(plan, net.layer_costs()) / 1e6
    write_manifest(out, "search", cfg, {"plan_mflops": mflops})
    print(f"search done: plan {fmt_mflops(mflops)} MFLOPs (target {fmt_mflops(cfg.target_mflops)})")
    return EXIT_OK


def cmd_select(args) -> int:
    from .network import load_checkpoint
    from .search import select_plan

    run = Path(args.run)
    net, _, _ = load_checkpoint(run / "search_ckpt" if (run / "search_ckpt").is_dir() else run)
    plan = select_plan(net.strength_snapshot(), net.bits)
    out = Path(args.out) if args.out else run / "plan.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    rows = [{"layer_index": i, "layer": n, "b_w": bw, "b_x": bx}
            for i, (n, (bw, bx)) in enumerate(plan.layers.items())]
    _write_csv(out.parent / "distribution.csv", ("layer_index", "layer", "b_w", "b_x"), rows)
    print(f"plan written to {out}: {fmt_mflops(network_flops(plan, net.layer_costs()) / 1e6)} MFLOPs")
    return EXIT_OK


def cmd_retrain(args) -> int:
    from .network import RetrainConfig, load_weights, retrain, save_checkpoint

    cfg = RunConfig.load(args.config)
    out = _out(args, cfg)
    ds = load_dataset(cfg)
    net = build_net(cfg, ds)
    plan = NetworkPlan.load(args.plan)
    try:
        plan.validate(net.layer_names(), BitwidthSet(tuple(cfg.bits)))
    except (KeyError, ValueError) as e:
        raise ConfigError(f"plan does not fit the architecture: {e}") from e
    if args.init:
        load_weights(net, args.init)
    metrics = retrain(net, ds, plan, RetrainConfig(cfg.retrain_epochs, cfg.retrain_batch_size,
                                                   cfg.retrain_lr, seed=cfg.seed))
    save_checkpoint(net, out / "model", plan=plan, include_strengths=False)
    with open(out / "metrics.json", "w", newline="\n") as f:
        json.dump({k: v for k, v in metrics.items() if k != "history"}, f, indent=2)
        f.write("\n")
    write_manifest(out, "retrain", cfg, {"plan": str(args.plan)})
    print(f"retrain done: train acc {metrics['train_acc']:.4f}, test acc {metrics['test_acc']:.4f}")
    return EXIT_OK


def _eval_inputs(args):
    cfg = RunConfig.load(args.config)
    ds = load_dataset(cfg)
    idx = ds.split(args.split)
    return cfg, ds, idx


def cmd_eval(args) -> int:
    from .network import load_checkpoint

    cfg, ds, idx = _eval_inputs(args)
    net, plan, _ = load_checkpoint(args.checkpoint)
    if plan is None:
        raise ConfigError("checkpoint carries no plan; retrain first")
    logits = net.predict(ds.inputs(idx))
    pred = np.argmax(logits, axis=1)
    acc = float(np.mean(pred == ds.labels[idx]))
    out = _out(args, cfg)
    write_predictions(out / "predictions-eval.csv", pred)
    np.save(out / "logits-eval.npy", logits)
    print(f"eval accuracy {acc:.4f} on {len(idx)} {args.split} samples")
    return EXIT_OK


def cmd_export_bd(args) -> int:
    from .bindec import export_bd_model, layer_bytes, lower_network
    from .network import load_checkpoint

    net, plan, _ = load_checkpoint(args.checkpoint)
    if plan is None:
        raise ConfigError("checkpoint carries no plan; only retrained fixed-plan models export")
    path = export_bd_model(net, args.out)
    planes = sum(layer_bytes(l)["planes"] for l in lower_network(net).values())
    print(f"wrote {path} ({path.stat().st_size} bytes, {planes} in weight planes)")
    return EXIT_OK


def cmd_infer_bd(args) -> int:
    from .bindec import attach, load_bd
    from .network import load_checkpoint

    cfg, ds, idx = _eval_inputs(args)
    net, plan, _ = load_checkpoint(args.checkpoint)
    if plan is None:
        raise ConfigError("checkpoint carries no plan")
    layers = attach(net, load_bd(args.bd))
    logits = net.predict(ds.inputs(idx), bd=layers)
    pred = np.argmax(logits, axis=1)
    out = _out(args, cfg)
    write_predictions(out / "predictions-bd.csv", pred)
    np.save(out / "logits-bd.npy", logits)
    print(f"BD accuracy {float(np.mean(pred == ds.labels[idx])):.4f} on {len(idx)} {args.split} samples")
    return EXIT_OK


def parse_plan_arg(text: str, names: Sequence[str]) -> NetworkPlan:
    if text == "full":
        return NetworkPlan.uniform(names, FULL_PRECISION)
    if text.startswith("uniform:"):
        parts = text.split(":", 1)[1].split(",")
        try:
            bits = [int(p) for p in parts]
        except ValueError as e:
            raise ConfigError(f"bad uniform plan {text!r}") from e
        return NetworkPlan.uniform(names, bits[0], bits[-1])
    return NetworkPlan.load(text)


def cmd_flops(args) -> int:
    from .network import build

    net = build(args.arch, args.num_classes, input_hw=args.input_hw)
    costs = net.layer_costs()
    plan = parse_plan_arg(args.plan, net.layer_names())
    total = network_flops(plan, costs)
    cost = CostReport(total / 1e6, total / 1e6, 0.0, per_layer_flops(plan, costs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_cost_csv(cost, out / "cost.csv")
    print(f"{args.arch} {args.plan}: {fmt_mflops(total / 1e6)} MFLOPs "
          f"(full precision {fmt_mflops(full_precision_flops(costs) / 1e6)} MFLOPs)")
    return EXIT_OK


def cmd_random_plan(args) -> int:
    from .network import build
    from .search import sample_random_plan

    net = build(args.arch, args.num_classes, input_hw=args.input_hw)
    try:
        lo, hi = (float(v) * 1e6 for v in args.range.split(":"))
    except ValueError as e:
        raise ConfigError(f"--range must look like LO:HI in MFLOPs, got {args.range!r}") from e
    plan = sample_random_plan(net.layer_costs(), (lo, hi), np.random.default_rng(args.seed), net.bits)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    plan.save(out)
    print(f"random plan {fmt_mflops(network_flops(plan, net.layer_costs()) / 1e6)} MFLOPs -> {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bindec import bench_kernel

    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 4:
        raise ConfigError("--shape needs c_out,c_in,kernel,hw")
    res = bench_kernel(shape, args.M, args.K, args.reps)
    print(json.dumps(res, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import strength_gradcheck

    results = strength_gradcheck(args.arch, args.mode, samples=args.samples, seed=args.seed,
                                 reference=args.reference)
    for k, res in results.items():
        print(f"{k}: max relative error {res.max_rel_error:.3e} "
              f"({res.checked} checked, {res.skipped} redrawn)")
    worst = max(res.max_rel_error for res in results.values())
    return EXIT_OK if worst < args.tol else EXIT_RUNTIME


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixbit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="bitwidth search")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_search)

    s = sub.add_parser("select", help="argmax plan from saved strengths")
    s.add_argument("--run", required=True, help="search output directory or checkpoint")
    s.add_argument("--out")
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("retrain", help="retrain under a fixed plan")
    s.add_argument("--config", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--init", help="checkpoint to initialize weights from (progressive init)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_retrain)

    for name, func in (("eval", cmd_eval), ("infer-bd", cmd_infer_bd)):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--split", default="test")
        s.add_argument("--out")
        if name == "infer-bd":
            s.add_argument("--bd", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("export-bd", help="write the binary-decomposition model file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export_bd)

    s = sub.add_parser("flops", help="cost of a plan")
    s.add_argument("--arch", default="resnet20")
    s.add_argument("--plan", default="uniform:5", help="uniform:B, uniform:BW,BX, full, or a plan.json")
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--input-hw", type=int)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_flops)

    s = sub.add_parser("random-plan", help="rejection-sample a plan in a FLOPs range")
    s.add_argument("--arch", default="resnet20")
    s.add_argument("--range", required=True, help="LO:HI in MFLOPs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-classes", type=int, default=10)
    s.add_argument("--input-hw", type=int)
    s.add_argument("--out", default="random_plan.json")
    s.set_defaults(func=cmd_random_plan)

    s = sub.add_parser("bench", help="time the binary kernel")
    s.add_argument("--shape", default="64,64,3,56")
    s.add_argument("--M", type=int, default=1)
    s.add_argument("--K", type=int, default=1)
    s.add_argument("--reps", type=int, default=20)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of strength gradients")
    s.add_argument("--arch", default="tinynet")
    s.add_argument("--mode", default="det", choices=("det", "sto"))
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--reference", default="surrogate", choices=("surrogate", "true"),
                   help="differentiate the frozen-residual surrogate or the fully quantized forward")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"mixbit: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, ValueError, KeyError, OSError) as e:
        print(f"mixbit: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
