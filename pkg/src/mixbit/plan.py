from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

FULL_PRECISION = 32


@dataclass(frozen=True)
class BitwidthSet:
    bits: Tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits:
            raise ValueError("bitwidth set must not be empty")
        if any(b < 1 for b in bits):
            raise ValueError("bitwidths must be >= 1")
        if any(b2 <= b1 for b1, b2 in zip(bits, bits[1:])):
            raise ValueError("bitwidths must be strictly increasing without duplicates")
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return len(self.bits)

    def __iter__(self):
        return iter(self.bits)

    def __getitem__(self, i: int) -> int:
        return self.bits[i]


@dataclass
class NetworkPlan:
    """Per quantized layer (weight bits, activation bits), keyed by layer name."""

    layers: Dict[str, Tuple[int, int]] = field(default_factory=dict)
    strengths: Optional[Dict[str, Dict[str, List[float]]]] = None

    def __getitem__(self, name: str) -> Tuple[int, int]:
        try:
            return self.layers[name]
        except KeyError:
            raise KeyError(f"plan has no entry for layer {name!r}") from None

    def __len__(self) -> int:
        return len(self.layers)

    def names(self) -> List[str]:
        return list(self.layers)

    @classmethod
    def uniform(cls, names: Sequence[str], b_w: int, b_x: Optional[int] = None) -> "NetworkPlan":
        b_x = b_w if b_x is None else b_x
        return cls({n: (b_w, b_x) for n in names})

    def validate(self, names: Sequence[str], bitset: Optional[BitwidthSet] = None) -> None:
        missing = [n for n in names if n not in self.layers]
        if missing:
            raise KeyError(f"plan is missing layers: {missing}")
        if bitset is not None:
            allowed = set(bitset.bits)
            for n, (bw, bx) in self.layers.items():
                if bw not in allowed or bx not in allowed:
                    raise ValueError(f"layer {n}: ({bw}, {bx}) outside bitwidth set {bitset.bits}")

    def to_json(self) -> dict:
        doc = {
            "layers": [
                {"name": n, "b_w": int(bw), "b_x": int(bx)} for n, (bw, bx) in self.layers.items()
            ]
        }
        if self.strengths is not None:
            for entry in doc["layers"]:
                st = self.strengths.get(entry["name"])
                if st is not None:
                    entry["r"] = [float(v) for v in st["r"]]
                    entry["s"] = [float(v) for v in st["s"]]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "NetworkPlan":
        layers, strengths = {}, {}
        for entry in doc["layers"]:
            layers[entry["name"]] = (int(entry["b_w"]), int(entry["b_x"]))
            if "r" in entry and "s" in entry:
                strengths[entry["name"]] = {"r": list(entry["r"]), "s": list(entry["s"])}
        return cls(layers, strengths or None)

    def save(self, path) -> None:
        with open(path, "w", newline="\n") as f:
            json.dump(self.to_json(), f, indent=2)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "NetworkPlan":
        with open(path) as f:
            return cls.from_json(json.load(f))
