"""Flat parameter vectors with named slices, plus the checkpoint container."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np
import torch

CHECKPOINT_FORMAT = "reactsim-checkpoint"
CHECKPOINT_VERSION = 1

DTYPE = torch.float64


class ShapeMismatch(ValueError):
    pass


class Layout:
    """Ordered mapping from slice name to tensor shape inside one flat vector."""

    def __init__(self, shapes: Sequence[tuple[str, tuple[int, ...]]]):
        self.shapes = [(name, tuple(int(d) for d in shape)) for name, shape in shapes]
        self.offsets = {}
        off = 0
        for name, shape in self.shapes:
            n = int(np.prod(shape)) if shape else 1
            self.offsets[name] = (off, off + n, shape)
            off += n
        self.size = off

    def __contains__(self, name):
        return name in self.offsets

    def names(self) -> list[str]:
        return [n for n, _ in self.shapes]

    def unflatten(self, vec: torch.Tensor) -> dict[str, torch.Tensor]:
        if vec.shape != (self.size,):
            raise ShapeMismatch(f"expected a vector of {self.size} parameters, got {tuple(vec.shape)}")
        return {name: vec[a:b].view(shape) for name, (a, b, shape) in self.offsets.items()}

    def init(self, rng: np.random.Generator, zero: Sequence[str] = ()) -> np.ndarray:
        """Uniform fan-in initialisation; biases and names in ``zero`` start at 0."""
        out = np.zeros(self.size)
        for name, (a, b, shape) in self.offsets.items():
            if len(shape) < 2 or name in zero:
                continue
            bound = 1.0 / math.sqrt(shape[-1])
            out[a:b] = rng.uniform(-bound, bound, size=b - a)
        return out


@dataclass
class FlatParams:
    """Parameter vector plus its layout and whatever produced it."""

    layout: Layout
    vector: np.ndarray
    config: dict = field(default_factory=dict)
    seed: int | None = None
    kind: str = "generic"
    curve: list = field(default_factory=list)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        if self.vector.shape != (self.layout.size,):
            raise ShapeMismatch(
                f"parameter vector has {self.vector.shape} entries, layout needs {self.layout.size}"
            )

    def tensor(self, requires_grad: bool = False) -> torch.Tensor:
        return torch.tensor(self.vector, dtype=torch.float64, requires_grad=requires_grad)

    def slices(self) -> dict[str, np.ndarray]:
        return {n: self.vector[a:b].reshape(s) for n, (a, b, s) in self.layout.offsets.items()}

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.vector)))

    def copy(self, vector=None) -> "FlatParams":
        return FlatParams(
            self.layout,
            self.vector.copy() if vector is None else np.asarray(vector, dtype=float),
            dict(self.config),
            self.seed,
            self.kind,
            list(self.curve),
        )


def save_checkpoint(params: FlatParams, sink: IO[bytes]) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "seed": params.seed,
        "config": params.config,
        "slices": [
            {"name": name, "shape": list(shape), "values": params.vector[a:b].tolist()}
            for name, (a, b, shape) in params.layout.offsets.items()
        ],
    }
    sink.write(json.dumps(doc, sort_keys=True).encode())


def load_checkpoint(source: IO[bytes]) -> FlatParams:
    doc = json.loads(source.read())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    layout = Layout([(s["name"], tuple(s["shape"])) for s in doc["slices"]])
    vec = np.concatenate([np.asarray(s["values"], dtype=float).ravel() for s in doc["slices"]]) if doc["slices"] else np.zeros(0)
    return FlatParams(layout, vec, doc.get("config", {}), doc.get("seed"), doc.get("kind", "generic"))


def check_layout(params: FlatParams, expected: Layout) -> None:
    if params.layout.shapes != expected.shapes:
        raise ShapeMismatch("parameter slices do not match the configured network")


def write_curve(rows: Sequence[Mapping], columns: Sequence[str], sink: IO[bytes]) -> None:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in columns))
    sink.write(("\n".join(lines) + "\n").encode())

