"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Float64 throughout. A Tensor wraps a numpy array; every operation records its
parents and a backward closure, and ``Tensor.backward()`` walks the recorded
graph once in reverse topological order, accumulating exact gradients into
every tensor created with ``requires_grad=True``. Broadcasting is limited to
matrix + row-bias addition; everything else must match shapes exactly.

Also provides a central-finite-difference gradient checker and a named-tensor
checkpoint container (JSON manifest plus a little-endian float64 blob).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

_MAGIC = b"TENSORS1"


class ShapeError(ValueError):
    """Operands with incompatible shapes for an op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode pass from a scalar output."""
        if self.data.shape != ():
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        self.accumulate(np.asarray(1.0))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # graphs stay small; arithmetic sugar mirrors the function ops below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _promote(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_builder) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_builder(out)
    return out


def add(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.shape == b.shape:
        data = a.data + b.data
        mode = "same"
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        data = a.data + b.data
        mode = "bias_b"
    elif a.data.ndim == 1 and b.data.ndim == 2 and b.shape[1] == a.shape[0]:
        data = a.data + b.data
        mode = "bias_a"
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")

    def backward_builder(out):
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g.sum(axis=0) if mode == "bias_a" else g)
            if b.requires_grad:
                b.accumulate(g.sum(axis=0) if mode == "bias_b" else g)

        return backward

    return _make(data, (a, b), backward_builder)


def sub(a, b) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a, b) -> Tensor:
    """Elementwise product; python numbers route to :func:`scale`."""
    if isinstance(b, (int, float)) and not isinstance(b, bool):
        return scale(_promote(a), float(b))
    if isinstance(a, (int, float)) and not isinstance(a, bool):
        return scale(_promote(b), float(a))
    a, b = _promote(a), _promote(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")

    def backward_builder(out):
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return backward

    return _make(a.data * b.data, (a, b), backward_builder)


def scale(a, c: float) -> Tensor:
    a = _promote(a)
    c = float(c)

    def backward_builder(out):
        def backward():
            if a.requires_grad:
                a.accumulate(out.grad * c)

        return backward

    return _make(a.data * c, (a,), backward_builder)


def matmul(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    ok = (
        (a.data.ndim == 2 and b.data.ndim in (1, 2) and a.shape[1] == b.shape[0])
        or (a.data.ndim == 1 and b.data.ndim == 2 and a.shape[0] == b.shape[0])
    )
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_builder(out):
        def backward():
            g = out.grad
            if a.data.ndim == 2 and b.data.ndim == 1:
                if a.requires_grad:
                    a.accumulate(np.outer(g, b.data))
                if b.requires_grad:
                    b.accumulate(a.data.T @ g)
            elif a.data.ndim == 1:
                if a.requires_grad:
                    a.accumulate(g @ b.data.T)
                if b.requires_grad:
                    b.accumulate(np.outer(a.data, g))
            else:
                if a.requires_grad:
                    a.accumulate(g @ b.data.T)
                if b.requires_grad:
                    b.accumulate(a.data.T @ g)

        return backward

    return _make(a.data @ b.data, (a, b), backward_builder)


def dot(a, b) -> Tensor:
    a, b = _promote(a), _promote(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")

    def backward_builder(out):
        def backward():
            g = out.grad
            if a.requires_grad:
                a.accumulate(g * b.data)
            if b.requires_grad:
                b.accumulate(g * a.data)

        return backward

    return _make(a.data @ b.data, (a, b), backward_builder)


def tanh(a) -> Tensor:
    a = _promote(a)
    data = np.tanh(a.data)

    def backward_builder(out):
        def backward():
            if a.requires_grad:
                a.accumulate(out.grad * (1.0 - out.data**2))

        return backward

    return _make(data, (a,), backward_builder)


def sigmoid(a) -> Tensor:
    a = _promote(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward_builder(out):
        def backward():
            if a.requires_grad:
                a.accumulate(out.grad * out.data * (1.0 - out.data))

        return backward

    return _make(data, (a,), backward_builder)


def relu(a) -> Tensor:
    """max(0, x); subgradient 0 at exactly 0."""
    a = _promote(a)

    def backward_builder(out):
        def backward():
            if a.requires_grad:
                a.accumulate(out.grad * (a.data > 0))

        return backward

    return _make(np.maximum(a.data, 0.0), (a,), backward_builder)


def softmax(a) -> Tensor:
    a = _promote(a)
    if a.data.ndim != 1:
        raise ShapeError(f"softmax: need a vector, got shape {a.shape}")
    shifted = np.exp(a.data - a.data.max())
    data = shifted / shifted.sum()

    def backward_builder(out):
        def backward():
            if a.requires_grad:
                g = out.grad
                y = out.data
                a.accumulate(y * (g - np.dot(g, y)))

        return backward

    return _make(data, (a,), backward_builder)


def mean(a, axis: int | None = None) -> Tensor:
    a = _promote(a)
    if axis is None:
        n = a.data.size
        data = np.asarray(a.data.mean())
    else:
        if a.data.ndim != 2 or axis not in (0, 1):
            raise ShapeError(f"mean: axis {axis} invalid for shape {a.shape}")
        n = a.shape[axis]
        data = a.data.mean(axis=axis)

    def backward_builder(out):
        def backward():
            if not a.requires_grad:
                return
            g = out.grad
            if axis is None:
                a.accumulate(np.full_like(a.data, g / n))
            elif axis == 0:
                a.accumulate(np.tile(g / n, (a.shape[0], 1)))
            else:
                a.accumulate(np.tile((g / n)[:, None], (1, a.shape[1])))

        return backward

    return _make(data, (a,), backward_builder)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_promote(t) for t in tensors]
    if not tensors or any(t.data.ndim != 1 for t in tensors):
        raise ShapeError("concat: need one or more vectors")
    sizes = [t.shape[0] for t in tensors]

    def backward_builder(out):
        def backward():
            g = out.grad
            offset = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    t.accumulate(g[offset : offset + size])
                offset += size

        return backward

    return _make(np.concatenate([t.data for t in tensors]), tuple(tensors), backward_builder)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    tensors = [_promote(t) for t in tensors]
    if not tensors:
        raise ShapeError("stack: need at least one tensor")
    shape = tensors[0].shape
    if any(t.shape != shape for t in tensors):
        raise ShapeError(
            f"stack: mismatched shapes {[t.shape for t in tensors]}"
        )

    def backward_builder(out):
        def backward():
            g = out.grad
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t.accumulate(g[i])

        return backward

    return _make(np.stack([t.data for t in tensors]), tuple(tensors), backward_builder)


def row(table: Tensor, index: int) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"row: need a matrix, got shape {table.shape}")

    def backward_builder(out):
        def backward():
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                table.grad[index] += out.grad

        return backward

    return _make(table.data[index].copy(), (table,), backward_builder)


def rows(table: Tensor, indices: Sequence[int]) -> Tensor:
    if table.data.ndim != 2:
        raise ShapeError(f"rows: need a matrix, got shape {table.shape}")
    idx = list(indices)

    def backward_builder(out):
        def backward():
            if table.requires_grad:
                if table.grad is None:
                    table.grad = np.zeros_like(table.data)
                np.add.at(table.grad, idx, out.grad)

        return backward

    return _make(table.data[idx].copy(), (table,), backward_builder)


# --- gradient checking ------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients of the scalar ``f()`` against central
    finite differences, coordinate by coordinate.

    Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator so
    near-zero gradients are judged on an absolute scale.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params.values():
        p.zero_grad()
    out = f()
    out.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    worst = GradCheckResult(0.0, "", (), 0.0, 0.0)
    for name, p in params.items():
        it = np.nditer(p.data, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + eps
            f_plus = float(f().data)
            p.data[idx] = orig - eps
            f_minus = float(f().data)
            p.data[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name][idx])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            if rel > worst.max_rel_error:
                worst = GradCheckResult(rel, name, idx, a, numeric)
            it.iternext()
    return worst


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(
    params: dict[str, Tensor], path: str | Path, extra: dict | None = None
) -> None:
    """Write named tensors: magic, manifest length, JSON manifest, float64 blob.

    The manifest lists {name, shape, offset} per tensor (offset in bytes into
    the blob) plus an ``extra`` object for caller metadata such as
    vocabularies.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(params):
        arr = params[name].data.astype("<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        blobs.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"tensors": entries, "extra": extra or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(
    path: str | Path, requires_grad: bool = True
) -> tuple[dict[str, Tensor], dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(n).decode("utf-8"))
        blob = fh.read()
    params: dict[str, Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f8", count=count, offset=entry["offset"]
        ).reshape(shape)
        params[entry["name"]] = Tensor(arr.copy(), requires_grad=requires_grad)
    return params, manifest.get("extra", {})


def parameters_flat(params: dict[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return sorted(params.items())
