"""Small reverse-mode autodiff engine over float64 numpy arrays.

Every trainable computation in the package is written with the functions in
this module. A :class:`Tensor` remembers the tensors it was computed from and
a closure that pushes its gradient back to them; :meth:`Tensor.backward` walks
that graph once in reverse topological order.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
_NORM_EPS = 1e-12


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = "leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every leaf that requires it.

        Gradients accumulate (sum over paths and over repeated calls); call
        :meth:`zero_grad` or :func:`adam_step` to reset.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward: loss does not depend on any trainable tensor")
        order = topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that carry gradient, parents first."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (), op=op)
    if requires:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


# reductions

def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape),)

    return _make(out, (a,), "sum", backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), "softmax", backward)


def logsumexp(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    s = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m
    out = np.squeeze(s, axis=axis)

    def backward(g):
        return (np.expand_dims(g, axis) * np.exp(a.data - s),)

    return _make(out, (a,), "logsumexp", backward)


def log1p_sumexp(a: Tensor) -> Tensor:
    """``log(1 + sum(exp(a)))`` over all entries, evaluated stably."""
    x = a.data
    m = max(0.0, float(x.max())) if x.size else 0.0
    out = m + np.log(np.exp(-m) + np.exp(x - m).sum())

    def backward(g):
        return (g * np.exp(x - out),)

    return _make(np.asarray(out), (a,), "log1p_sumexp", backward)


# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            ga = bd @ g
            gb = np.outer(ad, g)
            return ga, gb
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    if a.ndim > 2 or b.ndim > 2:
        raise ShapeError(f"matmul: only 1-D and 2-D operands supported, got {a.shape} and {b.shape}")
    return _make(out, (a, b), "matmul", backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: incompatible shapes {a.shape} and {b.shape}")
    return matmul(a, b)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``x @ W.T + b`` over the last axis of ``x``; ``W`` is (out, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(f"affine: incompatible shapes x{x.shape}, W{W.shape}, b{b.shape}")
    out = x.data @ W.data.T + b.data

    def backward(g):
        flat_g = g.reshape(-1, W.shape[0])
        flat_x = x.data.reshape(-1, W.shape[1])
        return g @ W.data, flat_g.T @ flat_x, flat_g.sum(axis=0)

    return _make(out, (x, W, b), "affine", backward)


def l2_norm(a: Tensor, axis: int = -1) -> Tensor:
    n = np.sqrt((a.data * a.data).sum(axis=axis))
    if np.any(n < _NORM_EPS):
        raise ValueError("l2_norm: degenerate vector")
    return _make(n, (a,), "l2_norm", lambda g: (np.expand_dims(g / n, axis) * a.data,))


def cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity along the last axis; zero-norm inputs are rejected."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine: incompatible shapes {a.shape} and {b.shape}")
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    if np.any(na < _NORM_EPS) or np.any(nb < _NORM_EPS):
        raise ValueError("cosine: degenerate vector")
    ua, ub = a.data / na, b.data / nb
    c = (ua * ub).sum(axis=-1, keepdims=True)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * (ub - c * ua) / na, g * (ua - c * ub) / nb

    return _make(np.squeeze(c, -1), (a, b), "cosine", backward)


# structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _make(out, tuple(tensors), "concat", backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}")
    out = np.stack([t.data for t in tensors])
    return _make(out, tuple(tensors), "stack", lambda g: tuple(g[i] for i in range(len(tensors))))


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return _make(out, (a,), "broadcast_to", lambda g: (_unbroadcast(g, a.shape),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(a.shape),))


def take(a: Tensor, index) -> Tensor:
    """Basic/advanced indexing; repeated indices accumulate."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), "take", backward)


# optimizer

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list[np.ndarray] = field(default_factory=list)
    second_moment: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update; gradients are cleared afterwards."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {i} with shape {p.shape} has no gradient")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ValueError("adam_step: optimizer state does not match parameter list")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise ShapeError(f"adam_step: moment shape {m.shape} != parameter shape {p.shape}")
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
        p.grad = np.zeros_like(p.data)


# checkpoint blobs

def save_arrays(manifest_path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict[str, str] | None = None) -> None:
    """Write ``arrays`` into one little-endian float64 blob plus a text manifest.

    Manifest lines are ``key=value`` metadata followed by one
    ``array name=<n> shape=<a>x<b> offset=<bytes>`` line per array. The blob
    sits next to the manifest with suffix ``.bin``.
    """
    manifest_path = Path(manifest_path)
    blob_path = manifest_path.with_suffix(".bin")
    lines = ["wsra-arrays 1", f"blob={blob_path.name}"]
    for k, v in (meta or {}).items():
        if "\n" in str(v) or "=" in k:
            raise ValueError(f"invalid metadata entry {k!r}")
        lines.append(f"{k}={v}")
    offset = 0
    with open(blob_path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"array name={name} shape={shape} offset={offset}")
            fh.write(arr.tobytes())
            offset += arr.nbytes
    manifest_path.write_text("\n".join(lines) + "\n")


def load_arrays(manifest_path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    manifest_path = Path(manifest_path)
    lines = manifest_path.read_text().splitlines()
    if not lines or lines[0] != "wsra-arrays 1":
        raise ValueError(f"{manifest_path}: not an array manifest")
    meta: dict[str, str] = {}
    entries = []
    for line in lines[1:]:
        if line.startswith("array "):
            fields = dict(tok.split("=", 1) for tok in line.split()[1:])
            shape = () if fields["shape"] == "scalar" else tuple(int(s) for s in fields["shape"].split("x"))
            entries.append((fields["name"], shape, int(fields["offset"])))
        elif line.strip():
            k, v = line.split("=", 1)
            meta[k] = v
    blob = (manifest_path.parent / meta.pop("blob")).read_bytes()
    arrays = {}
    for name, shape, offset in entries:
        n = int(np.prod(shape)) if shape else 1
        if offset + 8 * n > len(blob):
            raise ValueError(f"{manifest_path}: array {name!r} runs past end of blob")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).astype(DTYPE)
    return arrays, meta


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
