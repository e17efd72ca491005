"""Dense float64 tensors with a small reverse-mode autodiff tape.

Every op checks shapes explicitly; there is no broadcasting. A ``Tensor``
produced by an op keeps references to its parents and a closure that maps
the upstream gradient to one gradient per parent. ``backward`` walks the
resulting DAG once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"MXT1"
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of ``op``; records the node only if a parent needs grad."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("add", a, b)
    return make_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return make_op(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    """Elementwise product; a python scalar on either side becomes ``scale``."""
    if np.isscalar(b):
        return scale(a, float(b))
    if np.isscalar(a):
        return scale(b, float(a))
    a, b = as_tensor(a), as_tensor(b)
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Row softmax of a 2-D tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: expected 2-D input, got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return make_op(s, (x,), bw, "softmax")


# ---------------------------------------------------------------- reductions / shape


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_op(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return make_op(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    out = x.data.reshape(tuple(shape))
    return make_op(out, (x,), lambda g: (g.reshape(old),), "reshape")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate two [N,C,H,W] tensors along the channel axis."""
    if a.data.ndim != 4 or b.data.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: shape mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return make_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat")


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(node) to every reachable leaf that requires grad.

    Leaf gradients are added into ``leaf.grad`` (allocated as zeros if unset)
    and also returned as a ``{leaf: gradient}`` map for this pass alone.
    """
    if root.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    result: dict[Tensor, np.ndarray] = {}
    if not root.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {id(root): np.ones(())}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            result[node] = result.get(node, 0) + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference ``|a - b| / max(|a|, |b|)``; 0 when both vanish."""
    scale_ = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale_ == 0 else float(np.linalg.norm(a - b) / scale_)


def gradcheck(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between ``backward`` and central differences.

    ``fn`` maps one Tensor per array to a scalar Tensor.
    """
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(v, i=i):
            args = [Tensor(v) if j == i else Tensor(leaves[j].data) for j in range(len(leaves))]
            return fn(*args).item()

        numeric = finite_difference_grad(f, leaf.data, h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def directional_gradcheck(f: Callable[[], float], params: Sequence[Tensor], grads: Sequence[np.ndarray],
                          rng: np.random.Generator, h: float = 1e-5) -> float:
    """Relative error of ``<grad, v>`` against a central difference of ``f`` along a random unit ``v``.

    ``f`` must read the current ``.data`` of ``params``; they are restored afterwards.
    """
    dirs = [rng.normal(size=p.shape) for p in params]
    norm = np.sqrt(sum((d * d).sum() for d in dirs))
    dirs = [d / norm for d in dirs]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    orig = [p.data for p in params]
    try:
        for p, o, d in zip(params, orig, dirs):
            p.data = o + h * d
        fp = f()
        for p, o, d in zip(params, orig, dirs):
            p.data = o - h * d
        fm = f()
    finally:
        for p, o in zip(params, orig):
            p.data = o
    numeric = (fp - fm) / (2 * h)
    return relative_error(np.array([analytic]), np.array([numeric]))


# ---------------------------------------------------------------- serialization


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f8")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr).tobytes()


def decode(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one MXT1 record starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise ValueError("not an MXT1 record")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(dims).astype(np.float64)
    return arr, start + 8 * count


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode(arr.data if isinstance(arr, Tensor) else arr))


def load_tensor(path) -> np.ndarray:
    arr, _ = decode(Path(path).read_bytes())
    return arr
