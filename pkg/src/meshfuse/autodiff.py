"""Reverse-mode autodiff over dense numpy arrays.

A dynamically recorded tape covers exactly the primitives needed by the
graph layers, fully connected layers, and losses: matmul, broadcasting
add/multiply, relu, concat, axis reductions, reshape, row gather and
scatter-sum (graph aggregation), and log-softmax. Training runs in float32;
gradient checks force float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)


def _result(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, grad: np.ndarray):
    if grad.dtype != t.data.dtype:
        grad = grad.astype(t.data.dtype)
    if t.grad is None:
        t.grad = grad
    else:
        t.grad = t.grad + grad


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad, b.shape))

    return _result(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(out):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(out.grad * a.data, b.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, Tensor(np.asarray(c, dtype=a.dtype)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ out.grad)

    return _result(data, (a, b), backward)


RELU_ZERO_COUNT = {"count": 0}


def relu(a: Tensor) -> Tensor:
    RELU_ZERO_COUNT["count"] += int((a.data == 0).sum())
    mask = a.data > 0
    data = a.data * mask

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad * mask)

    return _result(data, (a,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis if axis >= 0 else data.ndim + axis
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(out):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * data.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, out.grad[tuple(idx)])

    return _result(data, tensors, backward)


def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    data = a.data.mean(axis=axis)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, np.expand_dims(out.grad, axis) / n * np.ones_like(a.data))

    return _result(data, (a,), backward)


def sum_axis(a: Tensor, axis: int) -> Tensor:
    data = a.data.sum(axis=axis)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, np.expand_dims(out.grad, axis) * np.ones_like(a.data))

    return _result(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad.reshape(a.shape))

    return _result(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad.transpose(inverse))

    return _result(data, (a,), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    index = np.asarray(index, dtype=np.int64)
    data = a.data[index]

    def backward(out):
        if a.requires_grad:
            g = np.zeros_like(a.data)
            np.add.at(g, index, out.grad)
            _accumulate(a, g)

    return _result(data, (a,), backward)


def scatter_sum(a: Tensor, index: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of `a` into `num_segments` output rows by index."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape[0] != a.shape[0]:
        raise ShapeError(
            f"scatter_sum: index length {index.shape[0]} != rows {a.shape[0]}"
        )
    data = np.zeros((num_segments,) + a.shape[1:], dtype=a.dtype)
    np.add.at(data, index, a.data)

    def backward(out):
        if a.requires_grad:
            _accumulate(a, out.grad[index])

    return _result(data, (a,), backward)


def fixed_linear(op_pair, x: Tensor) -> Tensor:
    """Apply a constant linear operator (matrix, matrix_transpose) to rows.

    The pair may be dense arrays or scipy sparse matrices; neither receives
    gradients. Used for graph aggregation where the coefficients are fixed
    by the topology.
    """
    op, op_t = op_pair
    data = op @ x.data

    def backward(out):
        if x.requires_grad:
            _accumulate(x, op_t @ out.grad)

    return _result(np.asarray(data), (x,), backward)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - lse

    def backward(out):
        if a.requires_grad:
            soft = np.exp(data)
            g = out.grad - soft * out.grad.sum(axis=-1, keepdims=True)
            _accumulate(a, g)

    return _result(data, (a,), backward)


def backward(loss: Tensor) -> None:
    """Populate .grad on every tensor reachable from a scalar loss."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node)


@dataclass
class Parameter:
    """Named trainable tensor; names are unique dotted paths within a model."""

    name: str
    tensor: Tensor

    def __post_init__(self):
        self.tensor.requires_grad = True

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None


def grad_or_zero(p: Parameter) -> np.ndarray:
    """Gradient, with zeros for parameters unreachable from the loss."""
    return p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.data)


def gradient_check(forward, params, tolerance: float = 1e-4, h: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    `forward` takes no arguments and returns a scalar Tensor built from the
    current parameter values. All parameters must be float64. Entries whose
    one-sided difference quotients disagree (relu kinks) are excluded and
    counted as flagged. Returns {name: {"max_rel_error", "flagged"}}.
    """
    params = list(params)
    for p in params:
        if p.tensor.data.dtype != np.float64:
            raise ValueError(f"gradient_check requires float64 parameters ({p.name})")
        p.zero_grad()
    loss = forward()
    backward(loss)
    analytic = {p.name: grad_or_zero(p).copy() for p in params}

    def eval_loss() -> float:
        return float(forward().data)

    report = {}
    for p in params:
        flat = p.data.reshape(-1)
        max_rel = 0.0
        flagged = 0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = eval_loss()
            flat[i] = orig - h
            f_minus = eval_loss()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * h)
            a = analytic[p.name].reshape(-1)[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if rel > tolerance:
                # nondifferentiable point: the two one-sided slopes disagree
                f0 = eval_loss()
                right = (f_plus - f0) / h
                left = (f0 - f_minus) / h
                denom = max(abs(right), abs(left), 1e-8)
                if abs(right - left) / denom > 10 * tolerance:
                    flagged += 1
                    continue
            max_rel = max(max_rel, rel)
        report[p.name] = {"max_rel_error": max_rel, "flagged": flagged}
    return report


CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params) -> None:
    """Write parameters (sorted by name) as float32 records."""
    params = sorted(params, key=lambda p: p.name)
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate parameter names")
    with open(str(path), "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(str(path), "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, count = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        out[name] = np.array(arr)
    if off != len(raw):
        raise CheckpointError(f"{path}: trailing bytes")
    return out


def assign_checkpoint(params, state: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in state:
            raise CheckpointError(f"checkpoint missing parameter {p.name}")
        if tuple(state[p.name].shape) != tuple(p.data.shape):
            raise CheckpointError(f"shape mismatch for {p.name}")
        p.data = state[p.name].astype(p.tensor.data.dtype)
