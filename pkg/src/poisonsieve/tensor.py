"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: NCHW layout, no broadcasting beyond
scalar-tensor and per-channel (channel axis 1), first-order gradients only.
Forward kernels are numpy; every operation validates its output is finite,
so overflow surfaces as an error instead of propagating NaN/Inf.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateVectorError,
    DimensionError,
    NumericOverflowError,
)

_ids = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction inside its block."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """A dense float64 array, optionally tracked by the autodiff graph."""

    __slots__ = ("id", "data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_needs_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.id = next(_ids)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"
        self._needs_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are lifted to untracked scalar tensors.
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


class OpRecord:
    """One node of a recorded compute graph."""

    __slots__ = ("op", "input_ids", "output")

    def __init__(self, op: str, input_ids: tuple[int, ...], output: Tensor):
        self.op = op
        self.input_ids = input_ids
        self.output = output


class ComputeGraph:
    """Optional recorder of operations, in topological (creation) order.

    Ops always carry their own parent links, so recording is only needed when
    a caller wants to inspect or validate the graph. Use as a context
    manager; graphs on different threads do not interfere.
    """

    def __init__(self):
        self.nodes: list[OpRecord] = []

    def __enter__(self):
        stack = getattr(_state, "graphs", None)
        if stack is None:
            stack = _state.graphs = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.graphs.pop()
        return False

    def validate(self) -> None:
        """Check acyclicity: every input id precedes its consumer's output id."""
        for node in self.nodes:
            for input_id in node.input_ids:
                if input_id >= node.output.id:
                    raise ContractError(
                        f"graph order violated: input {input_id} does not precede node {node.output.id}"
                    )


def _active_graph() -> ComputeGraph | None:
    stack = getattr(_state, "graphs", None)
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericOverflowError(f"non-finite output in {op}")


def _make(op: str, data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    out._op = op
    if _grad_enabled() and any(p._needs_grad for p in parents):
        out._parents = parents
        out._vjp = vjp
        out._needs_grad = True
    graph = _active_graph()
    if graph is not None:
        graph.nodes.append(OpRecord(op, tuple(p.id for p in parents), out))
    return out


# ---------------------------------------------------------------------------
# elementwise / broadcast ops

def _broadcast_info(op: str, a_shape, b_shape):
    """Classify the a/b shape pair: same, scalar, or per-channel (axis 1)."""
    if a_shape == b_shape:
        return "same"
    if b_shape == ():
        return "scalar_b"
    if a_shape == ():
        return "scalar_a"
    if len(b_shape) == 1 and len(a_shape) in (2, 4) and a_shape[1] == b_shape[0]:
        return "chan_b"
    if len(a_shape) == 1 and len(b_shape) in (2, 4) and b_shape[1] == a_shape[0]:
        return "chan_a"
    raise DimensionError(f"{op}: incompatible shapes {a_shape} and {b_shape}")


def _chan_view(vec: np.ndarray, target_ndim: int) -> np.ndarray:
    if target_ndim == 4:
        return vec.reshape(1, -1, 1, 1)
    return vec  # (N, C) broadcasts against (C,) natively


def _chan_reduce(grad: np.ndarray) -> np.ndarray:
    if grad.ndim == 4:
        return grad.sum(axis=(0, 2, 3))
    return grad.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_info("add", a.shape, b.shape)
    if mode == "chan_b":
        data = a.data + _chan_view(b.data, a.data.ndim)
    elif mode == "chan_a":
        data = _chan_view(a.data, b.data.ndim) + b.data
    else:
        data = a.data + b.data

    def vjp(g):
        ga = g if mode in ("same", "scalar_b", "chan_b") else (
            g.sum() if mode == "scalar_a" else _chan_reduce(g))
        gb = g if mode in ("same", "scalar_a", "chan_a") else (
            g.sum() if mode == "scalar_b" else _chan_reduce(g))
        return ga, gb

    return _make("add", data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_info("sub", a.shape, b.shape)
    if mode == "chan_b":
        data = a.data - _chan_view(b.data, a.data.ndim)
    elif mode == "chan_a":
        data = _chan_view(a.data, b.data.ndim) - b.data
    else:
        data = a.data - b.data

    def vjp(g):
        ga = g if mode in ("same", "scalar_b", "chan_b") else (
            g.sum() if mode == "scalar_a" else _chan_reduce(g))
        gb = g if mode in ("same", "scalar_a", "chan_a") else (
            g.sum() if mode == "scalar_b" else _chan_reduce(g))
        return ga, -gb

    return _make("sub", data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    mode = _broadcast_info("mul", a.shape, b.shape)
    bd = _chan_view(b.data, a.data.ndim) if mode == "chan_b" else b.data
    ad = _chan_view(a.data, b.data.ndim) if mode == "chan_a" else a.data
    data = ad * bd

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if mode == "scalar_a":
            ga = ga.sum()
        elif mode == "chan_a":
            ga = _chan_reduce(ga)
        if mode == "scalar_b":
            gb = gb.sum()
        elif mode == "chan_b":
            gb = _chan_reduce(gb)
        return ga, gb

    return _make("mul", data, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        da = g @ b.data.T if a._needs_grad else None
        db = a.data.T @ g if b._needs_grad else None
        return da, db

    return _make("matmul", data, (a, b), vjp)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {a.shape} -> {shape}: {exc}") from None
    return _make("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    if a.data.ndim < 2:
        raise DimensionError(f"flatten expects a batch dimension, got shape {a.shape}")
    return reshape(a, (a.shape[0], -1))


def sum_all(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum())
    return _make("sum", data, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_axis0(a: Tensor) -> Tensor:
    if a.data.ndim < 1 or a.shape[0] == 0:
        raise DimensionError(f"mean_axis0 on shape {a.shape}")
    n = a.shape[0]
    data = a.data.mean(axis=0)

    def vjp(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make("mean0", data, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution / pooling

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, (n, c, ho, wo, kh, kw), (sn, sc, sh * stride, sw * stride, sh, sw))
    col = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(col), ho, wo


def _col2im(col: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int):
    n, c, h, w = x_shape
    dx = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    col = col.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += col[:, :, :, :, i, j]
    if padding:
        dx = dx[:, :, padding:-padding, padding:-padding]
    return dx


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation: NCHW input, OIHW kernel, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d: expected 4D input/kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = weight.shape
    if ci != c:
        raise DimensionError(f"conv2d: input channels {c} != kernel channels {ci}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    col, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    wmat = weight.data.reshape(o, -1)
    out = (col @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def vjp(g):
        # skip whichever side nothing downstream asks for; both are dense GEMMs
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        dw = (gmat.T @ col).reshape(weight.shape) if weight._needs_grad else None
        dx = None
        if x._needs_grad:
            dx = _col2im(gmat @ wmat, x.shape, kh, kw, stride, padding, ho, wo)
        return dx, dw

    return _make("conv2d", np.ascontiguousarray(out), (x, weight), vjp)


def avgpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling (stride equals kernel)."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2d: expected 4D input, got {x.shape}")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"avgpool2d: spatial dims {h}x{w} not divisible by kernel {kernel}")
    ho, wo = h // kernel, w // kernel
    data = x.data.reshape(n, c, ho, kernel, wo, kernel).mean(axis=(3, 5))

    def vjp(g):
        dx = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3) / (kernel * kernel)
        return (dx,)

    return _make("avgpool2d", data, (x,), vjp)


# ---------------------------------------------------------------------------
# normalization

def affine_scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = scale[c] * x + shift[c], channel axis 1."""
    if x.data.ndim not in (2, 4):
        raise DimensionError(f"affine_scale_shift: expected 2D or 4D input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(
            f"affine_scale_shift: scale {scale.shape} / shift {shift.shape} do not match {c} channels")
    sview = _chan_view(scale.data, x.data.ndim)
    data = x.data * sview + _chan_view(shift.data, x.data.ndim)

    def vjp(g):
        return g * sview, _chan_reduce(g * x.data), _chan_reduce(g)

    return _make("affine_scale_shift", data, (x, scale, shift), vjp)


def batch_norm_train(x: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5):
    """Training-mode batch norm over (N, H, W) per channel.

    Returns (output, batch_mean, batch_var); the statistics are plain arrays
    for the caller's running-average update. Gradients flow through the
    batch statistics (the usual closed-form backward).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm_train: expected 4D input, got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm_train: affine params do not match {c} channels")
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)  # population variance
    inv_std = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean.reshape(1, -1, 1, 1)
    xhat = xc * inv_std.reshape(1, -1, 1, 1)
    data = xhat * scale.data.reshape(1, -1, 1, 1) + shift.data.reshape(1, -1, 1, 1)

    def vjp(g):
        dscale = (g * xhat).sum(axis=axes)
        dshift = g.sum(axis=axes)
        dxhat = g * scale.data.reshape(1, -1, 1, 1)
        ivs = inv_std.reshape(1, -1, 1, 1)
        dvar = (dxhat * xc).sum(axis=axes) * (-0.5) * inv_std ** 3
        dmean = -(dxhat * ivs).sum(axis=axes) + dvar * (-2.0 / m) * xc.sum(axis=axes)
        dx = dxhat * ivs + (dvar.reshape(1, -1, 1, 1) * 2.0 * xc + dmean.reshape(1, -1, 1, 1)) / m
        return dx, dscale, dshift

    out = _make("batch_norm_train", data, (x, scale, shift), vjp)
    return out, mean, var


# ---------------------------------------------------------------------------
# losses / similarity

def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross entropy of softmax(logits) against integer labels; scalar output."""
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: expected (N, C) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= c:
        raise DimensionError(f"softmax_cross_entropy: label out of range for {c} classes")
    if reduction not in ("mean", "sum"):
        raise DimensionError(f"softmax_cross_entropy: unknown reduction {reduction!r}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    per_sample = lse - z[np.arange(n), labels]
    total = per_sample.sum()
    data = np.asarray(total / n if reduction == "mean" else total)

    def vjp(g):
        probs = np.exp(z - lse[:, None])
        probs[np.arange(n), labels] -= 1.0
        if reduction == "mean":
            probs /= n
        return (probs * g,)

    return _make("softmax_cross_entropy", data, (logits,), vjp)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between flattened a and b; scalar output."""
    av = a.data.reshape(-1)
    bv = b.data.reshape(-1)
    if av.shape != bv.shape:
        raise DimensionError(f"cosine_similarity: sizes {a.shape} and {b.shape} differ")
    na = np.linalg.norm(av)
    nb = np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine_similarity with zero-norm input")
    cos = float(av @ bv / (na * nb))
    data = np.asarray(cos)

    def vjp(g):
        ga = (bv / (na * nb) - cos * av / (na * na)) * g
        gb = (av / (na * nb) - cos * bv / (nb * nb)) * g
        return ga.reshape(a.shape), gb.reshape(b.shape)

    return _make("cosine_similarity", data, (a, b), vjp)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor; scalar output."""
    flat = a.data.reshape(-1)
    norm = float(np.linalg.norm(flat))
    data = np.asarray(norm)

    def vjp(g):
        if norm == 0.0:
            return (np.zeros(a.shape),)  # subgradient at the origin
        return ((a.data / norm) * g,)

    return _make("l2_norm", data, (a,), vjp)


_OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "neg": neg,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "avgpool2d": avgpool2d,
    "flatten": flatten,
    "reshape": reshape,
    "sum": sum_all,
    "mean0": mean_axis0,
    "affine_scale_shift": affine_scale_shift,
    "softmax_cross_entropy": softmax_cross_entropy,
    "cosine_similarity": cosine_similarity,
    "l2_norm": l2_norm,
}


def op_forward(kind: str, *inputs: Tensor, **params) -> Tensor:
    """Dispatch a forward operation by name; see _OPS for the vocabulary."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise DimensionError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None,
             graph: ComputeGraph | None = None) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every requires_grad leaf that participates,
    and returns a map from leaf tensor id to its gradient. Leaves passed
    explicitly but unreachable from the loss get zero gradients.
    """
    if loss.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if graph is not None:
        graph.validate()

    grads: dict[int, np.ndarray] = {loss.id: np.asarray(1.0)}
    result: dict[int, Tensor] = {}
    reached: dict[int, Tensor] = {}

    if loss._needs_grad:
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if node.id in visited:
                continue
            visited.add(node.id)
            stack.append((node, True))
            for parent in node._parents:
                if parent._needs_grad and parent.id not in visited:
                    stack.append((parent, False))

        for node in reversed(topo):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    reached[node.id] = node
                    node.grad = g.copy() if node.grad is None else node.grad + g
                    result[node.id] = Tensor(node.grad.copy())
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent._needs_grad:
                    continue
                pg = np.asarray(pg)
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg

    if leaves is not None:
        for leaf in leaves:
            if leaf.id in result:
                continue
            zero = np.zeros(leaf.shape)
            if leaf.requires_grad and leaf.grad is None:
                leaf.grad = zero.copy()
            result[leaf.id] = Tensor(zero)
    return result


def finite_difference_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a tensor-to-scalar function."""
    if h <= 0:
        raise ContractError("finite_difference_grad requires h > 0")

    def evaluate(arr: np.ndarray) -> float:
        out = f(Tensor(arr))
        value = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(value):
            raise NumericOverflowError("non-finite evaluation in finite_difference_grad")
        return value

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += h
        up = evaluate(bumped.reshape(base.shape))
        bumped[i] -= 2 * h
        down = evaluate(bumped.reshape(base.shape))
        flat[i] = (up - down) / (2 * h)
    return Tensor(grad)
