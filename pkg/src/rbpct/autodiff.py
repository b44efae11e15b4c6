"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the U-net, the residual loss and the optimizer need are
provided.  Operations are recorded on the innermost active :class:`Tape`; with
no tape active nothing is recorded and the ops just compute values.

    with Tape() as tape:
        y = conv2d(x, w, b, padding=1)
        loss = huber_loss(y, 1.0)
    backward(loss)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class AutodiffError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, name={self.name!r})"


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray, tuple[bool, ...]], tuple[np.ndarray | None, ...]]


@dataclass(eq=False)
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


_TAPES: list[Tape] = []


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, bwd) -> Tensor:
    result = Tensor(out)
    if _TAPES and any(_needs_grad(t) for t in inputs):
        tape = _TAPES[-1]
        node = Node(op, tuple(inputs), result, bwd)
        result._tape = tape
        result._node = node
        tape.nodes.append(node)
    return result


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


# ----------------------------------------------------------------- ops


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (ho - 1) + 1: stride, : stride * (wo - 1) + 1: stride]
    # (C, Ho, Wo, k, k) -> (C*k*k, Ho*Wo)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(-1, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``(C, H, W)`` input with ``(O, C, k, k)`` kernels."""
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise AutodiffError("conv2d expects (C,H,W) input and (O,C,k,k) kernel")
    c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if ci != c:
        raise AutodiffError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    if kh != kw or kh % 2 == 0:
        raise AutodiffError("conv2d kernel must be square with odd size")
    if bias is not None and bias.shape != (o,):
        raise AutodiffError("bias shape must be (out_channels,)")
    if stride < 1 or padding < 0:
        raise AutodiffError("bad stride/padding")
    k = kh
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise AutodiffError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(o, ho, wo)

    def bwd(g, need):
        g2 = g.reshape(o, -1)
        gx = gk = gb = None
        if need[0]:
            gcols = (wmat.T @ g2).reshape(c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, i: i + stride * (ho - 1) + 1: stride, j: j + stride * (wo - 1) + 1: stride] += gcols[:, i, j]
            gx = gxp[:, padding: padding + h, padding: padding + w] if padding else gxp
        if need[1]:
            gk = (g2 @ cols.T).reshape(kernel.shape)
        if len(need) > 2 and need[2]:
            gb = g2.sum(axis=1)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernel, bias) if bias is not None else (x, kernel)
    return _emit("conv2d", inputs, out, bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise AutodiffError("slope must be in [0, 1)")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def bwd(g, need):
        return (np.where(pos, g, slope * g),)

    return _emit("leaky_relu", (x,), out, bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the two trailing axes."""
    out = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)

    def bwd(g, need):
        s = g.shape
        return (g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1)),)

    return _emit("upsample2x", (x,), out, bwd)


def avg_pool2x(x: Tensor) -> Tensor:
    s = x.shape
    if s[-1] % 2 or s[-2] % 2:
        raise AutodiffError("avg_pool2x needs even spatial dims")
    out = x.data.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).mean(axis=(-3, -1))

    def bwd(g, need):
        return (np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25,)

    return _emit("avg_pool2x", (x,), out, bwd)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise AutodiffError("concat_channels expects (C,H,W) tensors")
    if a.shape[1:] != b.shape[1:]:
        raise AutodiffError(f"spatial mismatch {a.shape[1:]} vs {b.shape[1:]}")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def bwd(g, need):
        return g[:ca], g[ca:]

    return _emit("concat", (a, b), out, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise AutodiffError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g, need):
        return g, g

    return _emit("add", (a, b), a.data + b.data, bwd)


def scale(x: Tensor, factor: float) -> Tensor:
    def bwd(g, need):
        return (g * factor,)

    return _emit("scale", (x,), x.data * factor, bwd)


def add_const(x: Tensor, const) -> Tensor:
    const = np.asarray(const, dtype=np.float64)

    def bwd(g, need):
        return (g,)

    return _emit("add_const", (x,), x.data + const, bwd)


def linear(x: Tensor, forward: Callable[[np.ndarray], np.ndarray],
           adjoint: Callable[[np.ndarray], np.ndarray], name: str = "linear") -> Tensor:
    """Apply a linear map given as a (forward, adjoint) pair of callables."""
    out = np.asarray(forward(x.data), dtype=np.float64)

    def bwd(g, need):
        return (np.asarray(adjoint(g), dtype=np.float64).reshape(x.shape),)

    return _emit(name, (x,), out, bwd)


def tsum(x: Tensor) -> Tensor:
    def bwd(g, need):
        return (np.full(x.shape, float(g)),)

    return _emit("sum", (x,), np.asarray(x.data.sum()), bwd)


def huber_loss(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Mean Huber penalty: quadratic for ``|x| <= delta``, linear beyond."""
    if not delta > 0:
        raise AutodiffError("huber delta must be positive")
    x = residual.data
    n = x.size
    ax = np.abs(x)
    val = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta)).sum() / n

    def bwd(g, need):
        return (np.clip(x, -delta, delta) * (float(g) / n),)

    return _emit("huber", (residual,), _check_finite(np.asarray(val), "huber_loss"), bwd)


# ------------------------------------------------------------ backward


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` of every grad-requiring leaf reachable on the tape.

    Leaf gradients are overwritten, not accumulated, so repeated calls on the
    same tape give identical results.  Leaves listed in ``params`` that the
    loss does not depend on get zero gradients.
    """
    if loss.data.shape != ():
        raise AutodiffError("backward needs a scalar loss")
    for p in params:
        p.grad = np.zeros_like(p.data)
    tape = loss._tape
    if tape is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        need = tuple(_needs_grad(t) for t in node.inputs)
        in_grads = node.backward(g, need)
        for t, gi, nd in zip(node.inputs, in_grads, need):
            if not nd or gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        if t.requires_grad:
            t.grad = np.array(grads[key], dtype=np.float64).reshape(t.shape)


# ------------------------------------------------------------ optimizer


@dataclass
class RmsPropState:
    lr0: float = 1e-4
    rho: float = 0.99
    eps: float = 1e-8
    decay: float = 0.9
    decay_every: int = 1000
    acc: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr0 > 0:
            raise AutodiffError("learning rate must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise AutodiffError("rho must be in [0, 1)")
        if self.decay_every < 1:
            raise AutodiffError("decay period must be >= 1")

    def lr(self, iteration: int) -> float:
        return self.lr0 * self.decay ** (iteration // self.decay_every)


def rmsprop_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None,
                 state: RmsPropState, iteration: int) -> None:
    """One in-place RMSProp update; ``grads`` defaults to each ``p.grad``."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    if len(grads) != len(params):
        raise AutodiffError("params and grads differ in length")
    if not state.acc:
        state.acc = [np.zeros_like(p.data) for p in params]
    if len(state.acc) != len(params):
        raise AutodiffError("optimizer state does not match params")
    lr = state.lr(iteration)
    for p, g, acc in zip(params, grads, state.acc):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or acc.shape != p.shape:
            raise AutodiffError(f"shape mismatch for parameter {p.name or p.shape}")
        acc *= state.rho
        acc += (1.0 - state.rho) * g * g
        p.data -= lr * g / (np.sqrt(acc) + state.eps)


def numerical_grad(fn: Callable[[], float], t: Tensor, index, h: float = 1e-6) -> float:
    """Central finite difference of ``fn`` w.r.t. one entry of ``t``."""
    old = t.data[index]
    t.data[index] = old + h
    fp = fn()
    t.data[index] = old - h
    fm = fn()
    t.data[index] = old
    return (fp - fm) / (2 * h)


def rel_error(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


__all__ = [
    "AutodiffError", "Tensor", "Node", "Tape", "conv2d", "leaky_relu", "upsample2x", "avg_pool2x",
    "concat_channels", "add", "scale", "add_const", "linear", "tsum", "huber_loss", "backward",
    "RmsPropState", "rmsprop_step", "numerical_grad", "rel_error",
]
