"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (entered with ``with``)
whenever at least one input requires a gradient. :func:`backward` walks the
tape in reverse and returns gradients for the leaf tensors reached from the
loss.
"""

from __future__ import annotations

import contextvars
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_uids = itertools.count(1)
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "uid", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.uid = next(_uids)
        self.node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.uid = next(_uids)
        t.node = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return slice_(self, index)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of differentiable operations; single owner."""

    nodes: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None
        return False


class Gradients(dict):
    """Mapping from tensor uid to gradient Tensor; also indexable by Tensor."""

    def __getitem__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__getitem__(key)

    def __contains__(self, key):
        if isinstance(key, Tensor):
            key = key.uid
        return super().__contains__(key)

    def get(self, key, default=None):
        return self[key] if key in self else default


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced a non-finite value")
    return arr


def _record(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp) -> Tensor:
    _check_finite(out, op)
    tape = _active_tape.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, requires_grad=needs)
    if needs:
        node = Node(op, tuple(inputs), result, vjp)
        result.node = node
        tape.nodes.append(node)
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return _record("matmul", (a, b), a.data @ b.data,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias) -> Tensor:
    """``x @ weight + bias``; composed from matmul and add."""
    return add(matmul(x, weight), bias)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """NCHW convolution (cross-correlation) with zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if stride not in (1, 2):
        raise ContractError("conv2d supports stride 1 or 2")
    if padding < 0:
        raise ContractError("conv2d padding must be non-negative")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {weight.shape} do not conform")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d: kernel larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :ho, :wo]  # n, c, ho, wo, kh, kw
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T  # (n*ho*wo, o)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data
        inputs.append(bias)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = (gx, gw)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)),)
        return grads

    return _record("conv2d", inputs, out, vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def flatten(x) -> Tensor:
    """Collapse every axis after the first (batch) axis."""
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError("concat: shapes do not conform") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(x, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _record("slice", (x,), np.array(out, dtype=np.float64), vjp)


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), out, vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _constant(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _per_sample(values: np.ndarray, weights: np.ndarray) -> tuple:
    axes = tuple(range(1, values.ndim))
    counts = weights.sum(axis=axes)
    safe = np.maximum(counts, 1.0)
    return (values * weights).sum(axis=axes) / safe, safe


def mse_loss(pred, target, mask=None, reduction: str = "mean") -> Tensor:
    """Squared error averaged per sample over the (masked) entries.

    ``target`` and ``mask`` are constants. A sample whose mask is all zero has
    loss 0. ``reduction`` is ``"mean"`` over the batch or ``"none"``.
    """
    pred = as_tensor(pred)
    target = _constant(target)
    if target.shape != pred.shape:
        raise DimensionError(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    weights = np.ones(pred.shape) if mask is None else np.broadcast_to(
        _constant(mask), pred.shape)
    diff = pred.data - target
    per_sample, counts = _per_sample(diff * diff, weights)
    expand = (slice(None),) + (None,) * (pred.ndim - 1)

    def vjp(g):
        return (2.0 * diff * weights * (g / counts)[expand],)

    out = _record("mse_loss", (pred,), per_sample, vjp)
    return _reduce(out, reduction)


def bce_with_logits_loss(logits, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits, averaged per sample."""
    logits = as_tensor(logits)
    target = _constant(target)
    if target.shape != logits.shape:
        raise DimensionError(f"bce_with_logits_loss: logits {logits.shape} vs target {target.shape}")
    z = logits.data
    elem = np.maximum(z, 0.0) - z * target + np.log1p(np.exp(-np.abs(z)))
    per_sample, counts = _per_sample(elem, np.ones(z.shape))
    expand = (slice(None),) + (None,) * (z.ndim - 1)

    def vjp(g):
        return ((_sigmoid(z) - target) * (g / counts)[expand],)

    out = _record("bce_with_logits_loss", (logits,), per_sample, vjp)
    return _reduce(out, reduction)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return mean(per_sample)
    raise ContractError(f"unknown reduction {reduction!r}")


def l1_norm(x) -> Tensor:
    x = as_tensor(x)
    s = np.sign(x.data)
    return _record("l1_norm", (x,), np.asarray(np.abs(x.data).sum()), lambda g: (g * s,))


def l2_norm(x) -> Tensor:
    x = as_tensor(x)
    n = float(np.sqrt((x.data * x.data).sum()))

    def vjp(g):
        return (g * x.data / n if n > 0 else np.zeros_like(x.data),)

    return _record("l2_norm", (x,), np.asarray(n), vjp)


def sign(x) -> Tensor:
    """Elementwise sign with ``sign(0) == 0``; gradient is zero."""
    x = as_tensor(x)
    return _record("sign", (x,), np.sign(x.data), lambda g: (np.zeros_like(g),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient passes on the closed interval."""
    x = as_tensor(x)
    if lo > hi:
        raise ContractError("clamp requires lo <= hi")
    inside = (x.data >= lo) & (x.data <= hi)
    return _record("clamp", (x,), np.clip(x.data, lo, hi), lambda g: (g * inside,))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "conv2d": conv2d,
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "flatten": flatten,
    "concat": concat, "slice": slice_, "sum": sum_, "mean": mean,
    "mse_loss": mse_loss, "bce_with_logits_loss": bce_with_logits_loss,
    "l1_norm": l1_norm, "l2_norm": l2_norm, "sign": sign, "clamp": clamp,
}


def primitive_forward(op: str, *inputs, **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    if op == "concat":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)


# ----------------------------------------------------------------- backward

def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    """Gradients of a scalar ``loss`` for every reachable leaf with requires_grad."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves = Gradients()
    if loss.node is None:
        if loss.requires_grad:
            leaves[loss.uid] = Tensor._wrap(grads[loss.uid])
        return leaves
    if tape is None:
        tape = _active_tape.get()
    if tape is None or not tape.nodes:
        raise ContractError("loss is not recorded on any tape")
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.uid in grads:
                grads[inp.uid] = grads[inp.uid] + gi
            else:
                grads[inp.uid] = gi
    if loss.uid in grads:
        # loss was not produced on this tape
        raise ContractError("loss is not recorded on the given tape")
    for uid, g in grads.items():
        leaves[uid] = Tensor._wrap(np.asarray(g, dtype=np.float64))
    return leaves


def value_and_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[float, np.ndarray]:
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True)
        y = f(xt)
        g = backward(y, tape)
    grad = g[xt].data if xt in g else np.zeros_like(xt.data)
    return y.item(), grad


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, coords=None) -> float:
    """Max relative error between autodiff and central differences.

    ``coords`` optionally restricts the comparison to a subset of flat indices.
    """
    if not h > 0:
        raise ContractError("grad_check requires h > 0")
    x = np.array(x, dtype=np.float64)
    _, auto = value_and_grad(f, x)
    flat = x.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x.shape))).item()
        fm = f(Tensor(xm.reshape(x.shape))).item()
        central = (fp - fm) / (2.0 * h)
        if not np.isfinite(central):
            raise NumericError("non-finite central difference")
        err = abs(auto.reshape(-1)[i] - central) / max(1e-8, abs(central))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")


def optimizer_step(params: Sequence[Tensor], grads: Gradients, state: OptimizerState) -> Sequence[Tensor]:
    """Update ``params`` in place (by rebinding ``.data``) and return them.

    Adam moments are keyed by position in ``params``, so callers must pass
    parameters in a fixed order.
    """
    for p in params:
        if p not in grads:
            raise ContractError(f"missing gradient for parameter uid={p.uid}")
    state.step += 1
    lr = state.learning_rate
    for i, p in enumerate(params):
        g = grads[p].data
        if state.kind == "sgd":
            p.data = p.data - lr * g
            continue
        m, v = state.moments.get(i, (np.zeros_like(g), np.zeros_like(g)))
        if m.shape != p.shape:
            raise ContractError("optimizer moments do not match parameter shape")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.moments[i] = (m, v)
        m_hat = m / (1.0 - state.beta1 ** state.step)
        v_hat = v / (1.0 - state.beta2 ** state.step)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params
