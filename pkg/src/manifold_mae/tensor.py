"""Dense float64 tensors with tape-based reverse-mode differentiation.

Everything runs in 64-bit floats on numpy arrays. Recording is explicit:
ops only build graph nodes while a Tape is active (``with Tape() as tape:``),
otherwise they are plain numpy computations. A tape's node list is already
in topological order because nodes are appended at creation time, so one
backward pass is a single reverse sweep that visits each node exactly once.

Broadcasting is deliberately restricted to scalar-with-tensor; higher-rank
patterns (bias rows, token tiling) are expressed through fused ops or
matmul-with-ones so every backward rule stays explicit.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, DimensionError, DomainError

GELU_C = 0.7978845608028654  # sqrt(2/pi), tanh-approximation constant

_active_tape: Optional["Tape"] = None
_debug_checks = False



def _contig(arr) -> np.ndarray:
    """C-contiguous f64 view/copy that keeps 0-d shapes (unlike ascontiguousarray)."""
    arr = np.asarray(arr, dtype=np.float64)
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)

def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf screening at op boundaries (slow; meant for tests)."""
    global _debug_checks
    _debug_checks = bool(enabled)


def debug_checks_enabled() -> bool:
    return _debug_checks


def _check_finite(name: str, arr: np.ndarray) -> None:
    if _debug_checks and not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite value produced")


class Tensor:
    """Immutable f64 array plus optional accumulated gradient.

    ``data`` is C-contiguous (row-major) and marked read-only; ``grad`` is
    only ever touched by backward passes and ``zero_grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_creator")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite("tensor", arr)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._creator: Optional["Node"] = None

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # Internal fast path: `arr` is freshly allocated by an op.
        arr = _contig(arr)
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._creator = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(_contig(self.data))

    def zero_grad(self) -> None:
        self.grad = None

    def assign(self, data: np.ndarray) -> None:
        """Replace the stored values (optimizer updates). Clears grad."""
        arr = _contig(np.asarray(data, dtype=np.float64))
        if arr.shape != self.data.shape:
            raise DimensionError(f"assign: shape {arr.shape} != {self.data.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.grad = None

    def __repr__(self) -> str:
        head = np.array2string(self.data, max_line_width=72, threshold=8)
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})\n{head}"

    # operator sugar; scalars are accepted where the op allows them
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Node:
    """One recorded op: inputs, output, and the rule mapping d(out) to d(inputs)."""

    __slots__ = ("name", "inputs", "output", "rule", "tape")

    def __init__(self, name: str, inputs: tuple, output: Tensor,
                 rule: Callable[[np.ndarray], tuple], tape: "Tape"):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.rule = rule
        self.tape = tape


class Tape:
    """Ordered record of ops for one forward pass. Single-owner, not thread-safe."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = self._prev
        self._prev = None


class no_grad:
    """Context that suspends recording even if a Tape is active."""

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = None
        return self

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev


def active_tape() -> Optional[Tape]:
    return _active_tape


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf's ``grad``.

    Walks the recording tape once in reverse creation order. Calling this
    twice without zeroing doubles the leaf gradients (accumulation is
    additive by contract).
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._creator
    if node is None:
        raise ContractError("backward: loss was not produced under an active Tape")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for n in reversed(tape.nodes):
        g_out = grads.pop(id(n.output), None)
        if g_out is None:
            continue
        g_inputs = n.rule(g_out)
        for inp, g in zip(n.inputs, g_inputs):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp._creator is None:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad = leaf.grad + g


def _record(name: str, out_data: np.ndarray, inputs: tuple,
            rule: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(name, out_data)
    out = Tensor._wrap(out_data)
    tape = _active_tape
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(name, inputs, out, rule, tape)
        out._creator = node
        tape.nodes.append(node)
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # undo scalar-with-tensor broadcasting
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def rule(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _record("add", out, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def rule(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return _record("sub", out, (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def rule(g):
        return _reduce_to(g * bd, a), _reduce_to(g * ad, b)

    return _record("mul", out, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def rule(g):
        return (-g,)

    return _record("neg", -a.data, (a,), rule)


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (never enters the graph)."""
    a = _as_tensor(a)
    c = float(c)

    def rule(g):
        return (g * c,)

    return _record("scale", a.data * c, (a,), rule)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def rule(g):
        return (g * out,)

    return _record("exp", out, (a,), rule)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log: input must be strictly positive")
    ad = a.data

    def rule(g):
        return (g / ad,)

    return _record("log", np.log(ad), (a,), rule)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise DomainError("sqrt: input must be nonnegative")
    out = np.sqrt(a.data)

    def rule(g):
        return (g * (0.5 / out),)

    return _record("sqrt", out, (a,), rule)


def pow_const(a, p: float) -> Tensor:
    """a**p for a constant exponent; fractional/negative p needs positive base."""
    a = _as_tensor(a)
    p = float(p)
    if p != int(p) or p < 0:
        if np.any(a.data <= 0.0):
            raise DomainError(f"pow_const: base must be positive for exponent {p}")
    ad = a.data
    out = ad ** p

    def rule(g):
        return (g * p * ad ** (p - 1.0),)

    return _record("pow", out, (a,), rule)


# ---------------------------------------------------------------------------
# matmul and structural ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul: operands must be >=2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not match")
    ad, bd = a.data, b.data
    out = ad @ bd

    def rule(g):
        ga = g @ bd.swapaxes(-1, -2)
        gb = ad.swapaxes(-1, -2) @ g
        return ga, gb

    return _record("matmul", out, (a, b), rule)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from e
    in_shape = a.shape

    def rule(g):
        return (g.reshape(in_shape),)

    return _record("reshape", _contig(out), (a,), rule)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: axes {axes} invalid for ndim {a.ndim}")
    inv = tuple(int(i) for i in np.argsort(axes))

    def rule(g):
        return (_contig(np.transpose(g, inv)),)

    return _record("transpose", _contig(np.transpose(a.data, axes)), (a,), rule)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = _as_tensor(a)
    axis = int(axis)
    if not (0 <= axis < a.ndim):
        raise DimensionError(f"narrow: axis {axis} invalid for shape {a.shape}")
    if not (0 <= start and start + length <= a.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}, {start + length}) out of range for extent {a.shape[axis]}")
    idx = tuple(slice(None) if i != axis else slice(start, start + length)
                for i in range(a.ndim))
    in_shape = a.shape

    def rule(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        gx[idx] = g
        return (gx,)

    return _record("narrow", _contig(a.data[idx]), (a,), rule)


def concat(parts: Iterable, axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DegenerateInputError("concat: no tensors given")
    axis = int(axis)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[p.shape for p in parts]}") from e
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        outs = []
        for i in range(len(parts)):
            idx = tuple(slice(None) if d != axis else slice(offsets[i], offsets[i + 1])
                        for d in range(g.ndim))
            outs.append(_contig(g[idx]))
        return tuple(outs)

    return _record("concat", out, tuple(parts), rule)


def take_tokens(a, idx: np.ndarray) -> Tensor:
    """Gather rows along axis 1: out[b, k, :] = a[b, idx[b, k], :]."""
    a = _as_tensor(a)
    if a.ndim != 3:
        raise DimensionError(f"take_tokens: expected B x T x D input, got {a.shape}")
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"take_tokens: index shape {idx.shape} does not match batch {a.shape[0]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise DimensionError(f"take_tokens: index out of range for {a.shape[1]} tokens")
    out = np.take_along_axis(a.data, idx[:, :, None], axis=1)
    in_shape = a.shape
    bidx = np.arange(a.shape[0])[:, None]

    def rule(g):
        gx = np.zeros(in_shape, dtype=np.float64)
        np.add.at(gx, (bidx, idx), g)
        return (gx,)

    return _record("take_tokens", _contig(out), (a,), rule)


def diag_embed(v) -> Tensor:
    """Vector (B,) -> diagonal matrix (B, B)."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise DimensionError(f"diag_embed: expected 1-D input, got {v.shape}")

    def rule(g):
        return (_contig(np.diagonal(g)),)

    return _record("diag_embed", np.diag(v.data), (v,), rule)


def detach(a) -> Tensor:
    return _as_tensor(a).detach()


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _norm_axes(a: Tensor, axes) -> tuple:
    if axes is None:
        return tuple(range(a.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    normed = []
    for x in axes:
        x = int(x)
        if x < 0:
            x += a.ndim
        if not 0 <= x < a.ndim:
            raise DimensionError(f"reduce: axis {x} invalid for shape {a.shape}")
        normed.append(x)
    if len(set(normed)) != len(normed):
        raise DimensionError(f"reduce: duplicate axes {axes}")
    return tuple(sorted(normed))


def _check_nonempty(name: str, a: Tensor, axes: tuple) -> None:
    if any(a.shape[x] == 0 for x in axes):
        raise DegenerateInputError(f"{name}: empty reduction extent in shape {a.shape}")


def _expand_grad(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(a, axes)
    _check_nonempty("sum", a, axes)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def rule(g):
        return (_contig(_expand_grad(g, in_shape, axes, keepdims)),)

    return _record("sum", _contig(out), (a,), rule)


def mean(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(a, axes)
    _check_nonempty("mean", a, axes)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = np.mean(a.data, axis=axes, keepdims=keepdims)
    in_shape = a.shape

    def rule(g):
        return (_contig(_expand_grad(g, in_shape, axes, keepdims) / count),)

    return _record("mean", _contig(out), (a,), rule)


def max_(a, axes=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(a, axes)
    _check_nonempty("max", a, axes)
    out = np.max(a.data, axis=axes, keepdims=True)
    mask = (a.data == np.broadcast_to(out, a.shape))
    ties = np.sum(mask, axis=axes, keepdims=True)
    result = out if keepdims else np.squeeze(out, axis=axes)
    in_shape = a.shape

    def rule(g):
        gb = _expand_grad(g, in_shape, axes, keepdims)
        tb = np.broadcast_to(ties, in_shape)
        return (_contig(gb * mask / tb),)  # ties share the gradient

    return _record("max", _contig(result), (a,), rule)


# ---------------------------------------------------------------------------
# neural-net primitives (fused forward/backward)
# ---------------------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    axis = int(axis) % a.ndim
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def rule(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _record("softmax", out, (a,), rule)


def layer_norm(a, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis, then apply per-channel gain and bias."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} do not match width {d}")
    mu = np.mean(a.data, axis=-1, keepdims=True)
    xc = a.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar
    out = xhat * gain.data + bias.data
    gd = gain.data

    def rule(g):
        lead = tuple(range(a.ndim - 1))
        ggain = np.sum(g * xhat, axis=lead) if lead else g * xhat
        gbias = np.sum(g, axis=lead) if lead else g.copy()
        dxhat = g * gd
        # d/dx of (x - mu) * ivar with mu, var both functions of x
        gx = (dxhat - np.mean(dxhat, axis=-1, keepdims=True)
              - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)) * ivar
        return gx, _contig(ggain), _contig(gbias)

    return _record("layer_norm", out, (a, gain, bias), rule)


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    inner = GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def rule(g):
        dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x ** 2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner
        return (g * d,)

    return _record("gelu", out, (a,), rule)


def linear(a, weight, bias=None) -> Tensor:
    """a[..., K] @ weight[K, N] + bias[N]."""
    a, weight = _as_tensor(a), _as_tensor(weight)
    bias = _as_tensor(bias) if bias is not None else None
    if weight.ndim != 2 or a.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear: input {a.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    k = weight.shape[0]
    flat = a.data.reshape(-1, k)
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data
    out_shape = a.shape[:-1] + (weight.shape[1],)
    wd = weight.data
    inputs = (a, weight) if bias is None else (a, weight, bias)

    def rule(g):
        gf = g.reshape(-1, weight.shape[1])
        ga = (gf @ wd.T).reshape(a.shape)
        gw = flat.T @ gf
        if bias is None:
            return ga, gw
        return ga, gw, _contig(gf.sum(axis=0))

    return _record("linear", _contig(out.reshape(out_shape)), inputs, rule)


def ones(shape) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=np.float64))


def zeros(shape) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=np.float64))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=np.float64))
