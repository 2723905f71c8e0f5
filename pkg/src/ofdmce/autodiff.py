"""Eager reverse-mode differentiation over dense float64 numpy arrays.

Operations evaluate immediately. While a :class:`Tape` is active (used as a
context manager), every operation that touches a tensor with
``requires_grad=True`` appends a node to it; :func:`backward` then walks the
tape in reverse creation order, which is a valid reverse topological order.
Outside a tape, operations only compute values, so inference keeps no
activations alive.

Only the primitives needed by the channel-estimation networks are provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor", "Tape", "ShapeError", "NonFiniteError", "AdamState",
    "backward", "adam_step", "apply_primitive", "PRIMITIVES",
    "matmul", "add", "sub", "mul", "add_broadcast_bias", "scale", "relu",
    "gelu", "softmax_rows", "layer_norm_lastdim", "reshape", "transpose",
    "concat_lastdim", "split_heads", "merge_heads", "conv2d_3x3_same",
    "sum_all", "mean_all",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when an operation receives inputs of incompatible shape."""


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinity."""


class Tensor:
    """A float64 array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False,
                 name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node: Optional[_Node] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class _Node:
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Records operations for a single backward pass.

    Tapes nest; operations record onto the innermost active one.
    """

    def __init__(self) -> None:
        self.nodes: List[Optional[_Node]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE: List[Tape] = []

# Flip to False to skip the per-op finiteness scan (e.g. for profiling).
CHECK_FINITE = True


def _record(kind: str, inputs: Tuple[Tensor, ...], out: np.ndarray,
            grad_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    if CHECK_FINITE and not np.isfinite(out).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NonFiniteError(f"{kind}: non-finite output for inputs of shape {shapes}")
    result = Tensor(out)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = _Node(kind, inputs, result, grad_fn)
        result.node = node
        _ACTIVE[-1].nodes.append(node)
    return result


def backward(tape: Tape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss`` through ``tape``.

    Returns the gradient of every leaf tensor (``requires_grad`` and not
    produced by a recorded op) that the loss depends on. The tape is consumed:
    saved activations are released as the walk proceeds.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    if loss.node is None and loss.requires_grad:
        leaves[id(loss)] = loss
    for i in range(len(tape.nodes) - 1, -1, -1):
        node = tape.nodes[i]
        if node is None:
            continue
        tape.nodes[i] = None
        node.output.node = None
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t.node is None:
                leaves[key] = t
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return {t: grads[k] for k, t in leaves.items() if k in grads}


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and g.ndim > 2:
                # shared weight: one GEMM over the flattened batch instead of a batched product
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", (a, b), ad @ bd, grad_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def add_broadcast_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with a 1-D bias broadcast over every leading axis."""
    if bias.ndim != 1 or x.ndim < 1 or bias.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_broadcast_bias: bias {bias.shape} does not match last dim of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _record("add_broadcast_bias", (x, bias), x.data + bias.data,
                   lambda g: (g, g.sum(axis=lead)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return _record("gelu", (x,), xd * cdf, grad_fn)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (z * (g - (g * z).sum(axis=-1, keepdims=True)),)

    return _record("softmax_rows", (x,), z, grad_fn)


def layer_norm_lastdim(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm_lastdim: gain {gain.shape} / shift {shift.shape} "
                         f"do not match last dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    gd = gain.data
    lead = tuple(range(x.ndim - 1))

    def grad_fn(g):
        gh = g * gd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _record("layer_norm_lastdim", (x, gain, shift), xhat * gd + shift.data, grad_fn)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[:-2] + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (x,), x.data.transpose(axes),
                   lambda g: (g.transpose(inverse),))


def concat_lastdim(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(tensors)
    lead = tensors[0].shape[:-1]
    if any(t.shape[:-1] != lead for t in tensors):
        raise ShapeError("concat_lastdim: leading dims differ: "
                         + ", ".join(str(t.shape) for t in tensors))
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=-1)
    return _record("concat_lastdim", tensors, out,
                   lambda g: tuple(np.split(g, splits, axis=-1)))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """``(..., S, d) -> (..., n_heads, S, d // n_heads)``."""
    *lead, s, d = x.shape
    if d % n_heads:
        raise ShapeError(f"split_heads: width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    nl = len(lead)
    out = x.data.reshape(*lead, s, n_heads, dh).swapaxes(nl, nl + 1)
    return _record("split_heads", (x,), out,
                   lambda g: (g.swapaxes(nl, nl + 1).reshape(*lead, s, d),))


def merge_heads(x: Tensor) -> Tensor:
    """``(..., M, S, dh) -> (..., S, M * dh)``; inverse of :func:`split_heads`."""
    if x.ndim < 3:
        raise ShapeError(f"merge_heads: need at least 3 dims, got {x.shape}")
    *lead, m, s, dh = x.shape
    nl = len(lead)
    out = x.data.swapaxes(nl, nl + 1).reshape(*lead, s, m * dh)
    return _record("merge_heads", (x,), out,
                   lambda g: (g.reshape(*lead, s, m, dh).swapaxes(nl, nl + 1),))


def _offset_slices(d: int, n: int) -> Tuple[slice, slice]:
    """(dst, src) slices so that ``dst[k] = src[k + d]`` within bounds."""
    return slice(max(0, -d), n - max(0, d)), slice(max(0, d), n + min(0, d))


def _im2col(a: np.ndarray, sign: int) -> np.ndarray:
    """``cols[n, y, x, i, j, c] = a[n, y + sign*(i-1), x + sign*(j-1), c]`` (zero outside)."""
    n, h, w, c = a.shape
    padded = np.zeros((n, h + 2, w + 2, c), dtype=a.dtype)
    padded[:, 1:-1, 1:-1] = a
    win = sliding_window_view(padded, (3, 3), axis=(1, 2))   # (n, h, w, c, i, j)
    if sign < 0:
        win = win[..., ::-1, ::-1]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))


def _col2im(y: np.ndarray, sign: int, out: np.ndarray) -> np.ndarray:
    """``out[n, r, s] += sum_ij y[n, r + sign*(i-1), s + sign*(j-1), i, j]``."""
    h, w = out.shape[1:3]
    for i in range(3):
        ys, ysrc = _offset_slices(sign * (i - 1), h)
        for j in range(3):
            xs, xsrc = _offset_slices(sign * (j - 1), w)
            out[:, ys, xs] += y[:, ysrc, xsrc, i, j]
    return out


def conv2d_3x3_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding keeping ``(H, W)``.

    Channels-last: ``x`` is ``(N, H, W, C_in)``, ``w`` is ``(C_out, C_in, 3, 3)``,
    ``b`` is ``(C_out,)``; the output is ``(N, H, W, C_out)``.
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[3] \
            or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d_3x3_same: input {x.shape}, kernel {w.shape}, bias {b.shape}")
    n, h, wd_, ci = x.shape
    co = w.shape[0]
    rows = n * h * wd_
    xd = x.data
    # k[i, j, c, o] = w[o, c, i, j]
    k = w.data.transpose(2, 3, 1, 0)
    # expand whichever side has fewer channels
    if ci <= co:
        out = _im2col(xd, 1).reshape(rows, 9 * ci) @ k.reshape(9 * ci, co)
        out = out.reshape(n, h, wd_, co)
    else:
        y = (xd.reshape(rows, ci) @ k.transpose(2, 0, 1, 3).reshape(ci, 9 * co))
        out = _col2im(y.reshape(n, h, wd_, 3, 3, co), 1, np.zeros((n, h, wd_, co), dtype=y.dtype))
    out += b.data

    def grad_fn(g):
        g2 = g.reshape(rows, co)
        gx = gw = None
        if ci <= co:
            if w.requires_grad:
                gw = _im2col(xd, 1).reshape(rows, 9 * ci).T @ g2
                gw = gw.reshape(3, 3, ci, co).transpose(3, 2, 0, 1)
            if x.requires_grad:
                z = g2 @ k.transpose(3, 0, 1, 2).reshape(co, 9 * ci)
                gx = _col2im(z.reshape(n, h, wd_, 3, 3, ci), -1, np.zeros((n, h, wd_, ci), dtype=z.dtype))
        else:
            gcols = _im2col(g, -1).reshape(rows, 9 * co)
            if w.requires_grad:
                gw = (gcols.T @ xd.reshape(rows, ci)).reshape(3, 3, co, ci).transpose(2, 3, 0, 1)
            if x.requires_grad:
                gx = (gcols @ k.transpose(0, 1, 3, 2).reshape(9 * co, ci)).reshape(n, h, wd_, ci)
        return gx, gw, g2.sum(axis=0)

    return _record("conv2d_3x3_same", (x, w, b), out, grad_fn)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _record("sum_all", (x,), np.asarray(x.data.sum()),
                   lambda g: (np.broadcast_to(g, shape),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _record("mean_all", (x,), np.asarray(x.data.mean()),
                   lambda g: (np.broadcast_to(g / n, shape),))


PRIMITIVES: Dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "add_broadcast_bias": add_broadcast_bias,
    "conv2d_3x3_same": conv2d_3x3_same,
    "relu": relu,
    "gelu": gelu,
    "softmax_rows": softmax_rows,
    "layer_norm_lastdim": layer_norm_lastdim,
    "reshape": reshape,
    "transpose": transpose,
    "concat_lastdim": concat_lastdim,
    "split_heads": split_heads,
    "merge_heads": merge_heads,
    "scale": scale,
    "sum_all": sum_all,
    "mean_all": mean_all,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.995
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def end_epoch(self) -> None:
        """Apply the per-epoch exponential learning-rate decay."""
        self.lr *= self.decay


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
              state: AdamState) -> Dict[str, Tensor]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"adam_step: gradient {g.shape} vs parameter {params[name].shape} for {name!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def parameters_with_grads(params: Dict[str, Tensor],
                          grads: Dict[Tensor, np.ndarray]) -> Dict[str, np.ndarray]:
    """Re-key a :func:`backward` result by parameter name."""
    return {name: grads[t] for name, t in params.items() if t in grads}

