"""Dense tensor arithmetic with reverse-mode automatic differentiation.

Values are plain ``numpy.float64`` arrays.  A :class:`Tape` records every
operation as a node; :meth:`Tape.backward` walks the recorded graph in
reverse and accumulates vector-Jacobian products.  The operation set is
closed (see :data:`OP_KINDS`); everything else in the package is composed
from these primitives.

Shape rules
-----------
conv1d              x ``(..., C_in, T)``, kernel ``(C_out, C_in, K)`` with odd
                    K, stride 1, "same" zero padding -> ``(..., C_out, T)``
dense               x ``(F_in,)`` or ``(N, ...)`` (trailing axes flattened,
                    row-major), w ``(F_in, F_out)`` -> ``(F_out,)``/``(N, F_out)``
relu/sigmoid/tanh/abs/square   elementwise, shape preserved
max_pool1d          width 2, stride 2 on the last axis; odd tail dropped
nearest_upsample1d  ``target_length`` L: out[..., t] = in[..., (t*T)//L]
add/hadamard        numpy broadcasting; gradients sum-reduce to input shapes
scalar_mul          attrs ``factor``; shape preserved
sum/mean/l1_norm/l2_norm_sq    reduce every element to a scalar
softmax             last axis, numerically stabilised
cross_entropy       logits ``(N, K)`` or ``(K,)``, attrs ``labels`` -> scalar
                    mean negative log-likelihood
mse                 equal shapes -> scalar mean of squared differences
concat              attrs ``axis``
slice               attrs ``axis``, ``start``, ``stop``

Backward modes: "standard" is the plain chain rule; "guided" makes every
ReLU node propagate ``g * (input > 0) * (g > 0)`` and leaves all other
nodes untouched.

A tape is single-writer: recording and backward must not run concurrently.
Completed value arrays are never mutated and may be read from any thread.
"""

from __future__ import annotations

import ctypes
import ctypes.util
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


def _tune_allocator() -> None:
    # Tapes allocate and release thousands of ~100 KB buffers per step; with
    # glibc defaults each one becomes an mmap/munmap pair and page-fault cost
    # dominates.  Raising the thresholds keeps these buffers on the reusable
    # heap.  Best effort only.
    try:
        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        libc.mallopt(-3, 1 << 28)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except Exception:
        pass


_tune_allocator()

OP_KINDS = frozenset(
    {
        "conv1d",
        "dense",
        "relu",
        "sigmoid",
        "tanh",
        "max_pool1d",
        "nearest_upsample1d",
        "add",
        "hadamard",
        "scalar_mul",
        "sum",
        "mean",
        "abs",
        "square",
        "softmax",
        "cross_entropy",
        "mse",
        "l1_norm",
        "l2_norm_sq",
        "concat",
        "slice",
    }
)

_LEAF = "leaf"


class EngineError(ValueError):
    """Raised on shape mismatches, unknown kinds or contract violations."""


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    attrs: dict
    value: Array
    requires_grad: bool
    name: Optional[str] = None
    aux: object = None  # forward by-products reused by the backward pass


@dataclass
class Capture:
    """Forward activation and (if backward has run) its gradient."""

    activation: Array
    gradient: Optional[Array]


@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_coordinate: int
    per_parameter_errors: dict[str, float] = field(default_factory=dict)


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(kind: str, value: Array) -> None:
    if not np.all(np.isfinite(value)):
        raise EngineError(f"{kind}: operation produced non-finite values")


def _shape_error(kind: str, *shapes) -> EngineError:
    pretty = " vs ".join(str(tuple(s)) for s in shapes)
    return EngineError(f"{kind}: incompatible shapes {pretty}")


# ---------------------------------------------------------------------------
# forward implementations
# ---------------------------------------------------------------------------


def _pad_last(x: Array, pad: int) -> Array:
    if pad == 0:
        return x
    out = np.zeros(x.shape[:-1] + (x.shape[-1] + 2 * pad,))
    out[..., pad:-pad] = x
    return out


def _conv1d_raw(x: Array, kernel: Array) -> Array:
    # x (..., C_in, T), kernel (C_out, C_in, K); stride 1, same zero padding.
    # One matmul per kernel offset: out += W[:, :, k] @ xp[..., :, k : k + T].
    # Kernel slices are copied contiguous so matmul stays on the BLAS path.
    width = kernel.shape[2]
    t = x.shape[-1]
    xp = _pad_last(x, width // 2)
    out = np.matmul(np.ascontiguousarray(kernel[:, :, 0]), xp[..., :t])
    for k in range(1, width):
        out += np.matmul(np.ascontiguousarray(kernel[:, :, k]), xp[..., k : k + t])
    return out


def _f_conv1d(vals, attrs):
    x, kernel = vals
    if kernel.ndim != 3:
        raise _shape_error("conv1d", x.shape, kernel.shape)
    if x.ndim < 2 or x.shape[-2] != kernel.shape[1]:
        raise _shape_error("conv1d", x.shape, kernel.shape)
    if kernel.shape[2] % 2 == 0:
        raise EngineError(f"conv1d: kernel width must be odd, got {kernel.shape[2]}")
    return _conv1d_raw(x, kernel)


def _f_dense(vals, attrs):
    x, w = vals
    if w.ndim != 2:
        raise _shape_error("dense", x.shape, w.shape)
    if x.ndim == 1:
        if x.shape[0] != w.shape[0]:
            raise _shape_error("dense", x.shape, w.shape)
        return x @ w
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != w.shape[0]:
        raise _shape_error("dense", x.shape, w.shape)
    return flat @ w


def _f_max_pool1d(vals, attrs):
    (x,) = vals
    if x.ndim < 1 or x.shape[-1] < 2:
        raise _shape_error("max_pool1d", x.shape)
    half = x.shape[-1] // 2
    left = x[..., 0 : half * 2 : 2]
    right = x[..., 1 : half * 2 : 2]
    taken_right = right > left  # ties keep the earlier element
    return np.where(taken_right, right, left), taken_right


def _upsample_index(t_in: int, t_out: int) -> Array:
    return (np.arange(t_out) * t_in) // t_out


def _f_nearest_upsample1d(vals, attrs):
    (x,) = vals
    target = int(attrs["target_length"])
    if target < 1 or x.ndim < 1:
        raise _shape_error("nearest_upsample1d", x.shape)
    idx = _upsample_index(x.shape[-1], target)
    return np.ascontiguousarray(x[..., idx])


def _f_add(vals, attrs):
    a, b = vals
    try:
        return a + b
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None


def _f_hadamard(vals, attrs):
    a, b = vals
    try:
        return a * b
    except ValueError:
        raise _shape_error("hadamard", a.shape, b.shape) from None


def _f_softmax(vals, attrs):
    (x,) = vals
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _f_cross_entropy(vals, attrs):
    (logits,) = vals
    labels = np.asarray(attrs["labels"])
    if logits.ndim == 1:
        if labels.ndim != 0:
            raise _shape_error("cross_entropy", logits.shape, labels.shape)
        return -_log_softmax(logits)[int(labels)]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_error("cross_entropy", logits.shape, labels.shape)
    logp = _log_softmax(logits)
    return np.float64(-logp[np.arange(logits.shape[0]), labels].mean())


def _f_mse(vals, attrs):
    a, b = vals
    if a.shape != b.shape:
        raise _shape_error("mse", a.shape, b.shape)
    d = a - b
    return np.float64((d * d).mean())


def _f_concat(vals, attrs):
    axis = int(attrs["axis"])
    try:
        return np.concatenate(vals, axis=axis)
    except ValueError:
        raise _shape_error("concat", *[v.shape for v in vals]) from None


def _f_slice(vals, attrs):
    (x,) = vals
    axis, start, stop = int(attrs["axis"]), int(attrs["start"]), int(attrs["stop"])
    if not (0 <= start < stop <= x.shape[axis]):
        raise EngineError(
            f"slice: range [{start}:{stop}] out of bounds for axis {axis} of {x.shape}"
        )
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return np.ascontiguousarray(x[tuple(index)])


_FORWARD: dict[str, Callable] = {
    "conv1d": _f_conv1d,
    "dense": _f_dense,
    "relu": lambda v, a: np.maximum(v[0], 0.0),
    "sigmoid": lambda v, a: 1.0 / (1.0 + np.exp(-v[0])),
    "tanh": lambda v, a: np.tanh(v[0]),
    "max_pool1d": _f_max_pool1d,
    "nearest_upsample1d": _f_nearest_upsample1d,
    "add": _f_add,
    "hadamard": _f_hadamard,
    "scalar_mul": lambda v, a: v[0] * float(a["factor"]),
    "sum": lambda v, a: np.float64(v[0].sum()),
    "mean": lambda v, a: np.float64(v[0].mean()),
    "abs": lambda v, a: np.abs(v[0]),
    "square": lambda v, a: v[0] * v[0],
    "softmax": _f_softmax,
    "cross_entropy": _f_cross_entropy,
    "mse": _f_mse,
    "l1_norm": lambda v, a: np.float64(np.abs(v[0]).sum()),
    "l2_norm_sq": lambda v, a: np.float64((v[0] * v[0]).sum()),
    "concat": _f_concat,
    "slice": _f_slice,
}

_ARITY = {kind: 1 for kind in OP_KINDS}
_ARITY.update({"conv1d": 2, "dense": 2, "add": 2, "hadamard": 2, "mse": 2})


# ---------------------------------------------------------------------------
# vector-Jacobian products
# ---------------------------------------------------------------------------


def _reduce_to_shape(grad: Array, shape: tuple[int, ...]) -> Array:
    # undo numpy broadcasting: sum over expanded axes
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _vjp_conv1d(node, vals, g, needs):
    x, kernel = vals
    width = kernel.shape[2]
    t = x.shape[-1]
    gx = gk = None
    if needs[0]:
        # grad wrt input: same-conv of g with the transposed, k-flipped kernel
        gx = _conv1d_raw(g, np.ascontiguousarray(kernel.transpose(1, 0, 2)[:, :, ::-1]))
    if needs[1]:
        # grad wrt kernel: gk[:, :, k] = g2d^T @ xp2d_k over flattened (batch, time)
        xp = _pad_last(x, width // 2)
        xpt = np.ascontiguousarray(np.swapaxes(xp, -1, -2))  # (..., Tp, C_in)
        g2d = np.ascontiguousarray(np.swapaxes(g, -1, -2)).reshape(-1, kernel.shape[0])
        gk = np.empty_like(kernel)
        for k in range(width):
            sliced = xpt[..., k : k + t, :].reshape(-1, kernel.shape[1])
            gk[:, :, k] = g2d.T @ sliced
    return [gx, gk]


def _vjp_dense(node, vals, g, needs):
    x, w = vals
    if x.ndim == 1:
        return [g @ w.T if needs[0] else None, np.outer(x, g) if needs[1] else None]
    gx = gw = None
    if needs[0]:
        gx = (g @ w.T).reshape(x.shape)
    if needs[1]:
        gw = x.reshape(x.shape[0], -1).T @ g
    return [gx, gw]


def _vjp_max_pool1d(node, vals, g, needs):
    (x,) = vals
    half = x.shape[-1] // 2
    taken_right = node.aux
    gx = np.zeros_like(x)
    gx[..., 0 : half * 2 : 2] = np.where(taken_right, 0.0, g)
    gx[..., 1 : half * 2 : 2] = np.where(taken_right, g, 0.0)
    return [gx]


def _vjp_nearest_upsample1d(node, vals, g, needs):
    (x,) = vals
    t_in = x.shape[-1]
    idx = _upsample_index(t_in, int(node.attrs["target_length"]))
    scatter = np.zeros((len(idx), t_in))
    scatter[np.arange(len(idx)), idx] = 1.0
    return [g @ scatter]


def _vjp_cross_entropy(node, vals, g, needs):
    (logits,) = vals
    labels = np.asarray(node.attrs["labels"])
    p = np.exp(_log_softmax(logits))
    if logits.ndim == 1:
        p[int(labels)] -= 1.0
        return [p * g]
    p[np.arange(logits.shape[0]), labels] -= 1.0
    return [p * (g / logits.shape[0])]


def _vjp_softmax(node, vals, g, needs):
    s = node.value
    return [s * (g - (g * s).sum(axis=-1, keepdims=True))]


def _vjp_concat(node, vals, g, needs):
    axis = int(node.attrs["axis"])
    sizes = [v.shape[axis] for v in vals]
    return list(np.split(g, np.cumsum(sizes)[:-1], axis=axis))


def _vjp_slice(node, vals, g, needs):
    (x,) = vals
    axis, start, stop = (int(node.attrs[k]) for k in ("axis", "start", "stop"))
    gx = np.zeros_like(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    gx[tuple(index)] = g
    return [gx]


def _relu_vjp(node, vals, g, mode):
    mask = vals[0] > 0
    if mode == "guided":
        mask &= g > 0
    return [g * mask]


_VJP: dict[str, Callable] = {
    "conv1d": _vjp_conv1d,
    "dense": _vjp_dense,
    "sigmoid": lambda n, v, g, need: [g * n.value * (1.0 - n.value)],
    "tanh": lambda n, v, g, need: [g * (1.0 - n.value * n.value)],
    "max_pool1d": _vjp_max_pool1d,
    "nearest_upsample1d": _vjp_nearest_upsample1d,
    "add": lambda n, v, g, need: [
        _reduce_to_shape(g, v[0].shape) if need[0] else None,
        _reduce_to_shape(g, v[1].shape) if need[1] else None,
    ],
    "hadamard": lambda n, v, g, need: [
        _reduce_to_shape(g * v[1], v[0].shape) if need[0] else None,
        _reduce_to_shape(g * v[0], v[1].shape) if need[1] else None,
    ],
    "scalar_mul": lambda n, v, g, need: [g * float(n.attrs["factor"])],
    "sum": lambda n, v, g, need: [np.broadcast_to(g, v[0].shape).copy()],
    "mean": lambda n, v, g, need: [np.broadcast_to(g / v[0].size, v[0].shape).copy()],
    "abs": lambda n, v, g, need: [g * np.sign(v[0])],
    "square": lambda n, v, g, need: [g * 2.0 * v[0]],
    "softmax": _vjp_softmax,
    "cross_entropy": _vjp_cross_entropy,
    "mse": lambda n, v, g, need: [
        g * 2.0 * (v[0] - v[1]) / v[0].size if need[0] else None,
        g * 2.0 * (v[1] - v[0]) / v[0].size if need[1] else None,
    ],
    "l1_norm": lambda n, v, g, need: [g * np.sign(v[0])],
    "l2_norm_sq": lambda n, v, g, need: [g * 2.0 * v[0]],
    "concat": _vjp_concat,
    "slice": _vjp_slice,
}


# ---------------------------------------------------------------------------
# the tape
# ---------------------------------------------------------------------------


class Tape:
    """Ordered record of a forward computation, replayable and differentiable."""

    def __init__(self, backward_mode: str = "standard"):
        if backward_mode not in ("standard", "guided"):
            raise EngineError(f"unknown backward mode {backward_mode!r}")
        self.backward_mode = backward_mode
        self.nodes: list[Node] = []
        self.parameters: dict[str, int] = {}
        self._names: dict[str, int] = {}
        self.last_gradients: Optional[dict[int, Array]] = None

    # -- recording ---------------------------------------------------------

    def leaf(self, value, requires_grad: bool = False, name: Optional[str] = None) -> int:
        arr = _as_array(value)
        _check_finite(_LEAF, arr)
        node = Node(_LEAF, (), {}, arr, requires_grad, name)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if name is not None:
            self._names[name] = nid
        return nid

    def parameter(self, name: str, value, trainable: bool = True) -> int:
        if name in self.parameters:
            raise EngineError(f"parameter {name!r} already registered")
        nid = self.leaf(value, requires_grad=trainable, name=name)
        self.parameters[name] = nid
        return nid

    def op_apply(self, kind: str, inputs: list[int], attrs: Optional[dict] = None) -> int:
        if kind not in OP_KINDS:
            raise EngineError(f"unknown operation kind {kind!r}")
        attrs = dict(attrs) if attrs else {}
        if kind != "concat" and len(inputs) != _ARITY[kind]:
            raise EngineError(f"{kind}: expected {_ARITY[kind]} inputs, got {len(inputs)}")
        vals = [self._node(i).value for i in inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = _FORWARD[kind](vals, attrs)
        aux = None
        if isinstance(out, tuple):
            out, aux = out
        out = np.asarray(out, dtype=np.float64)
        _check_finite(kind, out)
        rg = any(self.nodes[i].requires_grad for i in inputs)
        self.nodes.append(Node(kind, tuple(inputs), attrs, out, rg, aux=aux))
        return len(self.nodes) - 1

    # convenience wrappersable to read like ordinary expressions
    def conv1d(self, x: int, kernel: int) -> int:
        return self.op_apply("conv1d", [x, kernel])

    def dense(self, x: int, w: int) -> int:
        return self.op_apply("dense", [x, w])

    def relu(self, x: int) -> int:
        return self.op_apply("relu", [x])

    def sigmoid(self, x: int) -> int:
        return self.op_apply("sigmoid", [x])

    def tanh(self, x: int) -> int:
        return self.op_apply("tanh", [x])

    def max_pool1d(self, x: int) -> int:
        return self.op_apply("max_pool1d", [x])

    def nearest_upsample1d(self, x: int, target_length: int) -> int:
        return self.op_apply("nearest_upsample1d", [x], {"target_length": target_length})

    def add(self, a: int, b: int) -> int:
        return self.op_apply("add", [a, b])

    def hadamard(self, a: int, b: int) -> int:
        return self.op_apply("hadamard", [a, b])

    def scalar_mul(self, x: int, factor: float) -> int:
        return self.op_apply("scalar_mul", [x], {"factor": factor})

    def sum(self, x: int) -> int:
        return self.op_apply("sum", [x])

    def mean(self, x: int) -> int:
        return self.op_apply("mean", [x])

    def abs(self, x: int) -> int:
        return self.op_apply("abs", [x])

    def square(self, x: int) -> int:
        return self.op_apply("square", [x])

    def softmax(self, x: int) -> int:
        return self.op_apply("softmax", [x])

    def cross_entropy(self, logits: int, labels) -> int:
        return self.op_apply("cross_entropy", [logits], {"labels": np.asarray(labels)})

    def mse(self, a: int, b: int) -> int:
        return self.op_apply("mse", [a, b])

    def l1_norm(self, x: int) -> int:
        return self.op_apply("l1_norm", [x])

    def l2_norm_sq(self, x: int) -> int:
        return self.op_apply("l2_norm_sq", [x])

    def concat(self, parts: list[int], axis: int) -> int:
        return self.op_apply("concat", list(parts), {"axis": axis})

    def slice(self, x: int, axis: int, start: int, stop: int) -> int:
        return self.op_apply("slice", [x], {"axis": axis, "start": start, "stop": stop})

    # -- access --------------------------------------------------------------

    def _node(self, nid: int) -> Node:
        if not (0 <= nid < len(self.nodes)):
            raise EngineError(f"node id {nid} not on tape")
        return self.nodes[nid]

    def value(self, nid: int) -> Array:
        return self._node(nid).value

    def set_name(self, nid: int, name: str) -> None:
        self._node(nid).name = name
        self._names[name] = nid

    def named(self, name: str) -> int:
        if name not in self._names:
            raise EngineError(f"no node named {name!r} on this tape")
        return self._names[name]

    # -- differentiation -----------------------------------------------------

    def backward(self, output: int, seed: Optional[Array] = None) -> dict[int, Array]:
        out_node = self._node(output)
        if seed is None:
            if out_node.value.size != 1:
                raise EngineError(
                    f"backward: output shape {out_node.value.shape} is not scalar "
                    "and no seed gradient was supplied"
                )
            seed_arr = np.ones_like(out_node.value)
        else:
            seed_arr = np.asarray(seed, dtype=np.float64)
            if seed_arr.shape != out_node.value.shape:
                raise _shape_error("backward seed", seed_arr.shape, out_node.value.shape)
        grads: dict[int, Array] = {output: seed_arr}
        for nid in range(output, -1, -1):
            if nid not in grads:
                continue
            node = self.nodes[nid]
            if node.kind == _LEAF or not node.requires_grad:
                continue
            g = grads[nid]
            vals = [self.nodes[i].value for i in node.inputs]
            needs = [self.nodes[i].requires_grad for i in node.inputs]
            if node.kind == "relu":
                input_grads = _relu_vjp(node, vals, g, self.backward_mode)
            else:
                input_grads = _VJP[node.kind](node, vals, g, needs)
            for src, ig in zip(node.inputs, input_grads):
                if ig is None or not self.nodes[src].requires_grad:
                    continue
                if src in grads:
                    grads[src] = grads[src] + ig
                else:
                    grads[src] = ig
        self.last_gradients = grads
        return grads

    def parameter_grads(self, grads: dict[int, Array]) -> dict[str, Array]:
        """Gradient per registered parameter; zeros where none flowed."""
        out = {}
        for name, nid in self.parameters.items():
            g = grads.get(nid)
            out[name] = g if g is not None else np.zeros_like(self.nodes[nid].value)
        return out

    def capture(self, layer_name: str) -> Capture:
        nid = self.named(layer_name)
        grad = None
        if self.last_gradients is not None:
            grad = self.last_gradients.get(nid)
        return Capture(activation=self.nodes[nid].value, gradient=grad)

    # -- replay ---------------------------------------------------------------

    def replay(self) -> None:
        """Recompute every op node from the leaves; raise if anything drifts."""
        for nid, node in enumerate(self.nodes):
            if node.kind == _LEAF:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            fresh = _FORWARD[node.kind](vals, node.attrs)
            if isinstance(fresh, tuple):
                fresh = fresh[0]
            if not np.array_equal(np.asarray(fresh, dtype=np.float64), node.value):
                raise EngineError(f"replay mismatch at node {nid} ({node.kind})")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[dict[str, Array]], tuple[float, dict[str, Array]]],
    point: dict[str, Array],
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps named parameter arrays to ``(scalar value, gradients)`` where
    the gradients dict is keyed like ``point``.  Relative error per
    coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if step <= 0:
        raise EngineError("grad_check: step must be positive")
    point = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}
    base_value, analytic = f(point)
    if not np.isfinite(base_value):
        raise EngineError("grad_check: function returned a non-finite value")

    worst = 0.0
    worst_coord = -1
    per_param: dict[str, float] = {}
    flat_offset = 0
    for name in point:
        theta = point[name]
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != theta.shape:
            raise _shape_error("grad_check", grad.shape, theta.shape)
        param_worst = 0.0
        flat = theta.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up, _ = f(point)
            flat[i] = saved - step
            down, _ = f(point)
            flat[i] = saved
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EngineError("grad_check: function returned a non-finite value")
            numeric = (up - down) / (2.0 * step)
            analytic_i = grad.reshape(-1)[i]
            denom = max(abs(analytic_i), abs(numeric), 1e-8)
            rel = abs(analytic_i - numeric) / denom
            param_worst = max(param_worst, rel)
            if rel > worst:
                worst = rel
                worst_coord = flat_offset + i
        per_param[name] = param_worst
        flat_offset += flat.size
    return GradCheckReport(worst, worst_coord, per_param)
