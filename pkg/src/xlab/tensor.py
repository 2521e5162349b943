"""Dense tensors with reverse-mode automatic differentiation.

The primitive set is deliberately small: elementwise add/sub/mul, 2-D matmul,
conv2d (cross-correlation), maxpool2d, relu, flatten, dropout, log_softmax,
and a soft-target cross-entropy loss. It is enough to express small MLPs and
CNNs and, crucially, to differentiate a loss with respect to the *input*
image, which signed-gradient attacks require.

Data is float32 by default, and scalar reductions (softmax normalizers, loss
sums) accumulate in float64 before rounding back. Tensors may also carry
float64 data, in which case every primitive computes in float64 end to end;
`gradient_check` relies on this to compare analytic gradients against central
finite differences without the comparison drowning in float32 rounding noise.

Autodiff is recorded eagerly: applying a primitive to tensors builds the node
then and there, with shape rules enforced at that moment. `backward()` on a
scalar tensor walks the recorded graph once in reverse topological order and
sums gradients over all paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import GraphError, ShapeError

__all__ = [
    "Tensor",
    "Graph",
    "CheckReport",
    "add",
    "sub",
    "mul",
    "matmul",
    "conv2d",
    "maxpool2d",
    "relu",
    "flatten",
    "dropout",
    "log_softmax",
    "cross_entropy",
    "gradient_check",
]


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """An n-dimensional float array, optionally recording gradients.

    Attributes:
        data: the value, float32 (float64 in verification mode).
        requires_grad: whether backward should produce a gradient here.
        grad: gradient buffer of identical shape, populated by backward().
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _coerce(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g.astype(self.data.dtype, copy=False)

    def backward(self) -> None:
        """Backpropagate from this scalar through the recorded graph.

        Gradients accumulate by summation over all paths; every leaf created
        with requires_grad=True ends up with a populated .grad.
        """
        if self.data.size != 1:
            raise GraphError(
                f"backward requires a scalar output, got shape {self.shape}"
            )
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative postorder; recursion would overflow on deep graphs.
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward_fn: Callable[[np.ndarray], None] | None) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    out._op = op
    if out.requires_grad:
        out._parents = parents
        out._backward_fn = backward_fn
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes introduced or stretched by broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcastable(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("add", a, b)
    data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, "add", (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("sub", a, b)
    data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, "sub", (a, b), backward_fn)


def mul(a, b) -> Tensor:
    """Elementwise product (broadcasting limited to what bias terms need)."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable("mul", a, b)
    data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, "mul", (a, b), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(data, "matmul", (a, b), backward_fn)


def relu(t) -> Tensor:
    t = _as_tensor(t)
    data = np.maximum(t.data, 0)

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g * (t.data > 0))

    return _node(data, "relu", (t,), backward_fn)


def flatten(t) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    t = _as_tensor(t)
    if t.data.ndim < 2:
        raise ShapeError(f"flatten: expects rank >= 2, got shape {t.shape}")
    shape = t.shape
    data = t.data.reshape(shape[0], -1)

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g.reshape(shape))

    return _node(data, "flatten", (t,), backward_fn)


def dropout(t, rate: float, seed: int, training: bool = True) -> Tensor:
    """Inverted dropout: scales surviving units by 1/(1-rate) at train time,
    identity at evaluation time. Mask is deterministic given the seed."""
    t = _as_tensor(t)
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    rng = np.random.default_rng(seed)
    mask = (rng.random(t.shape) >= rate).astype(t.data.dtype) / np.asarray(1.0 - rate, dtype=t.data.dtype)
    data = t.data * mask

    def backward_fn(g):
        if t.requires_grad:
            t._accumulate(g * mask)

    return _node(data, "dropout", (t,), backward_fn)


def conv2d(t, kernels, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip) over NCHW or CHW input.

    Output spatial extent is floor((H + 2*padding - kh) / stride) + 1.
    """
    t, kernels = _as_tensor(t), _as_tensor(kernels)
    squeeze = t.data.ndim == 3
    x = t.data[None] if squeeze else t.data
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be CHW or NCHW, got shape {t.shape}")
    if kernels.data.ndim != 4:
        raise ShapeError(f"conv2d: kernels must be KCkhkw, got shape {kernels.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    n, c, h, w = x.shape
    k, kc, kh, kw = kernels.shape
    if kc != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {kc}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1

    dtype = np.result_type(t.data, kernels.data)
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    # im2col in (n, ho, wo, c, kh, kw) order, filled one kernel offset at a
    # time: far cheaper than copying the 6-D transposed window view at once.
    cols6 = np.empty((n, ho, wo, c, kh, kw), dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            cols6[..., i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride].transpose(0, 2, 3, 1)
    cols = cols6.reshape(n * ho * wo, c * kh * kw)
    w2 = kernels.data.reshape(k, c * kh * kw).T.astype(dtype, copy=False)
    out = (cols @ w2).reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(out)
    if squeeze:
        data = data[0]
    # The column matrix is only needed for the kernel gradient; drop it when
    # kernels are frozen (input-gradient-only attack passes).
    cols_saved = cols if kernels.requires_grad else None

    def backward_fn(g):
        g4 = g[None] if squeeze else g
        gcols = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        if kernels.requires_grad:
            gw = (cols_saved.T @ gcols).T.reshape(k, c, kh, kw)
            kernels._accumulate(gw.astype(kernels.data.dtype, copy=False))
        if t.requires_grad:
            gx_cols = (gcols @ w2.T).reshape(n, ho, wo, c, kh, kw)
            gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += gx_cols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            if squeeze:
                gx = gx[0]
            t._accumulate(gx.astype(t.data.dtype, copy=False))

    return _node(data, "conv2d", (t, kernels), backward_fn)


def maxpool2d(t, size: int) -> Tensor:
    """Non-overlapping max pooling with window and stride `size`.

    Trailing rows/columns that do not fill a window are dropped. Ties within
    a window resolve to the first element in row-major order.
    """
    t = _as_tensor(t)
    squeeze = t.data.ndim == 3
    x = t.data[None] if squeeze else t.data
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be CHW or NCHW, got shape {t.shape}")
    if size < 1:
        raise ShapeError(f"maxpool2d: size must be >= 1, got {size}")
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2d: window {size} larger than input {h}x{w}")
    xt = x[:, :, :ho * size, :wo * size]
    windows = np.ascontiguousarray(
        xt.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(n, c, ho, wo, size * size)
    data = windows.max(axis=-1)
    # argmax picks the first maximum, the row-major tie rule; only needed
    # when gradients will flow.
    idx = windows.argmax(axis=-1) if t.requires_grad else None
    if squeeze:
        data = data[0]

    def backward_fn(g):
        if not t.requires_grad:
            return
        g4 = g[None] if squeeze else g
        gwin = np.zeros((n, c, ho, wo, size * size), dtype=t.data.dtype)
        np.put_along_axis(gwin, idx[..., None], g4[..., None], axis=-1)
        gx = np.zeros_like(x)
        gx[:, :, :ho * size, :wo * size] = (
            gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        )
        t._accumulate(gx[0] if squeeze else gx)

    return _node(data, "maxpool2d", (t,), backward_fn)


def log_softmax(t, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax via max subtraction."""
    t = _as_tensor(t)
    z = t.data - t.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z.astype(np.float64)).sum(axis=axis, keepdims=True)).astype(t.data.dtype)
    data = z - lse

    def backward_fn(g):
        if t.requires_grad:
            soft = np.exp(data)
            t._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(data, "log_softmax", (t,), backward_fn)


def cross_entropy(log_probs, targets) -> Tensor:
    """Mean soft-target cross entropy: -(1/B) sum_bk targets * log_probs.

    Targets must be probability rows (nonnegative, summing to 1 within 1e-5);
    they are treated as constants, so one-hot rows recover the ordinary
    negative log-likelihood and full rows support training on probability
    vectors returned by an oracle.
    """
    log_probs = _as_tensor(log_probs)
    tgt = targets.data if isinstance(targets, Tensor) else _coerce(targets)
    if log_probs.data.ndim != 2 or tgt.ndim != 2 or log_probs.shape != tgt.shape:
        raise ShapeError(
            f"cross_entropy: log_probs {log_probs.shape} and targets "
            f"{tuple(tgt.shape)} must be matching 2-D arrays"
        )
    row_sums = tgt.sum(axis=1, dtype=np.float64)
    if np.any(tgt < 0) or np.any(np.abs(row_sums - 1.0) > 1e-5):
        worst = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ShapeError(
            f"cross_entropy: target row {worst} is not a probability vector "
            f"(sum={row_sums[worst]:.6f})"
        )
    b = log_probs.shape[0]
    total = -(tgt.astype(np.float64) * log_probs.data.astype(np.float64)).sum()
    data = np.asarray(total / b, dtype=log_probs.data.dtype)

    def backward_fn(g):
        if log_probs.requires_grad:
            scale = (g.reshape(()) / b).astype(log_probs.data.dtype)
            log_probs._accumulate(-tgt.astype(log_probs.data.dtype) * scale)

    return _node(data, "cross_entropy", (log_probs,), backward_fn)


class Graph:
    """A named-leaf computation used for exactly one forward/backward pair.

    The builder function receives a dict of leaf tensors and must return a
    single output tensor, applying primitives from this module. Reuse after
    a forward pass requires an explicit reset(), which keeps gradient
    accumulation semantics unambiguous.
    """

    def __init__(self, leaves: Mapping[str, Sequence[int]],
                 build: Callable[[dict[str, Tensor]], Tensor]):
        self.leaf_shapes = {name: tuple(shape) for name, shape in leaves.items()}
        self.build = build
        self._leaf_tensors: dict[str, Tensor] | None = None
        self._output: Tensor | None = None

    def forward(self, bindings: Mapping[str, np.ndarray]) -> Tensor:
        if self._output is not None:
            raise GraphError("graph already executed; call reset() before reuse")
        missing = set(self.leaf_shapes) - set(bindings)
        if missing:
            raise GraphError(f"unbound leaves: {sorted(missing)}")
        unknown = set(bindings) - set(self.leaf_shapes)
        if unknown:
            raise GraphError(f"bindings for undeclared leaves: {sorted(unknown)}")
        tensors = {}
        for name, shape in self.leaf_shapes.items():
            value = bindings[name].data if isinstance(bindings[name], Tensor) else bindings[name]
            arr = _coerce(value)
            if arr.shape != shape:
                raise ShapeError(f"leaf {name!r}: expected shape {shape}, got {arr.shape}")
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        self._leaf_tensors = tensors
        self._output = self.build(tensors)
        return self._output

    def backward(self) -> dict[str, Tensor]:
        """Gradient of the scalar output for every leaf, as fresh tensors."""
        if self._output is None:
            raise GraphError("backward before forward")
        self._output.backward()
        grads = {}
        for name, leaf in self._leaf_tensors.items():
            g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            grads[name] = Tensor(g)
        return grads

    def reset(self) -> None:
        self._leaf_tensors = None
        self._output = None


@dataclass
class CheckReport:
    """Outcome of a finite-difference gradient verification."""

    passed: bool
    tol: float
    step: float
    max_rel_error: float
    per_leaf: dict[str, float] = field(default_factory=dict)


def gradient_check(graph: Graph, bindings: Mapping[str, np.ndarray],
                   tol: float = 1e-4, step: float = 1e-3) -> CheckReport:
    """Compare backward() against central finite differences, leaf by leaf.

    Both sides are evaluated in float64 (bindings are upcast): at the 1e-3
    step the float32 pipeline's own rounding exceeds the tolerances this
    check is meant to enforce. Relative error uses a small absolute floor in
    the denominator so near-zero gradient components (dead relus) do not
    register as spurious failures.
    """
    bind64 = {}
    for name, value in bindings.items():
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        bind64[name] = arr.astype(np.float64)

    graph.reset()
    out = graph.forward(bind64)
    if out.data.size != 1:
        raise GraphError(f"gradient_check requires a scalar output, got shape {out.shape}")
    analytic = {name: g.data.copy() for name, g in graph.backward().items()}

    def eval_scalar(b):
        graph.reset()
        return float(graph.forward(b).data.reshape(()))

    per_leaf: dict[str, float] = {}
    for name in graph.leaf_shapes:
        base = bind64[name]
        an = analytic[name]
        worst = 0.0
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_scalar(bind64)
            flat[i] = orig - step
            f_minus = eval_scalar(bind64)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an_i = an.reshape(-1)[i]
            rel = abs(fd - an_i) / max(abs(fd) + abs(an_i), 1e-2)
            worst = max(worst, rel)
        per_leaf[name] = worst
    graph.reset()

    max_rel = max(per_leaf.values()) if per_leaf else 0.0
    return CheckReport(passed=max_rel < tol, tol=tol, step=step,
                       max_rel_error=max_rel, per_leaf=per_leaf)
