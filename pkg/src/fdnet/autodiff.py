"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its inputs and a backward closure on the tensor it
produces, so a forward pass builds the computation graph on the fly (a tape).
:func:`backward` walks that graph in reverse topological order and accumulates
gradients additively, which handles fan-out for free.
"""

from __future__ import annotations

import contextlib
import logging
import os
import struct
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64
# NaN/Inf scan after every op; off unless FDNET_DEBUG is set.
DEBUG = bool(os.environ.get("FDNET_DEBUG"))

_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class UnboundInputError(KeyError):
    """A graph input slot was not supplied."""


class BackwardError(RuntimeError):
    """Backward requested on something that cannot be differentiated."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where only finite values are allowed."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording the graph (inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """An N-d float64 array that remembers how it was computed.

    Args:
        data: Anything ``np.asarray`` accepts. Always stored as float64.
        requires_grad: Whether gradients should flow into this tensor.
        op: Tag naming the operation that produced the tensor ("leaf" for inputs).
        parents: Input tensors of that operation.
        backward_fn: Maps the upstream gradient to one gradient per parent
            (``None`` where a parent needs none).
        attrs: Op-specific attributes (stride, padding, ...), kept for introspection.
        name: Optional label used in error messages.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "backward_fn", "attrs", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "leaf",
        parents: Tuple["Tensor", ...] = (),
        backward_fn: Optional[Callable] = None,
        attrs: Optional[dict] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.attrs = attrs or {}
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

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def backward(self, seed=None) -> Dict[str, np.ndarray]:
        return backward(self, seed)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported")
        return mul(self, 1.0 / float(other))

    def sum(self) -> "Tensor":
        return sum_all(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A learnable tensor with a stable identifier (its path in the network)."""

    __slots__ = ("ident",)

    def __init__(self, data, ident: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True, op="param")
        self.ident = ident

    def __repr__(self) -> str:
        return f"Parameter({self.ident!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    op: str,
    backward_fn: Callable,
    name: Optional[str] = None,
    **attrs,
) -> Tensor:
    """Wrap an op result, recording the graph edge when gradients are needed."""
    if DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{name or op}: non-finite output")
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op, attrs=attrs, name=name)
    return Tensor(data, True, op, tuple(parents), backward_fn, attrs, name)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return make_node(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return make_node(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return make_node(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_node(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log; inputs below ``eps`` are clamped and get zero gradient."""
    if eps > 0:
        clamped = x.data < eps
        n_clamped = int(clamped.sum())
        if n_clamped:
            logger.warning("log: %d entries clamped at log(%g)", n_clamped, eps)
        safe = np.where(clamped, eps, x.data)
    else:
        clamped, n_clamped, safe = None, 0, x.data

    def _bw(g):
        gx = g / safe
        if clamped is not None and n_clamped:
            gx = np.where(clamped, 0.0, gx)
        return (gx,)

    return make_node(np.log(safe), (x,), "log", _bw, eps=eps, clamped=n_clamped)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for a constant exponent."""
    out = np.power(x.data, exponent)
    return make_node(
        out,
        (x,),
        "pow",
        lambda g: (g * exponent * np.power(x.data, exponent - 1.0),),
        exponent=exponent,
    )


def sum_all(x: Tensor) -> Tensor:
    return make_node(np.asarray(x.data.sum()), (x,), "sum", lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    return make_node(
        np.asarray(x.data.mean()), (x,), "mean", lambda g: (np.broadcast_to(g / n, x.shape),)
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return make_node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),), shape=shape)


def concat_channels(tensors: Sequence[Tensor], name: Optional[str] = None) -> Tensor:
    """Concatenate N×C×H×W tensors along the channel axis, in list order."""
    tensors = list(tensors)
    if not tensors:
        raise ShapeError(f"{name or 'concat'}: need at least one tensor")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            extents = ", ".join(f"{t.shape[0]}x{'x'.join(map(str, t.shape[2:]))}" for t in tensors)
            raise ShapeError(f"{name or 'concat'}: N/H×W mismatch between inputs (N×H×W: {extents})")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])

    def _bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    out = np.concatenate([t.data for t in tensors], axis=1)
    return make_node(out, tensors, "concat", _bw, name=name, splits=tuple(bounds))


def split_channels(x: Tensor, sizes: Sequence[int]) -> List[Tensor]:
    """Inverse of :func:`concat_channels`."""
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to {x.shape[1]} channels")
    out = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def _bw(g, lo=lo, hi=hi):
            full = np.zeros(x.shape, dtype=DTYPE)
            full[:, lo:hi] = g
            return (full,)

        out.append(make_node(x.data[:, lo:hi], (x,), "split", _bw, lo=lo, hi=hi))
        start = hi
    return out


def take_channels(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[n, index[n,h,w], h, w]`` for an N×C×H×W tensor and N×H×W int index."""
    index = np.asarray(index)
    if x.ndim != 4 or index.shape != (x.shape[0],) + x.shape[2:]:
        raise ShapeError(f"take_channels: index {index.shape} does not match {x.shape}")
    idx = index[:, None].astype(np.intp)
    out = np.take_along_axis(x.data, idx, axis=1)[:, 0]

    def _bw(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(full, idx, g[:, None], axis=1)
        return (full,)

    return make_node(out, (x,), "take_channels", _bw)


# ---------------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> List[Tensor]:
    """All graph nodes reachable from ``root``, inputs before consumers."""
    order: List[Tensor] = []
    seen = set()
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Union[Tensor, "Graph"], seed=None) -> Dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Gradients are accumulated into ``.grad`` of every leaf that requires them
    (so call ``zero_grad`` between steps). Returns ``{ident: grad}`` for every
    :class:`Parameter` reached.
    """
    if isinstance(loss, Graph):
        loss = loss.loss_node()
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor that requires grad")
    seed_arr = np.ones(loss.shape, dtype=DTYPE) if seed is None else np.asarray(seed, DTYPE).reshape(loss.shape)

    order = topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): seed_arr}
    params: Dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            # leaf
            if node.requires_grad:
                node.grad = np.array(g, dtype=DTYPE) if node.grad is None else node.grad + g
                if isinstance(node, Parameter):
                    params[node.ident] = node.grad
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if DEBUG and not np.all(np.isfinite(pg)):
                raise NonFiniteError(f"{node.name or node.op}: non-finite gradient")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return params


class Graph:
    """A recorded computation: a callable plus the names of its input slots.

    The callable receives the bound inputs as keyword arguments and returns a
    Tensor or a dict of named Tensors. Each :func:`forward_eval` re-records the
    tape.
    """

    def __init__(self, fn: Callable[..., Union[Tensor, Dict[str, Tensor]]], inputs: Sequence[str]):
        self.fn = fn
        self.inputs = tuple(inputs)
        self.outputs: Optional[Dict[str, Tensor]] = None

    @property
    def evaluated(self) -> bool:
        return self.outputs is not None

    def nodes(self) -> List[Tensor]:
        if self.outputs is None:
            raise BackwardError("graph has not been evaluated")
        seen, order = set(), []
        for out in self.outputs.values():
            for n in topological_order(out):
                if id(n) not in seen:
                    seen.add(id(n))
                    order.append(n)
        return order

    def loss_node(self) -> Tensor:
        if self.outputs is None:
            raise BackwardError("backward called before forward_eval")
        if "loss" in self.outputs:
            return self.outputs["loss"]
        if len(self.outputs) == 1:
            return next(iter(self.outputs.values()))
        raise BackwardError(f"ambiguous loss node among outputs {sorted(self.outputs)}")


def forward_eval(graph: Graph, inputs: Dict[str, object]) -> Dict[str, Tensor]:
    missing = [k for k in graph.inputs if k not in inputs]
    if missing:
        raise UnboundInputError(f"unbound graph inputs: {missing}")
    bound = {k: _as_tensor(inputs[k]) for k in graph.inputs}
    result = graph.fn(**bound)
    outputs = dict(result) if isinstance(result, dict) else {"output": result}
    graph.outputs = outputs
    return outputs


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-5,
    n_samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn(*inputs)`` must return a Tensor; it is reduced by summation. With
    ``n_samples`` only that many coordinates (drawn uniformly over all inputs)
    are perturbed. The error is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    def scalar() -> float:
        with no_grad():
            val = float(np.sum(fn(*inputs).data))
        if not np.isfinite(val):
            raise NonFiniteError("non-finite value during finite differencing")
        return val

    out = fn(*inputs)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite forward output")
    backward(sum_all(out) if out.size != 1 else out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]

    coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    if n_samples is not None and n_samples < len(coords):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=n_samples, replace=False)
        coords = [coords[k] for k in sorted(picks)]

    worst = 0.0
    for i, j in coords:
        flat = inputs[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        plus = scalar()
        flat[j] = orig - eps
        minus = scalar()
        flat[j] = orig
        numeric = (plus - minus) / (2 * eps)
        err = abs(analytic[i].reshape(-1)[j] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"FDTENSR1"


def tensor_to_bytes(arr) -> bytes:
    arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr).tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if buf[offset : offset + 8] != MAGIC:
        raise ValueError(f"bad tensor magic at offset {offset}")
    (rank,) = struct.unpack_from("<I", buf, offset + 8)
    shape = struct.unpack_from(f"<{rank}I", buf, offset + 12)
    start = offset + 12 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    end = start + 8 * count
    if end > len(buf):
        raise ValueError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=start).reshape(shape).astype(DTYPE)
    return arr, end


def save_tensor(arr, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        arr, _ = tensor_from_bytes(fh.read())
    return arr


def iter_grads(params: Iterable[Parameter]) -> Iterator[Tuple[Parameter, np.ndarray]]:
    for p in params:
        yield p, (np.zeros(p.shape) if p.grad is None else p.grad)
