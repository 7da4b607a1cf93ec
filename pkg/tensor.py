"""
Reverse-mode differentiable tensor engine for the MTLAM toy pipeline.
Operations are recorded on a tape (Graph) and replayed in reverse on backward.
"""
import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8

Number = Union[int, float]
GradFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_node_ids = itertools.count()
_local = threading.local()


class TensorError(Exception):
    """Raised when a tensor operation is used outside its contract."""
    pass


class ShapeError(TensorError, ValueError):
    """Raised when operand shapes are incompatible."""
    pass


def _state() -> threading.local:
    if not hasattr(_local, 'graphs'):
        _local.graphs = []
        _local.default_graph = None
        _local.dtype = np.float32
        _local.grad_enabled = True
    return _local


def default_dtype() -> type:
    """Storage dtype used for newly created tensors on this thread."""
    return _state().dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the storage dtype (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise TensorError(f"Unsupported storage dtype: {dtype}")
    state = _state()
    previous = state.dtype
    state.dtype = dtype
    try:
        yield
    finally:
        state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results never require gradients."""
    state = _state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class Tensor:
    """Dense row-major array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.array(data, dtype=dtype or default_dtype())
        if any(dim <= 0 for dim in array.shape):
            raise ShapeError(f"Zero-sized dimension in shape {list(array.shape)}")
        array.flags.writeable = False
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_node_ids)
        self.graph: Optional['Graph'] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.graph is None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def assign(self, values: np.ndarray) -> None:
        """Replace the stored values (parameter updates, checkpoint loads)."""
        array = np.array(values, dtype=self.data.dtype)
        if array.shape != self.shape:
            raise ShapeError(f"Cannot assign shape {list(array.shape)} to tensor of shape {list(self.shape)}")
        array.flags.writeable = False
        self.data = array

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = grad.astype(self.data.dtype, copy=False)
        self.grad = grad.copy() if self.grad is None else self.grad + grad

    def backward(self) -> None:
        backward(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        label = f"{self.name}, " if self.name else ""
        return f"Tensor({label}shape={list(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class Record:
    """One recorded operation: the output node, its inputs and the vector-Jacobian product."""
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    grad_fn: GradFn


class Graph:
    """Ordered tape of recorded operations; recording order is a topological order."""

    def __init__(self):
        self.records: List[Record] = []

    def __enter__(self) -> 'Graph':
        _state().graphs.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state().graphs.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, op: str, output: Tensor, inputs: Tuple[Tensor, ...], grad_fn: GradFn) -> None:
        output.graph = self
        self.records.append(Record(op, output, inputs, grad_fn))

    def reset(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        """Propagate d(loss)/d(node) through every record exactly once, newest first."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if not loss.requires_grad:
            raise TensorError("Loss does not depend on any tensor that requires gradients")

        pending: Dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape, dtype=np.float64)}
        if loss.is_leaf:
            loss._accumulate(pending.pop(loss.node_id))
            return

        visited = 0
        for record in reversed(self.records):
            upstream = pending.pop(record.output.node_id, None)
            if upstream is None:
                continue
            visited += 1
            record.output._accumulate(upstream)
            for tensor, grad in zip(record.inputs, record.grad_fn(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                grad = _unbroadcast(grad, tensor.shape)
                if tensor.graph is self:
                    previous = pending.get(tensor.node_id)
                    pending[tensor.node_id] = grad if previous is None else previous + grad
                else:
                    tensor._accumulate(grad)
        logger.debug(f"Backward visited {visited}/{len(self.records)} records")


def current_graph() -> Graph:
    """Innermost active graph, or this thread's implicit default graph."""
    state = _state()
    if state.graphs:
        return state.graphs[-1]
    if state.default_graph is None:
        state.default_graph = Graph()
    return state.default_graph


def reset_default_graph() -> None:
    _state().default_graph = None


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every participating tensor's grad."""
    if loss.graph is None:
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if not loss.requires_grad:
            raise TensorError("Loss does not depend on any tensor that requires gradients")
        loss._accumulate(np.ones(loss.shape))
        return
    loss.graph.backward(loss)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _f64(tensor: Tensor) -> np.ndarray:
    return tensor.data.astype(np.float64)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _make(op: str, value: np.ndarray, inputs: Tuple[Tensor, ...], grad_fn: GradFn) -> Tensor:
    out = Tensor(value)
    if _state().grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        current_graph().record(op, out, inputs, grad_fn)
    return out


def _axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"Axis {axis} out of range for rank {ndim}")
    return axis % ndim


# Creation

def randn(shape: Sequence[int], seed: int, scale: float = 1.0, requires_grad: bool = False,
          name: Optional[str] = None) -> Tensor:
    """Deterministic pseudo-normal tensor; same seed and shape give bit-identical values."""
    shape = tuple(int(dim) for dim in shape)
    if not shape:
        raise ShapeError("randn needs a non-empty shape")
    if any(dim <= 0 for dim in shape):
        raise ShapeError(f"Zero-sized dimension in shape {list(shape)}")
    if scale <= 0:
        raise TensorError(f"randn scale must be positive, got {scale}")
    values = np.random.default_rng(seed).standard_normal(shape) * scale
    return Tensor(values, requires_grad=requires_grad, name=name)


def zeros(shape: Sequence[int], requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Zero-filled tensor in the current storage dtype."""
    return Tensor(np.zeros(tuple(shape)), requires_grad=requires_grad, name=name)


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(x.data)


# Elementwise

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    value = _f64(a) + _f64(b)
    return _make('add', value, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = _f64(a), _f64(b)
    return _make('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Tensor, factor: Number) -> Tensor:
    """Multiply by a constant scalar."""
    factor = float(factor)
    return _make('scale', _f64(x) * factor, (x,), lambda g: (g * factor,))


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the gradient at exactly 0 is 0."""
    xv = _f64(x)
    mask = xv > 0
    return _make('relu', np.where(mask, xv, 0.0), (x,), lambda g: (g * mask,))


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient sign(x)."""
    xv = _f64(x)
    return _make('abs', np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


# Shape

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape, raising ShapeError on a size mismatch."""
    try:
        value = _f64(x).reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"Cannot reshape {list(x.shape)} to {list(shape)}: {e}")
    original = x.shape
    return _make('reshape', value, (x,), lambda g: (g.reshape(original),))


def swapaxes(x: Tensor, axis1: int, axis2: int) -> Tensor:
    """Swap two axes."""
    value = np.swapaxes(_f64(x), axis1, axis2)
    return _make('swapaxes', value, (x,), lambda g: (np.swapaxes(g, axis1, axis2),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along an axis (last by default)."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    axis = _axis(axis, tensors[0].ndim)
    try:
        value = np.concatenate([_f64(t) for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(f"Cannot concat shapes {[list(t.shape) for t in tensors]}: {e}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make('concat', value, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# Reductions (64-bit accumulation)

def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Sum over one axis or all of them."""
    xv = _f64(x)
    shape = x.shape
    if axis is not None:
        axis = _axis(axis, x.ndim)
    value = xv.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make('sum', value, (x,), grad_fn)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over one axis or all of them."""
    count = x.size if axis is None else x.shape[_axis(axis, x.ndim)]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# Linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}")
    av, bv = _f64(a), _f64(b)
    try:
        value = np.matmul(av, bv)
    except ValueError as e:
        raise ShapeError(f"matmul shape mismatch: {list(a.shape)} @ {list(b.shape)}: {e}")
    return _make('matmul', value, (a, b),
                 lambda g: (np.matmul(g, np.swapaxes(bv, -1, -2)), np.matmul(np.swapaxes(av, -1, -2), g)))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """out[..., t, :] = x[..., t, :] @ weight + bias."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear shape mismatch: input {list(x.shape)} vs weight {list(weight.shape)}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear shape mismatch: bias {list(bias.shape)} vs weight {list(weight.shape)}")
    xv, wv = _f64(x), _f64(weight)
    value = xv @ wv
    if bias is not None:
        value = value + _f64(bias)

    def grad_fn(g):
        flat_x = xv.reshape(-1, xv.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        grads = [g @ wv.T, flat_x.T @ flat_g]
        if bias is not None:
            grads.append(flat_g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make('linear', value, inputs, grad_fn)


def conv1d_dilated(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Centered dilated convolution over the time axis with symmetric zero padding.

    x is (..., T, Cin) and kernel is (k, Cin, Cout) with k odd; the output keeps length T.
    """
    if kernel.ndim != 3 or x.ndim < 2 or x.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"conv1d shape mismatch: input {list(x.shape)} vs kernel {list(kernel.shape)}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ShapeError(f"conv1d needs an odd kernel size for a centered tap, got {k}")
    if dilation < 1:
        raise TensorError(f"conv1d dilation must be >= 1, got {dilation}")

    pad = (k - 1) * dilation // 2
    length = x.shape[-2]
    xv, wv = _f64(x), _f64(kernel)
    widths = [(0, 0)] * (xv.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(xv, widths)
    taps = [padded[..., j * dilation:j * dilation + length, :] for j in range(k)]
    value = np.zeros(xv.shape[:-1] + (wv.shape[2],))
    for j, tap in enumerate(taps):
        value += tap @ wv[j]

    def grad_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_kernel = np.empty_like(wv)
        flat_g = g.reshape(-1, g.shape[-1])
        for j, tap in enumerate(taps):
            grad_padded[..., j * dilation:j * dilation + length, :] += g @ wv[j].T
            grad_kernel[j] = tap.reshape(-1, tap.shape[-1]).T @ flat_g
        return grad_padded[..., pad:pad + length, :], grad_kernel

    return _make('conv1d', value, (x, kernel), grad_fn)


# Normalisation and similarity

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis``."""
    axis = _axis(axis, x.ndim)
    xv = _f64(x)
    shifted = np.exp(xv - xv.max(axis=axis, keepdims=True))
    y = shifted / shifted.sum(axis=axis, keepdims=True)
    return _make('softmax', y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def l2_normalize(x: Tensor, eps: float = COSINE_EPS, axis: int = -1) -> Tensor:
    """x / max(||x||, eps) along an axis."""
    if eps <= 0:
        raise TensorError(f"Normalisation floor must be positive, got {eps}")
    axis = _axis(axis, x.ndim)
    xv = _f64(x)
    norm = np.sqrt((xv * xv).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = xv / denom
    active = norm > eps

    def grad_fn(g):
        radial = np.where(active, (g * y).sum(axis=axis, keepdims=True), 0.0)
        return ((g - y * radial) / denom,)

    return _make('l2_normalize', y, (x,), grad_fn)


def cosine_sim(a: Tensor, b: Tensor, eps: float = COSINE_EPS, axis: int = -1) -> Tensor:
    """a·b / (max(||a||, eps) · max(||b||, eps)) along an axis; zero vectors give 0."""
    if eps <= 0:
        raise TensorError(f"Cosine floor must be positive, got {eps}")
    return sum(mul(l2_normalize(a, eps, axis), l2_normalize(b, eps, axis)), axis=axis)


def cross_entropy(logits: Tensor, label) -> Tensor:
    """-log softmax(logits)[label] over the last axis.

    logits is (C,) with an int label, or (..., C) with an int array of matching leading shape.
    """
    classes = logits.shape[-1]
    labels = np.asarray(label)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"Labels of shape {list(labels.shape)} do not match logits {list(logits.shape)}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise TensorError(f"Labels must be integers, got {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise TensorError(f"Label out of range [0, {classes}): {labels.tolist()}")

    zv = _f64(logits)
    shifted = zv - zv.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_norm
    picked = np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    onehot = np.zeros_like(zv)
    np.put_along_axis(onehot, labels[..., None], 1.0, axis=-1)
    probs = np.exp(log_probs)
    return _make('cross_entropy', -picked, (logits,), lambda g: ((probs - onehot) * g[..., None],))


# Gradient oracle

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-3,
                       indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. selected flat entries of a tensor."""
    original = tensor.data
    flat = original.astype(np.float64).ravel()
    if indices is None:
        indices = range(flat.size)
    estimates = []
    try:
        with no_grad():
            for index in indices:
                values = []
                for delta in (eps, -eps):
                    shifted = flat.copy()
                    shifted[index] += delta
                    tensor.assign(shifted.reshape(original.shape))
                    values.append(np.float64(fn().item()))
                estimates.append((values[0] - values[1]) / (2 * eps))
    finally:
        tensor.assign(original)
    return np.array(estimates)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients over all inputs."""
    for tensor in inputs:
        tensor.zero_grad()
    with Graph() as graph:
        loss = fn()
    graph.backward(loss)

    worst = 0.0
    for tensor in inputs:
        analytic = np.zeros(tensor.shape) if tensor.grad is None else tensor.grad.astype(np.float64)
        numeric = numerical_gradient(fn, tensor, eps).reshape(tensor.shape)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return worst
