"""
Dense real tensors with tape-based reverse-mode differentiation.

Tensors are immutable values: their ``data`` array is read-only and gradients
never live on the tensor. A ``Tape`` records every differentiable operation
executed while it is the active tape; ``Tape.backward`` replays the record in
reverse and returns a ``Gradients`` store keyed by the leaf tensors.

Only scalar-with-tensor and equal-shape broadcasting is supported. Row-vector
operands (biases, normalization scale/shift) go through the dedicated
``linear`` and ``affine`` ops instead.
"""

import contextlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DTYPE_STACK: List[type] = [np.float32]
_TAPE_STACK: List["Tape"] = []


def default_dtype() -> type:
    """Storage dtype for newly constructed tensors (float32 unless in 64-bit mode)."""
    return _DTYPE_STACK[-1]


@contextlib.contextmanager
def float64_mode() -> Iterator[None]:
    """Construct new tensors in 64-bit precision inside the block (used by grad_check)."""
    _DTYPE_STACK.append(np.float64)
    try:
        yield
    finally:
        _DTYPE_STACK.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=default_dtype())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = requires_grad
        out._tape = None
        return out

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, cut off from any tape and not requiring grad."""
        return Tensor._wrap(self.data, False)

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
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

    def __truediv__(self, other: Number):
        if isinstance(other, Tensor):
            raise ContractError("division is only defined by a plain number")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Gradients:
    """Gradient store produced by ``Tape.backward``; one entry per leaf tensor."""

    def __init__(self):
        self._store: Dict[int, Tuple[Tensor, np.ndarray]] = {}

    def _accumulate(self, tensor: Tensor, grad: np.ndarray) -> None:
        key = id(tensor)
        if key in self._store:
            self._store[key] = (tensor, self._store[key][1] + grad)
        else:
            self._store[key] = (tensor, grad)

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        entry = self._store.get(id(tensor))
        if entry is not None:
            return entry[1]
        if tensor.requires_grad:
            # Leaf never reached by the loss: its gradient is exactly zero.
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        raise KeyError("tensor does not require grad")

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._store

    def __len__(self) -> int:
        return len(self._store)

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        return iter(self._store.values())


class _Node:
    __slots__ = ("name", "output", "inputs", "backward")

    def __init__(self, name: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.name = name
        self.output = output
        self.inputs = inputs
        self.backward = backward


class Tape:
    """
    Ordered record of differentiable operations.

    Use as a context manager; operations executed inside the block on tensors
    that require grad are recorded on the innermost active tape. A tape can be
    replayed once: a second ``backward`` without ``reset`` raises ``TapeError``.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._replayed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        if _TAPE_STACK and _TAPE_STACK[-1] is self:
            _TAPE_STACK.pop()
        elif self in _TAPE_STACK:
            _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, name: str, output: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._replayed:
            raise TapeError("tape was already replayed; call reset() before recording again")
        output._tape = self
        self._nodes.append(_Node(name, output, inputs, backward))

    def reset(self) -> None:
        self._nodes.clear()
        self._replayed = False

    def backward(self, loss: Tensor, into: Optional[Gradients] = None) -> Gradients:
        """
        Reverse traversal from a scalar loss.

        ``into`` opts into accumulating on top of an existing store; without it
        every call starts from a fresh ``Gradients``.
        """
        if not isinstance(loss, Tensor) or loss.ndim != 0:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise ContractError(f"backward needs a scalar loss, got {shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        if self._replayed:
            raise TapeError("tape was already replayed; call reset() first")

        produced = {id(node.output) for node in self._nodes}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
        leaves: Dict[int, Tensor] = {}

        for node in reversed(self._nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, tg in zip(node.inputs, node.backward(g)):
                if tg is None or not tensor.requires_grad:
                    continue
                tg = _reduce_to(np.asarray(tg), tensor.shape)
                if not np.all(np.isfinite(tg)):
                    raise NonFiniteError(node.name, "gradient")
                key = id(tensor)
                grads[key] = grads[key] + tg if key in grads else tg
                if key not in produced:
                    leaves[key] = tensor

        self._replayed = True
        result = into if into is not None else Gradients()
        for key, tensor in leaves.items():
            result._accumulate(tensor, grads[key])
        return result


def backward(loss: Tensor, into: Optional[Gradients] = None) -> Gradients:
    """Replay the tape that produced ``loss``."""
    if not isinstance(loss, Tensor) or loss.ndim != 0:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced through taped operations")
    return loss._tape.backward(loss, into)


def current_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# -- plumbing ---------------------------------------------------------------

def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum())
    raise ShapeError("gradient", grad.shape, shape)


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise ShapeError(name, a.shape, b.shape)


def _make(name: str, out_data, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out_data = np.asarray(out_data)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(name)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires_grad)
    tape = current_tape()
    if requires_grad and tape is not None:
        tape._record(name, out, inputs, backward_fn)
    return out


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return g @ bd.T, ad.T @ g

    return _make("matmul", ad @ bd, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` [in x out] and ``bias`` [out]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("linear", x.shape, weight.shape)
    if bias.shape != (weight.shape[1],):
        raise ShapeError("linear bias", bias.shape, (weight.shape[1],))
    xd, wd = x.data, weight.data

    def grad_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _make("linear", xd @ wd + bias.data, (x, weight, bias), grad_fn)


def affine(x: Tensor, scale_: Tensor, shift: Tensor) -> Tensor:
    """Per-feature ``x * scale + shift`` for ``x`` [m x n] and row vectors [n]."""
    if x.ndim != 2 or scale_.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError("affine", x.shape, scale_.shape)
    xd, sd = x.data, scale_.data

    def grad_fn(g):
        return g * sd, (g * xd).sum(axis=0), g.sum(axis=0)

    return _make("affine", xd * sd + shift.data, (x, scale_, shift), grad_fn)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _make("transpose", x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", tensors[0].shape, tensors[-1].shape) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return np.split(g, bounds, axis=axis)

    return _make("concat", out, tensors, grad_fn)


def take_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def grad_fn(g):
        gx = np.zeros(shape, dtype=np.result_type(g.dtype, dtype))
        np.add.at(gx, idx, g)
        return (gx,)

    return _make("take_rows", x.data[idx], (x,), grad_fn)


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: Number) -> Tensor:
    if isinstance(c, Tensor):
        raise ContractError("scale takes a plain number; use mul for tensors")
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _make("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def clamp(x: Tensor, lo: Number, hi: Number) -> Tensor:
    if lo > hi:
        raise ContractError(f"clamp bounds reversed: {lo} > {hi}")
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _make("clamp", np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _make("log", out, (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def grad_fn(g):
        with np.errstate(divide="ignore"):
            return (g * 0.5 / out,)

    return _make("sqrt", out, (x,), grad_fn)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "clamp": clamp,
    "scale": scale,
}


def elementwise(op: str, *inputs, **params) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, clamp(lo, hi), scale(c)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op '{op}'") from None
    return fn(*inputs, **params)


# -- reductions -------------------------------------------------------------

def _expand_grad(g: np.ndarray, shape: Tuple[int, ...], axis: Optional[int], keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.array(np.broadcast_to(g, shape))


def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)
    return _make("sum", out, (x,), lambda g: (_expand_grad(g, shape, axis, keepdims),))


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    count = x.size if axis is None else shape[axis]
    if count == 0:
        raise ContractError("mean over an empty axis")
    out = x.data.mean(axis=axis, keepdims=keepdims)
    return _make("mean", out, (x,), lambda g: (_expand_grad(g / count, shape, axis, keepdims),))


def logsumexp(x: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Stabilized log-sum-exp along ``axis``; ``mask`` selects the entries that
    take part (every reduced slice must keep at least one).
    """
    xd = x.data
    keep = np.ones(xd.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if keep.shape != xd.shape:
        raise ShapeError("logsumexp mask", keep.shape, xd.shape)
    if not np.all(keep.any(axis=axis)):
        raise ContractError("logsumexp: a reduced slice has no unmasked entries")
    row_max = np.max(np.where(keep, xd, -np.inf), axis=axis, keepdims=True)
    shifted = np.where(keep, xd - row_max, -np.inf)
    weights = np.exp(shifted)
    total = weights.sum(axis=axis, keepdims=True)
    out = np.squeeze(row_max + np.log(total), axis=axis)
    softmax = weights / total

    def grad_fn(g):
        return (np.expand_dims(g, axis) * softmax,)

    return _make("logsumexp", out, (x,), grad_fn)


# -- normalization ----------------------------------------------------------

def l2_normalize(v: Tensor, eps: float = 1e-12, axis: int = -1) -> Tensor:
    """``v / max(||v||, eps)`` along ``axis``; rows shorter than eps are only scaled."""
    if v.ndim == 0 or v.shape[axis] < 1:
        raise ShapeError("l2_normalize", v.shape)
    vd = v.data
    norm = np.sqrt(np.sum(vd * vd, axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    out = vd / denom
    active = norm >= eps

    def grad_fn(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (np.where(active, (g - out * dot) / denom, g / denom),)

    return _make("l2_normalize", out, (v,), grad_fn)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row of a 2-D tensor to zero mean and unit variance."""
    if x.ndim != 2:
        raise ShapeError("layer_norm", x.shape)
    xd = x.data
    centered = xd - xd.mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + eps)
    xhat = centered * inv_std

    def grad_fn(g):
        g_mean = g.mean(axis=1, keepdims=True)
        gx_mean = (g * xhat).mean(axis=1, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return _make("layer_norm", xhat, (x,), grad_fn)


def cosine_sim(u: Tensor, v: Tensor, eps: float = 1e-12) -> Tensor:
    """Cosine similarity along the last axis (scalar for vectors, [b] for rows)."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError("cosine_sim", u.shape, v.shape)
    return sum(mul(l2_normalize(u, eps), l2_normalize(v, eps)), axis=-1)


# -- testing utility --------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """
    Max relative error between the taped gradient of ``f`` at ``x`` and
    central finite differences.

    Runs in 64-bit mode so finite-difference noise stays far below the
    tolerances used by the tests. Per coordinate the error is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    with float64_mode():
        point = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
        with Tape() as tape:
            loss = f(point)
        analytic = np.asarray(tape.backward(loss)[point], dtype=np.float64).ravel()

        base = point.data.ravel().astype(np.float64)
        numeric = np.empty_like(base)
        for i in range(base.size):
            shifted = base.copy()
            shifted[i] = base[i] + step
            upper = f(Tensor(shifted.reshape(point.shape))).item()
            shifted[i] = base[i] - step
            lower = f(Tensor(shifted.reshape(point.shape))).item()
            numeric[i] = (upper - lower) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
