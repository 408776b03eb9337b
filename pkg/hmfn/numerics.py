"""Minimal deterministic tensor engine with reverse-mode differentiation.

Tensors wrap contiguous row-major numpy arrays. Every op that sees an input
with ``requires_grad`` attaches a ``Node`` to its output; ``backward()``
orders those nodes into a ``ComputationTape`` and walks it once in reverse.
The tape is discarded after the walk.

Broadcasting is limited to leading-dimension expansion: one operand's shape
must be a suffix of the other's.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)


# ============================================================================
# Precision
# ============================================================================

_DTYPE: ContextVar[np.dtype] = ContextVar("hmfn_dtype", default=np.dtype(np.float64))

SUPPORTED_DTYPES = {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}


def get_default_dtype() -> np.dtype:
    """Return the dtype new tensors are created with in this context."""
    return _DTYPE.get()


@contextmanager
def precision(dtype: str | np.dtype | type) -> Iterator[np.dtype]:
    """Run a block with a different default tensor dtype.

    Args:
        dtype: "float32", "float64", or an equivalent numpy dtype.

    Yields:
        The resolved numpy dtype.
    """
    resolved = SUPPORTED_DTYPES.get(dtype, None) if isinstance(dtype, str) else None
    if resolved is None:
        resolved = np.dtype(dtype)
    if resolved not in SUPPORTED_DTYPES.values():
        raise ContractError(f"Unsupported precision '{dtype}'")
    token = _DTYPE.set(resolved)
    try:
        yield resolved
    finally:
        _DTYPE.reset(token)


# ============================================================================
# Tensor and tape
# ============================================================================

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class Node:
    """One executed op: its inputs, its output and its vector-Jacobian product."""

    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn
    output: "Tensor | None" = None


class Tensor:
    """Dense real-valued array with an optional gradient.

    ``grad`` is a plain numpy array of the same shape, filled by ``backward``.
    """

    def __init__(
        self,
        data: np.ndarray | float | Sequence,
        requires_grad: bool = False,
        name: str | None = None,
    ):
        self.data = np.ascontiguousarray(data, dtype=get_default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class ComputationTape:
    """Topologically ordered record of the ops that produced a tensor.

    Every node appears after all nodes producing its inputs, and exactly once.
    """

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, root: Tensor) -> "ComputationTape":
        if root._node is None:
            return cls([])
        order: list[Node] = []
        visited: set[int] = set()
        stack: list[tuple[Node, bool]] = [(root._node, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for t in node.inputs:
                if t._node is not None and id(t._node) not in visited:
                    stack.append((t._node, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.nodes)


def _result(
    data: np.ndarray, inputs: tuple[Tensor, ...], op: str, backward_fn: BackwardFn
) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = Node(op, inputs, backward_fn, out)
    return out


def as_tensor(value: "Tensor | np.ndarray | float") -> Tensor:
    """Wrap constants so they can enter an op; tensors pass through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def backward(loss: Tensor) -> ComputationTape:
    """Populate ``grad`` on every leaf that requires gradients.

    Args:
        loss: Scalar tensor produced by differentiable ops.

    Returns:
        The tape that was walked (already detached from its tensors).

    Raises:
        ContractError: If ``loss`` is not scalar or no op produced it.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = ComputationTape.from_output(loss)
    if not tape.nodes:
        raise ContractError("backward() called on an empty tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gi
            else:
                pending[id(t)] = gi

    for node in tape.nodes:
        if node.output is not None:
            node.output._node = None
        node.output = None
    return tape


# ============================================================================
# Elementwise ops
# ============================================================================


def _check_broadcast(op: str, a: tuple[int, ...], b: tuple[int, ...]) -> None:
    if a == b:
        return
    if len(b) <= len(a) and a[len(a) - len(b) :] == b:
        return
    if len(a) <= len(b) and b[len(b) - len(a) :] == a:
        return
    raise DimensionError(f"{op}: cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    return _result(
        a.data + b.data,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    return _result(
        a.data - b.data,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    return _result(
        a.data * b.data,
        (a, b),
        "mul",
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def add_scalar(a: Tensor, value: float) -> Tensor:
    return _result(a.data + value, (a,), "add_scalar", lambda g: (g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ContractError("log: input has non-positive values")
    return _result(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def abs(a: Tensor) -> Tensor:  # noqa: A001
    return _result(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), "clip", lambda g: (g * inside,))


# ============================================================================
# Reductions and shape ops
# ============================================================================


def _normalize_axis(op: str, axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    if axis is None:
        return _result(
            np.asarray(a.data.sum()),
            (a,),
            "sum",
            lambda g: (np.broadcast_to(g, a.shape).copy(),),
        )
    ax = _normalize_axis("sum", axis, a.ndim)
    return _result(
        a.data.sum(axis=ax),
        (a,),
        "sum",
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),),
    )


def mean(a: Tensor) -> Tensor:
    n = max(a.size, 1)
    return scale(sum(a), 1.0 / n)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise DimensionError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from e
    return _result(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat: no tensors given")
    ax = _normalize_axis("concat", axis, tensors[0].ndim)
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise DimensionError(
                f"concat: shapes {[x.shape for x in tensors]} differ off axis {ax}"
            )
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=ax),
        tuple(tensors),
        "concat",
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def select(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Take one slice along ``axis`` and drop that axis."""
    ax = _normalize_axis("select", axis, a.ndim)
    if not -a.shape[ax] <= index < a.shape[ax]:
        raise DimensionError(f"select: index {index} out of range for {a.shape}")

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        slicer = [slice(None)] * a.ndim
        slicer[ax] = index
        full[tuple(slicer)] = g
        return (full,)

    return _result(np.take(a.data, index, axis=ax), (a,), "select", backward_fn)


def take_rows(a: Tensor, rows: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (axis 0) by integer index."""
    rows = np.asarray(rows, dtype=np.int64)

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return _result(a.data[rows], (a,), "take_rows", backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _normalize_axis("softmax", axis, a.ndim)
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)
    return _result(
        out,
        (a,),
        "softmax",
        lambda g: (out * (g - (g * out).sum(axis=ax, keepdims=True)),),
    )


def masked_max(a: Tensor, mask: np.ndarray) -> Tensor:
    """Max over axis 1 of a [P, N, E] tensor, ignoring entries where mask is False.

    Raises:
        ContractError: If any row has no valid entry.
    """
    if a.ndim != 3 or mask.shape != a.shape[:2]:
        raise DimensionError(f"masked_max: mask {mask.shape} does not fit {a.shape}")
    if a.shape[0] and not mask.any(axis=1).all():
        raise ContractError("masked_max: a row has no valid entries")
    filled = np.where(mask[..., None], a.data, -np.inf)
    idx = filled.argmax(axis=1)[:, None, :]
    out = np.take_along_axis(a.data, idx, axis=1)[:, 0, :]

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, g[:, None, :], axis=1)
        return (full,)

    return _result(out, (a,), "masked_max", backward_fn)


# ============================================================================
# Linear algebra and convolution
# ============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions of {a.shape} and {b.shape} do not agree"
        )
    return _result(
        a.data @ b.data,
        (a, b),
        "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation of a [C_in, H, W] map with a [C_out, C_in, k, k] kernel.

    Output spatial size is floor((H + 2p - k) / stride) + 1.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: expected [C,H,W] and [O,C,k,k], got {x.shape}, {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if c_in != x.shape[0]:
        raise DimensionError(f"conv2d: kernel {kernel.shape} expects {c_in} channels, input {x.shape}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be square and odd, got {kernel.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError(f"conv2d: invalid stride={stride} padding={padding}")
    k, s, p = kh, stride, padding
    _, h, w = x.shape
    if h + 2 * p < k or w + 2 * p < k:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {x.shape} (p={p})")

    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    h_out, w_out = windows.shape[1], windows.shape[2]
    out = np.tensordot(kernel.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out = out + bias.data[:, None, None]

    def backward_fn(g: np.ndarray) -> tuple:
        gk = np.tensordot(g, windows, axes=([1, 2], [1, 2]))
        gwin = np.tensordot(kernel.data, g, axes=([0], [0]))
        gxp = np.zeros_like(xp)
        for a in range(k):
            for b in range(k):
                gxp[:, a : a + s * (h_out - 1) + 1 : s, b : b + s * (w_out - 1) + 1 : s] += gwin[:, a, b]
        gx = gxp[:, p : p + h, p : p + w]
        if bias is None:
            return (gx, gk)
        return (gx, gk, g.sum(axis=(1, 2)))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _result(out, inputs, "conv2d", backward_fn)


Rule = tuple[int, int, np.ndarray, np.ndarray]


def rulebook_conv(
    features: Tensor,
    kernel: Tensor,
    rules: Sequence[Rule],
    n_out: int,
    bias: Tensor | None = None,
) -> Tensor:
    """Sparse convolution driven by a precomputed rulebook.

    Each rule ``(a, b, in_idx, out_idx)`` adds ``features[in_idx] @ kernel[:, :, a, b].T``
    into ``out[out_idx]``. Within one rule ``out_idx`` holds no duplicates.

    Args:
        features: [N_in, C_in] active-site features.
        kernel: [C_out, C_in, k, k] weights.
        rules: Rulebook entries, one per kernel tap with contributions.
        n_out: Number of output sites.
        bias: Optional [C_out] bias added at every output site.

    Returns:
        [n_out, C_out] output features.
    """
    if features.ndim != 2 or kernel.ndim != 4 or kernel.shape[1] != features.shape[1]:
        raise DimensionError(
            f"rulebook_conv: features {features.shape} do not fit kernel {kernel.shape}"
        )
    c_out = kernel.shape[0]
    out = np.zeros((n_out, c_out), dtype=features.data.dtype)
    for a, b, in_idx, out_idx in rules:
        out[out_idx] += features.data[in_idx] @ kernel.data[:, :, a, b].T
    if bias is not None:
        out = out + bias.data

    def backward_fn(g: np.ndarray) -> tuple:
        gf = np.zeros_like(features.data)
        gk = np.zeros_like(kernel.data)
        for a, b, in_idx, out_idx in rules:
            go = g[out_idx]
            gk[:, :, a, b] += go.T @ features.data[in_idx]
            gf[in_idx] += go @ kernel.data[:, :, a, b]
        if bias is None:
            return (gf, gk)
        return (gf, gk, g.sum(axis=0))

    inputs = (features, kernel) if bias is None else (features, kernel, bias)
    return _result(out, inputs, "rulebook_conv", backward_fn)


def scatter_to_grid(features: Tensor, coords: np.ndarray, dims: tuple[int, int]) -> Tensor:
    """Place [N, C] site features into a zero [C, H, W] grid at (row, col) coords."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    if features.ndim != 2 or features.shape[0] != coords.shape[0]:
        raise DimensionError(
            f"scatter_to_grid: {features.shape} features for {coords.shape[0]} coords"
        )
    h, w = dims
    rows, cols = coords[:, 0], coords[:, 1]
    out = np.zeros((features.shape[1], h, w), dtype=features.data.dtype)
    out[:, rows, cols] = features.data.T
    return _result(out, (features,), "scatter_to_grid", lambda g: (g[:, rows, cols].T,))


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 1, padding: int | None = None) -> Tensor:
    """Max pooling over a [C, H, W] map; gradient goes to the first maximum."""
    if x.ndim != 3:
        raise DimensionError(f"max_pool2d: expected [C,H,W], got {x.shape}")
    k, s = kernel, stride
    p = k // 2 if padding is None else padding
    c, h, w = x.shape
    if h + 2 * p < k or w + 2 * p < k:
        raise DimensionError(f"max_pool2d: window {k} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p)), constant_values=-np.inf)
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::s, ::s]
    h_out, w_out = windows.shape[1], windows.shape[2]
    flat = windows.reshape(c, h_out, w_out, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g: np.ndarray) -> tuple[np.ndarray]:
        gxp = np.zeros_like(xp)
        ci, oi, oj = np.indices((c, h_out, w_out))
        rows = oi * s + idx // k
        cols = oj * s + idx % k
        np.add.at(gxp, (ci, rows, cols), g)
        return (gxp[:, p : p + h, p : p + w],)

    return _result(out, (x,), "max_pool2d", backward_fn)


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping average pooling by an integer factor."""
    c, h, w = x.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"avg_pool2d: factor {factor} does not divide {x.shape}")
    f = factor
    out = x.data.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))
    return _result(
        out,
        (x,),
        "avg_pool2d",
        lambda g: (np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f),),
    )


def _check_factor(op: str, factor: int) -> int:
    if int(factor) != factor or factor < 1:
        raise DimensionError(f"{op}: factor must be a positive integer, got {factor}")
    return int(factor)


def nearest_upsample(x: Tensor, factor: int) -> Tensor:
    f = _check_factor("nearest_upsample", factor)
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=1), f, axis=2)
    return _result(
        out,
        (x,),
        "nearest_upsample",
        lambda g: (g.reshape(c, h, f, w, f).sum(axis=(2, 4)),),
    )


def _interp_matrix(n: int, factor: int, dtype: np.dtype) -> np.ndarray:
    # half-pixel centers, edges clamped
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    m = np.zeros((n * factor, n), dtype=dtype)
    rows = np.arange(n * factor)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    f = _check_factor("bilinear_upsample", factor)
    _, h, w = x.shape
    ah = _interp_matrix(h, f, x.data.dtype)
    aw = _interp_matrix(w, f, x.data.dtype)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), "bilinear_upsample", lambda g: (ah.T @ g @ aw,))


# ============================================================================
# Gradient oracle
# ============================================================================


def _scalar(value: "Tensor | float") -> float:
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def finite_difference_grad(
    f: Callable[[Tensor], "Tensor | float"], x: Tensor, eps: float = 1e-5
) -> Tensor:
    """Central-difference estimate of d f(x) / d x.

    ``f`` must be a pure function of ``x``; ``x.data`` is perturbed in place
    and restored element by element.
    """
    if eps <= 0:
        raise ContractError(f"finite_difference_grad: eps must be positive, got {eps}")
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.size, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = _scalar(f(x))
        flat[i] = orig - eps
        f_minus = _scalar(f(x))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad.reshape(x.shape))


def gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error max|a-n| / max(max|a|, max|n|, 1e-8)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-8)
    return float(np.abs(analytic - numeric).max() / denom)
