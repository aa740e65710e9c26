"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operation set needed by the fixed architectures in
this package: 2-d matrix products, causal dilated convolutions over
(channels, time) arrays, global max pooling, elementwise nonlinearities,
full reductions, concatenation/slicing of vectors, dropout masks, and an
Adam optimizer.  There is deliberately no broadcasting engine: the
architectures fix every shape, so mismatches are bugs we want loud.

All values are 64-bit floats, which keeps finite-difference gradient
checks tight and precision debugging off the table.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "pow_scalar",
    "exp",
    "log",
    "tanh",
    "relu",
    "sigmoid",
    "clip",
    "matmul",
    "conv1d_dilated",
    "global_max_pool",
    "add_channel_bias",
    "concat",
    "stack_cols",
    "dropout",
    "backward",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (pure evaluation)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer.

    Tensors produced by operations keep references to their inputs and a
    local-gradient closure; ``backward`` replays those records in reverse
    topological order and accumulates into ``grad``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._grad_fn: Callable | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def sum(self) -> "Tensor":
        return _sum(self)

    def mean(self) -> "Tensor":
        return _mean(self)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # Operators cover scalar and same-shape operands only.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not in the op set; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __pow__(self, p):
        return pow_scalar(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _index(self, key)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.data.ndim != 0 and b.data.ndim != 0:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape} (no broadcasting)")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # Only scalar-vs-array mixing is allowed, so a mismatch means "sum to scalar".
    if g.shape == tuple(shape):
        return g
    return np.asarray(g.sum())


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")

    def grad_fn(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")

    def grad_fn(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), grad_fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def pow_scalar(a, p) -> Tensor:
    a = _as_tensor(a)
    p = float(p)

    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data ** p, (a,), grad_fn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.tanh(a.data)
    return _make(out_data, (a,), lambda g: (g * (1.0 - out_data ** 2),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.maximum(a.data, 0.0), (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # Stable in both tails.
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(out_data, (a,), lambda g: (g * out_data * (1.0 - out_data),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is blocked where clamping binds."""
    a = _as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def _sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def _mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")

        def grad_fn(g):
            return g @ b.data.T, a.data.T @ g

    elif a.data.ndim == 2 and b.data.ndim == 1:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")

        def grad_fn(g):
            return np.outer(g, b.data), a.data.T @ g

    elif a.data.ndim == 1 and b.data.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul: inner dims {a.shape} x {b.shape}")

        def grad_fn(g):
            return b.data @ g, np.outer(a.data, g)

    else:
        raise ValueError(f"matmul: unsupported ranks {a.data.ndim} x {b.data.ndim}")
    return _make(a.data @ b.data, (a, b), grad_fn)


def conv1d_dilated(x, w, dilation: int) -> Tensor:
    """Causal dilated 1-d convolution.

    ``x`` is (in_channels, T), ``w`` is (out_channels, in_channels, k); the
    output at time s sums taps at s - dilation*i, reading positions before
    index 0 as zero, so the output length always equals the input length.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    dilation = int(dilation)
    if dilation < 1:
        raise ValueError(f"conv1d_dilated: dilation must be >= 1, got {dilation}")
    if x.data.ndim != 2 or w.data.ndim != 3:
        raise ValueError(f"conv1d_dilated: need x (C_in, T) and w (C_out, C_in, k), got {x.shape}, {w.shape}")
    c_out, c_in, k = w.shape
    if k < 1:
        raise ValueError("conv1d_dilated: kernel size must be >= 1")
    if c_in != x.shape[0]:
        raise ValueError(f"conv1d_dilated: channel mismatch, x has {x.shape[0]}, w expects {c_in}")
    t = x.shape[1]

    out_data = np.zeros((c_out, t))
    for i in range(k):
        shift = dilation * i
        if shift >= t:
            break
        out_data[:, shift:] += w.data[:, :, i] @ x.data[:, : t - shift]

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(k):
            shift = dilation * i
            if shift >= t:
                break
            gw[:, :, i] = g[:, shift:] @ x.data[:, : t - shift].T
            gx[:, : t - shift] += w.data[:, :, i].T @ g[:, shift:]
        return gx, gw

    return _make(out_data, (x, w), grad_fn)


def global_max_pool(x) -> Tensor:
    """Per-channel max over time; gradient flows to the first maximum on ties."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"global_max_pool: need a nonempty (C, T) input, got {x.shape}")
    idx = np.argmax(x.data, axis=1)  # first occurrence on ties
    rows = np.arange(x.shape[0])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _make(x.data[rows, idx], (x,), grad_fn)


def add_channel_bias(x, b) -> Tensor:
    """Add a per-channel bias (C,) across the time axis of a (C, T) tensor."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[0] != b.shape[0]:
        raise ValueError(f"add_channel_bias: got {x.shape} and {b.shape}")

    def grad_fn(g):
        return g, g.sum(axis=1)

    return _make(x.data + b.data[:, None], (x, b), grad_fn)


def concat(parts: Sequence) -> Tensor:
    """Concatenate 1-d tensors."""
    parts = [_as_tensor(p) for p in parts]
    if any(p.data.ndim != 1 for p in parts):
        raise ValueError("concat: only 1-d tensors")
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[offsets[i]: offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts]), parts, grad_fn)


def stack_cols(cols: Sequence) -> Tensor:
    """Stack 1-d tensors of equal length as the columns of a 2-d tensor."""
    cols = [_as_tensor(c) for c in cols]
    if any(c.data.ndim != 1 for c in cols):
        raise ValueError("stack_cols: only 1-d tensors")

    def grad_fn(g):
        return tuple(g[:, j] for j in range(len(cols)))

    return _make(np.stack([c.data for c in cols], axis=1), cols, grad_fn)


def _index(a: Tensor, key) -> Tensor:
    """1-d slices and single-row selection from 2-d tensors."""
    if isinstance(key, slice) and a.data.ndim == 1:
        start, stop, step = key.indices(a.shape[0])
        if step != 1:
            raise ValueError("slicing: only unit step")

        def grad_fn(g):
            gx = np.zeros_like(a.data)
            gx[start:stop] = g
            return (gx,)

        return _make(a.data[start:stop].copy(), (a,), grad_fn)
    if isinstance(key, (int, np.integer)) and a.data.ndim == 2:
        i = int(key)

        def grad_fn(g):
            gx = np.zeros_like(a.data)
            gx[i] = g
            return (gx,)

        return _make(a.data[i].copy(), (a,), grad_fn)
    raise ValueError(f"unsupported index {key!r} for shape {a.shape}")


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout: zero entries with probability ``rate`` and rescale."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an rng is required in training mode")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of the ops reachable from a root tensor.

    ``ops`` lists every non-leaf tensor with inputs strictly preceding the
    ops that consume them; a backward pass walks it once, in reverse.
    """

    def __init__(self, ops: list[Tensor]):
        self.ops = ops

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls([t for t in order if t._grad_fn is not None])


def backward(loss: Tensor):
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Repeated calls accumulate; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = Tape.trace(loss)
    if not tape.ops:
        raise ValueError("backward: empty tape (loss is a leaf or graph recording was off)")

    pending: dict[int, tuple[Tensor, np.ndarray]] = {
        id(loss): (loss, np.ones_like(loss.data))
    }
    for out in reversed(tape.ops):
        entry = pending.pop(id(out), None)
        if entry is None:
            continue
        _, g = entry
        if out.requires_grad:
            out.grad = g.copy() if out.grad is None else out.grad + g
        parent_grads = out._grad_fn(g)
        for parent, pg in zip(out._parents, parent_grads):
            if not parent.requires_grad:
                continue
            prev = pending.get(id(parent))
            if prev is None:
                pending[id(parent)] = (parent, np.array(pg, dtype=np.float64))
            else:
                pending[id(parent)] = (parent, prev[1] + pg)
    # Whatever is left are leaves.
    for tensor, g in pending.values():
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard Adam over a named parameter dict (β1=0.9, β2=0.999, ε=1e-8)."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"adam: grad shape {g.shape} != param shape {p.data.shape} for '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            denom = np.sqrt(v / bc2) + self.eps
            update = np.divide(m / bc1, denom, out=np.zeros_like(denom), where=denom != 0.0)
            p.data -= self.lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, Tensor | np.ndarray], meta: dict | None = None):
    """Write a self-describing (name, shape, values) container; bit-exact floats."""
    arrays = {}
    for name, value in params.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value)
        arrays[f"param/{name}"] = np.asarray(data, dtype=np.float64)
    arrays["__meta__"] = np.array(json.dumps(meta or {}))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"])) if "__meta__" in archive.files else {}
        params = {name[len("param/"):]: archive[name]
                  for name in archive.files if name.startswith("param/")}
    return params, meta
