"""Dense tensors with a reverse-mode tape, deterministic RNG and serialization.

Every tensor wraps a numpy array (float64 unless constructed from a float32
array, which only the profiler does). Operations on tensors that require
gradients record their parents and a backward closure; :func:`backward` walks
that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _raise_item(t):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _result(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def expm1(a: Tensor) -> Tensor:
    out = np.expm1(a.data)
    return _result(out, (a,), lambda g: (g * (out + 1.0),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return _result(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    return _result(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return _result(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                              _unbroadcast(np.where(cond, 0.0, g), sb)))


# -- linear algebra and shape ----------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; vectors are promoted to rank 2."""
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs rank >= 1 operands, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, (b.shape[0], 1))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), bw)


ROW_BLOCK = 32


def row_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 product whose rows are bit-independent of the row count.

    BLAS picks kernels by shape, so a row's rounding can change with the
    number of rows sharing the call. Here ``a`` is zero-padded and cut into
    blocks of ``ROW_BLOCK`` rows, so every kernel call has one fixed shape.
    Used for expert gathers, where the row set varies with the input.
    """
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"row_matmul needs [m, k] @ [k, n], got {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    m, K = ad.shape
    nblk = -(-m // ROW_BLOCK)
    padded = np.zeros((nblk * ROW_BLOCK, K))
    padded[:m] = ad
    out = (padded.reshape(nblk, ROW_BLOCK, K) @ bd).reshape(-1, bd.shape[1])[:m]

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a: Tensor, axis: int) -> Tensor:
    src = a.shape
    return _result(np.expand_dims(a.data, axis), (a,), lambda g: (g.reshape(src),))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    src_shape, dtype = a.shape, a.dtype
    advanced = _is_advanced(idx)

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if advanced:
            np.add.at(out, idx, g)
        else:
            out[idx] = g
        return (out,)

    return _result(a.data[idx], (a,), bw)


def take_rows(a: Tensor, rows: np.ndarray, unique: bool = False) -> Tensor:
    """``a[rows]`` along axis 0; repeated rows accumulate gradient.

    ``unique=True`` promises distinct rows, which allows a plain scatter.
    """
    rows = np.asarray(rows, dtype=np.intp)
    src_shape, dtype = a.shape, a.dtype

    def bw(g):
        out = np.zeros(src_shape, dtype=dtype)
        if unique:
            out[rows] = g
        else:
            np.add.at(out, rows, g)
        return (out,)

    return _result(a.data[rows], (a,), bw)


def scatter_rows(src: Tensor, rows: np.ndarray, n_rows: int) -> Tensor:
    """Zero tensor with ``n_rows`` rows whose ``rows`` entries receive ``src`` (summed)."""
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.dtype)
    np.add.at(out, rows, src.data)
    return _result(out, (src,), lambda g: (g[rows],))


def scatter_groups(parts: Sequence[Tensor], rows: Sequence[np.ndarray], n_rows: int) -> Tensor:
    """Sum of several :func:`scatter_rows` results; rows must be distinct within each group."""
    if not parts:
        raise DimensionError("scatter_groups of an empty list")
    rows = [np.asarray(r, dtype=np.intp) for r in rows]
    out = np.zeros((n_rows,) + parts[0].shape[1:], dtype=parts[0].dtype)
    for part, r in zip(parts, rows):
        out[r] += part.data
    return _result(out, tuple(parts), lambda g: tuple(g[r] for r in rows))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# -- reductions -------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / count)


# -- normalisation and losses ------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; outputs are positive and sum to one along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis, shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row-wise ``logits``."""
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    x = logits.data.reshape(-1, logits.shape[-1])
    if x.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy: {x.shape[0]} rows vs {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= x.shape[1]):
        raise DimensionError("cross_entropy: target index out of range")
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(x.shape[0])
    n = x.shape[0]
    loss = np.asarray((lse - z[rows, targets]).sum() / n, dtype=x.dtype)
    src = logits.shape

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return ((p * (g / n)).reshape(src),)

    return _result(loss, (logits,), bw)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * r

    def bw(g):
        gw = g * wd
        gx = r * (gw - xhat * (gw * xhat).mean(axis=-1, keepdims=True))
        gwt = (g * xhat).reshape(-1, wd.shape[-1]).sum(axis=0) if weight.requires_grad else None
        return gx, gwt

    return _result(xhat * wd, (x, weight), bw)


# -- graph traversal ---------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every trainable leaf reachable from ``loss``.

    Returns the same gradients as a ``{leaf: array}`` map.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not attached to a graph")
    order = _topo_order(loss)
    pending = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return leaves


# -- finite differences -------------------------------------------------------

def _scalar(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    v = float(np.asarray(v).reshape(-1)[0])
    if not np.isfinite(v):
        raise FloatingPointError("non-finite function value during finite differencing")
    return v


def finite_diff_grad(f: Callable, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(x0)
    with no_grad():
        for i in np.ndindex(x0.shape):
            xp = x0.copy()
            xp[i] += h
            fp = _scalar(f(Tensor(xp)))
            xp[i] -= 2 * h
            fm = _scalar(f(Tensor(xp)))
            grad[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def check_param_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor],
                          coords: dict[str, Iterable[tuple]], h: float = 1e-5):
    """Compare backprop against central differences at selected coordinates.

    ``loss_fn`` recomputes the loss from the current parameter values; params
    are perturbed in place and restored. Yields ``(name, index, analytic, numeric)``.
    """
    grads = backward(loss_fn())
    out = []
    for name, idxs in coords.items():
        p = params[name]
        g = grads.get(p)
        for idx in idxs:
            analytic = 0.0 if g is None else float(g[idx])
            orig = p.data[idx]
            with no_grad():
                p.data[idx] = orig + h
                fp = _scalar(loss_fn())
                p.data[idx] = orig - h
                fm = _scalar(loss_fn())
            p.data[idx] = orig
            out.append((name, idx, analytic, (fp - fm) / (2 * h)))
    return out


# -- RNG --------------------------------------------------------------------

class Rng:
    """Counter-based (Philox) generator; identical seeds give identical streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._bitgen = np.random.Philox(np.random.SeedSequence(self.seed))
        self._gen = np.random.Generator(self._bitgen)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, size: int, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, p=p)

    def spawn(self, key: int) -> "Rng":
        child = Rng.__new__(Rng)
        child.seed = self.seed
        child._bitgen = np.random.Philox(np.random.SeedSequence([self.seed, int(key)]))
        child._gen = np.random.Generator(child._bitgen)
        return child

    def get_state(self) -> dict:
        st = self._bitgen.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._bitgen.state = {
            "bit_generator": "Philox",
            "state": {"counter": np.array(state["counter"], dtype=np.uint64),
                      "key": np.array(state["key"], dtype=np.uint64)},
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }


# -- serialization ------------------------------------------------------------

def tensor_to_bytes(t) -> bytes:
    """Rank byte, little-endian u64 extents, then little-endian f64 data."""
    a = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    if a.ndim > 255:
        raise DimensionError("rank exceeds 255")
    return struct.pack("<B", a.ndim) + np.asarray(a.shape, dtype="<u8").tobytes() + a.tobytes()


def tensor_from_bytes(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    (rank,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    shape = tuple(int(v) for v in np.frombuffer(buf, dtype="<u8", count=rank, offset=offset))
    offset += 8 * rank
    n = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64).reshape(shape)
    return Tensor(data), offset + 8 * n
