"""Small reverse-mode differentiation engine.

Only the operations the DMCH graph needs are provided. Every tensor holds a
float64 array; shapes must agree exactly (no general broadcasting). The graph
is recorded implicitly through parent links and linearised into a tape at
``backward`` time, so a fresh graph is built on every training step.
"""

from __future__ import annotations

import contextlib
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionError, FormatError, OracleError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _make(ad @ bd, (a, b), back, "matmul")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "hadamard")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    xd = x.data
    y = np.empty_like(xd)
    pos = xd >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""
    mask = x.data > 0
    return _make(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def scale_rows(x: Tensor, w: Tensor) -> Tensor:
    """Multiply row i of ``x`` (n, d) by the scalar ``w[i, 0]`` (w is (n, 1))."""
    if x.data.ndim != 2 or w.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: {x.shape} with weights {w.shape}")
    xd, wd = x.data, w.data

    def back(g):
        return g * wd, np.sum(g * xd, axis=1, keepdims=True)

    return _make(xd * wd, (x, w), back, "scale_rows")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector ``b`` along the trailing axis of ``x``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} with bias {b.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)), "add_bias")


# ---------------------------------------------------------------- normalisation


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis of a 1-D or 2-D tensor."""
    if z.size == 0 or z.shape[-1] == 0:
        raise ValueError("softmax of an empty tensor")
    if z.data.ndim > 2:
        raise DimensionError(f"softmax expects 1-D or 2-D input, got {z.shape}")
    y = _softmax_np(z.data)

    def back(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (z,), back, "softmax")


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Sum over rows of ``-w_i * log softmax(logits_i)[targets_i]``.

    Rows with weight zero (padding) contribute nothing.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (n, classes), got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise DimensionError(f"cross_entropy: {n} rows but targets shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValueError("cross_entropy: target id out of range")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = lse - shifted[rows, targets]
    value = np.array(np.dot(w, nll))

    def back(g):
        p = _softmax_np(z)
        p[rows, targets] -= 1.0
        return (p * (w[:, None] * g),)

    return _make(value, (logits,), back, "cross_entropy")


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of no tensors")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ValueError(f"concat: axis {axis} out of range for rank {ndim}")
    axis %= ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise DimensionError(f"concat: {tensors[0].shape} vs {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows (first-axis entries) of ``x``; repeated indices accumulate."""
    index = np.asarray(index, dtype=np.int64)
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(x.data[index], (x,), back, "take_rows")


def take_cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous column slice ``x[:, start:stop]`` of a 2-D tensor."""
    if x.data.ndim != 2 or not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"take_cols: bad slice [{start}:{stop}] of {x.shape}")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _make(x.data[:, start:stop], (x,), back, "take_cols")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape
    if axis is None:
        return _make(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(x.data.sum(axis=axis), (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Per-row convex-style combination: out[b] = sum_k weights[b, k] * values[b, k, :]."""
    if (values.data.ndim != 3 or weights.data.ndim != 2
            or weights.shape != values.shape[:2]):
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs values {values.shape}")
    wd, vd = weights.data, values.data

    def back(g):
        return (np.einsum("bkd,bd->bk", vd, g) if weights.requires_grad else None,
                wd[:, :, None] * g[:, None, :] if values.requires_grad else None)

    return _make(np.einsum("bk,bkd->bd", wd, vd), (weights, values), back, "weighted_sum")


def conv2d(x: Tensor, w: Tensor, stride: int = 2, pad: int = 1) -> Tensor:
    """NHWC convolution. ``w`` has shape (kh, kw, c_in, c_out)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[3] != w.shape[2]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    n, h, wd_, cin = x.shape
    kh, kw, _, cout = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd_ + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.stack(
        [xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] for i, j in offsets],
        axis=3,
    ).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for k, (i, j) in enumerate(offsets):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, k, :]
            gx = gxp[:, pad:pad + h, pad:pad + wd_, :]
        return gx, gw

    return _make(out, (x, w), back, "conv2d")


# ---------------------------------------------------------------- backward


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topological order of the graph reachable from ``loss`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(build_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error per coordinate is ``|a - n| / max(1, |a|, |n|)``. With
    ``max_coords`` only a random subset of coordinates is probed.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    if not x.requires_grad:
        raise ValueError("grad_check: x must require grad")
    first, second = f(x).data.copy(), f(x).data.copy()
    if not np.array_equal(first, second):
        raise OracleError("grad_check: f is not deterministic")
    x.grad = None
    backward(f(x))
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and flat.size > max_coords:
        coords = np.random.default_rng(seed).choice(flat.size, max_coords, replace=False)
    worst = 0.0
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f(x).data)
            flat[i] = orig - eps
            fm = float(f(x).data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    x.grad = None
    return worst


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"DMCHCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays: magic, u16 version, then one record per tensor.

    Record layout: u16 name length, UTF-8 name, u16 rank, u32 extents,
    float64 values; all little-endian.
    """
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION)]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<H", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 10:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<H", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"{path}: truncated record name")
            pos += nlen
            (rank,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + 8 * count
            if end > len(buf):
                raise FormatError(f"{path}: truncated values for {name!r}")
            out[name] = np.frombuffer(buf[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
            pos = end
    except struct.error as exc:
        raise FormatError(f"{path}: truncated record") from exc
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
