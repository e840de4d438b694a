"""Minimal reverse-mode autodiff on numpy arrays, plus Adam and checkpoints.

Every trainable model in this package is expressed through the closed
primitive set below. Nodes record their parents and vector-Jacobian
closures at creation time, so any scalar result can be differentiated
with :func:`gradients`. Everything is float64.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

Array = np.ndarray


class Tensor:
    """A node in the computation graph: a float64 array plus provenance."""

    __slots__ = ("value", "parents", "vjps", "name")

    def __init__(self, value, parents=(), vjps=(), name=""):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = parents
        self.vjps: tuple[Callable[[Array], Array], ...] = vjps
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, name={self.name!r})"

    # operator sugar; all arithmetic routes through the primitives below
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, value, name=""):
        super().__init__(value, name=name)

    def assign(self, value: Array) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError(f"assign to {self.name!r}: {value.shape} != {self.value.shape}")
        self.value = value


class ShapeError(ValueError):
    """Raised when a primitive receives incompatibly shaped inputs."""


class Tape:
    """Ordered record of the nodes reachable from a root, leaves first.

    The graph is built define-by-run; a Tape is just the topological
    ordering extracted from a root node, used by :func:`gradients`.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes = _toposort(root)

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Reduce a broadcasted gradient back to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def gradients(loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, Array]:
    """Exact reverse-mode gradients of a scalar `loss`.

    Returns a map id(tensor) -> gradient array. When `params` is given,
    missing entries are filled with zeros so every parameter has a
    gradient of its own shape.
    """
    if loss.value.ndim != 0 and loss.value.size != 1:
        raise ShapeError(f"gradient root must be scalar, got shape {loss.value.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    if params is not None:
        for p in params:
            grads.setdefault(id(p), np.zeros_like(p.value))
    return grads


def grad_of(grads: dict[int, Array], param: Tensor) -> Array:
    return grads.get(id(param), np.zeros_like(param.value))


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value + b.value
    return Tensor(out, (a, b), (lambda g: _unbroadcast(g, a.value.shape),
                                lambda g: _unbroadcast(g, b.value.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value - b.value
    return Tensor(out, (a, b), (lambda g: _unbroadcast(g, a.value.shape),
                                lambda g: _unbroadcast(-g, b.value.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value * b.value
    return Tensor(out, (a, b), (lambda g: _unbroadcast(g * b.value, a.value.shape),
                                lambda g: _unbroadcast(g * a.value, b.value.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.value / b.value
    return Tensor(out, (a, b), (lambda g: _unbroadcast(g / b.value, a.value.shape),
                                lambda g: _unbroadcast(-g * a.value / (b.value ** 2), b.value.shape)))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim not in (1, 2) or b.value.ndim not in (1, 2):
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {a.value.shape} @ {b.value.shape}")
    if a.value.shape[-1] != b.value.shape[0]:
        raise ShapeError(f"matmul: {a.value.shape} @ {b.value.shape}")
    out = a.value @ b.value

    def vjp_a(g):
        if a.value.ndim == 1 and b.value.ndim == 2:
            return g @ b.value.T
        if a.value.ndim == 2 and b.value.ndim == 1:
            return np.outer(g, b.value)
        if a.value.ndim == 1 and b.value.ndim == 1:
            return g * b.value
        return g @ b.value.T

    def vjp_b(g):
        if a.value.ndim == 1 and b.value.ndim == 2:
            return np.outer(a.value, g)
        if a.value.ndim == 2 and b.value.ndim == 1:
            return a.value.T @ g
        if a.value.ndim == 1 and b.value.ndim == 1:
            return g * a.value
        return a.value.T @ g

    return Tensor(out, (a, b), (vjp_a, vjp_b))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor(a.value.T, (a,), (lambda g: g.T,))


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.value.reshape(shape)
    return Tensor(out, (a,), (lambda g: g.reshape(a.value.shape),))


def where_const(mask, a, b) -> Tensor:
    """Select between tensors by a constant boolean mask (broadcastable)."""
    a, b = _as_tensor(a), _as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.value, b.value)
    return Tensor(out, (a, b), (lambda g: _unbroadcast(np.where(mask, g, 0.0), a.value.shape),
                                lambda g: _unbroadcast(np.where(mask, 0.0, g), b.value.shape)))


def gather_rows(table, idx) -> Tensor:
    """Embedding lookup: rows `idx` of a 2-D table."""
    table = _as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.value.shape}")
    out = table.value[idx]

    def vjp(g):
        acc = np.zeros_like(table.value)
        np.add.at(acc, idx, g)
        return acc

    return Tensor(out, (table,), (vjp,))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.value for t in ts], axis=axis)
    sizes = [t.value.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis if axis >= 0 else g.ndim + axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]
        return vjp

    return Tensor(out, tuple(ts), tuple(make_vjp(i) for i in range(len(ts))))


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    out = a.value[..., start:stop]

    def vjp(g):
        acc = np.zeros_like(a.value)
        acc[..., start:stop] = g
        return acc

    return Tensor(out, (a,), (vjp,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Tensor(out, (a,), (lambda g: g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out ** 2),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return Tensor(out, (a,), (lambda g: g * sig,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.value)
    return Tensor(out, (a,), (lambda g: g / a.value,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.value, 0.0)
    return Tensor(out, (a,), (lambda g: g * (a.value > 0),))


#: hinge max(0, .) is ReLU by another name
hinge = relu


def elu(a, alpha: float = 1.0) -> Tensor:
    a = _as_tensor(a)
    neg = a.value <= 0
    out = np.where(neg, alpha * (np.exp(np.minimum(a.value, 0.0)) - 1.0), a.value)
    return Tensor(out, (a,), (lambda g: g * np.where(neg, out + alpha, 1.0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    out = np.where(a.value > 0, a.value, slope * a.value)
    return Tensor(out, (a,), (lambda g: g * np.where(a.value > 0, 1.0, slope),))


def masked_softmax(logits, mask, axis: int = -1) -> Tensor:
    """Softmax over entries where `mask` is True; masked entries get 0.

    Rows with no valid entry come out all-zero.
    """
    logits = _as_tensor(logits)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.value.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} != logits {logits.value.shape}")
    neg = np.where(mask, logits.value, -np.inf)
    mx = np.max(neg, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    ex = np.where(mask, np.exp(neg - mx), 0.0)
    denom = ex.sum(axis=axis, keepdims=True)
    out = np.divide(ex, denom, out=np.zeros_like(ex), where=denom > 0)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - inner)

    return Tensor(out, (logits,), (vjp,))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.value.shape).copy()
        g2 = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(g2, a.value.shape).copy()

    return Tensor(out, (a,), (vjp,))


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def l2_norm(a, axis=None, keepdims: bool = False, eps: float = 1e-12) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt((a.value ** 2).sum(axis=axis, keepdims=keepdims))

    def vjp(g):
        denom = np.maximum(out, eps)
        if axis is None:
            return g * a.value / denom
        g2 = g if keepdims else np.expand_dims(g, axis)
        d2 = denom if keepdims else np.expand_dims(denom, axis)
        return g2 * a.value / d2

    return Tensor(out, (a,), (vjp,))


def cosine(a, b, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Cosine similarity of paired vectors along `axis` (composed primitive)."""
    a, b = _as_tensor(a), _as_tensor(b)
    num = reduce_sum(mul(a, b), axis=axis)
    den = mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis))
    return div(num, add(den, eps))


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """Scale each row of a 2-D tensor to unit L2 norm."""
    a = _as_tensor(a)
    return div(a, add(l2_norm(a, axis=1, keepdims=True), eps))


def sparse_matmul_const(c: sp.spmatrix, x) -> Tensor:
    """Multiply by a constant sparse matrix (graph convolution)."""
    x = _as_tensor(x)
    c = c.tocsr()
    if c.shape[1] != x.value.shape[0]:
        raise ShapeError(f"sparse_matmul_const: {c.shape} @ {x.value.shape}")
    out = c @ x.value
    ct = c.T.tocsr()
    return Tensor(out, (x,), (lambda g: ct @ g,))


def segment_sum(x, seg_ids, num_segments: int) -> Tensor:
    """Sum rows of `x` into `num_segments` buckets given by `seg_ids`."""
    x = _as_tensor(x)
    seg_ids = np.asarray(seg_ids, dtype=np.intp)
    out = np.zeros((num_segments,) + x.value.shape[1:], dtype=np.float64)
    np.add.at(out, seg_ids, x.value)
    return Tensor(out, (x,), (lambda g: g[seg_ids],))


def logsumexp(a, axis=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp (constant max shift; exact gradient)."""
    a = _as_tensor(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = log(reduce_sum(exp(sub(a, m)), axis=axis, keepdims=keepdims))
    if keepdims:
        m_out = m
    elif axis is None:
        m_out = m.reshape(())
    else:
        m_out = np.squeeze(m, axis=axis)
    return add(s, m_out)


# ---------------------------------------------------------------------------
# LSTM composed from primitives


def lstm_init(input_dim: int, hidden_dim: int, rng: np.random.Generator, prefix: str = "lstm") -> dict:
    """Xavier-initialized weights for one LSTM direction (gates i,f,g,o)."""
    return {
        "wx": Parameter(xavier_init((input_dim, 4 * hidden_dim), rng), f"{prefix}.wx"),
        "wh": Parameter(xavier_init((hidden_dim, 4 * hidden_dim), rng), f"{prefix}.wh"),
        "b": Parameter(np.zeros(4 * hidden_dim), f"{prefix}.b"),
    }


def lstm_cell(x, h, c, weights: dict, hidden_dim: int):
    """One LSTM step on a (batch, input_dim) slab; returns (h', c')."""
    gates = add(add(matmul(x, weights["wx"]), matmul(h, weights["wh"])), weights["b"])
    i = sigmoid(slice_cols(gates, 0, hidden_dim))
    f = sigmoid(slice_cols(gates, hidden_dim, 2 * hidden_dim))
    g = tanh(slice_cols(gates, 2 * hidden_dim, 3 * hidden_dim))
    o = sigmoid(slice_cols(gates, 3 * hidden_dim, 4 * hidden_dim))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def bilstm_run(steps: Sequence[Tensor], fwd: dict, bwd: dict, hidden_dim: int) -> list[Tensor]:
    """Bi-LSTM over a short sequence of (batch, d) slabs.

    Returns one (batch, 2*hidden_dim) output per position: forward and
    backward hidden states concatenated.
    """
    batch = steps[0].value.shape[0]
    zeros = Tensor(np.zeros((batch, hidden_dim)))
    h, c = zeros, zeros
    fwd_h = []
    for x in steps:
        h, c = lstm_cell(x, h, c, fwd, hidden_dim)
        fwd_h.append(h)
    h, c = zeros, zeros
    bwd_h = [None] * len(steps)
    for t in range(len(steps) - 1, -1, -1):
        h, c = lstm_cell(steps[t], h, c, bwd, hidden_dim)
        bwd_h[t] = h
    return [concat([fwd_h[t], bwd_h[t]], axis=1) for t in range(len(steps))]


# ---------------------------------------------------------------------------
# initialization, optimization, gradient checking


def xavier_init(shape, rng: np.random.Generator) -> Array:
    """Uniform Xavier/Glorot initialization for 1-D or 2-D shapes."""
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    else:
        raise ShapeError(f"xavier_init supports 1-D or 2-D shapes, got {shape}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class AdamState:
    """Bias-corrected Adam accumulators for an ordered parameter list."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]


def adam_step(state: AdamState, grads: dict[int, Array], lr: float) -> None:
    """One in-place Adam update over the state's parameter list."""
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.eps
    for i, p in enumerate(state.params):
        g = grads.get(id(p))
        if g is None:
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1 ** t)
        v_hat = state.v[i] / (1 - b2 ** t)
        p.assign(p.value - lr * m_hat / (np.sqrt(v_hat) + eps))


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               eps: float = 1e-5, sample_limit: int = 10_000,
               seed: int = 0) -> float:
    """Max relative error between autodiff and central finite differences.

    Checks every coordinate, or a seeded 5% sample when a parameter has
    more than `sample_limit` coordinates.
    """
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise FloatingPointError("grad_check: loss is not finite")
    grads = gradients(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        g = grad_of(grads, p)
        flat = p.value.reshape(-1)
        n = flat.size
        if n > sample_limit:
            coords = rng.choice(n, size=max(1, n // 20), replace=False)
        else:
            coords = range(n)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = loss_fn().value
            flat[j] = orig - eps
            f_minus = loss_fn().value
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"grad_check: NaN near parameter {p.name!r}")
            fd = (f_plus - f_minus) / (2 * eps)
            ad = g.reshape(-1)[j]
            denom = max(abs(fd), abs(ad), 1e-6)
            worst = max(worst, abs(fd - ad) / denom)
    return worst


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"KGRWCKPT1" + b"\x00" * 7


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Write named parameters as flat binary records behind a magic header."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<I", p.value.ndim))
            for d in p.value.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(np.ascontiguousarray(p.value, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    """Read a checkpoint back as name -> float64 array."""
    with open(path, "rb") as fh:
        magic = fh.read(16)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a parameter checkpoint (bad magic)")
        out: dict[str, Array] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64).copy()
    return out


def restore_params(params: Iterable[Parameter], saved: dict[str, Array]) -> None:
    for p in params:
        if p.name not in saved:
            raise KeyError(f"checkpoint is missing parameter {p.name!r}")
        p.assign(saved[p.name])


def parameter_checksum(params: Iterable[Parameter]) -> str:
    """Stable digest of all parameter bytes, for frozen-inference checks."""
    import hashlib

    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.value, dtype="<f8").tobytes())
    return h.hexdigest()
