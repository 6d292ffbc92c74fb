"""Dense-tensor numeric core with reverse-mode differentiation.

Values live in numpy arrays (row-major, float32 or float64). Every primitive
registers a backward rule; calling ``backward()`` on a scalar walks the tape
in reverse topological order. float32 is the working dtype for training;
float64 is reserved for test oracles and gradient checking.

Broadcasting is deliberately restricted: binary ops only broadcast a smaller
operand across leading batch axes (bias/mask style). Anything else raises
ShapeError naming the primitive and both shapes.
"""

from __future__ import annotations

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)

# Finite stand-in for -inf so masked scores stay representable; exp() of the
# max-shifted value underflows to exactly 0 in both float32 and float64.
_MASK_NEG = -1e9

RMS_EPS = 1e-5


class ShapeError(ValueError):
    """Operand shapes (or dtypes) do not conform for the requested primitive."""


class ConfigError(ValueError):
    """A configuration value violates its contract."""


class Tensor:
    """A dense array node in a reverse-mode differentiation graph.

    Leaf tensors are created directly; interior nodes are produced by the
    primitives below. ``requires_grad`` propagates through ops, and nodes
    whose inputs do not require grad carry no tape at all, so frozen
    subgraphs run at plain numpy speed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf.

        Single-writer: one backward pass at a time per graph.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # operator sugar (constants are wrapped as non-differentiable tensors)

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive; divide by scalars")
        return mul(self, _wrap(1.0 / other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _wrap(value, dtype) -> "Tensor":
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _accum(node: Tensor, g: np.ndarray):
    if node.grad is None:
        node.grad = g.astype(node.data.dtype, copy=True)
    else:
        node.grad = node.grad + g


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_dtypes(name: str, a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{name}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after leading-axis broadcast."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        _accum(a, -g)

    return _node(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} vs {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(data, (a, b), backward)


def softmax(x: Tensor) -> Tensor:
    """Row softmax along the last axis (max-shifted for stability)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (p * g).sum(axis=-1, keepdims=True)
        _accum(x, p * (g - dot))

    return _node(p, (x,), backward)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        p = np.exp(out)
        _accum(x, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = RMS_EPS) -> Tensor:
    """y = x * gain / rms(x), rms over the last axis."""
    _check_dtypes("rms_norm", x, gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gain.shape} does not match width {x.shape}")
    d = x.shape[-1]
    s = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    data = x.data * s * gain.data

    def backward(g):
        if x.requires_grad:
            gg = g * gain.data
            dot = (x.data * gg).sum(axis=-1, keepdims=True)
            _accum(x, s * gg - (s ** 3 / d) * x.data * dot)
        if gain.requires_grad:
            gr = (g * x.data * s).reshape(-1, d).sum(axis=0)
            _accum(gain, gr)

    return _node(data, (x, gain), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    data = x.data * sig

    def backward(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _node(data, (x,), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if table.data.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: id out of range [0, {table.shape[0]})")
    data = table.data[ids]

    def backward(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        _accum(table, dt)

    return _node(data, (table,), backward)


def causal_mask(scores: Tensor) -> Tensor:
    """Add a large negative constant above the diagonal of the last two axes."""
    tq, tk = scores.shape[-2], scores.shape[-1]
    if tq != tk:
        raise ShapeError(f"causal_mask: expected square trailing axes, got {scores.shape}")
    m = np.triu(np.full((tq, tk), _MASK_NEG, dtype=scores.data.dtype), k=1)
    data = scores.data + m

    def backward(g):
        _accum(scores, g)

    return _node(data, (scores,), backward)


# ----------------------------------------------------------------------
# structural ops (shape plumbing with trivial backward rules)


def texp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def backward(g):
        _accum(x, g * data)

    return _node(data, (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    if axis is None:
        data = np.asarray(x.data.sum(), dtype=x.data.dtype)

        def backward(g):
            _accum(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    elif axis in (-1, x.data.ndim - 1):
        data = x.data.sum(axis=-1)

        def backward(g):
            _accum(x, np.broadcast_to(np.expand_dims(g, -1), x.shape).astype(x.data.dtype))

    else:
        raise ShapeError("sum: only full reduction or the last axis is supported")
    return _node(data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return _node(data, (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accum(x, np.transpose(g, inverse))

    return _node(data, (x,), backward)


def gather_last(x: Tensor, ids: np.ndarray) -> Tensor:
    """out[...] = x[..., ids[...]]; ids has the shape of x minus the last axis."""
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: ids shape {ids.shape} vs values {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise IndexError(f"gather_last: id out of range [0, {x.shape[-1]})")
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, ids[..., None], g[..., None], axis=-1)
        _accum(x, dx)

    return _node(data, (x,), backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding: y = x*cos + rotate_half(x)*sin.

    x: (..., T, d_head) with even d_head; cos/sin: (T, d_head) constants.
    rotate_half maps (x1, x2) -> (-x2, x1) on the two halves of the last axis.
    """
    dh = x.shape[-1]
    if dh % 2 != 0 or cos.shape != (x.shape[-2], dh):
        raise ShapeError(f"rope: cos {cos.shape} does not match input {x.shape}")
    h = dh // 2

    def rot(a):
        return np.concatenate([-a[..., h:], a[..., :h]], axis=-1)

    data = x.data * cos + rot(x.data) * sin

    def backward(g):
        u = g * sin
        # adjoint of rotate_half: (u1, u2) -> (u2, -u1)
        _accum(x, g * cos + np.concatenate([u[..., h:], -u[..., :h]], axis=-1))

    return _node(data, (x,), backward)


def primitives() -> dict:
    """Registry of the differentiable kernels, for enumeration in tests."""
    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "softmax": softmax,
        "log_softmax": log_softmax,
        "rms_norm": rms_norm,
        "silu": silu,
        "embedding": embedding,
        "causal_mask": causal_mask,
    }


# ----------------------------------------------------------------------
# loss heads


def _as_float_mask(mask: np.ndarray, dtype) -> tuple[np.ndarray, int]:
    mask = np.asarray(mask)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("empty supervision mask")
    return mask.astype(dtype), n


def masked_cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean of -log softmax(logits)[target] over masked positions."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"masked_cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError(f"masked_cross_entropy: target id out of range [0, {logits.shape[-1]})")
    mf, n = _as_float_mask(mask, logits.dtype)
    picked = gather_last(log_softmax(logits), targets)
    return tsum(mul(picked, Tensor(mf))) * (-1.0 / n)


def masked_kld(p_logits: Tensor, q_logits: Tensor, mask: np.ndarray, direction: str = "first") -> Tensor:
    """Mean KL(reference || other) over masked rows of softmax distributions.

    direction picks the reference: "first" -> KL(P||Q) with P from p_logits,
    "second" -> KL(Q||P). Computed from log-softmax on both operands; never
    via explicit probability division.
    """
    if p_logits.shape != q_logits.shape:
        raise ShapeError(f"masked_kld: shapes {p_logits.shape} vs {q_logits.shape}")
    if direction == "first":
        ref, oth = p_logits, q_logits
    elif direction == "second":
        ref, oth = q_logits, p_logits
    else:
        raise ConfigError(f"masked_kld: unknown direction {direction!r}")
    mf, n = _as_float_mask(mask, p_logits.dtype)
    lp = log_softmax(ref)
    lq = log_softmax(oth)
    rows = tsum(mul(texp(lp), add(lp, neg(lq))), axis=-1)
    return tsum(mul(rows, Tensor(mf))) * (1.0 / n)


def l2_feature_distance(a: Tensor, b: Tensor, mask: np.ndarray) -> Tensor:
    """Mean squared Euclidean distance over masked rows."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("L2 mode requires equal hidden width")
    if a.shape != b.shape:
        raise ShapeError(f"l2_feature_distance: shapes {a.shape} vs {b.shape}")
    mf, n = _as_float_mask(mask, a.dtype)
    d = add(a, neg(b))
    rows = tsum(mul(d, d), axis=-1)
    return tsum(mul(rows, Tensor(mf))) * (1.0 / n)


# ----------------------------------------------------------------------
# gradient checking


def grad_check(fn, args, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    fn maps the given float64 arrays to a scalar Tensor. Relative error per
    coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    arrays = [np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64) for a in args]

    def evaluate(arrs, want_grads=False):
        ts = [Tensor(a.copy(), dtype=np.float64, requires_grad=True) for a in arrs]
        out = fn(*ts)
        if not isinstance(out, Tensor) or out.data.size != 1:
            raise ValueError("grad_check requires a scalar-valued function")
        if not want_grads:
            return out.item()
        out.backward()
        return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    analytic = evaluate(arrays, want_grads=True)
    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = evaluate(arrays)
            flat[i] = orig - h
            f_minus = evaluate(arrays)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[k].reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
