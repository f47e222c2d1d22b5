"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything the training stack needs lives here: a ``Tensor`` wrapping a
numpy array, the differentiable operations used by the embedding,
decoder and prediction models, an Adam optimizer that honours parameter
freezing, and a central finite-difference gradient checker. Graphs are
built eagerly through closures and walked once in reverse topological
order; single-threaded execution is bit-deterministic.
"""
from __future__ import annotations

import contextlib
import math
import threading

import numpy as np
from scipy.special import erf


class NumericError(FloatingPointError):
    """A value that must stay finite became NaN or infinite."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction; forward values only."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def check_finite(arr: np.ndarray, what: str = "tensor") -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """One node of the autodiff graph: a float64 array plus bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "frozen", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)  # copy: tensors own their buffer
        check_finite(arr, name or "tensor")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.frozen = False
        self.name = name
        self._parents = ()
        self._backward = None

    @classmethod
    def _result(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.frozen = False
        out.name = None
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self, seed=None) -> None:
        """Propagate gradients to every ancestor that requires them.

        ``seed`` is the output gradient; it defaults to 1 for scalar
        tensors and is mandatory otherwise. Gradients accumulate across
        calls until cleared.
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.data.size != 1:
                raise ValueError("non-scalar backward() needs an explicit seed gradient")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(f"seed shape {seed.shape} does not match tensor shape {self.data.shape}")
        # iterative post-order DFS; recursion would overflow on deep graphs
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        _accum(self, seed)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # arithmetic sugar used throughout the model code
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

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    """View arbitrary array-likes as constant tensors (no copy, no check)."""
    if isinstance(x, Tensor):
        return x
    t = Tensor.__new__(Tensor)
    t.data = np.asarray(x, dtype=np.float64)
    t.grad = None
    t.requires_grad = False
    t.frozen = False
    t.name = None
    t._parents = ()
    t._backward = None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    # First assignment aliases g: backward runs each node once with its
    # final gradient (topological order), and accumulation rebinds rather
    # than mutating, so the alias is never written through.
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return Tensor._result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return Tensor._result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accum(a, -g)

    return Tensor._result(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return Tensor._result(out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if b.data.ndim == 2 and a.data.ndim > 2:
                # batched input against a 2-d weight: one flat GEMM instead
                # of a stack of per-sample products plus a reduction
                m = a.data.shape[-1]
                p = g.shape[-1]
                gb = a.data.reshape(-1, m).T @ g.reshape(-1, p)
                _accum(b, gb)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
                _accum(b, _unbroadcast(gb, b.data.shape))

    return Tensor._result(out, (a, b), bw)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is None:
            gx = np.broadcast_to(g.reshape((1,) * x.data.ndim), x.data.shape)
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            gx = np.broadcast_to(gg, x.data.shape)
        _accum(x, gx)

    return Tensor._result(out, (x,), bw)


def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)

    def bw(g):
        _accum(x, g * out)

    return Tensor._result(out, (x,), bw)


def log(x) -> Tensor:
    x = _wrap(x)
    out = np.log(x.data)

    def bw(g):
        _accum(x, g / x.data)

    return Tensor._result(out, (x,), bw)


def powc(x, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    x = _wrap(x)
    out = x.data ** p

    def bw(g):
        _accum(x, g * p * x.data ** (p - 1))

    return Tensor._result(out, (x,), bw)


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    out = np.clip(x.data, lo, hi)
    inside = ((x.data >= lo) & (x.data <= hi)).astype(np.float64)

    def bw(g):
        _accum(x, g * inside)

    return Tensor._result(out, (x,), bw)


def gelu(x) -> Tensor:
    x = _wrap(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        _accum(x, g * (cdf + x.data * pdf))

    return Tensor._result(out, (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def bw(g):
        _accum(x, g.reshape(x.data.shape))

    return Tensor._result(out, (x,), bw)


def transpose(x, axes) -> Tensor:
    x = _wrap(x)
    out = np.transpose(x.data, axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(x, np.transpose(g, inv))

    return Tensor._result(out, (x,), bw)


def softmax(x) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    x = _wrap(x)
    if x.data.shape[-1] == 0:
        raise ValueError("softmax needs a nonempty last axis")
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = np.sum(g * s, axis=-1, keepdims=True)
        _accum(x, s * (g - dot))

    return Tensor._result(s, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if not eps > 0:
        raise ValueError("layer_norm eps must be positive")
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    n = x.data.shape[-1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ValueError("layer_norm affine parameters must match the last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, np.sum(g * xhat, axis=lead))
        if beta.requires_grad:
            _accum(beta, np.sum(g, axis=lead))
        if x.requires_grad:
            gx_hat = g * gamma.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * (gx_hat - m1 - xhat * m2))

    return Tensor._result(out, (x, gamma, beta), bw)


def gather_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` with scatter-add backward."""
    table = _wrap(table)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise IndexError(f"row index out of range [0, {table.data.shape[0]})")
    out = table.data[idx]

    def bw(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            _accum(table, acc)

    return Tensor._result(out, (table,), bw)


def interleave_rows(parts) -> Tensor:
    """Merge k same-shape (..., n, D) tensors into (..., k*n, D), row-round-robin."""
    parts = [_wrap(p) for p in parts]
    k = len(parts)
    base = parts[0].data.shape
    for p in parts[1:]:
        if p.data.shape != base:
            raise ValueError("interleave_rows inputs must share a shape")
    out = np.empty(base[:-2] + (base[-2] * k, base[-1]))
    for j, p in enumerate(parts):
        out[..., j::k, :] = p.data

    def bw(g):
        for j, p in enumerate(parts):
            _accum(p, g[..., j::k, :])

    return Tensor._result(out, tuple(parts), bw)


def stride_rows(x, offset: int, stride: int) -> Tensor:
    """Select rows ``offset::stride`` along the second-to-last axis."""
    x = _wrap(x)
    out = np.ascontiguousarray(x.data[..., offset::stride, :])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., offset::stride, :] = g
        _accum(x, gx)

    return Tensor._result(out, (x,), bw)


def attention_bias(length: int, key_mask=None) -> np.ndarray:
    """Additive attention logits mask, shape (B, 1, L, L).

    Position i may attend to j iff j <= i (strict causality) and j is a
    real (non-padded) key; the diagonal is always allowed so no row is
    fully masked. Disallowed entries are -inf.
    """
    causal = np.tril(np.ones((length, length), dtype=bool))
    if key_mask is None:
        allowed = causal[None, :, :]
    else:
        km = np.asarray(key_mask, dtype=bool)
        allowed = causal[None, :, :] & (km[:, None, :] | np.eye(length, dtype=bool)[None, :, :])
    bias = np.where(allowed, 0.0, -np.inf)
    return bias[:, None, :, :]


def causal_self_attention(tokens, weights: dict, n_heads: int, key_mask=None) -> Tensor:
    """Multi-head self-attention with a strict causal mask.

    ``tokens`` is (L, D) or (B, L, D); ``weights`` holds the projection
    tensors wq/bq, wk/bk, wv/bv, wo/bo. Masked logits are set to -inf
    before the softmax, so output row t is a function of rows <= t only.
    """
    x = _wrap(tokens)
    squeeze = x.data.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.data.shape)
    batch, length, width = x.data.shape
    if width % n_heads != 0:
        raise ValueError(f"width {width} not divisible by {n_heads} heads")
    head_dim = width // n_heads

    def proj(w, b):
        return add(matmul(x, weights[w]), weights[b])

    def split(t):
        return transpose(reshape(t, (batch, length, n_heads, head_dim)), (0, 2, 1, 3))

    q, k, v = split(proj("wq", "bq")), split(proj("wk", "bk")), split(proj("wv", "bv"))
    logits = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    att = softmax(add(logits, attention_bias(length, key_mask)))
    mixed = transpose(matmul(att, v), (0, 2, 1, 3))
    merged = reshape(mixed, (batch, length, width))
    out = add(matmul(merged, weights["wo"]), weights["bo"])
    if squeeze:
        out = reshape(out, (length, width))
    return out


def linear_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform weights in +-1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


class Adam:
    """Adam with bias correction; frozen parameters are never touched."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen or p.grad is None:
                continue
            g = p.grad
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)


def grad_check(loss_fn, params, h: float = 1e-5) -> float:
    """Max relative error of reverse-mode gradients vs central differences.

    The relative error uses a 1e-5 absolute floor in the denominator so
    that near-zero gradients compare on an absolute scale. ``loss_fn``
    must rebuild the graph from the current parameter values each call.
    """
    loss = loss_fn()
    if loss.data.size != 1:
        raise ValueError("loss_fn must return a scalar tensor")
    zero_grads(params)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            dn = float(loss_fn().data)
            flat[i] = orig
            fd = (up - dn) / (2.0 * h)
            denom = max(abs(gflat[i]), abs(fd), 1e-5)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
