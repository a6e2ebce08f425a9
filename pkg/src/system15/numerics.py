"""Dense-tensor math with reverse-mode autodiff, on top of numpy.

A small tape-based engine: each primitive computes its value eagerly with
numpy and registers a backward closure. Training runs in float32; gradient
verification rebuilds the same graph in float64 and compares against central
finite differences.

Every primitive validates that its output is finite — a NaN/Inf anywhere is
treated as a hard error, not something to propagate silently.
"""

import contextlib
import ctypes
import ctypes.util
import math
import sys

import numpy as np

# Large intermediates churn through glibc's mmap threshold (arrays are
# returned to the OS on free, so every op page-faults fresh memory). Keeping
# allocations in the arena makes the training loop several times faster.
if sys.platform.startswith("linux"):
    try:
        _libc = ctypes.CDLL(ctypes.util.find_library("c"))
        _libc.mallopt(-4, 0)        # M_MMAP_MAX = 0
        _libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD: keep up to 1 GiB
    except (OSError, AttributeError):
        pass


class NumericsError(RuntimeError):
    """Shape mismatch, out-of-range index, or non-finite values."""


_grad_enabled = True
_finite_checks = True
_mac_counters = []  # active multiply-accumulate counters (innermost last)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


class MacCounter:
    """Counts multiply-accumulate ops of every matmul-like primitive executed
    while installed. This is the instrumented side of the FLOPs cross-check;
    the analytic side lives in benchmark.FlopsModel."""

    def __init__(self):
        self.macs = 0

    def add(self, n):
        self.macs += int(n)


@contextlib.contextmanager
def count_macs():
    c = MacCounter()
    _mac_counters.append(c)
    try:
        yield c
    finally:
        _mac_counters.remove(c)


def record_macs(n):
    for c in _mac_counters:
        c.add(n)


def _check_finite(arr, op):
    # single-pass reduction: any NaN/Inf poisons the sum (inf-inf -> nan)
    if _finite_checks and not math.isfinite(float(np.sum(arr))) and arr.size:
        raise NumericsError(f"non-finite values produced by '{op}'")


class Tensor:
    """A numpy array plus an optional place on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad = None
        self._backward = None
        self._parents = _parents
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g, fresh=False):
        """Add g into this node's grad buffer. fresh=True promises g is a
        newly allocated array the caller will not reuse, so it can be adopted
        without a defensive copy."""
        if self.grad is None:
            self.grad = g if fresh else g.copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse sweep from this (scalar) tensor.

        Interior nodes are torn down as soon as their backward rule has run
        (grad buffer, closure, parents) so activation memory is released
        progressively instead of peaking at graph size + gradient size."""
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar loss")
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            t, done = stack.pop()
            if done:
                topo.append(t)
                continue
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for t in reversed(topo):
            if t._backward is not None:
                t._backward(t.grad)
                t._backward = None
                t._parents = ()
                t.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={self.requires_grad})"

    # convenience operators used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, idx):
        return slice_(self, idx)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward, op):
    """Wrap a primitive result; attaches the backward rule only when some
    parent participates in the tape."""
    _check_finite(data, op)
    rg = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg, _parents=tuple(p for p in parents if p.requires_grad) if rg else (), op=op)
    if rg:
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), fresh=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), fresh=True)

    return _node(data, (a, b), backward, "mul")


def scale(a, s: float):
    a = _as_tensor(a)
    data = a.data * s

    def backward(g):
        a._accumulate(g * s, fresh=True)

    return _node(data, (a,), backward, "scale")


def matmul(a, b):
    """a @ b. Either b is a 2-D weight (k, n) applied to a (..., k), or both
    carry identical leading batch dims: (..., m, k) @ (..., k, n)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise NumericsError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)
    m = a.data.size // a.shape[-1]  # total rows across batch dims
    record_macs(m * a.shape[-1] * b.shape[-1])

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), fresh=True)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                gb = _unbroadcast(gb, b.shape)
            b._accumulate(gb, fresh=True)

    return _node(data, (a, b), backward, "matmul")


def affine(x, w, b):
    """x @ w + b in one node. x (..., k), w (k, n), b (n,)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.shape[-1] != w.shape[0]:
        raise NumericsError(f"affine inner dims differ: {x.shape} @ {w.shape}")
    data = np.matmul(x.data, w.data)
    data += b.data
    k, n = w.shape
    rows = x.data.size // k
    record_macs(rows * k * n)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(g, w.data.T), fresh=True)
        if w.requires_grad:
            w._accumulate(np.matmul(x.data.reshape(-1, k).T, g.reshape(-1, n)), fresh=True)
        if b.requires_grad:
            b._accumulate(g.reshape(-1, n).sum(axis=0), fresh=True)

    return _node(data, (x, w, b), backward, "affine")


def causal_self_attention(q, k, v, n_heads):
    """Multi-head causal attention over pre-projected q, k, v (B, T, d).

    Fused into one node so only the softmax weights are retained for the
    backward pass instead of every (B, h, T, T) intermediate."""
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    B, T, d = q.shape
    hd = d // n_heads
    scale_f = 1.0 / math.sqrt(hd)

    def heads(t):
        return t.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q.data), heads(k.data), heads(v.data)
    scores = np.matmul(qh, kh.swapaxes(-1, -2))
    scores *= scale_f
    scores += np.triu(np.full((T, T), -1e9, dtype=scores.dtype), k=1)
    record_macs(B * n_heads * T * T * hd)
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    wts = scores
    ctx = np.matmul(wts, vh)
    record_macs(B * n_heads * T * T * hd)
    data = ctx.transpose(0, 2, 1, 3).reshape(B, T, d)

    def backward(g):
        gh = g.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3)
        if v.requires_grad:
            gv = np.matmul(wts.swapaxes(-1, -2), gh)
            v._accumulate(gv.transpose(0, 2, 1, 3).reshape(B, T, d), fresh=True)
        if q.requires_grad or k.requires_grad:
            gw = np.matmul(gh, np.transpose(heads(v.data), (0, 1, 3, 2)))
            gs = wts * (gw - (wts * gw).sum(axis=-1, keepdims=True))
            gs *= scale_f
            if q.requires_grad:
                gq = np.matmul(gs, heads(k.data))
                q._accumulate(gq.transpose(0, 2, 1, 3).reshape(B, T, d), fresh=True)
            if k.requires_grad:
                gk = np.matmul(gs.swapaxes(-1, -2), heads(q.data))
                k._accumulate(gk.transpose(0, 2, 1, 3).reshape(B, T, d), fresh=True)

    return _node(data, (q, k, v), backward, "causal_self_attention")


def sigmoid(x):
    x = _as_tensor(x)
    d = x.data
    data = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def backward(g):
        x._accumulate(g * data * (1.0 - data), fresh=True)

    return _node(data, (x,), backward, "sigmoid")


def relu(x):
    x = _as_tensor(x)
    data = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0), fresh=True)

    return _node(data, (x,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """tanh-approximated GELU. Temporaries computed in place: big FFN
    activations dominate the step's allocation traffic."""
    x = _as_tensor(x)
    d = x.data
    t = d * d
    t *= 0.044715
    t += 1.0
    t *= d
    t *= _GELU_C
    np.tanh(t, out=t)
    data = t + 1.0
    data *= d
    data *= 0.5

    def backward(g):
        dinner = d * d
        dinner *= 3 * 0.044715
        dinner += 1.0
        dinner *= _GELU_C
        dinner *= 1.0 - t * t
        dinner *= d
        dinner += 1.0 + t
        dinner *= 0.5
        dinner *= g
        x._accumulate(dinner, fresh=True)

    return _node(data, (x,), backward, "gelu")


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=-1, keepdims=True)
        x._accumulate(data * (g - dot), fresh=True)

    return _node(data, (x,), backward, "softmax")


def log_softmax(x):
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def backward(g):
        x._accumulate(g - sm * g.sum(axis=-1, keepdims=True), fresh=True)

    return _node(data, (x,), backward, "log_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            term = gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(term * inv, fresh=True)

    return _node(data, (x, gamma, beta), backward, "layer_norm")


def embedding(table, ids):
    """Row lookup: table (V, d), ids int array (...,) -> (..., d)."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise NumericsError("embedding index out of range")
    data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(gt, fresh=True)

    return _node(data, (table,), backward, "embedding")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(data, tuple(tensors), backward, "concat")


def slice_(x, idx):
    """Basic indexing (ints/slices); backward scatters into a zero tensor."""
    x = _as_tensor(x)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        x._accumulate(gx, fresh=True)

    return _node(data, (x,), backward, "slice")


def reshape(x, shape):
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return _node(data, (x,), backward, "reshape")


def transpose(x, axes):
    x = _as_tensor(x)
    data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        x._accumulate(g.transpose(inv))

    return _node(data, (x,), backward, "transpose")


def mean(x, axis=None):
    x = _as_tensor(x)
    data = x.data.mean(axis=axis)
    n = x.data.size // data.size

    def backward(g):
        if axis is None:
            x._accumulate(np.full_like(x.data, g / n))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape) / n)

    return _node(data, (x,), backward, "mean")


def sum_(x, axis=None):
    x = _as_tensor(x)
    data = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            x._accumulate(np.full_like(x.data, g))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape).copy())

    return _node(data, (x,), backward, "sum")


def take_along_last(x, indices):
    """x (..., V), indices int (...,) -> (...,): picks x[..., indices[...]]."""
    x = _as_tensor(x)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[-1]):
        raise NumericsError("take_along_last index out of range")
    data = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        x._accumulate(gx, fresh=True)

    return _node(data, (x,), backward, "take_along_last")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse(a, b):
    """Mean over all elements of (a - b)^2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise NumericsError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = sub(a, b)
    return mean(mul(diff, diff))


def nll(logits, targets, mask=None):
    """Sum over positions of -log softmax(logits)[target].

    logits (..., T, V); targets int (..., T); mask optional {0,1} (..., T)
    selecting which positions contribute. Summation (not averaging) over
    positions keeps per-sample loss magnitudes additive across segments.
    """
    logits = _as_tensor(logits)
    lp = log_softmax(logits)
    picked = take_along_last(lp, targets)
    if mask is not None:
        picked = mul(picked, np.asarray(mask, dtype=logits.dtype))
    return scale(sum_(picked), -1.0)


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors with per-name trainable flags and Adam moments."""

    def __init__(self):
        self._params = {}
        self._trainable = {}
        self._m = {}
        self._v = {}
        self.step_count = 0

    def add(self, name, array, trainable=True):
        if name in self._params:
            raise NumericsError(f"duplicate parameter name '{name}'")
        t = Tensor(np.asarray(array), requires_grad=trainable)
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def is_trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, name, flag):
        self._trainable[name] = flag
        self._params[name].requires_grad = flag

    def freeze_all(self):
        for n in self._params:
            self.set_trainable(n, False)

    def trainable_names(self):
        return [n for n, f in self._trainable.items() if f]

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def copy(self, dtype=None):
        """Deep copy of values and flags (moments not copied)."""
        out = ParamStore()
        for n, t in self._params.items():
            arr = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out.add(n, arr, trainable=self._trainable[n])
        return out

    def num_params(self):
        return sum(t.data.size for t in self._params.values())


def global_grad_norm(store: ParamStore):
    sq = 0.0
    for n in store.trainable_names():
        g = store[n].grad
        if g is not None:
            sq += float((g.astype(np.float64) ** 2).sum())
    return math.sqrt(sq)


def adam_step(store: ParamStore, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
    """One Adam update over the trainable parameters; frozen parameters are
    untouched even if a gradient was (incorrectly) deposited on them."""
    scale_f = 1.0
    if clip_norm is not None:
        gn = global_grad_norm(store)
        if gn > clip_norm:
            scale_f = clip_norm / (gn + 1e-12)
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in store.trainable_names():
        p = store[name]
        if p.grad is None:
            continue
        g = p.grad * scale_f
        if name not in store._m:
            store._m[name] = np.zeros_like(p.data)
            store._v[name] = np.zeros_like(p.data)
        m, v = store._m[name], store._v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.data = p.data - update.astype(p.data.dtype)
        _check_finite(p.data, f"adam_step[{name}]")


# ---------------------------------------------------------------------------
# finite-difference gradient oracle
# ---------------------------------------------------------------------------

def grad_check(loss_fn, store: ParamStore, eps=1e-5, coords_per_tensor=64, seed=0):
    """Compare analytic gradients against central finite differences.

    loss_fn: zero-argument callable returning a scalar Tensor built from the
    parameters in `store` (which must hold float64 data). Checks up to
    `coords_per_tensor` randomly sampled coordinates per trainable tensor.
    Returns {name: max relative error} plus "_max" for the overall worst.
    """
    for n in store.trainable_names():
        if store[n].dtype != np.float64:
            raise NumericsError("grad_check requires float64 parameters")
    store.zero_grads()
    loss = loss_fn()
    loss.backward()
    analytic = {n: (store[n].grad.copy() if store[n].grad is not None else np.zeros_like(store[n].data))
                for n in store.trainable_names()}
    rng = np.random.default_rng(seed)
    report = {}
    worst = 0.0
    for name in store.trainable_names():
        p = store[name]
        flat = p.data.reshape(-1)
        n_coords = min(coords_per_tensor, flat.size)
        idxs = rng.choice(flat.size, size=n_coords, replace=False)
        max_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                lp = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                lm = loss_fn().item()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            ad = analytic[name].reshape(-1)[i]
            if not (math.isfinite(fd) and math.isfinite(ad)):
                raise NumericsError(f"non-finite gradient at {name}[{i}]")
            err = abs(ad - fd) / (abs(ad) + abs(fd) + 1e-8)
            max_err = max(max_err, err)
        report[name] = max_err
        worst = max(worst, max_err)
    report["_max"] = worst
    return report
