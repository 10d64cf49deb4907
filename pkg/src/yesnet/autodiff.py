"""Dense float64 tensors with a dynamic tape for reverse-mode gradients.

Every operation is a registered primitive with an explicit forward and
backward. Applying a primitive while a ``Tape`` is active appends a record;
``backward`` replays the records in reverse. The tape is rebuilt on every
forward pass, which keeps variable-length graphs (the box-filter sequence)
trivial. Convolution/pooling dispatch through ``yesnet.backend``.
"""

import threading

import numpy as np

from . import backend


class Tensor:
    """A dense float64 array plus an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", (self,), {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", (self,), {"axis": axis, "keepdims": keepdims})

    def reshape(self, shape):
        return apply_primitive("reshape", (self,), {"shape": tuple(shape)})

    def transpose(self, axes=None):
        if axes is None:
            axes = tuple(reversed(range(self.ndim)))
        return apply_primitive("transpose", (self,), {"axes": tuple(axes)})


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x):
    return Tensor(x, requires_grad=False)


def stop_gradient(t):
    """Identity on values; the result never propagates gradient."""
    return Tensor(t.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Record:
    __slots__ = ("op", "inputs", "output", "attrs", "saved")

    def __init__(self, op, inputs, output, attrs, saved):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.attrs = attrs
        self.saved = saved


_local = threading.local()


def _tape_stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications; inputs precede their uses."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, loss):
        backward(loss, self)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

PRIMITIVES = {}


def register(name):
    def deco(pair_builder):
        PRIMITIVES[name] = pair_builder()
        return pair_builder
    return deco


def _shape_error(op, *shapes):
    pretty = " and ".join(str(tuple(s)) for s in shapes)
    raise ValueError(f"{op}: incompatible shapes {pretty}")


def apply_primitive(op, inputs, attrs=None):
    """Run a primitive's forward; record it on the active tape if any input
    requires a gradient."""
    try:
        fwd, _ = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    attrs = attrs or {}
    arrays = tuple(t.data for t in inputs)
    out_data, saved = fwd(attrs, *arrays)
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    tape = current_tape()
    if tape is not None and out.requires_grad:
        tape.records.append(Record(op, tuple(inputs), out, attrs, saved))
    return out


def backward(loss, tape=None):
    """Populate ``grad`` on every requires_grad tensor the tape connects to
    ``loss``; connected-but-unreached tensors get zeros."""
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise ValueError("backward: no active tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None:
            continue
        _, bwd = PRIMITIVES[rec.op]
        arrays = tuple(t.data for t in rec.inputs)
        in_grads = bwd(rec.attrs, rec.saved, g, *arrays)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for rec in tape.records:
        for t in rec.inputs + (rec.output,):
            if t.requires_grad:
                g = grads.get(id(t))
                t.grad = g.reshape(t.shape).copy() if g is not None else np.zeros_like(t.data)


# ---------------------------------------------------------------------------
# Elementwise / broadcasting primitives
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        _shape_error(op, a.shape, b.shape)


@register("add")
def _add():
    def fwd(attrs, a, b):
        _check_broadcast("add", a, b)
        return a + b, None

    def bwd(attrs, saved, g, a, b):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return fwd, bwd


@register("subtract")
def _subtract():
    def fwd(attrs, a, b):
        _check_broadcast("subtract", a, b)
        return a - b, None

    def bwd(attrs, saved, g, a, b):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return fwd, bwd


@register("multiply")
def _multiply():
    def fwd(attrs, a, b):
        _check_broadcast("multiply", a, b)
        return a * b, None

    def bwd(attrs, saved, g, a, b):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return fwd, bwd


@register("scalar_mul")
def _scalar_mul():
    def fwd(attrs, a):
        return a * attrs["c"], None

    def bwd(attrs, saved, g, a):
        return (g * attrs["c"],)

    return fwd, bwd


def _unary(name, f, df_from):
    """df_from(saved_out, x) -> local derivative."""
    def build():
        def fwd(attrs, a):
            out = f(a)
            return out, out

        def bwd(attrs, out, g, a):
            return (g * df_from(out, a),)

        return fwd, bwd
    PRIMITIVES[name] = build()


def _stable_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


_unary("tanh", np.tanh, lambda out, x: 1.0 - out ** 2)
_unary("sigmoid", _stable_sigmoid, lambda out, x: out * (1.0 - out))
_unary("exp", np.exp, lambda out, x: out)
_unary("square", np.square, lambda out, x: 2.0 * x)


@register("sqrt")
def _sqrt():
    def fwd(attrs, a):
        if np.any(a < 0):
            raise ValueError("sqrt: negative input")
        out = np.sqrt(a)
        return out, out

    def bwd(attrs, out, g, a):
        return (g * (0.5 / out),)

    return fwd, bwd


@register("log")
def _log():
    def fwd(attrs, a):
        if np.any(a <= 0):
            raise ValueError("log: non-positive input")
        return np.log(a), None

    def bwd(attrs, saved, g, a):
        return (g / a,)

    return fwd, bwd


@register("leaky_relu")
def _leaky_relu():
    def fwd(attrs, a):
        alpha = attrs["alpha"]
        return np.where(a > 0, a, alpha * a), None

    def bwd(attrs, saved, g, a):
        alpha = attrs["alpha"]
        return (g * np.where(a > 0, 1.0, alpha),)

    return fwd, bwd


@register("clip")
def _clip():
    def fwd(attrs, a):
        return np.clip(a, attrs["lo"], attrs["hi"]), None

    def bwd(attrs, saved, g, a):
        inside = (a > attrs["lo"]) & (a < attrs["hi"])
        return (g * inside,)

    return fwd, bwd


@register("softmax")
def _softmax():
    def fwd(attrs, a):
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        return out, out

    def bwd(attrs, out, g, a):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return fwd, bwd


# ---------------------------------------------------------------------------
# Linear algebra / structure primitives
# ---------------------------------------------------------------------------

@register("matmul")
def _matmul():
    def fwd(attrs, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            _shape_error("matmul", a.shape, b.shape)
        return a @ b, None

    def bwd(attrs, saved, g, a, b):
        return g @ b.T, a.T @ g

    return fwd, bwd


@register("conv2d")
def _conv2d():
    def fwd(attrs, x, w):
        stride, pad = attrs["stride"], attrs["pad"]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            _shape_error("conv2d", x.shape, w.shape)
        if x.shape[2] + 2 * pad < w.shape[2] or x.shape[3] + 2 * pad < w.shape[3]:
            _shape_error("conv2d", x.shape, w.shape)
        return backend.kernels().conv2d_forward(x, w, stride, pad), None

    def bwd(attrs, saved, g, x, w):
        g = np.ascontiguousarray(g)
        return backend.kernels().conv2d_backward(x, w, g, attrs["stride"], attrs["pad"])

    return fwd, bwd


@register("maxpool2")
def _maxpool2():
    def fwd(attrs, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"maxpool2: needs 4-d input with even H, W, got {x.shape}")
        y, idx = backend.kernels().maxpool2_forward(x)
        return y, idx

    def bwd(attrs, idx, g, x):
        return (backend.kernels().maxpool2_backward(idx, np.ascontiguousarray(g)),)

    return fwd, bwd


@register("global_avg_pool")
def _global_avg_pool():
    def fwd(attrs, x):
        if x.ndim != 4:
            raise ValueError(f"global_avg_pool: needs 4-d input, got {x.shape}")
        return x.mean(axis=(2, 3)), None

    def bwd(attrs, saved, g, x):
        b, c, h, w = x.shape
        return (np.broadcast_to(g[:, :, None, None], x.shape) / (h * w),)

    return fwd, bwd


@register("concat")
def _concat():
    def fwd(attrs, *arrays):
        axis = attrs["axis"]
        base = list(arrays[0].shape)
        for a in arrays[1:]:
            other = list(a.shape)
            if len(other) != len(base) or any(
                i != axis % len(base) and other[i] != base[i] for i in range(len(base))
            ):
                _shape_error("concat", arrays[0].shape, a.shape)
        return np.concatenate(arrays, axis=axis), None

    def bwd(attrs, saved, g, *arrays):
        axis = attrs["axis"]
        sizes = [a.shape[axis] for a in arrays]
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=axis))

    return fwd, bwd


@register("slice")
def _slice():
    def _slices(attrs):
        return tuple(
            slice(None) if b is None else slice(b[0], b[1]) for b in attrs["bounds"]
        )

    def fwd(attrs, a):
        if len(attrs["bounds"]) != a.ndim:
            raise ValueError(f"slice: bounds rank {len(attrs['bounds'])} vs input {a.shape}")
        return a[_slices(attrs)].copy(), None

    def bwd(attrs, saved, g, a):
        ga = np.zeros_like(a)
        ga[_slices(attrs)] = g
        return (ga,)

    return fwd, bwd


@register("take_rows")
def _take_rows():
    # Row gather for sequence assembly; index -1 yields a zero row.
    def fwd(attrs, a):
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        out = np.zeros((len(idx),) + a.shape[1:])
        real = idx >= 0
        out[real] = a[idx[real]]
        return out, None

    def bwd(attrs, saved, g, a):
        idx = np.asarray(attrs["indices"], dtype=np.int64)
        ga = np.zeros_like(a)
        np.add.at(ga, idx[idx >= 0], g[idx >= 0])
        return (ga,)

    return fwd, bwd


@register("reshape")
def _reshape():
    def fwd(attrs, a):
        shape = attrs["shape"]
        if int(np.prod(shape)) != a.size:
            raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}")
        return a.reshape(shape).copy(), None

    def bwd(attrs, saved, g, a):
        return (g.reshape(a.shape),)

    return fwd, bwd


@register("transpose")
def _transpose():
    def fwd(attrs, a):
        return np.ascontiguousarray(a.transpose(attrs["axes"])), None

    def bwd(attrs, saved, g, a):
        inverse = np.argsort(attrs["axes"])
        return (np.ascontiguousarray(g.transpose(tuple(inverse))),)

    return fwd, bwd


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


@register("sum")
def _sum():
    def fwd(attrs, a):
        return a.sum(axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def bwd(attrs, saved, g, a):
        axes = _reduce_axes(attrs["axis"], a.ndim)
        return (_expand_reduced(g, a.shape, axes, attrs["keepdims"]).copy(),)

    return fwd, bwd


@register("mean")
def _mean():
    def fwd(attrs, a):
        return a.mean(axis=attrs["axis"], keepdims=attrs["keepdims"]), None

    def bwd(attrs, saved, g, a):
        axes = _reduce_axes(attrs["axis"], a.ndim)
        count = int(np.prod([a.shape[i] for i in axes]))
        return (_expand_reduced(g, a.shape, axes, attrs["keepdims"]) / count,)

    return fwd, bwd


@register("rnn_scan")
def _rnn_scan():
    # x [T, B, I] -> hidden states [T, B, H]; see kernels_numpy for layouts.
    def fwd(attrs, x, w_in, w_h, b):
        kind = attrs["cell"]
        if x.ndim != 3:
            raise ValueError(f"rnn_scan: needs [T, B, I] input, got {x.shape}")
        mult = 3 if kind == "gru" else 1
        hdim = w_h.shape[1]
        if w_in.shape != (mult * hdim, x.shape[2]) or w_h.shape[0] != mult * hdim \
                or b.shape != (mult * hdim,):
            _shape_error("rnn_scan", w_in.shape, w_h.shape)
        k = backend.kernels()
        if kind == "gru":
            hs, rs, zs, ns, hns = k.gru_forward(x, w_in, w_h, b, attrs["reverse"])
            return hs, (hs, rs, zs, ns, hns)
        act = 1 if kind == "tanh" else 0
        hs = k.scan_forward(x, w_in, w_h, b, attrs["reverse"], act)
        return hs, hs

    def bwd(attrs, saved, g, x, w_in, w_h, b):
        g = np.ascontiguousarray(g)
        k = backend.kernels()
        if attrs["cell"] == "gru":
            hs, rs, zs, ns, hns = saved
            return k.gru_backward(x, w_in, w_h, hs, rs, zs, ns, hns, g, attrs["reverse"])
        act = 1 if attrs["cell"] == "tanh" else 0
        return k.scan_backward(x, w_in, w_h, saved, g, attrs["reverse"], act)

    return fwd, bwd


# ---------------------------------------------------------------------------
# Convenience wrappers
# ---------------------------------------------------------------------------

def add(a, b):
    return apply_primitive("add", (a, b))


def subtract(a, b):
    return apply_primitive("subtract", (a, b))


def multiply(a, b):
    return apply_primitive("multiply", (a, b))


def scalar_mul(a, c):
    return apply_primitive("scalar_mul", (a,), {"c": float(c)})


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def conv2d(x, w, stride=1, pad=0):
    return apply_primitive("conv2d", (x, w), {"stride": stride, "pad": pad})


def maxpool2(x):
    return apply_primitive("maxpool2", (x,))


def global_avg_pool(x):
    return apply_primitive("global_avg_pool", (x,))


def tanh(x):
    return apply_primitive("tanh", (x,))


def sigmoid(x):
    return apply_primitive("sigmoid", (x,))


def exp(x):
    return apply_primitive("exp", (x,))


def sqrt(x):
    return apply_primitive("sqrt", (x,))


def square(x):
    return apply_primitive("square", (x,))


def log(x):
    return apply_primitive("log", (x,))


def leaky_relu(x, alpha=0.1):
    return apply_primitive("leaky_relu", (x,), {"alpha": alpha})


def clip(x, lo, hi):
    return apply_primitive("clip", (x,), {"lo": float(lo), "hi": float(hi)})


def softmax(x):
    return apply_primitive("softmax", (x,))


def concat(tensors, axis):
    return apply_primitive("concat", tuple(tensors), {"axis": axis})


def slice_tensor(x, bounds):
    return apply_primitive("slice", (x,), {"bounds": tuple(bounds)})


def take_rows(x, indices):
    return apply_primitive("take_rows", (x,), {"indices": tuple(int(i) for i in indices)})


def rnn_scan(x, w_in, w_h, b, reverse=False, cell="tanh"):
    return apply_primitive(
        "rnn_scan", (x, w_in, w_h, b), {"reverse": bool(reverse), "cell": cell}
    )


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------

def gradient_check(function, points, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``function`` maps the tensors in ``points`` to a scalar Tensor and must be
    deterministic. Error is |analytic - numeric| / max(1, |numeric|), maxed
    over every coordinate of every point.
    """
    if not 0 < eps <= 1e-3:
        raise ValueError(f"gradient_check: eps must be in (0, 1e-3], got {eps}")
    if isinstance(points, Tensor):
        points = [points]
    for p in points:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        out = function(*points)
        if out.data.size != 1:
            raise ValueError("gradient_check: function must be scalar-valued")
        backward(out, tape)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in points]

    worst = 0.0
    for p, ana in zip(points, analytic):
        flat = p.data.reshape(-1)
        ana = ana.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(function(*points).data)
            flat[i] = orig - eps
            lo = float(function(*points).data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(1.0, abs(numeric))
            if err > worst:
                worst = err
    return worst
