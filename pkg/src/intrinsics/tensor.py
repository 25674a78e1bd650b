"""Minimal dense tensor with recorded-operation reverse-mode differentiation.

Everything runs on 64-bit floats.  Each primitive that sees a tensor with
``requires_grad`` records itself (op kind, parents, adjoint closure) on the
output; ``backward`` traces the recorded applications from a scalar root in
topological order and accumulates gradients into every participating tensor.
The graph is rebuilt on every forward pass (define-by-run), and a graph plus
its tensors belong to a single thread.

Broadcasting is limited to scalar-vs-tensor; any other shape mismatch is a
hard error naming the op and both shapes.
"""

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "DomainError", "GraphError",
    "apply_primitive", "backward", "finite_diff_check",
    "conv2d", "maxpool2x2", "upsample2x", "concat_channels",
    "pad_replicate", "bilinear_warp", "clamp_min", "clamp_max", "sigmoid",
]


class ShapeError(ValueError):
    """Input shapes do not conform to the primitive's shape rule."""


class DomainError(ValueError):
    """A primitive was fed values outside its mathematical domain."""


class GraphError(RuntimeError):
    """The differentiation contract was violated (e.g. non-scalar root)."""


def _as_array(data):
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """Dense float64 array plus gradient bookkeeping.

    ``grad`` is a same-shape buffer allocated whenever ``requires_grad`` is
    set; ``backward`` accumulates into it, so callers reset with
    ``zero_grad`` between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._op = None          # primitive kind that produced this tensor
        self._parents = ()       # input tensors of that primitive
        self._backward = None    # adjoint closure; None for leaves

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{op})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self):
        """Copy of the values, cut loose from any recorded graph."""
        return Tensor(self.data.copy())

    def item(self):
        if self.data.size != 1:
            raise GraphError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ----------------------------------------------------

    def __add__(self, other):
        return _binary("add", self, other, lambda a, b: a + b,
                       lambda g, a, b: g, lambda g, a, b: g)

    __radd__ = __add__

    def __sub__(self, other):
        return _binary("sub", self, other, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __rsub__(self, other):
        return _binary("sub", _lift(other), self, lambda a, b: a - b,
                       lambda g, a, b: g, lambda g, a, b: -g)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_mul(self, float(other))
        return _binary("mul", self, other, lambda a, b: a * b,
                       lambda g, a, b: g * b, lambda g, a, b: g * a)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return _scalar_mul(self, 1.0 / float(other))
        return _binary("div", self, other, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __rtruediv__(self, other):
        return _binary("div", _lift(other), self, lambda a, b: a / b,
                       lambda g, a, b: g / b, lambda g, a, b: -g * a / (b * b))

    def __neg__(self):
        return _scalar_mul(self, -1.0)

    def __pow__(self, p):
        return self.power(p)

    def __matmul__(self, other):
        other = _lift(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
        return _make("matmul", (self, other), a @ b,
                     lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, key):
        _check_basic_key(key)
        out_data = self.data[key]
        src_shape = self.data.shape

        def adjoint(g):
            full = np.zeros(src_shape)
            full[key] += g
            return (full,)

        return _make("slice", (self,), np.array(out_data, copy=True), adjoint)

    # -- elementwise ---------------------------------------------------

    def relu(self):
        mask = self.data > 0  # subgradient at 0 is 0
        return _make("relu", (self,), np.where(mask, self.data, 0.0),
                     lambda g: (g * mask,))

    def abs(self):
        sign = np.sign(self.data)  # sign(0) = 0: deterministic subgradient
        return _make("abs", (self,), np.abs(self.data), lambda g: (g * sign,))

    __abs__ = abs

    def square(self):
        a = self.data
        return _make("square", (self,), a * a, lambda g: (2.0 * a * g,))

    def sqrt(self):
        if np.any(self.data < 0):
            raise DomainError("sqrt of negative input")
        root = np.sqrt(self.data)
        return _make("sqrt", (self,), root, lambda g: (g * 0.5 / root,))

    def log(self):
        if np.any(self.data <= 0):
            raise DomainError("log of non-positive input")
        a = self.data
        return _make("log", (self,), np.log(a), lambda g: (g / a,))

    def exp(self):
        e = np.exp(self.data)
        return _make("exp", (self,), e, lambda g: (g * e,))

    def power(self, p):
        p = float(p)
        a = self.data
        if p != int(p) and np.any(a < 0):
            raise DomainError(f"power: negative base with fractional exponent {p}")
        return _make("power", (self,), a ** p,
                     lambda g: (g * p * a ** (p - 1.0),))

    # -- reductions / shape --------------------------------------------

    def sum(self, axis=None):
        """Full reduction, or axis=0 for a leading-axis (channel) reduce."""
        if axis is None:
            shape = self.data.shape
            return _make("sum", (self,), np.array(self.data.sum()),
                         lambda g: (np.broadcast_to(g, shape).copy(),))
        if axis != 0:
            raise ShapeError(f"sum: only axis=None or axis=0 supported, got {axis}")
        n0 = self.data.shape[0]
        return _make("sum", (self,), self.data.sum(axis=0),
                     lambda g: (np.broadcast_to(g, (n0,) + g.shape).copy(),))

    def mean(self, axis=None):
        if axis is None:
            return self.sum() * (1.0 / self.data.size)
        return self.sum(axis=axis) * (1.0 / self.data.shape[axis])

    def reshape(self, shape):
        src = self.data.shape
        if int(np.prod(shape)) != self.data.size:
            raise ShapeError(f"reshape: cannot view shape {src} as {tuple(shape)}")
        return _make("reshape", (self,), self.data.reshape(shape),
                     lambda g: (g.reshape(src),))


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _scalar_mul(t, c):
    return _make("scalar-mul", (t,), t.data * c, lambda g: (g * c,))


def _check_finite(kind, data):
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{kind}: produced non-finite values")


def _make(kind, parents, out_data, adjoint):
    """Wrap a primitive's forward result, recording the adjoint if needed."""
    _check_finite(kind, out_data)
    out = Tensor(out_data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._op = kind
        out._parents = tuple(parents)

        def run():
            grads = adjoint(out.grad)
            for parent, g in zip(out._parents, grads):
                if parent.requires_grad and g is not None:
                    parent.grad += g

        out._backward = run
    return out


def _binary(kind, a, b, fwd, dfda, dfdb):
    a, b = _lift(a), _lift(b)
    da, db = a.data, b.data
    if da.shape != db.shape and da.size != 1 and db.size != 1:
        raise ShapeError(f"{kind}: shapes {da.shape} and {db.shape} do not conform")

    def adjoint(g):
        ga = dfda(g, da, db)
        gb = dfdb(g, da, db)
        # fold scalar-vs-tensor broadcasting back down
        if da.shape != ga.shape:
            ga = np.asarray(ga.sum()).reshape(da.shape)
        if db.shape != gb.shape:
            gb = np.asarray(gb.sum()).reshape(db.shape)
        return ga, gb

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = fwd(da, db)
    return _make(kind, (a, b), out, adjoint)


def _check_basic_key(key):
    parts = key if isinstance(key, tuple) else (key,)
    for part in parts:
        if not isinstance(part, (int, slice, type(Ellipsis))):
            raise ShapeError("slice: only basic indexing (ints/slices) is supported")


# -- spatial primitives (C,H,W layout) ---------------------------------


def conv2d(x, weight, bias=None, stride=1, pad=0, dilation=1):
    """2-D convolution of a (C,H,W) tensor with an (O,C,kh,kw) kernel.

    Zero padding; an optional (O,) bias is added per output channel.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 3 or wd.ndim != 4 or xd.shape[0] != wd.shape[1]:
        raise ShapeError(f"conv2d: shapes {xd.shape} and {wd.shape} do not conform")
    if bias is not None and bias.data.shape != (wd.shape[0],):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape} does not match "
                         f"{wd.shape[0]} output channels")
    c, h, w = xd.shape
    o, _, kh, kw = wd.shape
    eff_kh = (kh - 1) * dilation + 1
    eff_kw = (kw - 1) * dilation + 1
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < eff_kh or wp < eff_kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than "
                         f"effective kernel {eff_kh}x{eff_kw}")
    ho = (hp - eff_kh) // stride + 1
    wo = (wp - eff_kw) // stride + 1

    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad))) if pad else xd
    cols = np.empty((c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            di, dj = i * dilation, j * dilation
            cols[:, i, j] = xp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride]
    cols2 = cols.reshape(c * kh * kw, ho * wo)
    out = (wd.reshape(o, -1) @ cols2).reshape(o, ho, wo)
    if bias is not None:
        out = out + bias.data[:, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def adjoint(g):
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols2.T).reshape(wd.shape)
        dcols = (wd.reshape(o, -1).T @ g2).reshape(c, kh, kw, ho, wo)
        gxp = np.zeros((c, hp, wp))
        for i in range(kh):
            for j in range(kw):
                di, dj = i * dilation, j * dilation
                gxp[:, di:di + ho * stride:stride, dj:dj + wo * stride:stride] += dcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return _make("conv2d", parents, out, adjoint)


def maxpool2x2(x):
    """2x2 max pooling with stride 2; ties go to the first element in row-major window order."""
    xd = x.data
    if xd.ndim != 3 or xd.shape[1] % 2 or xd.shape[2] % 2:
        raise ShapeError(f"maxpool2x2: needs (C,even,even), got {xd.shape}")
    c, h, w = xd.shape
    win = xd.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h // 2, w // 2, 4)
    arg = win.argmax(axis=3)  # argmax returns the first maximal element
    out = np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def adjoint(g):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, arg[..., None], g[..., None], axis=3)
        gx = gwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
        return (gx,)

    return _make("maxpool2x2", (x,), out, adjoint)


def upsample2x(x):
    """Nearest-neighbor x2 spatial upsampling of a (C,H,W) tensor."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"nearest-upsample2x: needs (C,H,W), got {xd.shape}")
    out = xd.repeat(2, axis=1).repeat(2, axis=2)
    c, h, w = xd.shape

    def adjoint(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _make("nearest-upsample2x", (x,), out, adjoint)


def concat_channels(*tensors):
    """Concatenate (C_i,H,W) tensors along the channel axis."""
    if len(tensors) < 2:
        raise ShapeError("channel-concat: needs at least two inputs")
    hw = tensors[0].data.shape[1:]
    for t in tensors:
        if t.data.ndim != 3 or t.data.shape[1:] != hw:
            raise ShapeError("channel-concat: shapes "
                             f"{[t.data.shape for t in tensors]} do not conform")
    out = np.concatenate([t.data for t in tensors], axis=0)
    splits = np.cumsum([t.data.shape[0] for t in tensors])[:-1]

    def adjoint(g):
        return tuple(np.array(p, copy=True) for p in np.split(g, splits, axis=0))

    return _make("channel-concat", tensors, out, adjoint)


def pad_replicate(x, p):
    """Replicate-pad the spatial borders of a (C,H,W) tensor by p pixels."""
    xd = x.data
    if xd.ndim != 3:
        raise ShapeError(f"pad-replicate: needs (C,H,W), got {xd.shape}")
    if p < 1:
        raise ShapeError("pad-replicate: pad must be >= 1")
    out = np.pad(xd, ((0, 0), (p, p), (p, p)), mode="edge")
    _, h, w = xd.shape

    def adjoint(g):
        core = g[:, p:p + h, p:p + w].copy()
        core[:, 0, :] += g[:, :p, p:p + w].sum(axis=1)
        core[:, -1, :] += g[:, p + h:, p:p + w].sum(axis=1)
        core[:, :, 0] += g[:, p:p + h, :p].sum(axis=2)
        core[:, :, -1] += g[:, p:p + h, p + w:].sum(axis=2)
        core[:, 0, 0] += g[:, :p, :p].sum(axis=(1, 2))
        core[:, 0, -1] += g[:, :p, p + w:].sum(axis=(1, 2))
        core[:, -1, 0] += g[:, p + h:, :p].sum(axis=(1, 2))
        core[:, -1, -1] += g[:, p + h:, p + w:].sum(axis=(1, 2))
        return (core,)

    return _make("pad-replicate", (x,), out, adjoint)


def bilinear_warp(frame, u, v):
    """Sample frame (C,H,W) at (x+u, y+v); returns (warped tensor, valid mask).

    u and v are plain (H,W) arrays (the flow is data, not differentiated);
    out-of-bounds samples are zero with valid=False.  The warp is linear in
    the frame, so the adjoint scatters the same bilinear weights.
    """
    fd = frame.data
    if fd.ndim != 3 or u.shape != fd.shape[1:] or v.shape != fd.shape[1:]:
        raise ShapeError(f"warp: frame {fd.shape} vs flow {u.shape} do not conform")
    c, h, w = fd.shape
    gy, gx = np.mgrid[0:h, 0:w]
    ys = gy + v
    xs = gx + u
    valid = (ys >= 0) & (ys <= h - 1) & (xs >= 0) & (xs <= w - 1)
    ysc = np.clip(ys, 0, h - 1)
    xsc = np.clip(xs, 0, w - 1)
    y0 = np.floor(ysc).astype(np.int64)
    x0 = np.floor(xsc).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ysc - y0
    wx = xsc - x0
    w00 = (1 - wy) * (1 - wx) * valid
    w01 = (1 - wy) * wx * valid
    w10 = wy * (1 - wx) * valid
    w11 = wy * wx * valid
    out = (w00 * fd[:, y0, x0] + w01 * fd[:, y0, x1]
           + w10 * fd[:, y1, x0] + w11 * fd[:, y1, x1])

    taps = ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11))

    def adjoint(g):
        gf = np.zeros((c, h * w))
        coff = (np.arange(c) * (h * w))[:, None]
        for ty, tx, tw in taps:
            idx = (ty * w + tx).ravel()[None, :] + coff
            np.add.at(gf.ravel(), idx.ravel(), (g * tw).reshape(c, -1).ravel())
        return (gf.reshape(c, h, w),)

    return _make("warp", (frame,), out, adjoint), valid


# -- composites built from the primitives -------------------------------


def clamp_min(x, c):
    """Lower clamp via relu; gradient is 0 at and below the clamp."""
    return (x - c).relu() + c


def clamp_max(x, c):
    return -clamp_min(-x, -c)


def sigmoid(x):
    """Logistic function; pre-activation clamped to [-60, 60] so exp stays finite."""
    z = clamp_max(clamp_min(x, -60.0), 60.0)
    return 1.0 / ((-z).exp() + 1.0)


# -- graph and differentiation ------------------------------------------


class Graph:
    """Topologically ordered list of the recorded applications under a root."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root):
        nodes = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes)


def backward(root):
    """Populate grad = d(root)/d(tensor) for every participating tensor.

    The root must be a scalar.  Gradients accumulate over fan-out and over
    repeated backward calls; use zero_grad between training steps.
    """
    if root.data.size != 1:
        raise GraphError(f"backward: root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    graph = Graph.trace(root)
    root.grad += 1.0
    for t in reversed(graph.nodes):
        if t._backward is not None:
            t._backward()


_PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "scalar-mul": lambda a, c: a * float(c),
    "matmul": lambda a, b: a @ b,
    "conv2d": conv2d,
    "relu": lambda a: a.relu(),
    "maxpool2x2": maxpool2x2,
    "nearest-upsample2x": upsample2x,
    "channel-concat": concat_channels,
    "sum": lambda a, **kw: a.sum(**kw),
    "mean": lambda a, **kw: a.mean(**kw),
    "abs": lambda a: a.abs(),
    "square": lambda a: a.square(),
    "sqrt": lambda a: a.sqrt(),
    "log": lambda a: a.log(),
    "exp": lambda a: a.exp(),
    "power": lambda a, p: a.power(p),
    "slice": lambda a, key: a[key],
    "pad-replicate": pad_replicate,
    "reshape": lambda a, shape: a.reshape(shape),
    "warp": bilinear_warp,
}


def apply_primitive(kind, *inputs, **params):
    """Dispatch a primitive by kind name (the string forms used in graphs)."""
    if kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive kind: {kind!r}")
    return _PRIMITIVES[kind](*inputs, **params)


def finite_diff_check(f, x, eps=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f maps the tensor x to a scalar tensor; x must require grad.  Error per
    element is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise GraphError("finite_diff_check: x must require grad")
    x.zero_grad()
    out = f(x)
    backward(out)
    analytic = x.grad.reshape(-1).copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    for k in range(flat.size):
        orig = flat[k]
        try:
            flat[k] = orig + eps
            fp = f(x).item()
            flat[k] = orig - eps
            fm = f(x).item()
        except (DomainError, ShapeError) as exc:
            raise DomainError(
                f"finite_diff_check: f failed at perturbed element {k}: {exc}") from exc
        finally:
            flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError(f"finite_diff_check: f non-finite at perturbed element {k}")
        numeric = (fp - fm) / (2.0 * eps)
        err = abs(analytic[k] - numeric) / max(1e-8, abs(analytic[k]) + abs(numeric))
        worst = max(worst, err)
    return worst
