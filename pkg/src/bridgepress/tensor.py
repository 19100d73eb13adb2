"""Dense float64 tensors with reverse-mode automatic differentiation.

The models in this package are small, so the engine stays deliberately
minimal: row-major numpy storage, float64 only, and no broadcasting beyond
two explicit rules (python scalars, and an operand whose shape is a trailing
suffix of the other operand's shape). Values must be finite at construction;
anything that goes NaN fails immediately at the op that produced it instead
of ten layers downstream.

Gradients are computed by a topological reverse sweep over the recorded
graph. Each ``backward`` call adds one full pass into every reachable
``.grad`` buffer, so calling it twice accumulates exactly twice the
single-pass gradient; ``ParamSet.zero_grad`` clears buffers between steps.
"""

import contextlib
import hashlib
import itertools

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

_node_ids = itertools.count()
_grad_stack = [True]


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    _grad_stack.append(False)
    try:
        yield
    finally:
        _grad_stack.pop()


def grad_enabled():
    return _grad_stack[-1]


class Tensor:
    """A dense float64 array plus an optional place in a computation record."""

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_vjp")

    def __init__(self, values, requires_grad=False, allow_nonfinite=False):
        arr = np.array(values, dtype=np.float64, order="C")
        self._install(arr, requires_grad, allow_nonfinite)
        self._parents = ()
        self._vjp = None

    def _install(self, arr, requires_grad, allow_nonfinite):
        if not allow_nonfinite and not np.isfinite(arr).all():
            raise ContractError("tensor holds non-finite values")
        arr.setflags(write=False)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)

    @classmethod
    def _result(cls, arr, parents, vjp):
        # Internal fast path: wrap a freshly computed array as a graph node.
        out = cls.__new__(cls)
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out._install(np.ascontiguousarray(arr, dtype=np.float64), track, False)
        out._parents = tuple(parents) if track else ()
        out._vjp = vjp if track else None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        if self.values.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.values.reshape(()))

    def detach(self):
        out = Tensor.__new__(Tensor)
        out.values = self.values
        out.grad = None
        out.requires_grad = False
        out.node_id = next(_node_ids)
        out._parents = ()
        out._vjp = None
        return out

    def assign_(self, new_values):
        """Replace the stored values in place (optimizer use only)."""
        arr = np.ascontiguousarray(new_values, dtype=np.float64)
        if arr.shape != self.values.shape:
            raise DimensionError("assign_ must keep the tensor shape")
        if not np.isfinite(arr).all():
            raise ContractError("update produced non-finite parameter values")
        arr.setflags(write=False)
        self.values = arr

    def backward(self):
        """Accumulate one reverse pass from this scalar into reachable grads."""
        if self.values.size != 1:
            raise ContractError("backward needs a scalar loss")
        if not self.requires_grad:
            return
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        adjoint = {id(self): np.ones_like(self.values)}
        for node in reversed(topo):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.values)
            node.grad = node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg

    # arithmetic sugar -----------------------------------------------------

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

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)


def constant(values):
    return values if isinstance(values, Tensor) else Tensor(values)


def _check_suffix(big, small):
    if big[len(big) - len(small):] != small:
        raise DimensionError(
            "shape %r cannot combine with %r; only python scalars and "
            "trailing-suffix operands broadcast" % (big, small)
        )


def _collapse(g, target_shape):
    # Sum a gradient over the leading axes that broadcasting introduced.
    extra = g.ndim - len(target_shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(a, b, fwd, vjp_pair):
    """Shared shape policy for elementwise two-operand ops."""
    if not isinstance(b, Tensor):
        b = float(b)
        out = fwd(a.values, b)
        da, _ = vjp_pair(a.values, b)
        return Tensor._result(out, (a,), lambda g, da=da: (da(g),))
    if not isinstance(a, Tensor):
        a = constant(a)
    if a.shape != b.shape:
        if a.ndim >= b.ndim:
            _check_suffix(a.shape, b.shape)
        else:
            _check_suffix(b.shape, a.shape)
    out = fwd(a.values, b.values)
    da, db = vjp_pair(a.values, b.values)

    def vjp(g):
        return (
            _collapse(da(g), a.shape) if a.requires_grad else None,
            _collapse(db(g), b.shape) if b.requires_grad else None,
        )

    return Tensor._result(out, (a, b), vjp)


def add(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    return _binary(
        a, b,
        lambda x, y: x + y,
        lambda x, y: (lambda g: g, lambda g: g),
    )


def sub(a, b):
    if not isinstance(a, Tensor):
        a = constant(a)
    return _binary(
        a, b,
        lambda x, y: x - y,
        lambda x, y: (lambda g: g, lambda g: -g),
    )


def mul(a, b):
    if not isinstance(a, Tensor):
        a, b = b, a
    return _binary(
        a, b,
        lambda x, y: x * y,
        lambda x, y: (lambda g: g * y, lambda g: g * x),
    )


def div(a, b):
    if not isinstance(a, Tensor):
        a = constant(a)
    return _binary(
        a, b,
        lambda x, y: x / y,
        lambda x, y: (lambda g: g / y, lambda g: -g * x / (y * y)),
    )


def power(a, p):
    p = float(p)
    x = a.values
    out = x ** p
    return Tensor._result(out, (a,), lambda g: (g * p * x ** (p - 1.0),))


def exp(a):
    out = np.exp(a.values)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a):
    out = np.log(a.values)
    x = a.values
    return Tensor._result(out, (a,), lambda g: (g / x,))


def sqrt(a):
    out = np.sqrt(a.values)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,))


def absolute(a):
    x = a.values
    return Tensor._result(np.abs(x), (a,), lambda g: (g * np.sign(x),))


def relu(a):
    x = a.values
    mask = x > 0.0
    return Tensor._result(np.where(mask, x, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    x = a.values
    factor = np.where(x > 0.0, 1.0, slope)
    return Tensor._result(x * factor, (a,), lambda g: (g * factor,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-a.values))
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.values)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),))


def _unreduce(g, shape, axis, keepdims):
    g = np.asarray(g)
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    out = a.values.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        return (_unreduce(g, shape, axis, keepdims),)

    return Tensor._result(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    out = a.values.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.values.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        return (_unreduce(np.asarray(g) / n, shape, axis, keepdims),)

    return Tensor._result(out, (a,), vjp)


def reshape(a, shape):
    shape = tuple(int(s) for s in shape)
    old = a.shape
    out = a.values.reshape(shape)
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    axes = tuple(int(ax) for ax in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError("transpose axes %r do not permute %d dims" % (axes, a.ndim))
    inverse = tuple(np.argsort(axes))
    out = np.transpose(a.values, axes)
    return Tensor._result(out, (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=axis))

    return Tensor._result(out, tuple(tensors), vjp)


def crop2d(a, height, width):
    """Keep the top-left height x width window of a (B, C, H, W) tensor."""
    if a.ndim != 4:
        raise DimensionError("crop2d expects a 4-d tensor")
    b, c, h, w = a.shape
    if height > h or width > w:
        raise DimensionError("crop2d cannot enlarge (%d, %d) -> (%d, %d)" % (h, w, height, width))
    out = a.values[:, :, :height, :width]

    def vjp(g):
        full = np.zeros((b, c, h, w))
        full[:, :, :height, :width] = g
        return (full,)

    return Tensor._result(out, (a,), vjp)


def matmul(a, b):
    """Matrix product for 2-d pairs, leading-batch 3-d pairs, and 3-d x 2-d."""
    a = constant(a)
    b = constant(b)
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise DimensionError("matmul inner extents %r vs %r" % (av.shape, bv.shape))
        out = av @ bv

        def vjp(g):
            return (
                g @ bv.T if a.requires_grad else None,
                av.T @ g if b.requires_grad else None,
            )

    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise DimensionError("batched matmul extents %r vs %r" % (av.shape, bv.shape))
        out = av @ bv

        def vjp(g):
            return (
                g @ bv.transpose(0, 2, 1) if a.requires_grad else None,
                av.transpose(0, 2, 1) @ g if b.requires_grad else None,
            )

    elif av.ndim == 3 and bv.ndim == 2:
        if av.shape[2] != bv.shape[0]:
            raise DimensionError("matmul inner extents %r vs %r" % (av.shape, bv.shape))
        out = av @ bv

        def vjp(g):
            return (
                g @ bv.T if a.requires_grad else None,
                np.tensordot(av, g, axes=([0, 1], [0, 1])) if b.requires_grad else None,
            )

    else:
        raise DimensionError("matmul supports 2d*2d, 3d*3d, 3d*2d; got %dd*%dd" % (av.ndim, bv.ndim))
    return Tensor._result(out, (a, b), vjp)


def softmax(a, axis=-1):
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError("softmax axis %d invalid for %d dims" % (axis, a.ndim))
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._result(out, (a,), vjp)


def layer_norm(a, scale=None, offset=None, eps=1e-5):
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if a.ndim == 0 or a.shape[-1] == 0:
        raise DimensionError("layer_norm needs a non-empty last axis")
    d = a.shape[-1]
    for name, t in (("scale", scale), ("offset", offset)):
        if t is not None and t.shape != (d,):
            raise DimensionError("layer_norm %s must have shape (%d,)" % (name, d))
    x = a.values
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    sv = scale.values if scale is not None else None
    out = xhat if sv is None else xhat * sv
    if offset is not None:
        out = out + offset.values

    parents = [a] + [t for t in (scale, offset) if t is not None]

    def vjp(g):
        gh = g if sv is None else g * sv
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if scale is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if offset is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return tuple(grads)

    return Tensor._result(out, tuple(parents), vjp)


def linear(x, w, b=None):
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def _split_heads(t, heads):
    if t.ndim == 2:
        s, e = t.shape
        return transpose(reshape(t, (s, heads, e // heads)), (1, 0, 2))
    b, s, e = t.shape
    return reshape(
        transpose(reshape(t, (b, s, heads, e // heads)), (0, 2, 1, 3)),
        (b * heads, s, e // heads),
    )


def _merge_heads(t, heads, batched):
    if not batched:
        h, s, hd = t.shape
        return reshape(transpose(t, (1, 0, 2)), (s, h * hd))
    bh, s, hd = t.shape
    b = bh // heads
    return reshape(
        transpose(reshape(t, (b, heads, s, hd)), (0, 2, 1, 3)),
        (b, s, heads * hd),
    )


def multi_head_attention(q, k, v, heads, params):
    """Scaled dot-product attention with ``heads`` parallel heads.

    ``q``/``k``/``v`` are either all (S, E) or all (B, S, E); ``params`` maps
    wq, wk, wv, wo to (E, E) tensors and bq, bk, bv, bo to (E,) tensors. The
    output has q's shape. Scaling is 1/sqrt(E / heads).
    """
    e = q.shape[-1]
    if e % heads != 0:
        raise ConfigurationError("embedding dim %d not divisible by %d heads" % (e, heads))
    if k.shape[-1] != e or v.shape[-1] != e:
        raise DimensionError("q/k/v embedding dims differ")
    if k.shape != v.shape:
        raise DimensionError("k and v must agree in shape")
    if q.ndim != k.ndim or q.ndim not in (2, 3):
        raise DimensionError("q/k/v must all be 2-d or all be 3-d")
    if q.ndim == 3 and q.shape[0] != k.shape[0]:
        raise DimensionError("q and k/v batch extents differ")
    batched = q.ndim == 3
    qh = _split_heads(linear(q, params["wq"], params.get("bq")), heads)
    kh = _split_heads(linear(k, params["wk"], params.get("bk")), heads)
    vh = _split_heads(linear(v, params["wv"], params.get("bv")), heads)
    scale = 1.0 / np.sqrt(e // heads)
    scores = mul(matmul(qh, transpose(kh, (0, 2, 1))), scale)
    attn = softmax(scores, axis=-1)
    ctx = _merge_heads(matmul(attn, vh), heads, batched)
    return linear(ctx, params["wo"], params.get("bo"))


def conv2d(x, w, b=None, stride=1, padding=0):
    """Cross-correlation of (B, C, H, W) input with (O, C, kh, kw) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    bs, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise DimensionError("conv2d channel mismatch: input %d, kernel %d" % (c, cw))
    s, p = int(stride), int(padding)
    oh = (h + 2 * p - kh) // s + 1
    ow = (wd + 2 * p - kw) // s + 1
    if oh < 1 or ow < 1:
        raise DimensionError("conv2d output would be empty for input %r" % (x.shape,))
    xp = np.pad(x.values, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.values
    wv = w.values
    out = np.zeros((bs, o, oh, ow))
    for di in range(kh):
        for dj in range(kw):
            xs = xp[:, :, di:di + s * oh:s, dj:dj + s * ow:s]
            out += np.tensordot(xs, wv[:, :, di, dj], axes=([1], [1])).transpose(0, 3, 1, 2)
    if b is not None:
        if b.shape != (o,):
            raise DimensionError("conv2d bias must have shape (%d,)" % o)
        out += b.values.reshape(1, o, 1, 1)
    x_req, w_req = x.requires_grad, w.requires_grad
    b_req = b is not None and b.requires_grad

    def vjp(g):
        dx = dw = db = None
        if w_req:
            dw = np.zeros_like(wv)
            for di in range(kh):
                for dj in range(kw):
                    xs = xp[:, :, di:di + s * oh:s, dj:dj + s * ow:s]
                    dw[:, :, di, dj] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
        if x_req:
            dxp = np.zeros_like(xp)
            for di in range(kh):
                for dj in range(kw):
                    contrib = np.tensordot(g, wv[:, :, di, dj], axes=([1], [0]))
                    dxp[:, :, di:di + s * oh:s, dj:dj + s * ow:s] += contrib.transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        if b_req:
            db = g.sum(axis=(0, 2, 3))
        grads = (dx, dw) if b is None else (dx, dw, db)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, vjp)


def upsample2x(x):
    """Nearest-neighbour doubling of the spatial axes of (B, C, H, W)."""
    if x.ndim != 4:
        raise DimensionError("upsample2x expects a 4-d tensor")
    bs, c, h, w = x.shape
    out = x.values.repeat(2, axis=2).repeat(2, axis=3)

    def vjp(g):
        return (g.reshape(bs, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return Tensor._result(out, (x,), vjp)


def add_channel_bias(x, bias):
    """Add a per-channel bias, shaped (C,) or (B, C), to a (B, C, H, W) map."""
    if x.ndim != 4:
        raise DimensionError("add_channel_bias expects a 4-d tensor")
    if bias.ndim == 1:
        if bias.shape[0] != x.shape[1]:
            raise DimensionError("bias channels %d vs input %d" % (bias.shape[0], x.shape[1]))
        out = x.values + bias.values.reshape(1, -1, 1, 1)

        def vjp(g):
            return (g, g.sum(axis=(0, 2, 3)))

    elif bias.ndim == 2:
        if bias.shape != x.shape[:2]:
            raise DimensionError("bias shape %r vs input %r" % (bias.shape, x.shape))
        out = x.values + bias.values[:, :, None, None]

        def vjp(g):
            return (g, g.sum(axis=(2, 3)))

    else:
        raise DimensionError("bias must be 1-d or 2-d")
    return Tensor._result(out, (x, bias), vjp)


def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy on raw logits.

    Mathematically -t*log(sigmoid(x)) - (1-t)*log(1-sigmoid(x)), computed in
    the standard overflow-free form. ``target`` may be a tensor of the same
    shape or a python float label.
    """
    x = logits.values
    if isinstance(target, Tensor):
        if target.shape != logits.shape:
            raise DimensionError("bce target shape %r vs logits %r" % (target.shape, logits.shape))
        t = target.values
        parents = (logits, target)
    else:
        t = float(target)
        parents = (logits,)
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = 1.0 / (1.0 + np.exp(-x))

    def vjp(g):
        dx = g * (sig - t)
        if len(parents) == 2:
            return (dx, -g * x)
        return (dx,)

    return Tensor._result(out, parents, vjp)


def he_uniform(rng, shape, fan_in):
    """He-style uniform init; spread is tied to fan-in, seeded by the caller."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ParamSet:
    """Named, ordered collection of trainable tensors.

    Iteration order is insertion order, which keeps optimizer state,
    checkpoints, and checksums stable across runs.
    """

    def __init__(self):
        self._items = {}

    def register(self, name, tensor):
        if name in self._items:
            raise ContractError("duplicate parameter name %r" % name)
        if not isinstance(tensor, Tensor) or not tensor.requires_grad:
            raise ContractError("parameter %r must be a tensor requiring grad" % name)
        self._items[name] = tensor
        return tensor

    def merge(self, other, prefix=""):
        for name, t in other.items():
            self.register(prefix + name, t)
        return self

    def __getitem__(self, name):
        return self._items[name]

    def __contains__(self, name):
        return name in self._items

    def __len__(self):
        return len(self._items)

    def names(self):
        return list(self._items)

    def items(self):
        return self._items.items()

    def tensors(self):
        return list(self._items.values())

    def zero_grad(self):
        for t in self._items.values():
            t.grad = None

    def n_parameters(self):
        return sum(t.size for t in self._items.values())

    def state_dict(self):
        return {name: np.array(t.values) for name, t in self._items.items()}

    def load_state_dict(self, state):
        missing = set(self._items) - set(state)
        extra = set(state) - set(self._items)
        if missing or extra:
            raise ContractError(
                "state mismatch: missing %r, unexpected %r" % (sorted(missing), sorted(extra))
            )
        for name, t in self._items.items():
            t.assign_(state[name])

    def checksum(self):
        digest = hashlib.sha256()
        for name, t in self._items.items():
            digest.update(name.encode("utf-8"))
            digest.update(t.values.tobytes())
        return digest.hexdigest()
