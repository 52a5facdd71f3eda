"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every operation builds a node holding its parents and a closure that maps the
output adjoint to parent adjoints. backward() walks the graph once in reverse
topological order, accumulating adjoints in a scratch table and only then
adding them into each tensor's grad field, so repeated backward calls without
clearing compose additively.

Tensors wrap float32 arrays during training; gradient checking runs the same
graphs in float64. Elementwise binary ops accept a tensor of identical shape
or a python scalar; there is no other broadcasting.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    pass


class InvalidAttribute(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars allowed on either side
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor_like(other, self), self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)


def _as_tensor_like(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(ref.shape, float(x), dtype=ref.dtype))


def _node(values, parents, backprop) -> Tensor:
    """Wrap an op result, recording the graph edge only when needed."""
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backprop = backprop
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into t.grad for every requires_grad tensor."""
    if loss.shape != ():
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    # iterative topological sort over the requires_grad subgraph
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(topo):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = np.zeros(node.shape, dtype=node.dtype)
        node.grad = node.grad + g
        if node._backprop is None:
            continue
        for parent, pg in zip(node._parents, node._backprop(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in adjoint:
                adjoint[key] = adjoint[key] + pg
            else:
                adjoint[key] = pg


# ------------------------------------------------------------ elementwise ops


def _binary(a: Tensor, b, fwd, bwd_a, bwd_b):
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(float(b), dtype=a.dtype))
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"operand shapes {a.shape} vs {b.shape}")
    out_values = fwd(a.values, b.values)

    def backprop(g):
        ga = bwd_a(g, a.values, b.values, out_values)
        gb = bwd_b(g, a.values, b.values, out_values)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out_values, (a, b), backprop)


def _unbroadcast(g, shape):
    if g is None or g.shape == shape:
        return g
    # only scalar-vs-tensor mixing is possible here
    return np.sum(g).reshape(shape) if shape == () else g * np.ones(shape, g.dtype)


def add(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary(
        a, b, lambda x, y: x * y, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x
    )


def div(a: Tensor, b) -> Tensor:
    return _binary(
        a,
        b,
        lambda x, y: x / y,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * x / (y * y),
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.values * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    return _node(a.values * a.values, (a,), lambda g: (g * 2.0 * a.values,))


def tanh(a: Tensor) -> Tensor:
    out_values = np.tanh(a.values)
    return _node(out_values, (a,), lambda g: (g * (1.0 - out_values * out_values),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.values > 0
    return _node(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.values)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.values.size:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}")
    return _node(a.values.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# -------------------------------------------------------------------- reduce


def sum_all(a: Tensor) -> Tensor:
    return _node(
        np.sum(a.values), (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),)
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.values.size
    return _node(
        np.mean(a.values),
        (a,),
        lambda g: ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),),
    )


def _reduce_extreme(a: Tensor, argfn, valfn) -> Tensor:
    # gradient routes to the first extremal element, matching numpy argmin/argmax
    flat_idx = argfn(a.values)

    def backprop(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        ga.ravel()[flat_idx] = g
        return (ga,)

    return _node(valfn(a.values), (a,), backprop)


def reduce_min(a: Tensor) -> Tensor:
    return _reduce_extreme(a, np.argmin, np.min)


def reduce_max(a: Tensor) -> Tensor:
    return _reduce_extreme(a, np.argmax, np.max)


# ------------------------------------------------------------- shape plumbing


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeMismatch("concat of nothing")
    ndim = tensors[0].values.ndim
    if not 0 <= axis < ndim:
        raise InvalidAttribute(f"concat axis {axis} out of range")
    for t in tensors[1:]:
        if t.values.ndim != ndim:
            raise ShapeMismatch("concat rank mismatch")
        for ax in range(ndim):
            if ax != axis and t.shape[ax] != tensors[0].shape[ax]:
                raise ShapeMismatch(f"concat dims differ off-axis: {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backprop(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.values for t in tensors], axis=axis), tensors, backprop)


def slice_view(a: Tensor, axis: int, index: int) -> Tensor:
    if not 0 <= axis < a.values.ndim:
        raise InvalidAttribute(f"slice axis {axis} out of range for {a.shape}")
    if not 0 <= index < a.shape[axis]:
        raise InvalidAttribute(f"slice index {index} out of range for {a.shape}")
    sel = (slice(None),) * axis + (index,)

    def backprop(g):
        ga = np.zeros(a.shape, dtype=a.dtype)
        ga[sel] = g
        return (ga,)

    return _node(a.values[sel].copy(), (a,), backprop)


# -------------------------------------------------------------------- matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeMismatch("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims {a.shape} @ {b.shape}")

    def backprop(g):
        ga = g @ b.values.T if a.requires_grad else None
        gb = a.values.T @ g if b.requires_grad else None
        return ga, gb

    return _node(a.values @ b.values, (a, b), backprop)


# --------------------------------------------------------------- convolution


def _conv_prep(x_shape, w_shape, stride, padding, ndim_sp):
    """Resolve padding/stride and output spatial dims for conv2d/conv3d."""
    if len(w_shape) != ndim_sp + 2 or len(x_shape) != ndim_sp + 1:
        raise ShapeMismatch(f"conv operand ranks {x_shape} / {w_shape}")
    c_in = x_shape[0]
    if w_shape[1] != c_in:
        raise ShapeMismatch(f"kernel expects {w_shape[1]} input channels, got {c_in}")
    if stride < 1:
        raise InvalidAttribute(f"stride must be >= 1, got {stride}")
    kdims = w_shape[2:]
    if padding == "valid":
        pads = (0,) * ndim_sp
    elif padding == "same":
        if stride != 1:
            raise InvalidAttribute("same padding requires stride 1")
        if any(k % 2 == 0 for k in kdims):
            raise InvalidAttribute("same padding requires odd kernel dims")
        pads = tuple((k - 1) // 2 for k in kdims)
    elif isinstance(padding, int):
        if padding < 0:
            raise InvalidAttribute("padding must be >= 0")
        pads = (padding,) * ndim_sp
    else:
        raise InvalidAttribute(f"padding {padding!r} not understood")
    out_sp = []
    for dim, k, p in zip(x_shape[1:], kdims, pads):
        span = dim + 2 * p - k
        if span < 0:
            raise ShapeMismatch(f"kernel {kdims} larger than padded input {x_shape}")
        out_sp.append(span // stride + 1)
    return pads, tuple(out_sp)


def _conv_nd(x: Tensor, w: Tensor, bias, stride, padding, ndim_sp):
    """Shift-and-GEMM n-D convolution (cross-correlation, as usual)."""
    if bias is not None and bias.shape != (w.shape[0],):
        raise ShapeMismatch(f"bias shape {bias.shape} vs {w.shape[0]} out channels")
    pads, out_sp = _conv_prep(x.shape, w.shape, stride, padding, ndim_sp)
    kdims = w.shape[2:]
    c_out = w.shape[0]

    pad_width = ((0, 0),) + tuple((p, p) for p in pads)
    xp = np.pad(x.values, pad_width) if any(pads) else x.values

    def tap_slices(offsets):
        return (slice(None),) + tuple(
            slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(offsets, out_sp)
        )

    taps = list(np.ndindex(*kdims))
    acc = np.zeros((c_out,) + out_sp, dtype=x.dtype)
    for t in taps:
        acc += np.tensordot(w.values[(slice(None), slice(None)) + t], xp[tap_slices(t)], axes=(1, 0))
    if bias is not None:
        acc += bias.values.reshape((c_out,) + (1,) * ndim_sp)

    parents = (x, w) if bias is None else (x, w, bias)

    def backprop(g):
        sp_axes = tuple(range(1, ndim_sp + 1))
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for t in taps:
                kernel_tap = w.values[(slice(None), slice(None)) + t]
                gxp[tap_slices(t)] += np.tensordot(kernel_tap, g, axes=(0, 0))
            if any(pads):
                crop = (slice(None),) + tuple(
                    slice(p, p + n) for p, n in zip(pads, x.shape[1:])
                )
                gx = gxp[crop]
            else:
                gx = gxp
        if w.requires_grad:
            gw = np.zeros_like(w.values)
            for t in taps:
                gw[(slice(None), slice(None)) + t] = np.tensordot(
                    g, xp[tap_slices(t)], axes=(sp_axes, sp_axes)
                )
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=sp_axes)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _node(acc, parents, backprop)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding="valid") -> Tensor:
    """(C_in, H, W) * (C_out, C_in, kh, kw) -> (C_out, H', W')."""
    return _conv_nd(x, w, bias, stride, padding, 2)


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding="valid") -> Tensor:
    """(C_in, D, H, W) * (C_out, C_in, kd, kh, kw) -> (C_out, D', H', W')."""
    return _conv_nd(x, w, bias, stride, padding, 3)


# ------------------------------------------------------------------- pooling


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling on (C, H, W); window == stride == size."""
    if size < 1:
        raise InvalidAttribute("pool size must be >= 1")
    if x.values.ndim != 3:
        raise ShapeMismatch(f"max_pool2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatch(f"spatial dims {h}x{w} not divisible by pool {size}")
    ho, wo = h // size, w // size
    windows = x.values.reshape(c, ho, size, wo, size).transpose(0, 1, 3, 2, 4)
    flat = windows.reshape(c, ho, wo, size * size)
    arg = np.argmax(flat, axis=-1)  # ties resolve to the first element
    out_values = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backprop(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gx = (
            gflat.reshape(c, ho, wo, size, size)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, h, w)
        )
        return (gx,)

    return _node(out_values, (x,), backprop)


def nearest_upsample3d(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each voxel of (C, D, H, W) `factor` times along each spatial axis."""
    if factor < 1:
        raise InvalidAttribute("upsample factor must be >= 1")
    if x.values.ndim != 4:
        raise ShapeMismatch(f"nearest_upsample3d expects (C, D, H, W), got {x.shape}")
    out_values = x.values
    for axis in (1, 2, 3):
        out_values = np.repeat(out_values, factor, axis=axis)
    c, d, h, w = x.shape

    def backprop(g):
        gx = g.reshape(c, d, factor, h, factor, w, factor).sum(axis=(2, 4, 6))
        return (gx,)

    return _node(out_values, (x,), backprop)


# ------------------------------------------------------------- normalization


INSTANCE_NORM_EPS = 1e-5


def instance_norm3d(
    x: Tensor,
    gamma: Tensor | None = None,
    beta: Tensor | None = None,
    eps: float = INSTANCE_NORM_EPS,
) -> Tensor:
    """Per-channel standardization of (C, D, H, W) over its spatial extent.

    Optional per-channel affine (gamma, beta) is folded into the op because
    the engine deliberately has no general broadcasting.
    """
    if x.values.ndim != 4:
        raise ShapeMismatch(f"instance_norm3d expects (C, D, H, W), got {x.shape}")
    if eps <= 0:
        raise InvalidAttribute("eps must be positive")
    c = x.shape[0]
    for t, name in ((gamma, "gamma"), (beta, "beta")):
        if t is not None and t.shape != (c,):
            raise ShapeMismatch(f"{name} shape {t.shape}, want ({c},)")
    sp = (1, 2, 3)
    mu = x.values.mean(axis=sp, keepdims=True)
    var = ((x.values - mu) ** 2).mean(axis=sp, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv_std
    out_values = xhat
    if gamma is not None:
        out_values = out_values * gamma.values.reshape(c, 1, 1, 1)
    if beta is not None:
        out_values = out_values + beta.values.reshape(c, 1, 1, 1)

    parents = [x]
    if gamma is not None:
        parents.append(gamma)
    if beta is not None:
        parents.append(beta)

    def backprop(g):
        gh = g if gamma is None else g * gamma.values.reshape(c, 1, 1, 1)
        mean_gh = gh.mean(axis=sp, keepdims=True)
        mean_gh_xhat = (gh * xhat).mean(axis=sp, keepdims=True)
        gx = inv_std * (gh - mean_gh - xhat * mean_gh_xhat)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=sp))
        if beta is not None:
            grads.append(g.sum(axis=sp))
        return tuple(grads)

    return _node(out_values, tuple(parents), backprop)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise InvalidAttribute(f"dropout probability {p} outside [0, 1)")
    if p == 0.0:
        return _node(x.values.copy(), (x,), lambda g: (g,))
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    return _node(x.values * keep, (x,), lambda g: (g * keep,))


# ----------------------------------------------------------- gradient checks


FD_STEP = 1e-3


def check_gradients(builder, shapes, seed: int) -> float:
    """Compare analytic gradients with central finite differences.

    builder maps a list of float64 input tensors (requires_grad=True) to a
    scalar loss and must be a pure function of those inputs. Inputs are drawn
    uniformly from [-1, 1] excluding (-0.02, 0.02), which keeps ReLU-style
    kinks at least 1e-2 away. Returns the max over all input elements of
    |g_analytic - g_fd| / max(1e-8, |g_analytic| + |g_fd|).
    """
    rng = np.random.default_rng(seed)
    inputs = []
    for shape in shapes:
        vals = rng.uniform(-1.0, 1.0, size=shape)
        small = np.abs(vals) < 0.02
        while np.any(small):
            vals[small] = rng.uniform(-1.0, 1.0, size=int(small.sum()))
            small = np.abs(vals) < 0.02
        inputs.append(Tensor(vals.astype(np.float64), requires_grad=True))

    loss = builder(inputs)
    if loss.shape != ():
        raise NonScalarLoss("builder must produce a scalar loss")
    for t in inputs:
        t.zero_grad()
    backward(loss)

    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad
        flat = t.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            f_plus = float(builder(inputs).values)
            flat[i] = orig - FD_STEP
            f_minus = float(builder(inputs).values)
            flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * FD_STEP)
            g_an = float(analytic.reshape(-1)[i])
            err = abs(g_an - g_fd) / max(1e-8, abs(g_an) + abs(g_fd))
            worst = max(worst, err)
    return worst
