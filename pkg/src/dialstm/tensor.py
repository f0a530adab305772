"""Dense float64 tensors with tape-based reverse-mode differentiation.

The graph is define-by-run: every operation whose inputs require gradients
appends one entry to the active tape, and `backward` replays the tape in
exact reverse order. The tape is rebuilt on every forward pass and cleared
by `backward`, which makes weight sharing across depth (the same cell
invoked at many layers) work without special casing: each invocation is a
separate tape entry and gradients accumulate additively on the shared
parameters.

All computation is 64-bit; 32-bit is used only for on-disk storage. Every
op validates its output for finiteness and uses a fixed accumulation order,
so identical inputs give bitwise-identical outputs and gradients.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphError, NumericOverflowError, ShapeError


class Tensor:
    """A dense array with an optional gradient slot.

    Feature maps use [batch, channels, height, width] order; vectors such as
    pooled descriptors or attention maps use [batch, channels] or [channels].
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def accumulate_grad(self, g: np.ndarray) -> None:
        # `+` allocates fresh buffers and nothing mutates .grad in place, so
        # adopting the incoming array without a defensive copy is safe.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _TapeEntry:
    __slots__ = ("opcode", "inputs", "out", "backward_fn")

    def __init__(self, opcode, inputs, out, backward_fn):
        self.opcode = opcode
        self.inputs = inputs
        self.out = out
        self.backward_fn = backward_fn


class Graph:
    """Ordered record of operations; backward visits it strictly reversed."""

    def __init__(self):
        self._tape: list[_TapeEntry] = []
        self.recording_enabled = True

    def __len__(self) -> int:
        return len(self._tape)

    def record(self, entry: _TapeEntry) -> None:
        self._tape.append(entry)

    def clear(self) -> None:
        self._tape.clear()


_active_graph = Graph()


def active_graph() -> Graph:
    return _active_graph


def set_active_graph(graph: Graph) -> Graph:
    """Install `graph` as the recording target; returns the previous one."""
    global _active_graph
    prev = _active_graph
    _active_graph = graph
    return prev


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _active_graph.recording_enabled
        _active_graph.recording_enabled = False
        return self

    def __exit__(self, *exc):
        _active_graph.recording_enabled = self._prev
        return False


def _finish(opcode, inputs, out_data, backward_fn):
    """Validate, wrap, and (when needed) record an op result."""
    if not np.all(np.isfinite(out_data)):
        raise NumericOverflowError(f"{opcode}: non-finite values in output")
    track = _active_graph.recording_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        _active_graph.record(_TapeEntry(opcode, tuple(inputs), out, backward_fn))
    return out


def _shape_err(opcode, *shapes):
    listed = " vs ".join(str(tuple(s)) for s in shapes)
    return ShapeError(f"{opcode}: incompatible shapes {listed}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, inverting numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# element-wise and linear ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_err("add", a.shape, b.shape) from None

    def backward_fn(g):
        a.accumulate_grad(_unbroadcast(g, a.shape))
        b.accumulate_grad(_unbroadcast(g, b.shape))

    return _finish("add", (a, b), out, backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_err("mul", a.shape, b.shape) from None

    def backward_fn(g):
        a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _finish("mul", (a, b), out, backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_err("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward_fn(g):
        a.accumulate_grad(g @ b.data.T)
        b.accumulate_grad(a.data.T @ g)

    return _finish("matmul", (a, b), out, backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0.0)

    def backward_fn(g):
        x.accumulate_grad(g * (x.data > 0.0))

    return _finish("relu", (x,), out, backward_fn)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow warnings for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward_fn(g):
        x.accumulate_grad(g * s * (1.0 - s))

    return _finish("sigmoid", (x,), s, backward_fn)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward_fn(g):
        x.accumulate_grad(g * (1.0 - t * t))

    return _finish("tanh", (x,), t, backward_fn)


def sum_all(x: Tensor) -> Tensor:
    out = x.data.sum().reshape(())

    def backward_fn(g):
        x.accumulate_grad(np.full(x.shape, float(g)))

    return _finish("sum", (x,), out, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward_fn(g):
        x.accumulate_grad(g.reshape(x.shape))

    return _finish("reshape", (x,), out, backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: needs at least one input")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise _shape_err("concat", *[t.shape for t in tensors]) from None
    extents = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(idx)])

    return _finish("concat", tuple(tensors), out, backward_fn)


def slice_along(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    extent = x.shape[axis] if axis < x.data.ndim else None
    if extent is None or not (0 <= start <= stop <= extent):
        raise ShapeError(
            f"slice: range [{start}, {stop}) on axis {axis} invalid for shape {x.shape}"
        )
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        x.accumulate_grad(full)

    return _finish("slice", (x,), out, backward_fn)


def grouped_linear(x: Tensor, w: Tensor) -> Tensor:
    """Block-diagonal linear map: w has shape [groups, s, s], s = n / groups."""
    if w.data.ndim != 3 or w.shape[1] != w.shape[2]:
        raise _shape_err("grouped_linear", x.shape, w.shape)
    groups, s, _ = w.shape
    n = groups * s
    batched = x.data.ndim == 2
    if (batched and x.shape[1] != n) or (not batched and x.shape != (n,)):
        raise _shape_err("grouped_linear", x.shape, w.shape)
    xr = x.data.reshape(-1, groups, s)
    out = np.einsum("bgs,gst->bgt", xr, w.data)
    out = out.reshape(x.shape)

    def backward_fn(g):
        gr = g.reshape(-1, groups, s)
        x.accumulate_grad(np.einsum("bgt,gst->bgs", gr, w.data).reshape(x.shape))
        w.accumulate_grad(np.einsum("bgs,bgt->gst", xr, gr))

    return _finish("grouped_linear", (x, w), out, backward_fn)


def elementwise_affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """w * x + b with per-element weight and bias vectors of length n."""
    n = x.shape[-1] if x.data.ndim in (1, 2) else None
    if n is None or w.shape != (n,) or b.shape != (n,):
        raise _shape_err("elementwise_affine", x.shape, w.shape)
    out = w.data * x.data + b.data

    def backward_fn(g):
        x.accumulate_grad(g * w.data)
        if x.data.ndim == 2:
            w.accumulate_grad((g * x.data).sum(axis=0))
            b.accumulate_grad(g.sum(axis=0))
        else:
            w.accumulate_grad(g * x.data)
            b.accumulate_grad(g)

    return _finish("elementwise_affine", (x, w, b), out, backward_fn)


# ---------------------------------------------------------------------------
# feature-map ops
# ---------------------------------------------------------------------------

def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, int):
        return padding, padding
    ph, pw = padding
    return int(ph), int(pw)


def _im2col(x: np.ndarray, kh, kw, stride, ph, pw):
    """Gather patches as one [C*kh*kw, B*OH*OW] matrix (single-GEMM layout)."""
    b, c, h, w = x.shape
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (w + 2 * pw - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((c, kh, kw, b, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, b * oh * ow), oh, ow


def _col2im(cols_mat: np.ndarray, xshape, kh, kw, stride, ph, pw, oh, ow):
    """Scatter-add the [C*kh*kw, B*OH*OW] gradient back onto the input."""
    b, c, h, w = xshape
    gx = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    colsr = cols_mat.reshape(c, kh, kw, b, oh, ow)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride,
               j:j + stride * ow:stride] += colsr[:, i, j].transpose(1, 0, 2, 3)
    return gx[:, :, ph:ph + h, pw:pw + w]


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding=0) -> Tensor:
    """2-D cross-correlation by explicit patch gather + matrix multiply.

    x: [B, C, H, W]; w: [O, C, kh, kw]; bias: [O] or None; zero padding,
    given as one int or an (ph, pw) pair.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_err("conv2d", x.shape, w.shape)
    o, c, kh, kw = w.shape
    ph, pw = _pad_pair(padding)
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise _shape_err("conv2d", x.shape, w.shape)
    if bias is not None and bias.shape != (o,):
        raise _shape_err("conv2d", bias.shape, (o,))

    batch = x.shape[0]
    cols_mat, oh, ow = _im2col(x.data, kh, kw, stride, ph, pw)
    w2 = w.data.reshape(o, c * kh * kw)
    out = (w2 @ cols_mat).reshape(o, batch, oh, ow).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    inputs = (x, w) if bias is None else (x, w, bias)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, batch * oh * ow)
        x.accumulate_grad(_col2im(w2.T @ g2, x.shape, kh, kw,
                                  stride, ph, pw, oh, ow))
        w.accumulate_grad((g2 @ cols_mat.T).reshape(w.shape))
        if bias is not None:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _finish("conv2d", inputs, out, backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean per channel: [B, C, H, W] -> [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected [B, C, H, W], got {x.shape}")
    out = x.data.mean(axis=(2, 3))
    area = x.shape[2] * x.shape[3]

    def backward_fn(g):
        x.accumulate_grad(np.broadcast_to(g[:, :, None, None] / area, x.shape))

    return _finish("global_avg_pool", (x,), out, backward_fn)


def channelwise_mul(x: Tensor, v: Tensor) -> Tensor:
    """Scale each channel of a feature map: v has shape [C] or [B, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"channelwise_mul: expected [B, C, H, W], got {x.shape}")
    c = x.shape[1]
    if v.shape == (c,):
        vexp = v.data[None, :, None, None]
    elif v.shape == (x.shape[0], c):
        vexp = v.data[:, :, None, None]
    else:
        raise _shape_err("channelwise_mul", x.shape, v.shape)
    out = x.data * vexp

    def backward_fn(g):
        x.accumulate_grad(g * vexp)
        gv = (g * x.data).sum(axis=(2, 3))
        if v.data.ndim == 1:
            gv = gv.sum(axis=0)
        v.accumulate_grad(gv)

    return _finish("channelwise_mul", (x, v), out, backward_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray,
               training: bool = True, momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over [B, C, H, W].

    Training mode normalizes with batch statistics and updates the running
    buffers in place (EMA keeps `momentum` of the old value); eval mode is
    a fixed affine map through the running statistics.
    """
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise _shape_err("batch_norm", x.shape, gamma.shape)
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        gamma.accumulate_grad((g * xhat).sum(axis=axes))
        beta.accumulate_grad(g.sum(axis=axes))
        gxhat = g * gamma.data[None, :, None, None]
        if training:
            # gradient through the batch statistics
            sum_gxhat = gxhat.sum(axis=axes)
            sum_gxhat_xhat = (gxhat * xhat).sum(axis=axes)
            gx = (gxhat - (sum_gxhat[None, :, None, None]
                           + xhat * sum_gxhat_xhat[None, :, None, None]) / m)
            gx = gx * inv_std[None, :, None, None]
        else:
            gx = gxhat * inv_std[None, :, None, None]
        x.accumulate_grad(gx)

    return _finish("batch_norm", (x, gamma, beta), out, backward_fn)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between row-wise softmax of logits and int labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise _shape_err("softmax_cross_entropy", logits.shape, labels.shape)
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    out = np.asarray(-logp[np.arange(b), labels].mean()).reshape(())

    def backward_fn(g):
        probs = np.exp(logp)
        probs[np.arange(b), labels] -= 1.0
        logits.accumulate_grad(g * probs / b)

    return _finish("softmax_cross_entropy", (logits,), out, backward_fn)


_OPS = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "global_avg_pool": global_avg_pool,
    "channelwise_mul": channelwise_mul,
    "batch_norm": batch_norm,
    "grouped_linear": grouped_linear,
    "elementwise_affine": elementwise_affine,
    "softmax_cross_entropy": softmax_cross_entropy,
    "concat": concat,
    "slice": slice_along,
    "sum": sum_all,
    "reshape": reshape,
}


def forward_op(opcode: str, inputs, **attrs) -> Tensor:
    """Dispatch an op by name; `inputs` are Tensors, attrs are non-tensor args."""
    if opcode not in _OPS:
        raise GraphError(f"unknown opcode {opcode!r}")
    if opcode == "concat":
        return concat(inputs, **attrs)
    return _OPS[opcode](*inputs, **attrs)


# ---------------------------------------------------------------------------
# backward and its independent oracle
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad for everything reachable from `loss`; clears the tape."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph = _active_graph
    if len(graph) == 0:
        raise GraphError("backward called on an empty graph "
                         "(nothing recorded, or already consumed)")
    loss.grad = np.ones_like(loss.data)
    try:
        for entry in reversed(graph._tape):
            if entry.out.grad is not None:
                entry.backward_fn(entry.out.grad)
    finally:
        graph.clear()


def finite_difference_grad(f, at: Tensor, step: float = 1e-5,
                           relative: bool = True) -> Tensor:
    """Central-difference gradient of a scalar-valued function.

    Perturbs `at.data` in place coordinate by coordinate (restoring it), so
    `f` may either use its argument or close over the same tensor. With
    `relative=True` the per-coordinate step is step * (1 + |x_i|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    flat = at.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        h = step * (1.0 + abs(orig)) if relative else step
        flat[i] = orig + h
        fp = _eval_scalar(f, at, i)
        flat[i] = orig - h
        fm = _eval_scalar(f, at, i)
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad.reshape(at.shape))


def _eval_scalar(f, at: Tensor, coord: int) -> float:
    with no_grad():
        out = f(at)
    value = out.item() if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise NumericOverflowError(
            f"finite_difference_grad: non-finite evaluation at coordinate {coord}")
    return value


def relative_error(a: float, b: float, floor: float = 1e-6) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def central_difference(loss_fn, tensor: Tensor, flat_index: int,
                       step: float = 1e-5) -> float:
    """Numeric d(loss)/d(tensor[flat_index]) with step h = step * (1 + |x|)."""
    reeval = lambda _t: loss_fn()  # noqa: E731
    view = tensor.data.reshape(-1)
    orig = view[flat_index]
    h = step * (1.0 + abs(orig))
    view[flat_index] = orig + h
    fp = _eval_scalar(reeval, tensor, flat_index)
    view[flat_index] = orig - h
    fm = _eval_scalar(reeval, tensor, flat_index)
    view[flat_index] = orig
    return (fp - fm) / (2.0 * h)


def gradcheck_coordinates(loss_fn, params, n_coords: int, rng: np.random.Generator,
                          step: float = 1e-5) -> float:
    """Backward vs central differences on randomly sampled parameter coordinates.

    `loss_fn()` must rebuild the forward pass from scratch each call (it is
    invoked once recorded for backward, then repeatedly under no_grad for
    the differences). Returns the max relative error over the sample.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    n = min(n_coords, total)
    chosen = rng.choice(total, size=n, replace=False)
    bounds = np.cumsum(sizes)

    worst = 0.0
    for flat_index in chosen:
        pi = int(np.searchsorted(bounds, flat_index, side="right"))
        ci = int(flat_index - (bounds[pi - 1] if pi else 0))
        numeric = central_difference(loss_fn, params[pi], ci, step=step)
        worst = max(worst, relative_error(analytic[pi].reshape(-1)[ci], numeric))
    return worst
