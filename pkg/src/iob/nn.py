"""Minimal reverse-mode automatic differentiation on numpy arrays.

Operations are coarse grained (a dense layer, a convolution, a Gaussian
negative log-likelihood) so that a training step records a few dozen tape
entries rather than thousands.  Every operation is dtype generic: float32 is
used for training, float64 for finite-difference gradient checks.

Usage::

    with Tape() as tape:
        loss = gaussian_nll(model(x), y, variance)
    backward(tape, loss)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grad",
    "dense",
    "relu",
    "conv2d",
    "conv_transpose2d",
    "reshape",
    "multiply",
    "expand_masks",
    "tensor_sum",
    "mse",
    "gaussian_nll",
    "DenseLayer",
    "Conv2dLayer",
    "ConvTranspose2dLayer",
    "Flatten",
    "Unflatten",
    "Sequential",
    "dense_forward",
    "conv2d_forward",
    "conv_transpose2d_forward",
    "AdamState",
    "adam_step",
    "conv_output_size",
    "conv_transpose_output_size",
]


class Tensor:
    """An n-dimensional array with an optional gradient.

    ``grad_mask`` (same shape as ``data``, or None) zeroes gradient entries as
    they are accumulated; the optimizer also refuses to move masked entries.
    """

    __slots__ = ("data", "grad", "requires_grad", "grad_mask", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.grad_mask = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: object


class Tape:
    """Ordered record of executed operations.

    Only one tape is active at a time; entering a tape makes every subsequent
    operation on grad-requiring inputs append itself here.
    """

    _active = None

    def __init__(self):
        self.records = []
        self._previous = None

    def __enter__(self):
        self._previous = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc):
        Tape._active = self._previous
        return False

    def __len__(self):
        return len(self.records)

    @classmethod
    def current(cls):
        return cls._active

    def record(self, op, inputs, output, backward_fn):
        self.records.append(_Record(op, tuple(inputs), output, backward_fn))


def _record(op, inputs, output, backward_fn):
    tape = Tape._active
    if tape is not None and any(t.requires_grad for t in inputs):
        output.requires_grad = True
        tape.record(op, inputs, output, backward_fn)
    return output


def backward(tape, loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Intermediate gradients live only for the duration of the call; leaf
    gradients accumulate across calls until :func:`zero_grad`.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1 or loss.data.ndim > 1:
        raise UsageError("backward() needs a scalar loss tensor")
    if not loss.requires_grad:
        raise UsageError("loss was not produced under the tape from grad-requiring inputs")
    produced = {id(r.output) for r in tape.records}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        gout = grads.pop(id(rec.output), None)
        if gout is None:
            continue
        gins = rec.backward(gout)
        for inp, g in zip(rec.inputs, gins):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if key not in produced:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        g = g.astype(leaf.data.dtype, copy=False)
        if leaf.grad_mask is not None:
            g = g * leaf.grad_mask
        if leaf.grad is None:
            leaf.grad = g.copy()
        else:
            leaf.grad += g


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# primitive operations


def relu(x):
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def back(g):
        return (g * (x.data > 0),)

    return _record("relu", (x,), out, back)


def _activate(pre, activation):
    if activation == "relu":
        return np.maximum(pre, 0)
    if activation == "identity":
        return pre
    raise DomainError(f"unknown activation {activation!r}")


def _channel_sum(a):
    """Sum over every axis but the last.

    A contiguous array with a short last axis reduces much faster as a
    vector-matrix product than through ``sum``.
    """
    if a.flags.c_contiguous and a.size:
        m = a.reshape(-1, a.shape[-1])
        return np.ones(m.shape[0], dtype=a.dtype) @ m
    return a.sum(axis=tuple(range(a.ndim - 1)))


def dense(x, weight, bias, activation="identity"):
    """``act(x @ weight.T + bias)`` for ``x`` of shape (batch, in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input shape {x.shape} does not match weight {weight.shape}")
    pre = x.data @ weight.data.T + bias.data
    y = _activate(pre, activation)
    out = Tensor(y)

    def back(g):
        if activation == "relu":
            g = g * (pre > 0)
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = _channel_sum(g) if bias.requires_grad else None
        return gx, gw, gb

    return _record("dense", (x, weight, bias), out, back)


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


def _im2col(xh, kh, kw, stride, padding):
    """Patch matrix of a channels-last input; rows are (b, ho, wo), columns (kh, kw, c)."""
    b, h, w, c = xh.shape
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv: input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}")
    xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else xh
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, kh * kw * c)
    return cols, ho, wo


def _col2im(cols, shape, kh, kw, stride, padding, ho, wo):
    """Adjoint of :func:`_im2col`; ``shape`` is the channels-last (b, h, w, c)."""
    b, h, w, c = shape
    blocks = cols.reshape(b, ho, wo, kh, kw, c)
    out = np.zeros((b, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += blocks[:, :, :, i, j, :]
    if padding:
        out = out[:, padding : padding + h, padding : padding + w, :]
    return out


def _nhwc(a):
    return a.transpose(0, 2, 3, 1)


def _nchw(a):
    return a.transpose(0, 3, 1, 2)


def conv2d(x, weight, bias, stride=1, padding=0, activation="identity"):
    """Zero-padded cross-correlation.

    ``weight`` has shape (out_ch, in_ch, kh, kw) and ``x`` (batch, in_ch, H, W).
    Computation runs channels-last; results are channels-first views.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with filters {weight.shape}")
    oc, ic, kh, kw = weight.shape
    b, _, h, w = x.shape
    cols, ho, wo = _im2col(_nhwc(x.data), kh, kw, stride, padding)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(oc, kh * kw * ic)
    pre = (cols @ wmat.T + bias.data).reshape(b, ho, wo, oc)
    out = Tensor(_nchw(_activate(pre, activation)))

    def back(g):
        gh = _nhwc(g)
        if activation == "relu":
            gh = gh * (pre > 0)
        gmat = gh.reshape(b * ho * wo, oc)
        gx = None
        if x.requires_grad:
            gx = _nchw(_col2im(gmat @ wmat, (b, h, w, ic), kh, kw, stride, padding, ho, wo))
        gw = None
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(oc, kh, kw, ic).transpose(0, 3, 1, 2)
        gb = _channel_sum(gmat) if bias.requires_grad else None
        return gx, gw, gb

    return _record("conv2d", (x, weight, bias), out, back)


def _phase_weight(w, s):
    """Rearrange (ic, oc, k, k) filters for the sub-pixel form; rows (ty, tx, ic), columns (ry, rx, oc)."""
    ic, oc, k, _ = w.shape
    q = k // s
    w6 = w.reshape(ic, oc, q, s, q, s)[:, :, ::-1, :, ::-1, :]
    return np.ascontiguousarray(w6.transpose(2, 4, 0, 3, 5, 1)).reshape(q * q * ic, s * s * oc)


def _phase_weight_grad(gwp, ic, oc, k, s):
    q = k // s
    g6 = gwp.reshape(q, q, ic, s, s, oc).transpose(2, 5, 0, 3, 1, 4)
    return np.ascontiguousarray(g6[:, :, ::-1, :, ::-1, :]).reshape(ic, oc, k, k)


def conv_transpose2d(x, weight, bias, stride=1, padding=0, activation="identity"):
    """Fractionally strided convolution, the adjoint of :func:`conv2d`.

    ``weight`` has shape (in_ch, out_ch, kh, kw): the same array passed to
    :func:`conv2d` maps out_ch -> in_ch there and in_ch -> out_ch here, so
    ``<conv2d(u; w), v> == <u, conv_transpose2d(v; w)>`` with zero biases.

    Square kernels that are a multiple of the stride use the sub-pixel
    decomposition: each of the stride**2 output phases is a dense
    (k/stride)-tap convolution of the input, so the whole layer is one patch
    gather and one matrix product.
    """
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"conv_transpose2d: input {x.shape} incompatible with filters {weight.shape}")
    ic, oc, kh, kw = weight.shape
    b, _, h, w = x.shape
    ho = conv_transpose_output_size(h, kh, stride, padding)
    wo = conv_transpose_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv_transpose2d: output size {ho}x{wo} is empty")
    if kh == kw and kh % stride == 0:
        return _conv_transpose2d_phase(x, weight, bias, stride, padding, activation, ho, wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(ic, kh * kw * oc)
    xmat = _nhwc(x.data).reshape(b * h * w, ic)
    pre = _col2im(xmat @ wmat, (b, ho, wo, oc), kh, kw, stride, padding, h, w)
    pre += bias.data
    out = Tensor(_nchw(_activate(pre, activation)))

    def back(g):
        gh = _nhwc(g)
        if activation == "relu":
            gh = gh * (pre > 0)
        gcols, _, _ = _im2col(gh, kh, kw, stride, padding)
        gx = _nchw((gcols @ wmat.T).reshape(b, h, w, ic)) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = (xmat.T @ gcols).reshape(ic, kh, kw, oc).transpose(0, 3, 1, 2)
        gb = _channel_sum(gh) if bias.requires_grad else None
        return gx, gw, gb

    return _record("conv_transpose2d", (x, weight, bias), out, back)


def _conv_transpose2d_phase(x, weight, bias, s, p, activation, ho, wo):
    ic, oc, k, _ = weight.shape
    q = k // s
    b, _, h, w = x.shape
    hq, wq = h + q - 1, w + q - 1
    xh = _nhwc(x.data)
    xp = np.pad(xh, ((0, 0), (q - 1, q - 1), (q - 1, q - 1), (0, 0))) if q > 1 else xh
    cols = sliding_window_view(xp, (q, q), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3).reshape(b * hq * wq, q * q * ic)
    wp = _phase_weight(weight.data, s)
    phases = cols @ wp
    phases += np.tile(bias.data, s * s)
    # interleave the phases and apply the activation in a single pass
    full = np.empty((b, hq * s, wq * s, oc), dtype=phases.dtype)
    view = phases.reshape(b, hq, wq, s, s, oc).transpose(0, 1, 3, 2, 4, 5)
    if activation == "relu":
        np.maximum(view, 0, out=full.reshape(b, hq, s, wq, s, oc))
    else:
        _activate(view, activation)
        full.reshape(b, hq, s, wq, s, oc)[...] = view
    act = full[:, p : p + ho, p : p + wo]
    live = act > 0 if activation == "relu" else None
    out = Tensor(_nchw(act))

    def back(g):
        # the adjoint is a strided convolution of the output gradient
        gh = _nhwc(g)
        if live is not None:
            gh = gh * live
        gcols, _, _ = _im2col(gh, k, k, s, p)
        gx = None
        if x.requires_grad:
            wmat = weight.data.transpose(0, 2, 3, 1).reshape(ic, k * k * oc)
            gx = _nchw((gcols @ wmat.T).reshape(b, h, w, ic))
        gw = None
        if weight.requires_grad:
            gw = (xh.reshape(b * h * w, ic).T @ gcols).reshape(ic, k, k, oc).transpose(0, 3, 1, 2)
        gb = _channel_sum(gh) if bias.requires_grad else None
        return gx, gw, gb

    return _record("conv_transpose2d", (x, weight, bias), out, back)


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def back(g):
        return (g.reshape(x.shape),)

    return _record("reshape", (x,), out, back)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def multiply(x, y):
    """Elementwise product with numpy broadcasting."""
    x, y = _as_tensor(x), _as_tensor(y)
    try:
        out = Tensor(x.data * y.data)
    except ValueError as exc:
        raise DimensionError(f"multiply: shapes {x.shape} and {y.shape} do not broadcast") from exc

    def back(g):
        gx = _unbroadcast(g * y.data, x.shape) if x.requires_grad else None
        gy = _unbroadcast(g * x.data, y.shape) if y.requires_grad else None
        return gx, gy

    return _record("multiply", (x, y), out, back)


def expand_masks(z, masks):
    """Stack ``z * masks[j]`` for every mask row.

    ``z`` is (batch, k_max) and ``masks`` a constant (m, k_max) array; the result is
    (m * batch, k_max) with the batch for mask j occupying rows j*batch..(j+1)*batch.
    """
    z = _as_tensor(z)
    masks = np.asarray(masks, dtype=z.dtype)
    if z.data.ndim != 2 or masks.ndim != 2 or masks.shape[1] != z.shape[1]:
        raise DimensionError(f"expand_masks: latent {z.shape} vs masks {masks.shape}")
    m, (b, k) = masks.shape[0], z.shape
    stacked = (masks[:, None, :] * z.data[None, :, :]).reshape(m * b, k)
    out = Tensor(stacked)

    def back(g):
        return ((g.reshape(m, b, k) * masks[:, None, :]).sum(axis=0),)

    return _record("expand_masks", (z,), out, back)


def tensor_sum(x):
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64)))

    def back(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _record("sum", (x,), out, back)


def mse(yhat, y):
    """Mean of squared differences over all elements."""
    yhat = _as_tensor(yhat)
    target = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=yhat.dtype)
    target = np.broadcast_to(target, yhat.shape)
    diff = yhat.data - target
    out = Tensor(np.asarray(np.mean(np.square(diff, dtype=np.float64))))

    def back(g):
        return ((2.0 * g / diff.size) * diff,)

    return _record("mse", (yhat,), out, back)


def gaussian_nll(yhat, y, variance, weights=None):
    """Gaussian negative log-likelihood with fixed scalar variance.

    Per sample: ``sum_d (yhat_d - y_d)**2 / (2 variance) + D/2 log(2 pi variance)``
    with D the number of elements per sample.  The result is the batch mean,
    or ``sum_i weights[i] * nll_i`` when per-sample ``weights`` are given.
    Reductions accumulate in float64.
    """
    if not variance > 0:
        raise DomainError(f"variance must be positive, got {variance}")
    yhat = _as_tensor(yhat)
    target = y.data if isinstance(y, Tensor) else np.asarray(y)
    if target.shape != yhat.shape:
        raise DimensionError(f"gaussian_nll: prediction {yhat.shape} vs target {target.shape}")
    n = yhat.shape[0]
    dims = int(np.prod(yhat.shape[1:], dtype=np.int64)) if yhat.data.ndim > 1 else 1
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,):
            raise DimensionError(f"gaussian_nll: weights {w.shape} for batch of {n}")
    diff = (yhat.data - target).reshape(n, -1)
    sq = np.einsum("ij,ij->i", diff.astype(np.float64), diff.astype(np.float64))
    const = 0.5 * dims * math.log(2.0 * math.pi * variance)
    value = float(w @ (sq / (2.0 * variance))) + const * float(w.sum())
    out = Tensor(np.asarray(value))

    def back(g):
        scale = (float(g) * w / variance).astype(yhat.dtype)
        return ((diff * scale[:, None]).reshape(yhat.shape),)

    return _record("gaussian_nll", (yhat,), out, back)


# ---------------------------------------------------------------------------
# layers


_ACTIVATIONS = ("relu", "identity")


def _init_uniform(rng, shape, fan_in, fan_out, activation, dtype):
    # He-uniform under relu, Glorot-uniform otherwise
    if activation == "relu":
        limit = math.sqrt(6.0 / max(fan_in, 1))
    else:
        limit = math.sqrt(6.0 / max(fan_in + fan_out, 1))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class DenseLayer:
    """Fully connected layer with weights (out, in) and bias (out,)."""

    def __init__(self, in_features, out_features, activation="relu", rng=None, dtype=np.float32, name="dense"):
        if activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.activation = activation
        self.name = name
        w = _init_uniform(rng, (self.out_features, self.in_features), self.in_features, self.out_features, activation, dtype)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(self.out_features, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x):
        x = _as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(f"layer {self.name!r} expects (batch, {self.in_features}), got {x.shape}")
        return dense(x, self.weight, self.bias, self.activation)

    def freeze_rows(self, rows):
        """Stop gradient flow into the weights and bias producing output ``rows``."""
        if self.weight.grad_mask is None:
            self.weight.grad_mask = np.ones_like(self.weight.data)
            self.bias.grad_mask = np.ones_like(self.bias.data)
        self.weight.grad_mask[rows, :] = 0
        self.bias.grad_mask[rows] = 0

    def __repr__(self):
        return f"DenseLayer({self.in_features} -> {self.out_features}, {self.activation})"


class Conv2dLayer:
    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2, padding=1, activation="relu",
                 rng=None, dtype=np.float32, name="conv"):
        if activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride, self.padding = int(kernel_size), int(stride), int(padding)
        self.activation = activation
        self.name = name
        k = self.kernel_size
        shape = (self.out_channels, self.in_channels, k, k)
        w = _init_uniform(rng, shape, self.in_channels * k * k, self.out_channels * k * k, activation, dtype)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(self.out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def output_size(self, size):
        return conv_output_size(size, self.kernel_size, self.stride, self.padding)

    def __call__(self, x):
        x = _as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"layer {self.name!r} expects {self.in_channels} input channels, got {x.shape}")
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.activation)

    def __repr__(self):
        return (f"Conv2dLayer({self.in_channels} -> {self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding}, {self.activation})")


class ConvTranspose2dLayer:
    """Upsampling layer; weight layout is (in_ch, out_ch, kh, kw)."""

    def __init__(self, in_channels, out_channels, kernel_size=4, stride=2, padding=1, activation="relu",
                 rng=None, dtype=np.float32, name="convT"):
        if activation not in _ACTIVATIONS:
            raise DomainError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.in_channels, self.out_channels = int(in_channels), int(out_channels)
        self.kernel_size, self.stride, self.padding = int(kernel_size), int(stride), int(padding)
        self.activation = activation
        self.name = name
        k = self.kernel_size
        shape = (self.in_channels, self.out_channels, k, k)
        # each output pixel sees ~ in_ch * k*k / stride**2 inputs
        fan_in = self.in_channels * k * k // (self.stride * self.stride)
        w = _init_uniform(rng, shape, fan_in, self.out_channels * k * k, activation, dtype)
        self.weight = Tensor(w, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(self.out_channels, dtype=dtype), requires_grad=True, name=f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def output_size(self, size):
        return conv_transpose_output_size(size, self.kernel_size, self.stride, self.padding)

    def __call__(self, x):
        x = _as_tensor(x)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"layer {self.name!r} expects {self.in_channels} input channels, got {x.shape}")
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.activation)

    def __repr__(self):
        return (f"ConvTranspose2dLayer({self.in_channels} -> {self.out_channels}, k={self.kernel_size}, "
                f"s={self.stride}, p={self.padding}, {self.activation})")


class Flatten:
    name = "flatten"

    def params(self):
        return []

    def __call__(self, x):
        x = _as_tensor(x)
        return reshape(x, (x.shape[0], -1))

    def __repr__(self):
        return "Flatten()"


class Unflatten:
    name = "unflatten"

    def __init__(self, shape):
        self.shape = tuple(int(s) for s in shape)

    def params(self):
        return []

    def __call__(self, x):
        x = _as_tensor(x)
        if int(np.prod(x.shape[1:])) != int(np.prod(self.shape)):
            raise DimensionError(f"unflatten: cannot view {x.shape} as (batch, {self.shape})")
        return reshape(x, (x.shape[0],) + self.shape)

    def __repr__(self):
        return f"Unflatten({self.shape})"


class Sequential:
    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            for p, kind in zip(layer.params(), ("weight", "bias")):
                out[f"{prefix}{i}.{kind}"] = p
        return out

    def requires_grad_(self, flag=True):
        for p in self.params():
            p.requires_grad = flag
        return self

    def __repr__(self):
        inner = ",\n  ".join(repr(layer) for layer in self.layers)
        return f"Sequential(\n  {inner}\n)"


def dense_forward(layer, x):
    return layer(x)


def conv2d_forward(layer, x):
    return layer(x)


def conv_transpose2d_forward(layer, x):
    return layer(x)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads=None):
    """One bias-corrected Adam update, in place.

    ``grads`` defaults to each parameter's ``.grad``.  Entries whose
    ``grad_mask`` is zero are never moved.
    """
    params = list(params)
    if grads is None:
        grads = [p.grad for p in params]
    if any(g is None for g in grads):
        missing = [p.name for p, g in zip(params, grads) if g is None]
        raise UsageError(f"adam_step: missing gradients for {missing}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g in zip(params, grads):
        key = id(p)
        if key not in state.m:
            state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        if p.grad_mask is not None:
            update *= p.grad_mask
            m *= p.grad_mask
            v *= p.grad_mask
        p.data -= update.astype(p.data.dtype, copy=False)
