"""Layer primitives with hand-derived backward passes.

Every layer works on batches: image tensors are ``(N, C, H, W)`` and flat
tensors ``(N, D)``. A single image ``(C, H, W)`` (or vector ``(D,)``) is
accepted too and the result comes back without the batch axis.

Layers cache what their backward pass needs during ``forward``. The cache is
consumed by the next ``backward`` call, so a layer instance must not be shared
between concurrent training contexts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft

from .errors import ShapeError, StateError, ValidationError
from .numerics import DTYPE, Rng, as_tensor, init_uniform_scaled

# Upper bound on the im2col scratch buffer, in float64 elements (~64 MiB).
_IM2COL_BUDGET = 8 * 1024 * 1024
# Filters with at least this many taps go through the FFT kernels under "auto".
FFT_MIN_TAPS = 64
CONV_METHODS = ("auto", "im2col", "fft")

_TINY = np.finfo(DTYPE).tiny
_ONE_MINUS = np.nextafter(1.0, 0.0)
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ConvSpec:
    """Valid, stride-1 convolution with ``num_filters`` kernels of ``filter_height x filter_width``."""

    filter_height: int
    filter_width: int
    num_filters: int
    in_channels: int | None = None

    def __post_init__(self):
        if min(self.filter_height, self.filter_width, self.num_filters) < 1:
            raise ShapeError(f"invalid conv spec {self}")
        if self.in_channels is not None and self.in_channels < 1:
            raise ShapeError(f"invalid conv spec {self}")

    def label(self) -> str:
        return f"{self.filter_height}x{self.filter_width}-{self.num_filters}"


@dataclass(frozen=True)
class PoolSpec:
    """Non-overlapping max pooling window."""

    window_height: int
    window_width: int

    def __post_init__(self):
        if min(self.window_height, self.window_width) < 1:
            raise ShapeError(f"invalid pool spec {self}")

    def label(self) -> str:
        return f"{self.window_height}x{self.window_width}"


@dataclass(frozen=True)
class FcSpec:
    num_units: int

    def __post_init__(self):
        if self.num_units < 1:
            raise ShapeError(f"invalid fc spec {self}")

    def label(self) -> str:
        return str(self.num_units)


@dataclass(frozen=True)
class ActivationSpec:
    kind: str  # "relu" or "logistic"

    def __post_init__(self):
        if self.kind not in ("relu", "logistic"):
            raise ShapeError(f"unknown activation {self.kind!r}")

    def label(self) -> str:
        return self.kind


def _as_batch(x, ndim):
    x = as_tensor(x)
    if x.ndim == ndim - 1:
        return x[None], True
    if x.ndim != ndim:
        raise ShapeError(f"expected a {ndim - 1}-d sample or {ndim}-d batch, got shape {x.shape}")
    return x, False


def _chunks(n, per_sample):
    step = max(1, _IM2COL_BUDGET // max(1, per_sample))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


# -- kernels --------------------------------------------------------------------
#
# Two interchangeable implementations: im2col (strided window view + one
# tensordot/GEMM per chunk) and FFT (products of real 2-D spectra). Both
# compute the same valid cross-correlation; the FFT path wins for large
# filters such as 12x12.

def _resolve(method, fh, fw):
    if method not in CONV_METHODS:
        raise ValueError(f"unknown conv method {method!r}")
    if method == "auto":
        return "fft" if fh * fw >= FFT_MIN_TAPS else "im2col"
    return method


def _fft_shape(h, w):
    return sfft.next_fast_len(h, real=True), sfft.next_fast_len(w, real=True)


def _fft_chunks(n, per_sample):
    # spectra are complex and several are live at once
    return _chunks(n, 6 * per_sample)


def conv2d_valid(x, weight, bias=None, method="auto"):
    """Batched valid cross-correlation, ``(N,C,H,W) * (K,C,i,j) -> (N,K,H-i+1,W-j+1)``."""
    n, c, h, w = x.shape
    k, wc, fh, fw = weight.shape
    if wc != c:
        raise ShapeError(f"conv: input has {c} channels, filters expect {wc}")
    if fh > h or fw > w:
        raise ShapeError(f"conv: filter {fh}x{fw} larger than input {h}x{w}")
    ho, wo = h - fh + 1, w - fw + 1
    out = np.empty((n, k, ho, wo), dtype=DTYPE)
    if _resolve(method, fh, fw) == "fft":
        # correlation == convolution with the flipped filter; an FFT length of
        # h suffices because wrap-around only pollutes the first fh-1 rows
        s = _fft_shape(h, w)
        wf = sfft.rfft2(weight[:, :, ::-1, ::-1], s=s)
        for sl in _fft_chunks(n, (c + k) * s[0] * s[1]):
            spec = np.einsum("nchw,kchw->nkhw", sfft.rfft2(x[sl], s=s), wf, optimize=True)
            out[sl] = sfft.irfft2(spec, s=s)[:, :, fh - 1:h, fw - 1:w]
    else:
        for sl in _chunks(n, c * ho * wo * fh * fw):
            win = sliding_window_view(x[sl], (fh, fw), axis=(2, 3))  # (n,C,Ho,Wo,i,j)
            out[sl] = np.tensordot(win, weight, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def conv2d_weight_grad(x, grad_out, fh, fw, method="auto"):
    """Gradient of a valid correlation w.r.t. its filters: ``(K,C,i,j)``."""
    n, c, h, w = x.shape
    k, ho, wo = grad_out.shape[1:]
    gw = np.zeros((k, c, fh, fw), dtype=DTYPE)
    if _resolve(method, fh, fw) == "fft":
        s = _fft_shape(h, w)
        for sl in _fft_chunks(n, (c + k) * s[0] * s[1]):
            spec = np.einsum("nchw,nkhw->kchw", sfft.rfft2(x[sl], s=s),
                             sfft.rfft2(grad_out[sl], s=s).conj(), optimize=True)
            gw += sfft.irfft2(spec, s=s)[:, :, :fh, :fw]
    else:
        for sl in _chunks(n, c * ho * wo * fh * fw):
            win = sliding_window_view(x[sl], (fh, fw), axis=(2, 3))
            gw += np.tensordot(grad_out[sl], win, axes=([0, 2, 3], [0, 2, 3]))
    return gw


def conv2d_input_grad(grad_out, weight, method="auto"):
    """Full correlation of ``grad_out`` with the flipped filters: ``(N,C,H,W)``."""
    n, k, ho, wo = grad_out.shape
    _, c, fh, fw = weight.shape
    h, w = ho + fh - 1, wo + fw - 1
    out = np.empty((n, c, h, w), dtype=DTYPE)
    if _resolve(method, fh, fw) == "fft":
        s = _fft_shape(h, w)
        wf = sfft.rfft2(weight, s=s)
        for sl in _fft_chunks(n, (c + k) * s[0] * s[1]):
            spec = np.einsum("nkhw,kchw->nchw", sfft.rfft2(grad_out[sl], s=s), wf, optimize=True)
            out[sl] = sfft.irfft2(spec, s=s)[:, :, :h, :w]
        return out
    padded = np.zeros((n, k, ho + 2 * (fh - 1), wo + 2 * (fw - 1)), dtype=DTYPE)
    padded[:, :, fh - 1:fh - 1 + ho, fw - 1:fw - 1 + wo] = grad_out
    flipped = weight[:, :, ::-1, ::-1]
    for sl in _chunks(n, k * h * w * fh * fw):
        win = sliding_window_view(padded[sl], (fh, fw), axis=(2, 3))  # (n,K,H,W,i,j)
        out[sl] = np.tensordot(win, flipped, axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
    return out


# -- layers --------------------------------------------------------------------

class Layer:
    """Common protocol: ``forward``, ``backward`` and named parameter arrays."""

    spec = None
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out, need_input_grad=True):
        raise NotImplementedError

    def output_shape(self, input_shape):
        raise NotImplementedError

    def clear_cache(self):
        self._cache = None

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called without a cached forward pass")
        cache, self._cache = self._cache, None
        return cache


class Conv2D(Layer):
    """Valid stride-1 convolution: ``out[f,y,x] = bias[f] + <filter_f, window(y,x)>``."""

    def __init__(self, spec: ConvSpec, in_channels: int, weight=None, bias=None, method="auto"):
        super().__init__()
        _resolve(method, 1, 1)
        self.method = method
        if spec.in_channels is not None and spec.in_channels != in_channels:
            raise ShapeError(f"conv spec expects {spec.in_channels} channels, got {in_channels}")
        self.spec = ConvSpec(spec.filter_height, spec.filter_width, spec.num_filters, in_channels)
        shape = (spec.num_filters, in_channels, spec.filter_height, spec.filter_width)
        self.params["weight"] = np.zeros(shape, dtype=DTYPE) if weight is None else as_tensor(weight).reshape(shape)
        self.params["bias"] = np.zeros(spec.num_filters, dtype=DTYPE) if bias is None else as_tensor(bias).reshape(-1)

    def init(self, rng: Rng):
        k, c, fh, fw = self.params["weight"].shape
        self.params["weight"] = init_uniform_scaled((k, c, fh, fw), c * fh * fw, k * fh * fw, rng)
        self.params["bias"] = np.zeros(k, dtype=DTYPE)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        s = self.spec
        if c != s.in_channels:
            raise ShapeError(f"conv: input has {c} channels, spec expects {s.in_channels}")
        return (s.num_filters, h - s.filter_height + 1, w - s.filter_width + 1)

    def forward(self, x):
        x, single = _as_batch(x, 4)
        out = conv2d_valid(x, self.params["weight"], self.params["bias"], self.method)
        self._cache = x
        return out[0] if single else out

    def backward(self, grad_out, need_input_grad=True):
        x = self._take_cache()
        grad_out, single = _as_batch(grad_out, 4)
        expected = (x.shape[0],) + self.output_shape(x.shape[1:])
        if grad_out.shape != expected:
            raise ShapeError(f"conv backward: grad shape {grad_out.shape}, expected {expected}")
        weight = self.params["weight"]
        self.grads = {
            "weight": conv2d_weight_grad(x, grad_out, weight.shape[2], weight.shape[3], self.method),
            "bias": grad_out.sum(axis=(0, 2, 3)),
        }
        grad_in = conv2d_input_grad(grad_out, weight, self.method) if need_input_grad else None
        if single and grad_in is not None:
            grad_in = grad_in[0]
        return grad_in, self.grads


class MaxPool2D(Layer):
    """Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.

    Ties resolve to the first maximum in row-major order inside the window.
    """

    def __init__(self, spec: PoolSpec):
        super().__init__()
        self.spec = spec

    def output_shape(self, input_shape):
        c, h, w = input_shape
        s, t = self.spec.window_height, self.spec.window_width
        if h < s or w < t:
            raise ShapeError(f"pool window {s}x{t} exceeds input {h}x{w}")
        return (c, h // s, w // t)

    def forward(self, x):
        x, single = _as_batch(x, 4)
        n, c, h, w = x.shape
        s, t = self.spec.window_height, self.spec.window_width
        _, ho, wo = self.output_shape((c, h, w))
        win = x[:, :, :ho * s, :wo * t].reshape(n, c, ho, s, wo, t)
        win = win.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, s * t)
        idx = np.argmax(win, axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out[0] if single else out

    def backward(self, grad_out, need_input_grad=True):
        in_shape, idx = self._take_cache()
        grad_out, single = _as_batch(grad_out, 4)
        if grad_out.shape != idx.shape:
            raise ShapeError(f"pool backward: grad shape {grad_out.shape}, expected {idx.shape}")
        n, c, h, w = in_shape
        ho, wo = idx.shape[2:]
        s, t = self.spec.window_height, self.spec.window_width
        routed = np.zeros((n, c, ho, wo, s * t), dtype=DTYPE)
        np.put_along_axis(routed, idx[..., None], grad_out[..., None], axis=-1)
        routed = routed.reshape(n, c, ho, wo, s, t).transpose(0, 1, 2, 4, 3, 5)
        grad_in = np.zeros(in_shape, dtype=DTYPE)
        grad_in[:, :, :ho * s, :wo * t] = routed.reshape(n, c, ho * s, wo * t)
        self.grads = {}
        return (grad_in[0] if single else grad_in), self.grads


class Dense(Layer):
    """Fully connected layer ``out = W @ x + b`` on the flattened input."""

    def __init__(self, spec: FcSpec, in_features: int, weight=None, bias=None):
        super().__init__()
        self.spec = spec
        shape = (spec.num_units, in_features)
        self.params["weight"] = np.zeros(shape, dtype=DTYPE) if weight is None else as_tensor(weight).reshape(shape)
        self.params["bias"] = np.zeros(spec.num_units, dtype=DTYPE) if bias is None else as_tensor(bias).reshape(-1)

    @property
    def in_features(self):
        return self.params["weight"].shape[1]

    def init(self, rng: Rng):
        out_f, in_f = self.params["weight"].shape
        self.params["weight"] = init_uniform_scaled((out_f, in_f), in_f, out_f, rng)
        self.params["bias"] = np.zeros(out_f, dtype=DTYPE)

    def output_shape(self, input_shape):
        size = int(np.prod(input_shape))
        if size != self.in_features:
            raise ShapeError(f"fc: input has {size} features, weight expects {self.in_features}")
        return (self.spec.num_units,)

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim == 1:
            single, flat = True, x[None]
        else:
            single, flat = False, x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"fc: input has {flat.shape[1]} features, weight expects {self.in_features}")
        self._cache = (x.shape, flat)
        out = flat @ self.params["weight"].T + self.params["bias"]
        return out[0] if single else out

    def backward(self, grad_out, need_input_grad=True):
        in_shape, flat = self._take_cache()
        grad_out = as_tensor(grad_out).reshape(flat.shape[0], -1)
        self.grads = {"weight": grad_out.T @ flat, "bias": grad_out.sum(axis=0)}
        grad_in = None
        if need_input_grad:
            grad_in = (grad_out @ self.params["weight"]).reshape(in_shape)
        return grad_in, self.grads


def relu(x):
    """Elementwise ``max(0, x)``."""
    return np.maximum(as_tensor(x), 0.0)


def relu_backward(x, grad_out):
    """Route ``grad_out`` where ``x > 0``; the subgradient at 0 is 0."""
    return np.where(as_tensor(x) > 0.0, as_tensor(grad_out), 0.0)


def logistic(x):
    """Elementwise ``1 / (1 + exp(-x))``, overflow-safe, clamped into the open interval (0, 1)."""
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _TINY, _ONE_MINUS)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self.spec = ActivationSpec("relu")

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        x = as_tensor(x)
        self._cache = x
        return relu(x)

    def backward(self, grad_out, need_input_grad=True):
        x = self._take_cache()
        self.grads = {}
        return relu_backward(x, grad_out), self.grads


class Logistic(Layer):
    """Output non-linearity. Its backward is the plain chain rule ``g * p * (1 - p)``;
    training uses the fused gradient from :func:`cross_entropy_loss` instead."""

    def __init__(self):
        super().__init__()
        self.spec = ActivationSpec("logistic")

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x):
        p = logistic(x)
        self._cache = p
        return p

    def backward(self, grad_out, need_input_grad=True):
        p = self._take_cache()
        self.grads = {}
        return as_tensor(grad_out) * p * (1.0 - p), self.grads


def _check_targets(target, q):
    if target.shape[-1] != q:
        raise ValidationError(f"target has {target.shape[-1]} classes, probabilities have {q}")
    ones = target == 1.0
    zeros = target == 0.0
    if not np.all(ones | zeros) or not np.all(ones.sum(axis=-1) == 1):
        raise ValidationError("target must be one-hot (exactly one 1, all others 0)")


def cross_entropy_per_sample(probs, target):
    """Per-sample mean binary cross-entropy for a batch ``(N, q)`` (see :func:`cross_entropy_loss`)."""
    p = as_tensor(probs)
    t = as_tensor(target)
    if p.shape != t.shape:
        raise ValidationError(f"probs shape {p.shape} != target shape {t.shape}")
    q = p.shape[-1]
    _check_targets(t, q)
    pc = np.clip(p, LOG_CLAMP, 1.0 - LOG_CLAMP)
    per_unit = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    return per_unit.sum(axis=-1) / q


def cross_entropy_loss(probs, target):
    """Mean binary cross-entropy over the ``q`` logistic units.

    ``loss = -sum_u [t_u log p_u + (1 - t_u) log(1 - p_u)] / q`` with ``p``
    clamped to ``[1e-12, 1 - 1e-12]`` inside the logs. Returns the loss and the
    gradient w.r.t. the logistic *pre-activation*, ``(p - t) / q``.

    For a batch ``(N, q)`` the loss is averaged over samples and the gradient
    is divided by ``N`` accordingly.
    """
    p = as_tensor(probs)
    losses = cross_entropy_per_sample(p, target)
    t = as_tensor(target)
    q = p.shape[-1]
    if p.ndim == 1:
        return float(losses), (p - t) / q
    n = p.shape[0]
    return float(losses.sum() / n), (p - t) / (q * n)
