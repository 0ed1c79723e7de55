"""
Differentiable building blocks on (N, C, H, W) tensors: dilated convolution,
transposed convolution, max pooling, bilinear upsampling, batch
normalization, channel softmax, plus the receptive-field calculator.

Convolutions are cross-correlations lowered to matmul by unfolding patches
(im2col); the unfold loops over kernel taps rather than output pixels.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .autograd import Tape, Variable, _lift, apply, backward as run_backward, mul, sum_all
from .exceptions import ConfigurationError, ContractError, DimensionError
from .state import ReceptiveField
from .tensor import precision

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: int = 1

    @classmethod
    def square(cls, in_channels: int, out_channels: int, k: int, stride: int = 1, padding: int = 0,
               dilation: int = 1) -> "ConvSpec":
        return cls(in_channels, out_channels, (k, k), (stride, stride), (padding, padding), dilation)

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        return (conv_output_size(h, self.kernel[0], self.stride[0], self.padding[0], self.dilation),
                conv_output_size(w, self.kernel[1], self.stride[1], self.padding[1], self.dilation))


@dataclass(frozen=True)
class PoolSpec:
    kernel: Tuple[int, int] = (2, 2)
    stride: Optional[Tuple[int, int]] = None
    padding: Tuple[int, int] = (0, 0)
    mode: str = "max"

    @classmethod
    def square(cls, k: int, stride: Optional[int] = None, padding: int = 0) -> "PoolSpec":
        return cls((k, k), None if stride is None else (stride, stride), (padding, padding))

    @property
    def strides(self) -> Tuple[int, int]:
        # non-overlapping windows unless told otherwise
        return self.stride if self.stride is not None else self.kernel

    def output_size(self, h: int, w: int) -> Tuple[int, int]:
        return (conv_output_size(h, self.kernel[0], self.strides[0], self.padding[0], 1),
                conv_output_size(w, self.kernel[1], self.strides[1], self.padding[1], 1))


def conv_output_size(n: int, k: int, s: int, p: int, r: int = 1) -> int:
    return (n + 2 * p - r * (k - 1) - 1) // s + 1


def transposed_output_size(n: int, k: int, s: int, p: int, output_padding: int = 0, r: int = 1) -> int:
    return (n - 1) * s - 2 * p + r * (k - 1) + 1 + output_padding


# ─── patch unfolding ────────────────────────────────────────────────────────

def im2col(padded: np.ndarray, kh: int, kw: int, stride: Tuple[int, int], dilation: int,
           out_h: int, out_w: int) -> np.ndarray:
    """
    Unfold an already padded (N, C, Hp, Wp) array into (N, C, kh, kw, out_h, out_w).
    Tap (ky, kx) reads padded[..., ky*r + i*s, kx*r + j*s].
    """
    n, c = padded.shape[:2]
    sh, sw = stride
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=padded.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            cols[:, :, ky, kx] = padded[:, :, y0:y0 + sh * (out_h - 1) + 1:sh, x0:x0 + sw * (out_w - 1) + 1:sw]
    return cols


def col2im(cols: np.ndarray, padded_shape: Tuple[int, int, int, int], stride: Tuple[int, int],
           dilation: int) -> np.ndarray:
    """
    Scatter-add (N, C, kh, kw, out_h, out_w) patches back into a padded image.
    """
    _, _, kh, kw, out_h, out_w = cols.shape
    sh, sw = stride
    img = np.zeros(padded_shape, dtype=cols.dtype)
    for ky in range(kh):
        y0 = ky * dilation
        for kx in range(kw):
            x0 = kx * dilation
            img[:, :, y0:y0 + sh * (out_h - 1) + 1:sh, x0:x0 + sw * (out_w - 1) + 1:sw] += cols[:, :, ky, kx]
    return img


# ─── convolution ────────────────────────────────────────────────────────────

def conv2d(x, w, b=None, spec: Optional[ConvSpec] = None) -> Variable:
    """
    Dilated cross-correlation y[i] = sum_k x[i*s + r*k - p] w[k] (+ b).

    Args:
        x: [N, Cin, H, W]
        w: [Cout, Cin, kh, kw]
        b: optional [Cout]
        spec: geometry; defaults to stride 1, no padding, rate 1 with w's kernel size.
    """
    x = _lift(x)
    w = _lift(w, x)
    b = _lift(b, x) if b is not None else None
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {list(x.shape)} and {list(w.shape)}")
    cout, cin, kh, kw = w.shape
    if spec is None:
        spec = ConvSpec(cin, cout, (kh, kw))
    if (spec.in_channels, spec.out_channels, tuple(spec.kernel)) != (cin, cout, (kh, kw)):
        raise DimensionError(f"weight {list(w.shape)} does not match {spec}")
    if x.shape[1] != cin:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {list(b.shape)} != [{cout}]")
    if spec.dilation < 1:
        raise ConfigurationError(f"dilation must be >= 1 in {spec}")

    n, _, h, wd = x.shape
    out_h, out_w = spec.output_size(h, wd)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"{spec} on a {h}x{wd} input gives output size {out_h}x{out_w}")
    ph, pw = spec.padding
    r = spec.dilation

    padded = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = im2col(padded, kh, kw, spec.stride, r, out_h, out_w)
    cols2 = cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * out_h * out_w, cin * kh * kw)
    wflat = w.value.reshape(cout, -1)
    y = (cols2 @ wflat.T).reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b.value[None, :, None, None]
    y = np.ascontiguousarray(y)

    def rule(g, s):
        gy2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        dw = (gy2.T @ cols2).reshape(w.shape)
        dcols = (gy2 @ wflat).reshape(n, out_h, out_w, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dpad = col2im(dcols, padded.shape, spec.stride, r)
        dx = dpad[:, :, ph:ph + h, pw:pw + wd]
        grads = [np.ascontiguousarray(dx), dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return apply("conv2d", inputs, y, rule, saved={"spec": spec})


def transposed_conv2d(x, w, b=None, stride=1, padding=0, output_padding=0, dilation: int = 1) -> Variable:
    """
    Transposed convolution: the backward-data pass of a conv2d whose weight is `w`.

    Args:
        x: [N, Cin, H, W]
        w: [Cin, Cout, kh, kw]
        b: optional [Cout]

    Output size per axis is (H - 1)*s - 2p + r*(k - 1) + 1 + output_padding.
    """
    x = _lift(x)
    w = _lift(w, x)
    b = _lift(b, x) if b is not None else None
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise DimensionError(f"transposed_conv2d expects 4-D input and weight, got {list(x.shape)} and {list(w.shape)}")
    cin, cout, kh, kw = w.shape
    if x.shape[1] != cin:
        raise DimensionError(f"transposed_conv2d input has {x.shape[1]} channels, weight expects {cin}")
    if b is not None and b.shape != (cout,):
        raise DimensionError(f"transposed_conv2d bias shape {list(b.shape)} != [{cout}]")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if dilation < 1 or min(sh, sw) < 1 or min(ph, pw, oph, opw) < 0:
        raise ConfigurationError(f"invalid transposed geometry stride={stride} padding={padding} dilation={dilation}")
    if oph >= max(sh, dilation) or opw >= max(sw, dilation):
        raise ConfigurationError(f"output_padding {output_padding} must be smaller than stride or dilation")

    n, _, h, wd = x.shape
    out_h = transposed_output_size(h, kh, sh, ph, oph, dilation)
    out_w = transposed_output_size(wd, kw, sw, pw, opw, dilation)
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"transposed conv on {h}x{wd} gives output size {out_h}x{out_w}")

    xf = x.value.transpose(0, 2, 3, 1).reshape(n * h * wd, cin)
    wflat = w.value.reshape(cin, -1)
    cols = (xf @ wflat).reshape(n, h, wd, cout, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    padded_shape = (n, cout, out_h + 2 * ph, out_w + 2 * pw)
    full = col2im(cols, padded_shape, (sh, sw), dilation)
    y = np.ascontiguousarray(full[:, :, ph:ph + out_h, pw:pw + out_w])
    if b is not None:
        y = y + b.value[None, :, None, None]

    def rule(g, s):
        gpad = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        gcols = im2col(gpad, kh, kw, (sh, sw), dilation, h, wd)
        gcols2 = gcols.transpose(0, 4, 5, 1, 2, 3).reshape(n * h * wd, cout * kh * kw)
        dx = (gcols2 @ wflat.T).reshape(n, h, wd, cin).transpose(0, 3, 1, 2)
        dw = (xf.T @ gcols2).reshape(w.shape)
        grads = [np.ascontiguousarray(dx), dw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, w) if b is None else (x, w, b)
    return apply("transposed_conv2d", inputs, y, rule)


# ─── pooling ────────────────────────────────────────────────────────────────

def max_pool2d(x, spec: PoolSpec) -> Variable:
    """
    Windowed maximum. Padding reads as -inf. The gradient goes to the first
    maximal tap of each window in row-major order; argmax tap indices are
    exposed as `result.aux["argmax"]`.
    """
    x = _lift(x)
    if x.value.ndim != 4:
        raise DimensionError(f"max_pool2d expects a 4-D input, got {list(x.shape)}")
    if spec.mode != "max":
        raise ConfigurationError(f"unsupported pooling mode {spec.mode!r}")
    kh, kw = spec.kernel
    sh, sw = spec.strides
    ph, pw = spec.padding
    n, c, h, wd = x.shape
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ConfigurationError(f"pool kernel {kh}x{kw} is larger than the padded {h + 2 * ph}x{wd + 2 * pw} input")
    out_h, out_w = spec.output_size(h, wd)

    padded = np.pad(x.value, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=-np.inf)
    taps = im2col(padded, kh, kw, (sh, sw), 1, out_h, out_w).reshape(n, c, kh * kw, out_h, out_w)
    argmax = taps.argmax(axis=2)
    y = np.take_along_axis(taps, argmax[:, :, None], axis=2)[:, :, 0]
    y = np.ascontiguousarray(y)

    def rule(g, s):
        dtaps = np.zeros((n, c, kh, kw, out_h, out_w), dtype=g.dtype)
        for t in range(kh * kw):
            dtaps[:, :, t // kw, t % kw] = g * (argmax == t)
        dpad = col2im(dtaps, padded.shape, (sh, sw), 1)
        return (np.ascontiguousarray(dpad[:, :, ph:ph + h, pw:pw + wd]),)

    out = apply("max_pool2d", (x,), y, rule, saved={"spec": spec})
    out.aux = {"argmax": argmax}
    return out


# ─── bilinear upsampling ────────────────────────────────────────────────────

def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """
    (n_out, n_in) linear interpolation weights, half-pixel convention:
    src = (dst + 0.5) * n_in / n_out - 0.5, clamped at 0.
    """
    scale = n_in / n_out
    src = np.maximum((np.arange(n_out) + 0.5) * scale - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m.astype(dtype)


def bilinear_upsample(x, target: Tuple[int, int]) -> Variable:
    x = _lift(x)
    if x.value.ndim != 4:
        raise DimensionError(f"bilinear_upsample expects a 4-D input, got {list(x.shape)}")
    h2, w2 = _pair(target)
    if h2 < 1 or w2 < 1:
        raise ConfigurationError(f"upsample target {h2}x{w2} must be at least 1x1")
    _, _, h, wd = x.shape
    mh = interp_matrix(h, h2, x.dtype)
    mw = interp_matrix(wd, w2, x.dtype)
    y = np.ascontiguousarray((mh @ x.value) @ mw.T)

    def rule(g, s):
        return (np.ascontiguousarray(mh.T @ (g @ mw)),)

    return apply("bilinear_upsample", (x,), y, rule)


# ─── batch normalization ────────────────────────────────────────────────────

@dataclass
class RunningStats:
    """
    Mutable running mean/variance of one batch-norm layer. Updates replace
    the arrays; `on_update`, when set, receives (mean, var) after each update.
    """

    mean: np.ndarray
    var: np.ndarray
    on_update: Optional[object] = field(default=None, repr=False)

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.mean = mean
        self.var = var
        if self.on_update is not None:
            self.on_update(mean, var)


def batch_norm2d(x, gamma, beta, running: RunningStats, mode: str = "train", momentum: float = BN_MOMENTUM,
                 eps: float = BN_EPS) -> Variable:
    x = _lift(x)
    gamma = _lift(gamma, x)
    beta = _lift(beta, x)
    if x.value.ndim != 4:
        raise DimensionError(f"batch_norm2d expects a 4-D input, got {list(x.shape)}")
    n, c, h, wd = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm2d affine shapes {list(gamma.shape)}/{list(beta.shape)} != [{c}]")
    xv = x.value
    g_, b_ = gamma.value[None, :, None, None], beta.value[None, :, None, None]

    if mode == "train":
        m = n * h * wd
        if m < 2:
            raise ContractError("batch_norm2d in train mode needs N*H*W >= 2")
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (xv - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = (g_ * xhat + b_).astype(xv.dtype, copy=False)
        stat_dtype = running.mean.dtype
        running.update(((1 - momentum) * running.mean + momentum * mean).astype(stat_dtype),
                       ((1 - momentum) * running.var + momentum * var * m / (m - 1)).astype(stat_dtype))

        def rule(gr, s):
            dxhat = gr * g_
            sum_d = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - sum_d - xhat * sum_dx)
            return (dx.astype(xv.dtype, copy=False), (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3)))
    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(running.var + eps)).astype(xv.dtype)
        xhat = (xv - running.mean.astype(xv.dtype)[None, :, None, None]) * inv_std[None, :, None, None]
        y = (g_ * xhat + b_).astype(xv.dtype, copy=False)

        def rule(gr, s):
            return (gr * g_ * inv_std[None, :, None, None], (gr * xhat).sum(axis=(0, 2, 3)), gr.sum(axis=(0, 2, 3)))
    else:
        raise ContractError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")

    return apply("batch_norm2d", (x, gamma, beta), np.ascontiguousarray(y), rule)


# ─── softmax ────────────────────────────────────────────────────────────────

def softmax_channels(x) -> Variable:
    x = _lift(x)
    if x.value.ndim != 4 or x.shape[1] < 2:
        raise ContractError(f"softmax_channels needs [N, K>=2, H, W], got {list(x.shape)}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def rule(g, s):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return apply("softmax_channels", (x,), y, rule)


# ─── receptive field ────────────────────────────────────────────────────────

LayerSpec = Union[ConvSpec, PoolSpec]


def receptive_field(chain: Sequence[LayerSpec]) -> ReceptiveField:
    """
    Walk a chain of layers: rf += (k - 1) * r * jump, jump *= s, from rf = jump = 1.
    """
    if not chain:
        raise ContractError("receptive_field needs a nonempty chain")
    rf, jump = 1, 1
    for layer in chain:
        if isinstance(layer, ConvSpec):
            k, s, r = layer.kernel[0], layer.stride[0], layer.dilation
        elif isinstance(layer, PoolSpec):
            k, s, r = layer.kernel[0], layer.strides[0], 1
        else:
            raise ContractError(f"unsupported layer in chain: {layer!r}")
        rf += (k - 1) * r * jump
        jump *= s
    return ReceptiveField(rf=rf, jump=jump)


def receptive_field_table(chain: Sequence[LayerSpec]) -> List[ReceptiveField]:
    """Cumulative receptive field after every layer of `chain`."""
    return [receptive_field(chain[:i + 1]) for i in range(len(chain))]


def influence_mask(chain: Sequence[LayerSpec], size: int = 64) -> np.ndarray:
    """
    Brute-force receptive field: run `chain` as single-channel all-ones layers
    on a size x size input, backpropagate the centre output pixel and return
    the boolean mask of input pixels with nonzero gradient. Pools are modelled
    as box filters of the same geometry, since a max pool's gradient only
    reaches the winning tap.
    """
    with precision(np.float64):
        tape = Tape()
        x = tape.variable(np.ones((1, 1, size, size)))
        y = x
        for layer in chain:
            if isinstance(layer, ConvSpec):
                k, s, r = layer.kernel, layer.stride, layer.dilation
            else:
                k, s, r = layer.kernel, layer.strides, 1
            ones = np.ones((1, 1) + tuple(k))
            y = conv2d(y, ones, None, ConvSpec(1, 1, tuple(k), tuple(s), (0, 0), r))
        _, _, oh, ow = y.shape
        centre = np.zeros(y.shape)
        centre[0, 0, oh // 2, ow // 2] = 1.0
        root = sum_all(mul(y, centre))
        run_backward(root)
        return x.grad[0, 0] != 0


def influence_extent(chain: Sequence[LayerSpec], size: int = 64) -> int:
    """Height of the bounding box of `influence_mask`."""
    rows = np.flatnonzero(influence_mask(chain, size).any(axis=1))
    return int(rows[-1] - rows[0] + 1) if rows.size else 0
