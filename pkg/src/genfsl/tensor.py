"""
Dense float32 layer primitives with explicit forward/backward passes.

Every tensor is a C-ordered ``numpy.ndarray`` of dtype float32. Layers are
plain functions; a backward function takes the same primal inputs as its
forward plus the upstream gradient and returns gradients shaped like the
primals. There is no autodiff graph.

Convolution follows the cross-correlation convention (no kernel flip).
Convolution weights are laid out ``(out, in, kh, kw)``; transposed
convolution weights are laid out ``(in, out, kh, kw)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GeometryError, NonFiniteError, ShapeError

DTYPE = np.float32
BCE_CLAMP = 1e-7

# sigmoid output is clipped to the open unit interval representable in float32
_SIG_LO = np.nextafter(DTYPE(0), DTYPE(1))
_SIG_HI = np.nextafter(DTYPE(1), DTYPE(0))


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


def check_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{where} produced a non-finite value")
    return x


def _expect_rank(x, rank, name):
    if x.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got shape {x.shape}")


@dataclass(frozen=True)
class ConvSpec:
    """Geometry of a 2-D (transposed) convolution.

    ``output_padding`` only affects transposed convolution, where it adds
    rows/columns at the bottom/right so that a stride-2 layer can exactly
    invert a stride-2 convolution with odd kernel.
    """

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    output_padding: int = 0

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "kernel_h", "kernel_w", "padding", "output_padding"):
            if getattr(self, name) < 0:
                raise GeometryError(f"{name} must be non-negative")
        if self.stride < 1:
            raise GeometryError("stride must be >= 1")
        if self.output_padding >= self.stride and self.output_padding > 0:
            raise GeometryError("output_padding must be smaller than stride")

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if h + 2 * self.padding < self.kernel_h or w + 2 * self.padding < self.kernel_w or oh < 1 or ow < 1:
            raise GeometryError(f"convolution of {h}x{w} input with {self} has empty output")
        return oh, ow

    def transpose_output_size(self, h: int, w: int) -> tuple[int, int]:
        oh = (h - 1) * self.stride - 2 * self.padding + self.kernel_h + self.output_padding
        ow = (w - 1) * self.stride - 2 * self.padding + self.kernel_w + self.output_padding
        if oh < 1 or ow < 1:
            raise GeometryError(f"transposed convolution of {h}x{w} input with {self} has empty output")
        return oh, ow


def _check_conv_weights(weights, spec, transposed):
    expect = (spec.in_channels, spec.out_channels) if transposed else (spec.out_channels, spec.in_channels)
    expect = expect + (spec.kernel_h, spec.kernel_w)
    if weights.shape != expect:
        raise ShapeError(f"weights shape {weights.shape} does not match {expect} required by {spec}")


def _gather_patches(xpad, kh, kw, stride, oh, ow):
    """Patches of a padded NCHW tensor as an (N, oh, ow, C, kh, kw) view."""
    win = sliding_window_view(xpad, (kh, kw), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def _scatter_patches(cols, canvas, stride):
    """Add (N, h, w, C, kh, kw) patch values into an NCHW canvas in place."""
    _, h, w, _, kh, kw = cols.shape
    for i in range(kh):
        for j in range(kw):
            canvas[:, :, i : i + (h - 1) * stride + 1 : stride, j : j + (w - 1) * stride + 1 : stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return canvas


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def conv2d_forward(input, weights, bias, spec: ConvSpec) -> np.ndarray:
    x, wt, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _expect_rank(x, 4, "input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    _check_conv_weights(wt, spec, transposed=False)
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
    n, _, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    p = spec.padding
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _gather_patches(xpad, spec.kernel_h, spec.kernel_w, spec.stride, oh, ow)
    cols = cols.reshape(n * oh * ow, -1)
    out = cols @ wt.reshape(spec.out_channels, -1).T
    out += b
    out = np.ascontiguousarray(out.reshape(n, oh, ow, spec.out_channels).transpose(0, 3, 1, 2))
    return check_finite(out, "conv2d_forward")


def conv2d_backward(input, weights, spec: ConvSpec, grad_output):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x, wt, g = as_tensor(input), as_tensor(weights), as_tensor(grad_output)
    _expect_rank(x, 4, "input")
    _check_conv_weights(wt, spec, transposed=False)
    n, c, h, w = x.shape
    oh, ow = spec.output_size(h, w)
    if g.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_output shape {g.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    p, kh, kw = spec.padding, spec.kernel_h, spec.kernel_w
    xpad = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = _gather_patches(xpad, kh, kw, spec.stride, oh, ow).reshape(n * oh * ow, -1)
    g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, spec.out_channels)

    grad_w = (g2.T @ cols).reshape(wt.shape)
    grad_b = g2.sum(axis=0)
    dcols = (g2 @ wt.reshape(spec.out_channels, -1)).reshape(n, oh, ow, c, kh, kw)
    gpad = np.zeros(xpad.shape, dtype=DTYPE)
    _scatter_patches(dcols, gpad, spec.stride)
    grad_x = np.ascontiguousarray(gpad[:, :, p : p + h, p : p + w])
    for name, arr in (("grad_input", grad_x), ("grad_weights", grad_w), ("grad_bias", grad_b)):
        check_finite(arr, f"conv2d_backward {name}")
    return grad_x, grad_w, grad_b


def _transpose_canvas_shape(spec, n, h, w):
    oh, ow = spec.transpose_output_size(h, w)
    # canvas holds every scattered patch plus the cropped padding border
    ch = max((h - 1) * spec.stride + spec.kernel_h, oh + spec.padding)
    cw = max((w - 1) * spec.stride + spec.kernel_w, ow + spec.padding)
    return (n, spec.out_channels, ch, cw), (oh, ow)


def conv_transpose2d_forward(input, weights, bias, spec: ConvSpec) -> np.ndarray:
    x, wt, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _expect_rank(x, 4, "input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    _check_conv_weights(wt, spec, transposed=True)
    if b.shape != (spec.out_channels,):
        raise ShapeError(f"bias shape {b.shape} != ({spec.out_channels},)")
    n, c, h, w = x.shape
    canvas_shape, (oh, ow) = _transpose_canvas_shape(spec, n, h, w)
    x2 = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    cols = (x2 @ wt.reshape(c, -1)).reshape(n, h, w, spec.out_channels, spec.kernel_h, spec.kernel_w)
    canvas = np.zeros(canvas_shape, dtype=DTYPE)
    _scatter_patches(cols, canvas, spec.stride)
    p = spec.padding
    out = canvas[:, :, p : p + oh, p : p + ow] + b[None, :, None, None]
    return check_finite(np.ascontiguousarray(out), "conv_transpose2d_forward")


def conv_transpose2d_backward(input, weights, spec: ConvSpec, grad_output):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x, wt, g = as_tensor(input), as_tensor(weights), as_tensor(grad_output)
    _expect_rank(x, 4, "input")
    _check_conv_weights(wt, spec, transposed=True)
    n, c, h, w = x.shape
    canvas_shape, (oh, ow) = _transpose_canvas_shape(spec, n, h, w)
    if g.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_output shape {g.shape} != forward output {(n, spec.out_channels, oh, ow)}")
    p = spec.padding
    canvas = np.zeros(canvas_shape, dtype=DTYPE)
    canvas[:, :, p : p + oh, p : p + ow] = g
    dcols = _gather_patches(canvas, spec.kernel_h, spec.kernel_w, spec.stride, h, w).reshape(n * h * w, -1)
    x2 = x.transpose(0, 2, 3, 1).reshape(n * h * w, c)

    grad_x = (dcols @ wt.reshape(c, -1).T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
    grad_x = np.ascontiguousarray(grad_x)
    grad_w = (x2.T @ dcols).reshape(wt.shape)
    grad_b = g.sum(axis=(0, 2, 3))
    for name, arr in (("grad_input", grad_x), ("grad_weights", grad_w), ("grad_bias", grad_b)):
        check_finite(arr, f"conv_transpose2d_backward {name}")
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def maxpool2d_forward(input, window: int, stride: int):
    """Max pooling; returns ``(output, argmax)``.

    ``argmax`` holds, for every output element, the flat index into its
    input ``H*W`` plane. Ties resolve to the lowest flat index.
    """
    x = as_tensor(input)
    _expect_rank(x, 4, "input")
    if window < 1 or stride < 1:
        raise GeometryError("window and stride must be >= 1")
    n, c, h, w = x.shape
    oh, ow = (h - window) // stride + 1, (w - window) // stride + 1
    if h < window or w < window:
        raise GeometryError(f"pool window {window} larger than {h}x{w} input")
    win = sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, window * window)
    local = flat.argmax(axis=-1)  # first occurrence wins
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // window
    cols = np.arange(ow)[None, :] * stride + local % window
    argmax = rows * w + cols
    return check_finite(np.ascontiguousarray(out), "maxpool2d_forward"), argmax


def maxpool2d_backward(argmax, grad_output, input_shape) -> np.ndarray:
    g = as_tensor(grad_output)
    if argmax.shape != g.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != grad_output shape {g.shape}")
    n, c, h, w = input_shape
    grad = np.zeros((n, c, h * w), dtype=DTYPE)
    idx = argmax.reshape(n, c, -1)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(grad, (ni[..., None], ci[..., None], idx), g.reshape(n, c, -1))
    return check_finite(grad.reshape(n, c, h, w), "maxpool2d_backward")


# ---------------------------------------------------------------------------
# elementwise activations
# ---------------------------------------------------------------------------


def relu_forward(x) -> np.ndarray:
    x = as_tensor(x)
    return check_finite(np.maximum(x, DTYPE(0)), "relu_forward")


def relu_backward(x, grad_output) -> np.ndarray:
    """Subgradient at exactly zero is zero."""
    x, g = as_tensor(x), as_tensor(grad_output)
    return np.where(x > 0, g, DTYPE(0))


def sigmoid_forward(x) -> np.ndarray:
    x = as_tensor(x).astype(np.float64)
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(DTYPE)
    return check_finite(np.clip(s, _SIG_LO, _SIG_HI), "sigmoid_forward")


def sigmoid_backward(output, grad_output) -> np.ndarray:
    """Gradient through a sigmoid given its forward *output*."""
    s, g = as_tensor(output), as_tensor(grad_output)
    return check_finite(g * s * (1 - s), "sigmoid_backward")


# ---------------------------------------------------------------------------
# fully connected
# ---------------------------------------------------------------------------


def linear_forward(input, weights, bias) -> np.ndarray:
    x, wt, b = as_tensor(input), as_tensor(weights), as_tensor(bias)
    _expect_rank(x, 2, "input")
    _expect_rank(wt, 2, "weights")
    if x.shape[1] != wt.shape[1]:
        raise ShapeError(f"input features {x.shape[1]} != weight columns {wt.shape[1]}")
    if b.shape != (wt.shape[0],):
        raise ShapeError(f"bias shape {b.shape} != ({wt.shape[0]},)")
    return check_finite(x @ wt.T + b, "linear_forward")


def linear_backward(input, weights, grad_output):
    """Return ``(grad_input, grad_weights, grad_bias)``."""
    x, wt, g = as_tensor(input), as_tensor(weights), as_tensor(grad_output)
    if g.shape != (x.shape[0], wt.shape[0]):
        raise ShapeError(f"grad_output shape {g.shape} != {(x.shape[0], wt.shape[0])}")
    grads = (g @ wt, g.T @ x, g.sum(axis=0))
    for arr in grads:
        check_finite(arr, "linear_backward")
    return grads


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def mse_loss(prediction, target):
    """Mean squared error over all elements; returns ``(loss, grad)``."""
    p, t = as_tensor(prediction), as_tensor(target)
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}")
    diff = p - t
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    grad = (2.0 / diff.size) * diff
    if not np.isfinite(loss):
        raise NonFiniteError("mse_loss produced a non-finite value")
    return loss, check_finite(grad.astype(DTYPE), "mse_loss grad")


def bce_loss(score, label):
    """Binary cross-entropy averaged over the batch; returns ``(loss, grad)``.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` and the gradient is
    evaluated at the clamped value.
    """
    p = as_tensor(score)
    y = np.asarray(label, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeError(f"score shape {p.shape} != label shape {y.shape}")
    pc = np.clip(p.astype(np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    loss = float(-np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc)))
    grad = (pc - y) / (pc * (1 - pc)) / p.size
    if not np.isfinite(loss):
        raise NonFiniteError("bce_loss produced a non-finite value")
    return loss, check_finite(grad.astype(DTYPE), "bce_loss grad")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, param, **hyper) -> "AdamState":
        z = np.zeros(np.shape(param), dtype=DTYPE)
        return cls(m=z, v=z.copy(), **hyper)


def adam_step(param, grad, state: AdamState):
    """One bias-corrected Adam update; returns ``(new_param, new_state)``.

    Inputs are not modified.
    """
    p, g = as_tensor(param), as_tensor(grad)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise ShapeError(f"param {p.shape}, grad {g.shape} and state {state.m.shape} disagree")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    m = (b1 * state.m + (1 - b1) * g).astype(DTYPE)
    v = (b2 * state.v + (1 - b2) * g * g).astype(DTYPE)
    m_hat = m / DTYPE(1 - b1**t)
    v_hat = v / DTYPE(1 - b2**t)
    with np.errstate(over="ignore", invalid="ignore"):
        new_p = (p - DTYPE(state.lr) * m_hat / (np.sqrt(v_hat) + DTYPE(state.epsilon))).astype(DTYPE)
    check_finite(new_p, "adam_step")
    return new_p, replace(state, m=m, v=v, t=t)


@dataclass
class Adam:
    """Adam over a dict of named parameters, updated in place."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, names=None):
        for name in names if names is not None else grads:
            if name not in self.states:
                self.states[name] = AdamState.fresh(
                    params[name], lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon
                )
            params[name], self.states[name] = adam_step(params[name], grads[name], self.states[name])


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_gradient(scalar_function: Callable[[np.ndarray], float], input, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of ``scalar_function`` at ``input``.

    The divisor is the perturbation actually realised in float32, which
    equals ``2*eps`` up to rounding of ``x +/- eps``.
    """
    x = as_tensor(input).copy()
    flat = x.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        hi = DTYPE(orig + DTYPE(eps))
        lo = DTYPE(orig - DTYPE(eps))
        flat[i] = hi
        f_hi = float(scalar_function(x))
        flat[i] = lo
        f_lo = float(scalar_function(x))
        flat[i] = orig
        grad[i] = (f_hi - f_lo) / (float(hi) - float(lo))
    return grad.reshape(x.shape)


def relative_error(a, b) -> float:
    """``max|a - b| / max(1, max|a|, max|b|)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a)), np.max(np.abs(b))))
