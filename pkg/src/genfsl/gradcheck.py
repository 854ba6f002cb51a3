"""Finite-difference verification of every layer's backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

EPS = 1e-3
TOL = 1e-3
TOL_SMOOTH = 1e-4


@dataclass
class LayerCheck:
    layer: str
    max_rel_error: float
    tolerance: float
    instances: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def _projection(out, rng):
    """Random fixed weights turning a tensor output into a scalar."""
    r = rng.uniform(-1.0, 1.0, out.shape)
    return r, lambda y: float(np.sum(np.asarray(y, dtype=np.float64) * r))


def _distinct_values(rng, shape, gap=0.01):
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 10)
    return vals.reshape(shape).astype(np.float32)


def _check_conv(rng, transposed):
    n, cin, cout = 2, 4, 3
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    op = int(rng.integers(0, stride)) if transposed else 0
    spec = T.ConvSpec(cin, cout, 3, 3, stride=stride, padding=pad, output_padding=op)
    size = 3 if transposed else 5
    x = rng.standard_normal((n, cin, size, size)).astype(np.float32)
    wshape = (cin, cout, 3, 3) if transposed else (cout, cin, 3, 3)
    w = (0.5 * rng.standard_normal(wshape)).astype(np.float32)
    b = rng.standard_normal(cout).astype(np.float32)
    fwd = T.conv_transpose2d_forward if transposed else T.conv2d_forward
    bwd = T.conv_transpose2d_backward if transposed else T.conv2d_backward
    r, proj = _projection(fwd(x, w, b, spec), rng)
    gx, gw, gb = bwd(x, w, spec, r.astype(np.float32))
    return max(
        T.relative_error(gx, T.finite_diff_gradient(lambda v: proj(fwd(v, w, b, spec)), x, EPS)),
        T.relative_error(gw, T.finite_diff_gradient(lambda v: proj(fwd(x, v, b, spec)), w, EPS)),
        T.relative_error(gb, T.finite_diff_gradient(lambda v: proj(fwd(x, w, v, spec)), b, EPS)),
    )


def check_conv2d(rng):
    return _check_conv(rng, transposed=False)


def check_conv_transpose2d(rng):
    return _check_conv(rng, transposed=True)


def check_maxpool2d(rng):
    window = int(rng.integers(2, 4))
    stride = int(rng.integers(1, window + 1))
    x = _distinct_values(rng, (2, 2, 6, 6))
    out, argmax = T.maxpool2d_forward(x, window, stride)
    r, proj = _projection(out, rng)
    g = T.maxpool2d_backward(argmax, r.astype(np.float32), x.shape)
    num = T.finite_diff_gradient(lambda v: proj(T.maxpool2d_forward(v, window, stride)[0]), x, EPS)
    return T.relative_error(g, num)


def check_linear(rng):
    x = rng.standard_normal((3, 6)).astype(np.float32)
    w = rng.standard_normal((4, 6)).astype(np.float32)
    b = rng.standard_normal(4).astype(np.float32)
    r, proj = _projection(T.linear_forward(x, w, b), rng)
    gx, gw, gb = T.linear_backward(x, w, r.astype(np.float32))
    return max(
        T.relative_error(gx, T.finite_diff_gradient(lambda v: proj(T.linear_forward(v, w, b)), x, EPS)),
        T.relative_error(gw, T.finite_diff_gradient(lambda v: proj(T.linear_forward(x, v, b)), w, EPS)),
        T.relative_error(gb, T.finite_diff_gradient(lambda v: proj(T.linear_forward(x, w, v)), b, EPS)),
    )


def check_relu(rng):
    # keep inputs clear of the kink so both difference points share a branch
    x = rng.uniform(0.05, 2.0, (4, 5)) * rng.choice([-1, 1], (4, 5))
    x = x.astype(np.float32)
    r, proj = _projection(x, rng)
    g = T.relu_backward(x, r.astype(np.float32))
    return T.relative_error(g, T.finite_diff_gradient(lambda v: proj(T.relu_forward(v)), x, EPS))


def check_sigmoid(rng):
    x = rng.uniform(-4, 4, (4, 5)).astype(np.float32)
    r, proj = _projection(x, rng)
    g = T.sigmoid_backward(T.sigmoid_forward(x), r.astype(np.float32))
    return T.relative_error(g, T.finite_diff_gradient(lambda v: proj(T.sigmoid_forward(v)), x, EPS))


def check_mse(rng):
    p = rng.uniform(0, 1, (3, 7)).astype(np.float32)
    t = rng.uniform(0, 1, (3, 7)).astype(np.float32)
    _, g = T.mse_loss(p, t)
    return T.relative_error(g, T.finite_diff_gradient(lambda v: T.mse_loss(v, t)[0], p, EPS))


def check_bce(rng):
    # central-difference truncation error grows like 1/p**3 near the clamp
    p = rng.uniform(0.2, 0.8, 8).astype(np.float32)
    y = rng.integers(0, 2, 8)
    _, g = T.bce_loss(p, y)
    return T.relative_error(g, T.finite_diff_gradient(lambda v: T.bce_loss(v, y)[0], p, EPS))


CHECKS = {
    "conv2d": (check_conv2d, TOL),
    "conv_transpose2d": (check_conv_transpose2d, TOL),
    "maxpool2d": (check_maxpool2d, TOL),
    "linear": (check_linear, TOL),
    "relu": (check_relu, TOL_SMOOTH),
    "sigmoid": (check_sigmoid, TOL_SMOOTH),
    "mse": (check_mse, TOL_SMOOTH),
    "bce": (check_bce, TOL_SMOOTH),
}


def run_gradcheck_suite(instances: int = 5, seed: int = 0) -> list[LayerCheck]:
    """Run every layer check on ``instances`` random problems."""
    results = []
    for i, (name, (check, tol)) in enumerate(CHECKS.items()):
        rng = np.random.default_rng([seed, i])
        worst = max(check(rng) for _ in range(instances))
        results.append(LayerCheck(name, worst, tol, instances))
    return results
