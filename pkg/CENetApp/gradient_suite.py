"""
Finite-difference checks of every differentiable op, for the gradcheck command
and the test suite. Each case contracts the op output with a fixed random
tensor so every input coordinate gets a generic nonzero gradient.
"""

import logging
from typing import Callable, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Variable, grad_check
from .losses import cross_entropy_loss, dice_loss
from .nn_ops import (
    ConvSpec,
    PoolSpec,
    RunningStats,
    batch_norm2d,
    bilinear_upsample,
    conv2d,
    max_pool2d,
    softmax_channels,
    transposed_conv2d,
)
from .state import GradCheckReport

logger = logging.getLogger(__name__)

Case = Tuple[str, Callable[[Variable], Variable], np.ndarray]


def _contract(rng: np.random.Generator, shape) -> Callable[[Variable], Variable]:
    weights = rng.uniform(-1.0, 1.0, size=shape)
    return lambda y: ag.sum_all(ag.mul(y, weights))


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    # evenly spread over (-1, 1) in random order: max/relu stay away from ties and kinks
    n = int(np.prod(shape))
    values = (rng.permutation(n) - n / 2.0 + 0.5) * (2.0 / n)
    return values.reshape(shape)


def build_cases(seed: int = 0) -> List[Case]:
    """
    Points are drawn from U(-1, 1) unless the op needs otherwise: positive
    denominators and log arguments, probabilities in (0, 1) for the losses,
    well-separated values for max and relu.
    """
    rng = np.random.default_rng(seed)
    cases: List[Case] = []

    def u(*shape) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=shape)

    def add(name, fn, point, out_shape=None):
        if out_shape is not None:
            head = _contract(rng, out_shape)
            cases.append((name, lambda x, fn=fn, head=head: head(fn(x)), point))
        else:
            cases.append((name, fn, point))

    a = u(3, 4)
    b = u(3, 4)
    add("add", lambda x: ag.add(x, b), a, (3, 4))
    add("sub", lambda x: ag.sub(b, x), a, (3, 4))
    add("mul", lambda x: ag.mul(x, b), a, (3, 4))
    add("div[numerator]", lambda x: ag.div(x, np.abs(b) + 0.5), a, (3, 4))
    add("div[denominator]", lambda x: ag.div(b, x), np.abs(a) + 0.5, (3, 4))
    add("add[broadcast]", lambda x: ag.add(a, x), u(4), (3, 4))
    add("relu", ag.relu, _distinct(rng, (3, 4)), (3, 4))
    add("exp", ag.exp, u(3, 4), (3, 4))
    add("log", ag.log, rng.uniform(0.5, 2.0, size=(3, 4)), (3, 4))
    add("sigmoid", ag.sigmoid, u(3, 4), (3, 4))

    t = u(2, 3, 4)
    add("reduce[sum]", lambda x: ag.reduce("sum", x, (0, 2)), t, (3,))
    add("reduce[mean]", lambda x: ag.reduce("mean", x, 1, keep_dims=True), t, (2, 1, 4))
    add("reduce[max]", lambda x: ag.reduce("max", x, (1, 2)), _distinct(rng, (2, 3, 4)), (2,))
    m = u(4, 5)
    add("matmul[left]", lambda x: ag.matmul(x, m), u(3, 4), (3, 5))
    add("matmul[right]", lambda x: ag.matmul(m.T, x), u(4, 2), (5, 2))

    add("reshape", lambda x: ag.reshape(x, (4, 6)), t, (4, 6))
    add("transpose2d", ag.transpose2d, t, (2, 4, 3))
    add("slice", lambda x: ag.slice_(x, (0, 1, 1), (2, 3, 3)), t, (2, 2, 2))
    add("pad_zero", lambda x: ag.pad_zero(ag.reshape(x, (1, 2, 3, 4)), ((1, 0), (2, 1))), t, (1, 2, 4, 7))
    other = u(1, 2, 3, 4)
    add("concat_channels", lambda x: ag.concat_channels([ag.reshape(x, (1, 2, 3, 4)), other]), t, (1, 4, 3, 4))

    x4 = u(2, 2, 9, 9)
    for rate in (1, 3, 5):
        w = u(3, 2, 3, 3)
        spec = ConvSpec.square(2, 3, 3, 1, rate, rate)
        add(f"conv2d[x, rate {rate}]", lambda x, w=w, spec=spec: conv2d(x, w, None, spec), x4, (2, 3, 9, 9))
    w = u(3, 2, 3, 3)
    bias = u(3)
    spec = ConvSpec.square(2, 3, 3, 2, 1)
    add("conv2d[w, stride 2]", lambda v: conv2d(x4, v, bias, spec), w, (2, 3, 5, 5))
    add("conv2d[b]", lambda v: conv2d(x4, w, v, spec), bias, (2, 3, 5, 5))

    xt = u(1, 2, 4, 4)
    wt = u(2, 3, 3, 3)
    bt = u(3)
    add("transposed_conv2d[x]", lambda x: transposed_conv2d(x, wt, None, 2, 1, 1), xt, (1, 3, 8, 8))
    add("transposed_conv2d[w]", lambda v: transposed_conv2d(xt, v, bt, 2, 1, 1), wt, (1, 3, 8, 8))
    add("transposed_conv2d[b]", lambda v: transposed_conv2d(xt, wt, v, 2, 1, 1), bt, (1, 3, 8, 8))

    add("max_pool2d", lambda x: max_pool2d(x, PoolSpec.square(3, 2, 1)), _distinct(rng, (1, 2, 6, 6)), (1, 2, 3, 3))
    add("bilinear_upsample", lambda x: bilinear_upsample(x, (7, 5)), u(1, 2, 3, 2), (1, 2, 7, 5))

    xb = u(2, 3, 3, 3)
    gamma, beta = u(3), u(3)
    running_mean, running_var = u(3), rng.uniform(0.5, 2.0, size=3)

    def bn(mode):
        def run(x):
            stats = RunningStats(running_mean.copy(), running_var.copy())
            return batch_norm2d(x, gamma, beta, stats, mode=mode)
        return run

    def fresh_stats() -> RunningStats:
        return RunningStats(np.zeros(3), np.ones(3))

    add("batch_norm2d[train]", bn("train"), xb, (2, 3, 3, 3))
    add("batch_norm2d[eval]", bn("eval"), xb, (2, 3, 3, 3))
    add("batch_norm2d[gamma]", lambda v: batch_norm2d(xb, v, beta, fresh_stats()), gamma, (2, 3, 3, 3))
    add("batch_norm2d[beta]", lambda v: batch_norm2d(xb, gamma, v, fresh_stats()), beta, (2, 3, 3, 3))
    add("softmax_channels", softmax_channels, u(1, 3, 2, 2), (1, 3, 2, 2))

    g3 = (rng.integers(0, 3, size=(1, 2, 2))[:, None] == np.arange(3)[None, :, None, None]).astype(np.float64)
    g1 = (rng.uniform(size=(2, 1, 3, 3)) > 0.5).astype(np.float64)
    add("dice_loss", lambda x: dice_loss(softmax_channels(x), g3), u(1, 3, 2, 2))
    add("dice_loss[binary]", lambda x: dice_loss(x, g1), rng.uniform(0.1, 0.9, size=(2, 1, 3, 3)))
    add("cross_entropy_loss", lambda x: cross_entropy_loss(softmax_channels(x), g3), u(1, 3, 2, 2))
    add("cross_entropy_loss[binary]", lambda x: cross_entropy_loss(x, g1), rng.uniform(0.1, 0.9, size=(2, 1, 3, 3)))
    return cases


def run_gradient_suite(seed: int = 0, tolerance: float = 1e-4) -> List[Tuple[str, GradCheckReport]]:
    results = []
    for name, fn, point in build_cases(seed):
        report = grad_check(fn, point, tolerance=tolerance)
        if not report["passed"]:
            logger.warning(f"❌ {name}: max relative error {report['max_rel_error']:.3e} at {report['worst_index']}")
        results.append((name, report))
    return results
