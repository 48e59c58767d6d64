"""Central-difference checks of every differentiable operation and the full model."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .model import ModelConfig, TwoStreamNet, frames_to_input
from .tensor import LSTMParams, Tensor

GRAD_TOL = 1e-4
EPS = 1e-5

# 8x8 frames, k=2, d=4, u=3, C=3
TINY = dict(resolution=8, k=2, hidden=3, num_classes=3, stages=[[2, 3, 1], [4, 3, 1]])


def _t(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _away_from_zero(rng, *shape) -> Tensor:
    """Inputs for kinked ops (relu, max): magnitudes kept well above eps."""
    x = rng.uniform(0.1, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    return Tensor(x, requires_grad=True, dtype=np.float64)


def _projected(out_fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    """Reduce an arbitrary-shaped output to a scalar through fixed random weights."""
    probe = out_fn()
    w = Tensor(rng.normal(size=probe.shape), dtype=np.float64)
    return lambda: (out_fn() * w).sum()


def _distinct_blocks(rng, shape) -> Tensor:
    """Max-pool input whose 2x2 windows have a clear unique maximum."""
    x = rng.uniform(-1, 1, size=shape)
    b, c, h, w = shape
    bonus = np.zeros(shape)
    for i in range(0, h - 1, 2):
        for j in range(0, w - 1, 2):
            di, dj = rng.integers(2), rng.integers(2)
            bonus[:, :, i + di, j + dj] = 2.5
    return Tensor(x + bonus, requires_grad=True, dtype=np.float64)


def op_cases(rng) -> Iterator[tuple[str, Callable[[], Tensor], list[Tensor]]]:
    """(name, scalar closure, tensors to differentiate) for each primitive."""
    a, b = _t(rng, 3, 4), _t(rng, 4)
    yield "add (broadcast)", _projected(lambda: a + b, rng), [a, b]
    a, b = _t(rng, 3, 4), _t(rng, 3, 1)
    yield "mul (broadcast)", _projected(lambda: a * b, rng), [a, b]
    a, b = _t(rng, 2, 3), _t(rng, 2, 3, lo=0.5, hi=2.0)
    yield "div", _projected(lambda: a / b - b, rng), [a, b]
    a = _t(rng, 2, 3)
    yield "exp", _projected(lambda: T.exp(a), rng), [a]
    a = _t(rng, 2, 3, lo=0.2, hi=3.0)
    yield "log", _projected(lambda: T.log(a), rng), [a]
    a = _t(rng, 3, 4, lo=-4, hi=4)
    yield "sigmoid", _projected(lambda: T.sigmoid(a), rng), [a]
    a = _t(rng, 3, 4, lo=-3, hi=3)
    yield "tanh", _projected(lambda: T.tanh(a), rng), [a]
    a = _away_from_zero(rng, 3, 4)
    yield "relu", _projected(lambda: T.relu(a), rng), [a]
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    yield "matmul (batched)", _projected(lambda: T.matmul(a, b), rng), [a, b]
    x, w, bias = _t(rng, 3, 3), _t(rng, 3, 3), _t(rng, 3)
    yield "linear", _projected(lambda: T.linear(x, w, bias), rng), [x, w, bias]
    a = _t(rng, 2, 3, 4)
    yield "sum/mean/reshape/transpose", _projected(
        lambda: T.reshape(T.transpose(a, (2, 0, 1)), (4, 6)).sum(axis=0) + a.mean(axis=(0, 2)).sum(), rng), [a]
    a = _t(rng, 3, 5)
    yield "getitem", _projected(lambda: a[1:, ::2] * a[0:2, 1:4], rng), [a]
    a, b = _t(rng, 2, 3), _t(rng, 2, 2)
    yield "concat_last", _projected(lambda: T.concat_last(a, b), rng), [a, b]
    a, b = _t(rng, 2, 3), _t(rng, 2, 3)
    yield "stack", _projected(lambda: T.stack([a, b], axis=1), rng), [a, b]
    a = _t(rng, 3, 4, lo=-3, hi=3)
    yield "softmax", _projected(lambda: T.softmax(a), rng), [a]
    a = _t(rng, 3, 4, lo=-3, hi=3)
    yield "log_softmax", _projected(lambda: T.log_softmax(a), rng), [a]
    logits = _t(rng, 4, 3, lo=-3, hi=3)
    labels = rng.integers(0, 3, size=4)
    cw = Tensor(rng.uniform(0.5, 2.0, size=3), dtype=np.float64)
    yield "cross_entropy", lambda: T.cross_entropy(logits, labels, cw), [logits]
    x, k, kb = _t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
    yield "conv2d (pad 1)", _projected(lambda: T.conv2d(x, k, kb, stride=1, padding=1), rng), [x, k, kb]
    x, k, kb = _t(rng, 1, 2, 6, 7), _t(rng, 2, 2, 2, 3), _t(rng, 2)
    yield "conv2d (stride 2)", _projected(lambda: T.conv2d(x, k, kb, stride=2, padding=0), rng), [x, k, kb]
    x = _distinct_blocks(rng, (2, 2, 4, 5))
    yield "max_pool2d", _projected(lambda: T.max_pool2d(x, 2), rng), [x]
    x = _t(rng, 2, 3, 4, 4)
    yield "global_avg_pool", _projected(lambda: T.global_avg_pool(x), rng), [x]
    cell = LSTMParams(_t(rng, 3, 8), _t(rng, 2, 8), _t(rng, 8))
    x, h, c = _t(rng, 2, 3), _t(rng, 2, 2), _t(rng, 2, 2)

    def lstm():
        h1, c1 = T.lstm_cell(x, h, c, cell)
        h2, c2 = T.lstm_cell(x * 0.5, h1, c1, cell)
        return T.concat_last(h2, c2)

    yield "lstm_cell (2 steps)", _projected(lstm, rng), [x, h, c, cell.w_ih, cell.w_hh, cell.bias]


def tiny_model(seed: int = 0, single_stream: bool = False) -> TwoStreamNet:
    cfg = ModelConfig(single_stream=single_stream, **TINY)
    net = TwoStreamNet(cfg, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    # A random, well-conditioned point of parameter space rather than the
    # initializer. At init the 8x8 encoders emit ~1e-2 features; with O(1)
    # weights everywhere the LSTM gates saturate. Both push some gradients
    # below ~1e-7, where central differences are dominated by rounding.
    for name, p in net.params.items():
        if name.endswith(".weight") and "encoder" in name:
            bound = np.sqrt(6.0 / np.prod(p.shape[1:]))
        else:
            bound = 0.5
        p.data = rng.uniform(-bound, bound, size=p.shape)
    return net


def model_case(seed: int, single_stream: bool = False):
    """Loss closure over a random 2-clip batch for the tiny model, plus its parameters."""
    rng = np.random.default_rng(seed)
    net = tiny_model(seed, single_stream)
    cfg = net.config
    shape = (2, cfg.k, cfg.resolution, cfg.resolution, 3)
    rgb = frames_to_input(rng.integers(0, 256, size=shape), np.float64)
    mask = None if single_stream else frames_to_input(rng.integers(0, 256, size=shape), np.float64)
    labels = rng.integers(0, cfg.num_classes, size=2)
    cw = Tensor(rng.uniform(0.5, 2.0, size=cfg.num_classes), dtype=np.float64)
    return (lambda: T.cross_entropy(net.logits(rgb, mask), labels, cw)), list(net.params.values())


# Coordinates checked per parameter tensor and trial of the model check.
MODEL_ENTRIES = 8


def run_oracle_suite(trials: int = 5, seed: int = 0, model_entries: int | None = MODEL_ENTRIES):
    """Yield (check name, worst relative error over trials, tolerance).

    Primitives are differenced in float64. The model check differences in
    extended precision: a composed loss has many true gradient entries below
    1e-7 that float64 differences cannot resolve to 1e-4.
    """
    with T.default_dtype(np.float64):
        worst: dict[str, float] = {}
        for trial in range(trials):
            rng = np.random.default_rng([seed, trial])
            for name, f, xs in op_cases(rng):
                worst[name] = max(worst.get(name, 0.0), T.grad_check(f, xs, EPS))
        for name, single in (("two-stream model (tiny)", False), ("single-stream model (tiny)", True)):
            err = 0.0
            for trial in range(trials):
                f, xs = model_case(seed * 1000 + trial, single)
                err = max(err, T.grad_check(f, xs, EPS, entries=model_entries,
                                            rng=np.random.default_rng([seed, trial]),
                                            numeric_dtype=np.longdouble))
            worst[name] = err
    for name, err in worst.items():
        yield name, err, GRAD_TOL
