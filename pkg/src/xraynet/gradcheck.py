"""Finite-difference verification suite for every layer op and a reduced network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import nn

OP_TOL = 1e-4
BN_TOL = 1e-3
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    threshold: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.threshold)


def reduced_spec() -> M.ModelSpec:
    layers = (M.LayerSpec("conv", 3, bn=True), M.LayerSpec("conv", 4, bn=True), M.LayerSpec("pool"),
              M.LayerSpec("softmax", 3))
    return M.ModelSpec(layers, (1, 8, 8), 3, output_gain=1.0)


def model_grad_error(spec: M.ModelSpec | None = None, batch: int = 4, seed: int = 0, eps: float = 1e-4) -> float:
    """End-to-end check of :func:`model.backward` over every parameter tensor.

    Conv biases feeding a train-mode BN have an exactly zero gradient, so the
    central difference there is pure rounding noise of order 1e-16/eps;
    eps = 1e-4 keeps that noise an order of magnitude under the threshold.
    """
    spec = spec or reduced_spec()
    rng = np.random.default_rng(seed)
    mdl = M.build_model(spec, seed, dtype=np.float64)
    for st in mdl.bn.values():
        st.gamma[...] = rng.uniform(0.5, 1.5, st.gamma.shape)
        st.beta[...] = rng.normal(0, 0.5, st.beta.shape)
    x = rng.standard_normal((batch, *spec.input_shape))
    labels = rng.integers(0, spec.num_classes, batch)
    names = list(mdl.params)

    def fwd(*arrays):
        for k, a in zip(names, arrays):
            mdl.params[k][...] = a
        mdl.step = 0
        logits, caches = M.forward(mdl, x, "train")
        loss, g = nn.softmax_cross_entropy(logits, labels)
        return loss, (g, caches)

    def bwd(_, cache):
        g, caches = cache
        grads = M.backward(mdl, g, caches)
        return tuple(grads[k] for k in names)

    return nn.grad_check(fwd, bwd, [mdl.params[k].copy() for k in names], eps=eps, seed=seed)


def _conv(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    return nn.grad_check(lambda x, w, b: nn.conv2d(x, w, b), lambda g, c: nn.conv2d_backward(g, c), [x, w, b])


def _batchnorm(rng, shape):
    x = rng.standard_normal(shape) * 2 + 1
    c = shape[1]
    gamma, beta = rng.uniform(0.5, 1.5, c), rng.standard_normal(c)

    def fwd(x, g, b):
        st = nn.BatchNormState(g, b, np.zeros(c), np.ones(c))
        return nn.batchnorm(x, st, "train")

    return nn.grad_check(fwd, nn.batchnorm_backward, [x, gamma, beta])


def _maxpool(rng):
    # distinct, well separated values keep every argmax stable under +-eps
    x = rng.permutation(2 * 3 * 7 * 7).reshape(2, 3, 7, 7) * 0.01
    return nn.grad_check(lambda x: nn.maxpool(x), nn.maxpool_backward, [x])


def _leaky(rng):
    x = rng.standard_normal((3, 4, 5))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    return nn.grad_check(lambda x: nn.leaky_relu(x, 0.01), nn.leaky_relu_backward, [x])


def _dropout(rng):
    x = rng.standard_normal((4, 6))
    return nn.grad_check(lambda x: nn.dropout(x, 0.5, "train", seed=7), nn.dropout_backward, [x])


def _dense(rng):
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((5, 4)), rng.standard_normal(4)
    return nn.grad_check(lambda x, w, b: nn.dense(x, w, b), nn.dense_backward, [x, w, b])


def _softmax_ce(rng):
    logits = rng.standard_normal((5, 7))
    labels = rng.integers(0, 7, 5)
    return nn.grad_check(lambda z: nn.softmax_cross_entropy(z, labels), lambda g, c: c * g, [logits])


def run_suite(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    checks = [
        ("conv2d", lambda: _conv(rng), OP_TOL),
        ("batchnorm[N,C,H,W]", lambda: _batchnorm(rng, (4, 3, 3, 3)), BN_TOL),
        ("batchnorm[N,C]", lambda: _batchnorm(rng, (8, 4)), BN_TOL),
        ("maxpool", lambda: _maxpool(rng), OP_TOL),
        ("leaky_relu", lambda: _leaky(rng), OP_TOL),
        ("dropout", lambda: _dropout(rng), OP_TOL),
        ("dense", lambda: _dense(rng), OP_TOL),
        ("softmax_cross_entropy", lambda: _softmax_ce(rng), OP_TOL),
        ("model[reduced]", lambda: model_grad_error(seed=seed), MODEL_TOL),
    ]
    out = []
    for name, fn, tol in checks:
        t0 = time.perf_counter()
        try:
            err = float(fn())
        except Exception:  # a crashing backward counts as a failed check
            err = float("inf")
        out.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return out
