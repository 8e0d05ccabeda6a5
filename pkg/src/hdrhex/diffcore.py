"""Numeric foundation: parameter tensors, Adam, LR decay, RNG, gradient checks.

Every trainable array in the model lives in a ParamTensor. Backward passes
are hand-derived per operation and accumulate into ``param.grad``; the
finite-difference checker here is the single oracle used to validate all of
them. Everything runs in float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ArgumentError, ConfigurationError, NumericalError


class ParamTensor:
    """Named float64 array with an accumulated gradient of identical shape."""

    def __init__(self, values: np.ndarray, name: str):
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"ParamTensor({self.name!r}, shape={self.values.shape})"


class SeededRng:
    """Deterministic random source: identical seeds yield identical streams."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self.gen.uniform(low, high, size)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self.gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self.gen.normal(loc, scale, size)

    def spawn(self, offset: int) -> "SeededRng":
        """Independent child stream, reproducible from (seed, offset)."""
        return SeededRng((self.seed * 1000003 + offset) & 0x7FFFFFFFFFFFFFFF)


class AdamState:
    """First/second moment buffers for one parameter tensor."""

    def __init__(self, param: ParamTensor, beta1: float = 0.9,
                 beta2: float = 0.99, eps: float = 1e-8):
        self.m = np.zeros_like(param.values)
        self.v = np.zeros_like(param.values)
        self.step = 0
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)


def adam_step(param: ParamTensor, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; zeroes the gradient afterwards."""
    if state.m.shape != param.values.shape:
        raise ConfigurationError(
            f"adam state shape {state.m.shape} does not match "
            f"parameter {param.name!r} shape {param.values.shape}")
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    g = param.grad
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    param.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    param.zero_grad()


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Exponential decay reaching 0.1 * lr0 at the final step."""
    if total_steps < 1:
        raise ArgumentError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ArgumentError(f"step {step} outside [0, {total_steps}]")
    if not lr0 > 0:
        raise ArgumentError(f"lr0 must be positive, got {lr0}")
    return lr0 * 0.1 ** (step / total_steps)


def grad_check(loss_fn: Callable[[], float], params: Iterable[ParamTensor],
               h: float = 1e-5) -> float:
    """Worst relative error of analytic gradients vs central differences.

    ``loss_fn`` evaluates the scalar loss at the current parameter values and
    writes analytic gradients into each parameter's ``.grad``. The numeric
    side perturbs one coordinate at a time by +/- h. Relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not h > 0:
        raise ArgumentError(f"step size h must be positive, got {h}")
    params = list(params)
    for p in params:
        p.zero_grad()
    base = float(loss_fn())
    if not np.isfinite(base):
        raise NumericalError(f"loss is non-finite at the test point: {base}")
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.values.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn())
            flat[i] = orig - h
            f_minus = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(
                    f"non-finite loss while perturbing {p.name!r}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(a_flat[i] - numeric) / denom)
    # restore accumulated analytic grads so callers can inspect them
    for p, a in zip(params, analytic):
        p.grad[...] = a
    return worst


def uniform_init(rng: SeededRng, shape: Sequence[int], scale: float,
                 center: float = 0.0) -> np.ndarray:
    """Uniform draw in [center - scale, center + scale]."""
    return rng.uniform(center - scale, center + scale, size=tuple(shape))
