"""Dense float64 numerics: softmax cross-entropy, optimizers, RNG streams, gradient checks.

Arrays are plain ``numpy.ndarray`` of dtype float64. Everything here is a pure
function of its arguments except the optimizer states, which the caller owns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np

from .errors import ContractViolation, InputError, NumericalError, OracleError

Schedule = Literal["constant", "cosine"]


# --------------------------------------------------------------------------- #
# RNG streams
# --------------------------------------------------------------------------- #


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox; the key is derived from the master seed and the integer
    path ``stream_id`` through ``SeedSequence``. Distinct ids give independent
    streams, and the same pair always replays the same sequence.
    """

    def __init__(self, seed: int, stream_id: tuple[int, ...] = ()):
        if seed < 0 or any(i < 0 for i in stream_id):
            raise InputError("seed and stream ids must be non-negative")
        self.seed = int(seed)
        self.stream_id = tuple(int(i) for i in stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *ids: int) -> "RngStream":
        """Stream for the sub-path ``stream_id + ids``; does not consume this stream."""
        return RngStream(self.seed, self.stream_id + tuple(ids))

    def random_bytes(self, n: int) -> bytes:
        return self.generator.bytes(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


# --------------------------------------------------------------------------- #
# Checks
# --------------------------------------------------------------------------- #


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"{name} must be 2-D, got shape {a.shape}")
    return a


def require_same_shape(a: np.ndarray, b: np.ndarray, what: str = "operands") -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch for {what}: {a.shape} vs {b.shape}")


def check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"non-finite values in {what}")


# --------------------------------------------------------------------------- #
# Softmax cross-entropy
# --------------------------------------------------------------------------- #


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_ce(logits, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = as_matrix(logits, "logits")
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ContractViolation(f"labels shape {labels.shape} does not match batch {n}")
    if n < 1:
        raise ContractViolation("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class ids")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"label out of range [0, {c})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].sum() / n)
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


# --------------------------------------------------------------------------- #
# Optimizers
# --------------------------------------------------------------------------- #


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.0
    schedule: Schedule = "constant"
    total_steps: int = 0
    velocity: np.ndarray | None = None

    def lr(self, step: int) -> float:
        return scheduled_lr(self.learning_rate, self.schedule, self.total_steps, step)

    def fresh(self) -> "SgdState":
        return SgdState(self.learning_rate, self.momentum, self.schedule, self.total_steps)


@dataclass
class AdamState:
    learning_rate: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: Schedule = "constant"
    total_steps: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def lr(self, step: int) -> float:
        return scheduled_lr(self.learning_rate, self.schedule, self.total_steps, step)

    def fresh(self) -> "AdamState":
        return AdamState(
            self.learning_rate, self.beta1, self.beta2, self.eps, self.schedule, self.total_steps
        )


def scheduled_lr(base: float, schedule: Schedule, total_steps: int, step: int) -> float:
    if schedule == "constant":
        return base
    if schedule == "cosine":
        if total_steps <= 0:
            raise InputError("cosine schedule needs total_steps > 0")
        s = min(max(step, 0), total_steps)
        return base * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))
    raise InputError(f"unknown schedule {schedule!r}")


def sgd_step(params: np.ndarray, grad: np.ndarray, state: SgdState, step: int) -> np.ndarray:
    """One momentum-SGD update; ``state.velocity`` is updated in place."""
    require_same_shape(params, grad, "params/grad")
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    require_same_shape(params, state.velocity, "params/velocity")
    state.velocity = state.momentum * state.velocity - state.lr(step) * grad
    return params + state.velocity


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, step: int) -> np.ndarray:
    """Bias-corrected Adam update; ``step`` counts from 0."""
    require_same_shape(params, grad, "params/grad")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    require_same_shape(params, state.m, "params/moment")
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    t = step + 1
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    return params - state.lr(step) * m_hat / (np.sqrt(v_hat) + state.eps)


Optimizer = SgdState | AdamState


def optimizer_step(params: np.ndarray, grad: np.ndarray, state: Optimizer, step: int) -> np.ndarray:
    if isinstance(state, SgdState):
        return sgd_step(params, grad, state, step)
    return adam_step(params, grad, state, step)


# --------------------------------------------------------------------------- #
# Finite-difference gradient check
# --------------------------------------------------------------------------- #


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    worst_index: tuple[int, ...] | None = None
    n_coords: int = 0
    details: dict = field(default_factory=dict)


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params,
    tol: float = 1e-4,
    eps: float = 1e-5,
    floor: float = 1e-8,
    dtype=np.float64,
) -> GradCheckReport:
    """Compare ``f``'s analytic gradient against central differences, coordinate by coordinate.

    Relative error is ``|a - n| / max(|a| + |n|, floor)``. Passing
    ``dtype=np.longdouble`` (with an ``f`` that keeps that precision in its
    loss) shrinks the rounding noise of the differences, which otherwise
    dominates for coordinates whose true gradient is below ~1e-7.
    """
    params = np.array(params, dtype=dtype)
    if params.size == 0:
        return GradCheckReport(True, 0.0, None, 0)
    loss, analytic = f(params.copy())
    if not math.isfinite(loss):
        raise OracleError("loss is not finite at the base point")
    analytic = np.asarray(analytic, dtype=np.float64)
    require_same_shape(params, analytic, "params/analytic gradient")

    worst, worst_idx = 0.0, None
    for idx in np.ndindex(params.shape):
        plus = params.copy()
        plus[idx] += eps
        minus = params.copy()
        minus[idx] -= eps
        lp, _ = f(plus)
        lm, _ = f(minus)
        if not (math.isfinite(lp) and math.isfinite(lm)):
            raise OracleError(f"loss is not finite near coordinate {idx}")
        numeric = (lp - lm) / (2.0 * eps)
        a = analytic[idx]
        rel = abs(a - numeric) / max(abs(a) + abs(numeric), floor)
        if rel > worst:
            worst, worst_idx = rel, idx
    return GradCheckReport(worst < tol, worst, worst_idx, params.size)
