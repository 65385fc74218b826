"""AdamW, the warmup+cosine learning-rate schedule, and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import AbstractSet, Callable, Mapping

import numpy as np

from .errors import ContractError, DeterminismError, NumericError
from .tensor import Tensor, no_grad, zero_grads
from .utils import TAG_GRADCHECK, rng_for


@dataclass(frozen=True)
class WarmupCosineSchedule:
    """Linear warmup from start_lr to peak_lr, then cosine decay to final_lr.

    Steps are counted from 0 to total_steps inclusive; the warmup endpoint
    (step == warmup_steps) yields exactly peak_lr and the last step yields
    exactly final_lr.
    """

    warmup_steps: int
    start_lr: float
    peak_lr: float
    final_lr: float
    total_steps: int

    def __post_init__(self):
        if not (0 <= self.warmup_steps <= self.total_steps):
            raise ContractError(
                f"warmup_steps must lie in [0, total_steps], got {self.warmup_steps}/{self.total_steps}")
        if self.start_lr > self.peak_lr or self.final_lr > self.peak_lr:
            raise ContractError("start_lr and final_lr must not exceed peak_lr")
        if self.total_steps <= 0:
            raise ContractError("total_steps must be positive")

    def at(self, step: int) -> float:
        if not (0 <= step <= self.total_steps):
            raise ContractError(
                f"step {step} outside schedule range [0, {self.total_steps}]")
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            frac = step / self.warmup_steps
            return self.start_lr + (self.peak_lr - self.start_lr) * frac
        span = self.total_steps - self.warmup_steps
        progress = (step - self.warmup_steps) / span if span > 0 else 1.0
        return self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments.

    State is keyed by parameter name; frozen parameters receive no update
    and accumulate no state. Given identical inputs the update is
    bit-deterministic.
    """

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.exp_avg: dict[str, np.ndarray] = {}
        self.exp_avg_sq: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, params: Mapping[str, Tensor], lr: float,
             freeze: AbstractSet[str] = frozenset()) -> None:
        if lr < 0:
            raise ContractError(f"learning rate must be non-negative, got {lr}")
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            if name in freeze or p.grad is None:
                continue
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            m = self.exp_avg.get(name)
            v = self.exp_avg_sq.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.exp_avg[name] = m
            self.exp_avg_sq[name] = v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)


def finite_difference_check(loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor],
                            h: float = 1e-4,
                            max_coords_per_tensor: int = 64,
                            seed: int = 0,
                            tolerance: float | None = None,
                            kink_tolerance: float = 0.01) -> float:
    """Compare analytic gradients of loss_fn against central differences.

    The analytic side runs in the params' own precision; the numeric side
    always perturbs a float64 copy so the difference quotient is not
    drowned by working-precision rounding. Per tensor at most
    ``max_coords_per_tensor`` coordinates are sampled. Returns the maximum
    relative error with denominator max(|analytic|, |numeric|, 1e-8).

    Central differences are meaningless across a non-smooth point (a ReLU
    pre-activation within h of zero), so a coordinate whose two one-sided
    quotients disagree by more than ``kink_tolerance`` relative is skipped.
    Detection uses only function values, never the gradient under test.

    Raises DeterminismError if two evaluations of loss_fn disagree, and
    NumericError if ``tolerance`` is given and exceeded.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    with no_grad():
        first = loss_fn(params).data.copy()
        second = loss_fn(params).data.copy()
    if not np.array_equal(first, second):
        raise DeterminismError("loss_fn returned different values on repeated evaluation")

    zero_grads(params.values())
    loss = loss_fn(params)
    if loss.data.size != 1:
        raise ContractError("loss_fn must return a scalar")
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    params64 = {
        name: Tensor(p.data.astype(np.float64), dtype=np.float64)
        for name, p in params.items()
    }
    rng = rng_for(seed, TAG_GRADCHECK)
    max_rel = 0.0
    analytic_eps = max(float(np.finfo(p.data.dtype).eps)
                       for p in params.values()) if params else 0.0
    with no_grad():
        base = float(loss_fn(params64).data)
        # discrepancies below this are indistinguishable from the rounding
        # noise of the difference quotient / the analytic precision itself
        resolution = max(1e-10, 4.0 * analytic_eps) * max(1.0, abs(base))

        def probe(flat, c, ana, step):
            """Relative error at one step size, or None if the step is unusable
            (one-sided quotients disagree, i.e. the function is locally
            non-smooth, or the discrepancy is below measurement resolution)."""
            original = flat[c]
            flat[c] = original + step
            plus = float(loss_fn(params64).data)
            flat[c] = original - step
            minus = float(loss_fn(params64).data)
            flat[c] = original
            forward_quot = (plus - base) / step
            backward_quot = (base - minus) / step
            side_gap = abs(forward_quot - backward_quot)
            if side_gap > kink_tolerance * max(abs(forward_quot),
                                               abs(backward_quot), 1e-8):
                return None
            numeric = (plus - minus) / (2.0 * step)
            if max(abs(ana), abs(numeric)) < 1e-8:
                return None
            if abs(ana - numeric) < resolution:
                return 0.0
            return abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)

        for name, p64 in params64.items():
            flat = p64.data.reshape(-1)
            size = flat.size
            k = min(max_coords_per_tensor, size)
            coords = np.sort(rng.choice(size, size=k, replace=False))
            ana_flat = analytic[name].reshape(-1)
            for c in coords:
                ana = float(ana_flat[c])
                err = probe(flat, c, ana, h)
                if err is not None and err > 1e-7:
                    # a kink straddle or truncation artifact shrinks at other
                    # step sizes; a wrong gradient fails at every one
                    retries = [probe(flat, c, ana, h * s) for s in (0.25, 0.0625, 4.0)]
                    err = min([err] + [r for r in retries if r is not None])
                if err is not None:
                    max_rel = max(max_rel, err)
    if tolerance is not None and max_rel > tolerance:
        raise NumericError(
            f"gradient check failed: max relative error {max_rel:.3e} > {tolerance:.3e}")
    return max_rel
