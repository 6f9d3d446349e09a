"""AdamW, warmup + cosine learning-rate schedule, and sharpness-aware minimization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .autodiff import NumericError, Tensor, no_grad


@dataclass
class ScheduleConfig:
    warmup_steps: int = 50
    total_steps: int = 500
    peak_lr: float = 1e-3
    final_lr: float = 1e-6

    def __post_init__(self):
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")
        if self.final_lr > self.peak_lr:
            raise ValueError("final_lr must not exceed peak_lr")


def schedule_lr(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0, cosine decay to ``final_lr``, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.final_lr
    progress = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_decay_names(params: Mapping[str, Tensor]) -> set:
    """Matrices decay; biases, norm gains and scalars (the temperature) do not."""
    return {name for name, t in params.items() if t.data.ndim >= 2}


@dataclass
class AdamWState:
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    decay: set | None = None  # names subject to weight decay; None = all


def adamw_apply(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
                state: AdamWState, lr: float) -> None:
    """One bias-corrected Adam step followed by decoupled decay ``w -= lr*wd*w``.

    Nothing is mutated if any gradient is non-finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    updates = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * (g * g) if v is None else b2 * v + (1.0 - b2) * (g * g)
        w = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and (state.decay is None or name in state.decay):
            w = w - lr * state.weight_decay * w
        updates[name] = (w.astype(p.data.dtype), m.astype(p.data.dtype), v.astype(p.data.dtype))
    for name, (w, m, v) in updates.items():
        params[name].data = w
        state.m[name] = m
        state.v[name] = v
    state.t = t


@dataclass
class SAMConfig:
    rho: float = 0.075

    def __post_init__(self):
        if self.rho < 0:
            raise ValueError("rho must be >= 0")


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    return math.sqrt(total)


def sam_perturb(grads: Mapping[str, np.ndarray], rho: float) -> dict:
    """eps_hat = rho * g / ||g||_2 with one norm over all parameters.

    Falls back to a zero perturbation when ||g||_2 < 1e-12.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    norm = global_grad_norm(grads)
    if norm < 1e-12:
        return {k: np.zeros_like(g) for k, g in grads.items()}
    scale = rho / norm
    return {k: np.asarray(g) * scale for k, g in grads.items()}


class PassCounter:
    """Counts forward/backward passes issued by :func:`sam_step`."""

    def __init__(self):
        self.total = 0
        self.last_step = 0


def compute_grads(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor]) -> tuple:
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("non-finite loss")
    loss.backward()
    grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
    for p in params.values():
        p.grad = None
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    return loss, grads


def sam_step(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], state: AdamWState,
             lr: float, cfg: SAMConfig, counter: PassCounter | None = None) -> Tensor:
    """Two-pass SAM update on top of AdamW; returns the loss at the unperturbed point.

    With ``rho == 0`` only one pass runs and the update is plain AdamW.
    """
    passes = 0
    loss, grads = compute_grads(loss_fn, params)
    passes += 1
    if cfg.rho > 0:
        eps = sam_perturb(grads, cfg.rho)
        saved = {k: p.data for k, p in params.items()}
        try:
            for k, p in params.items():
                p.data = (saved[k] + eps[k]).astype(saved[k].dtype)
            _, grads = compute_grads(loss_fn, params)
            passes += 1
        finally:
            for k, p in params.items():
                p.data = saved[k]
    adamw_apply(params, grads, state, lr)
    if counter is not None:
        counter.total += passes
        counter.last_step = passes
    return loss


def evaluate_loss(loss_fn: Callable[[], Tensor]) -> float:
    with no_grad():
        return float(loss_fn().data)
