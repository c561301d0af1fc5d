"""SGD with classical momentum and a cosine-annealed learning rate."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Cosine annealing from lr0 at step 0 to 0 at total_steps."""
    if total_steps <= 0:
        raise ValueError(f"total_steps must be positive, got {total_steps}")
    if lr0 <= 0:
        raise ValueError(f"lr0 must be positive, got {lr0}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 5e-4,
) -> None:
    """One in-place SGD update: v <- momentum*v + (g + wd*p); p <- p - lr*v."""
    np.multiply(velocity, np.float32(momentum), out=velocity)
    velocity += grad
    if weight_decay:
        velocity += np.float32(weight_decay) * param
    param -= np.float32(lr) * velocity


def clip_gradient_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm. Plain conv stacks without normalization
    layers produce violent gradient transients while escaping the initial
    plateau; bounding the global norm keeps momentum from amplifying them
    into dead relu units."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.square(p.grad, dtype=np.float64).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = np.float32(max_norm / norm)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


class SGD:
    """Holds velocity buffers for a parameter list; lr is set per step."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float,
        momentum: float = 0.9,
        weight_decay: float = 5e-4,
        grad_clip: float | None = None,
    ):
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.grad_clip = grad_clip
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        if self.grad_clip is not None:
            clip_gradient_norm(self.params, self.grad_clip)
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            sgd_step(p.data, p.grad, v, self.lr, self.momentum, self.weight_decay)
