"""Losses, optimizers and the step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nablanet.tensor import Tensor, record

PROB_CLAMP = 1e-7


def bce_loss(pred: Tensor, target) -> Tensor:
    """Mean binary cross-entropy; ``pred`` is clamped to [1e-7, 1 - 1e-7]."""
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != pred.shape:
        raise ValueError(f"bce_loss: pred shape {pred.shape} vs target shape {t.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("bce_loss: target values must be 0 or 1")
    t = t.astype(pred.dtype, copy=False)
    p = np.clip(pred.data, PROB_CLAMP, 1 - PROB_CLAMP)
    count = p.size
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    # the clamp only guards ln(0); the gradient keeps its unclamped form
    q = pred.data
    tiny = np.finfo(q.dtype).tiny

    def backward_fn(g):
        return (g * (q - t) / np.maximum(q * (1 - q), tiny) / count,)

    return record("bce_loss", (pred,), Tensor(np.asarray(loss, dtype=pred.dtype)), backward_fn)


def cce_loss(pred: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy over rows of class probabilities.

    ``pred`` is (N, K) or (N, K, 1, 1) as produced by the classifier head.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = pred.shape[:2]
    if labels.shape != (n,):
        raise ValueError(f"cce_loss: expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"cce_loss: labels must lie in [0, {k})")
    probs = pred.data.reshape(n, k)
    picked = probs[np.arange(n), labels]
    p = np.clip(picked, PROB_CLAMP, 1 - PROB_CLAMP)
    loss = -np.log(p).mean()
    tiny = np.finfo(probs.dtype).tiny

    def backward_fn(g):
        gp = np.zeros_like(probs)
        gp[np.arange(n), labels] = -g / np.maximum(picked, tiny) / n
        return (gp.reshape(pred.shape),)

    return record("cce_loss", (pred,), Tensor(np.asarray(loss, dtype=pred.dtype)), backward_fn)


def lr_schedule(epoch: int, initial: float, every: int = 50, factor: float = 10.0) -> float:
    """Step decay: ``initial / factor ** floor(epoch / every)``."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return initial / factor ** (epoch // every)


@dataclass
class Adam:
    params: list
    lr: float = 3e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in self.params]
            self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1 - b1**self.step_count
        c2 = 1 - b2**self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            if p.grad.shape != m.shape:
                raise ValueError(f"adam: gradient shape {p.grad.shape} does not match state {m.shape}")
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


@dataclass
class SGDMomentum:
    """Classical momentum: ``v = mu * v + g``; ``p -= lr * v``."""

    params: list
    lr: float = 0.01
    momentum: float = 0.9
    velocity: list = field(default_factory=list)
    step_count: int = 0

    def __post_init__(self):
        if not self.velocity:
            self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for p, vel in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            if p.grad.shape != vel.shape:
                raise ValueError(f"sgd: gradient shape {p.grad.shape} does not match state {vel.shape}")
            vel *= self.momentum
            vel += p.grad
            p.data -= (self.lr * vel).astype(p.dtype, copy=False)

    def state_arrays(self) -> dict:
        out = {"step": np.array([self.step_count], dtype=np.float32)}
        out.update({f"velocity.{i}": v for i, v in enumerate(self.velocity)})
        return out


def make_optimizer(name: str, params: list, lr: float, momentum: float = 0.9):
    if name == "adam":
        return Adam(params, lr=lr)
    if name == "sgd":
        return SGDMomentum(params, lr=lr, momentum=momentum)
    raise ValueError(f"unknown optimizer {name!r}")
