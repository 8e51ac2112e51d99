"""Tensor helpers, Adam and the warmup/inverse-sqrt learning-rate schedule.

Tensors are plain ``torch.Tensor`` (float32 by default); autograd supplies
reverse-mode differentiation.  The optimizer is implemented here rather than
taken from ``torch.optim`` so the update rule is explicit and bit-stable.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass
from typing import Iterable

import torch

DTYPE = torch.float32


class NumericError(RuntimeError):
    """Raised when a computation produces NaN or Inf."""


def configure_threads() -> int:
    """Apply ``CODECLM_THREADS`` (default 1) and deterministic kernels; returns the thread count."""
    n = int(os.environ.get("CODECLM_THREADS", "1"))
    torch.set_num_threads(max(1, n))
    torch.use_deterministic_algorithms(True)
    return torch.get_num_threads()


def tensor(data, requires_grad: bool = False) -> torch.Tensor:
    return torch.tensor(data, dtype=DTYPE, requires_grad=requires_grad)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1:
        raise ValueError("matmul needs tensors of rank >= 1")
    inner_b = b.shape[-2] if b.dim() > 1 else b.shape[0]
    if a.shape[-1] != inner_b:
        raise ValueError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return torch.matmul(a, b)


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True).detach()
    return z - torch.log(torch.exp(z).sum(dim=axis, keepdim=True))


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean negative log-likelihood over positions where ``mask`` is true."""
    logp = log_softmax(logits, -1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    if mask is None:
        return nll.mean()
    m = mask.to(nll.dtype)
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def backward(loss: torch.Tensor) -> None:
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericError(f"non-finite loss {loss.item()}")
    loss.backward()


@dataclass(frozen=True)
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    max_lr: float = 5e-4
    warmup_steps: int = 40_000
    total_steps: int = 400_000
    weight_decay: float = 0.0

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_schedule(step: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``max_lr`` then inverse-square-root decay, continuous at the boundary."""
    if not 1 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [1, {cfg.total_steps}]")
    if cfg.warmup_steps == 0:
        return cfg.max_lr / math.sqrt(step)
    if step <= cfg.warmup_steps:
        return cfg.max_lr * step / cfg.warmup_steps
    return cfg.max_lr * math.sqrt(cfg.warmup_steps / step)


def adam_step(params, grads, state: dict, cfg: OptimConfig, step: int) -> float:
    """One bias-corrected Adam update in place.  ``state`` maps param index to (m, v)."""
    if step < 1:
        raise ValueError("step must be >= 1")
    lr = lr_schedule(step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    with torch.no_grad():
        for i, (p, g) in enumerate(zip(params, grads)):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            m, v = state.get(i, (torch.zeros_like(p), torch.zeros_like(p)))
            if m.shape != p.shape:
                raise ValueError("optimizer state does not match parameter shapes")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            state[i] = (m, v)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return lr


class Adam:
    """Stateful wrapper over :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Iterable[torch.nn.Parameter], cfg: OptimConfig):
        self.params = [p for p in params if p.requires_grad]
        self.cfg = cfg
        self.state: dict = {}
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params:
            if p.grad is not None:
                total += float((p.grad.double() ** 2).sum())
        return math.sqrt(total)

    def step(self) -> float:
        self.step_count += 1
        return adam_step(self.params, [p.grad for p in self.params], self.state, self.cfg, self.step_count)
