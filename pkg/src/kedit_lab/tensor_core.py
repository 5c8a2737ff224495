"""Dense float64 numerics with reverse-mode gradients.

Tensors are ``torch.Tensor`` objects in float64. The functions below are the
only numerical primitives the model code uses, each checked against an
independent oracle in the test-suite.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import torch

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    if x.dim() == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    shifted = x - x.amax(dim=axis, keepdim=True)
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    if x.shape[-1] < 1 or gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise DimensionError("layer_norm feature size mismatch")
    if eps <= 0:
        raise ValueError("eps must be positive")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    m = x.amax(dim=axis, keepdim=True)
    shifted = x - m
    return shifted - torch.log(torch.exp(shifted).sum(dim=axis, keepdim=True))


def cross_entropy(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise softmax."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() != 2 or targets.dim() != 1 or targets.shape[0] != logits.shape[0]:
        raise DimensionError("cross_entropy expects logits [t, V] and t targets")
    if targets.numel() == 0:
        raise DimensionError("cross_entropy over zero targets")
    vocab = logits.shape[1]
    if int(targets.min()) < 0 or int(targets.max()) >= vocab:
        raise IndexError(f"target id out of range for vocabulary of {vocab}")
    logp = log_softmax(logits, -1)
    return -logp.gather(1, targets[:, None]).mean()


def grad_check(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
               n_samples: int = 12, step: float = 1e-5, seed: int = 0,
               abs_floor: float = 1e-6) -> float:
    """Max relative error between autograd and central finite differences.

    ``f`` is re-evaluated with each sampled coordinate nudged by +/- ``step``.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    params = list(params)
    for p in params:
        p.requires_grad_(True)
    loss = f()
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss in grad_check")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat_p = p.view(-1)
            flat_g = g.reshape(-1)
            n = min(n_samples, flat_p.numel())
            idx = torch.randperm(flat_p.numel(), generator=gen)[:n]
            for i in idx.tolist():
                orig = flat_p[i].item()
                flat_p[i] = orig + step
                up = f().item()
                flat_p[i] = orig - step
                down = f().item()
                flat_p[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NumericError("non-finite loss in grad_check")
                numeric = (up - down) / (2 * step)
                analytic = flat_g[i].item()
                err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), abs_floor)
                worst = max(worst, err)
    return worst


class Adam:
    """AdamW with decoupled weight decay (0 by default) over a fixed parameter list.

    ``step`` takes explicit gradients so callers can restrict updates to a
    parameter view without touching ``.grad`` on anything else.
    """

    def __init__(self, params: Sequence[torch.Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self._opt = torch.optim.AdamW(self.params, lr=lr, betas=betas, eps=eps,
                                      weight_decay=weight_decay)

    def step(self, grads: Sequence[torch.Tensor | None]) -> None:
        for p, g in zip(self.params, grads):
            if g is None:
                g = torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericError("non-finite gradient")
            p.grad = g.detach().clone()
        self._opt.step()
        for p in self.params:
            p.grad = None


class SGD(Adam):
    """Plain gradient descent: each coordinate moves in proportion to its gradient."""

    def __init__(self, params: Sequence[torch.Tensor], lr: float):
        if lr <= 0:
            raise ValueError("lr must be positive")
        self.params = list(params)
        self._opt = torch.optim.SGD(self.params, lr=lr)


def optimizer_step(opt: Adam, loss: torch.Tensor) -> float:
    """Backprop ``loss`` into ``opt.params`` only and apply one update."""
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss")
    grads = torch.autograd.grad(loss, opt.params, allow_unused=True)
    opt.step(grads)
    return float(loss.detach())
